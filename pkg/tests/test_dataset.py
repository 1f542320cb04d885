import struct

import numpy as np
import pytest

from ortho_unlearn import dataset as ds
from ortho_unlearn.errors import BadMagicError, ConfigError, CountMismatchError, DatasetError, TruncatedFileError


@pytest.fixture
def idx_pair(tmp_path):
    rng = np.random.default_rng(0)
    images = rng.integers(0, 256, (12, 4, 5), dtype=np.uint8)
    labels = rng.integers(0, 10, 12)
    img, lab = tmp_path / "img.idx", tmp_path / "lab.idx"
    ds.write_idx(img, lab, images, labels)
    return img, lab, images, labels


def test_load_idx_roundtrip(idx_pair):
    img, lab, images, labels = idx_pair
    data = ds.load_idx(img, lab)
    assert len(data) == 12 and data.d_in == 20 and data.n_classes == 10
    assert np.array_equal(data.features, images.reshape(12, 20) / 255.0)
    assert np.array_equal(data.labels, labels)


def test_load_idx_bad_magic(idx_pair):
    img, lab, *_ = idx_pair
    raw = bytearray(img.read_bytes())
    raw[:4] = struct.pack(">I", 0x801)
    img.write_bytes(bytes(raw))
    with pytest.raises(BadMagicError, match="magic"):
        ds.load_idx(img, lab)


def test_load_idx_truncated_labels(idx_pair):
    img, lab, *_ = idx_pair
    lab.write_bytes(lab.read_bytes()[:5])
    with pytest.raises(TruncatedFileError):
        ds.load_idx(img, lab)


def test_load_idx_truncated_images(idx_pair):
    img, lab, *_ = idx_pair
    img.write_bytes(img.read_bytes()[:-3])
    with pytest.raises(TruncatedFileError):
        ds.load_idx(img, lab)


def test_load_idx_count_mismatch(idx_pair, tmp_path):
    img, lab, images, labels = idx_pair
    ds.write_idx(tmp_path / "i2", tmp_path / "l2", images[:11], labels[:11])
    with pytest.raises(CountMismatchError):
        ds.load_idx(tmp_path / "i2", lab)


def test_missing_file_is_dataset_error(tmp_path):
    with pytest.raises(DatasetError):
        ds.load_idx(tmp_path / "nope", tmp_path / "nope2")


def test_synth_clusters_balanced_and_deterministic():
    a = ds.synth_clusters(4, 8, 50, seed=3)
    b = ds.synth_clusters(4, 8, 50, seed=3)
    assert len(a) == 200
    assert np.array_equal(np.bincount(a.labels), [50, 50, 50, 50])
    assert np.array_equal(a.features, b.features) and np.array_equal(a.labels, b.labels)


def test_synth_clusters_nearest_centroid():
    data = ds.synth_clusters(10, 16, 100, spread=8.0, seed=0)
    train, test = ds.holdout(data, seed=0)
    centroids = np.stack([train.features[train.labels == c].mean(axis=0) for c in range(10)])
    d = ((test.features[:, None, :] - centroids[None]) ** 2).sum(-1)
    assert np.mean(np.argmin(d, axis=1) == test.labels) >= 0.99


def test_synth_clusters_needs_room():
    with pytest.raises(ConfigError):
        ds.synth_clusters(10, 4, 5)


def test_synth_features_shape_and_determinism():
    a = ds.synth_features(20, 8, 10, seed=1, hubs=2)
    b = ds.synth_features(20, 8, 10, seed=1, hubs=2)
    assert a.features.shape == (200, 8) and a.n_classes == 20
    assert np.array_equal(a.features, b.features)
    assert np.array_equal(a.features, a.features.astype(np.float32))


def test_features_roundtrip(tmp_path):
    rng = np.random.default_rng(2)
    data = ds.LabeledSet(rng.standard_normal((30, 7)).astype(np.float32).astype(np.float64),
                         rng.integers(0, 5, 30), 5)
    ds.save_features(tmp_path / "f.bin", data)
    back = ds.load_features(tmp_path / "f.bin")
    assert np.array_equal(back.features, data.features) and np.array_equal(back.labels, data.labels)
    assert back.n_classes == 5


def test_features_header_driven(tmp_path):
    rng = np.random.default_rng(3)
    raw = (ds.FEAT_MAGIC + struct.pack("<3I", 64, 100, 100) + np.arange(100, dtype="<u2").tobytes()
           + rng.standard_normal(6400).astype("<f4").tobytes())
    (tmp_path / "f.bin").write_bytes(raw)
    data = ds.load_features(tmp_path / "f.bin")
    assert data.features.shape == (100, 64) and data.n_classes == 100


@pytest.mark.parametrize("cut,err", [(-4, TruncatedFileError), (10, TruncatedFileError)])
def test_features_truncated(tmp_path, cut, err):
    ds.save_features(tmp_path / "f.bin", ds.synth_clusters(2, 3, 4))
    raw = (tmp_path / "f.bin").read_bytes()
    (tmp_path / "f.bin").write_bytes(raw[:cut])
    with pytest.raises(err):
        ds.load_features(tmp_path / "f.bin")


def test_features_bad_magic_and_trailing(tmp_path):
    ds.save_features(tmp_path / "f.bin", ds.synth_clusters(2, 3, 4))
    raw = (tmp_path / "f.bin").read_bytes()
    (tmp_path / "g.bin").write_bytes(raw + b"\0")
    with pytest.raises(CountMismatchError):
        ds.load_features(tmp_path / "g.bin")
    (tmp_path / "h.bin").write_bytes(b"FEAT2" + raw[5:])
    with pytest.raises(BadMagicError):
        ds.load_features(tmp_path / "h.bin")


def test_split_spec_rejects_duplicates():
    with pytest.raises(ConfigError):
        ds.SplitSpec((9, 5, 9))


def test_split_rejects_absent_class():
    with pytest.raises(ConfigError):
        ds.split(ds.synth_clusters(4, 4, 5), ds.SplitSpec((7,)), 0)


def _rows(s):
    return {tuple(r) for r in np.column_stack([s.features, s.labels])}


def test_split_nine_five_three():
    data = ds.synth_clusters(10, 10, 20, seed=0)
    spec = ds.SplitSpec((9, 5, 3))
    f0, r0, done0 = ds.split(data, spec, 0)
    assert set(f0.labels) == {9} and len(f0) == 20
    assert set(r0.labels) == set(range(9))
    f2, r2, done2 = ds.split(data, spec, 2)
    assert set(done2.labels) == {9, 5, 3}
    assert set(r2.labels) == {0, 1, 2, 4, 6, 7, 8}
    assert len(f2) + len(r2) + (len(done2) - len(f2)) == len(data)
    assert not (_rows(r2) & _rows(done2))
    assert _rows(f2) <= _rows(done2)


def test_split_partition_every_k():
    data = ds.synth_clusters(6, 6, 7, seed=1)
    spec = ds.SplitSpec((4, 0, 2, 5))
    for k in range(4):
        f, r, done = ds.split(data, spec, k)
        assert len(r) + len(done) == len(data)
        assert not (_rows(r) & _rows(done)) and _rows(f) <= _rows(done)
    with pytest.raises(IndexError):
        ds.split(data, spec, 4)


def test_holdout_deterministic_partition():
    data = ds.synth_clusters(3, 4, 10)
    a, b = ds.holdout(data, seed=5)
    a2, _ = ds.holdout(data, seed=5)
    assert len(a) == 24 and len(b) == 6
    assert np.array_equal(a.features, a2.features)
    assert not (_rows(a) & _rows(b))
