"""Labeled data sources and the forget/retain partitioning used per task."""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import BadMagicError, ConfigError, CountMismatchError, DatasetError, TruncatedFileError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
FEAT_MAGIC = b"FEAT1\0\0\0"


@dataclass(frozen=True)
class LabeledSet:
    features: np.ndarray  # n x d_in, float64
    labels: np.ndarray  # n, int64
    n_classes: int

    def __post_init__(self):
        if self.features.ndim != 2 or self.features.shape[0] != self.labels.shape[0]:
            raise ValueError(f"features {self.features.shape} do not match {self.labels.shape[0]} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValueError(f"labels must lie in [0, {self.n_classes})")

    def __len__(self):
        return int(self.labels.shape[0])

    @property
    def d_in(self):
        return int(self.features.shape[1])

    def subset(self, rows) -> "LabeledSet":
        rows = np.asarray(rows, dtype=np.int64)
        return LabeledSet(self.features[rows], self.labels[rows], self.n_classes)

    def of_classes(self, classes) -> "LabeledSet":
        return self.subset(np.flatnonzero(np.isin(self.labels, list(classes))))

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.features).tobytes())
        h.update(np.ascontiguousarray(self.labels).tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class SplitSpec:
    forget_classes: tuple
    seed: int = 0

    def __post_init__(self):
        fc = tuple(int(c) for c in self.forget_classes)
        if len(set(fc)) != len(fc):
            raise ConfigError(f"forget_classes must be distinct, got {list(fc)}")
        object.__setattr__(self, "forget_classes", fc)


# --- IDX -------------------------------------------------------------------


def _read_bytes(path):
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise DatasetError(path, f"cannot read: {exc.strerror or exc}") from exc


def _idx_header(path, raw, magic, n_dims):
    need = 4 * (1 + n_dims)
    if len(raw) < need:
        raise TruncatedFileError(path, f"header needs {need} bytes, file has {len(raw)}")
    got = struct.unpack(">I", raw[:4])[0]
    if got != magic:
        raise BadMagicError(path, f"magic 0x{got:08x}, expected 0x{magic:08x}")
    return struct.unpack(f">{n_dims}I", raw[4:need]), need


def load_idx(images_path, labels_path) -> LabeledSet:
    """Parse an IDX image/label file pair (MNIST layout) into pixel/255 rows."""
    img_raw = _read_bytes(images_path)
    (n, rows, cols), off = _idx_header(images_path, img_raw, IDX_IMAGES_MAGIC, 3)
    if len(img_raw) - off < n * rows * cols:
        raise TruncatedFileError(images_path, f"expected {n * rows * cols} pixel bytes, found {len(img_raw) - off}")
    pixels = np.frombuffer(img_raw, dtype=np.uint8, count=n * rows * cols, offset=off)

    lab_raw = _read_bytes(labels_path)
    (n_lab,), off = _idx_header(labels_path, lab_raw, IDX_LABELS_MAGIC, 1)
    if len(lab_raw) - off < n_lab:
        raise TruncatedFileError(labels_path, f"expected {n_lab} label bytes, found {len(lab_raw) - off}")
    if n_lab != n:
        raise CountMismatchError(labels_path, f"{n_lab} labels but {images_path} holds {n} images")
    labels = np.frombuffer(lab_raw, dtype=np.uint8, count=n, offset=off).astype(np.int64)
    if labels.size and labels.max() > 9:
        raise DatasetError(labels_path, f"label {labels.max()} outside 0-9")

    features = pixels.reshape(n, rows * cols).astype(np.float64) / 255.0
    return LabeledSet(features, labels, 10)


def write_idx(images_path, labels_path, images, labels):
    """Write uint8 images (n x rows x cols) and labels in IDX format."""
    images = np.asarray(images, dtype=np.uint8)
    n, rows, cols = images.shape
    Path(images_path).write_bytes(struct.pack(">4I", IDX_IMAGES_MAGIC, n, rows, cols) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">2I", IDX_LABELS_MAGIC, n) + np.asarray(labels, dtype=np.uint8).tobytes())


# --- synthetic -------------------------------------------------------------


def synth_clusters(n_classes, d_in, per_class, spread=8.0, seed=0) -> LabeledSet:
    """Isotropic unit-variance Gaussian blobs at ``spread`` along orthogonal axes.

    The class directions are the columns of a seeded random orthogonal
    matrix, so ``d_in >= n_classes`` is required.
    """
    if n_classes < 2:
        raise ConfigError("synth_clusters needs n_classes >= 2")
    if d_in < n_classes:
        raise ConfigError(f"synth_clusters needs d_in >= n_classes, got d_in={d_in}, n_classes={n_classes}")
    if per_class < 1:
        raise ConfigError("per_class must be positive")
    rng = np.random.default_rng(seed)
    q, r = np.linalg.qr(rng.standard_normal((d_in, n_classes)))
    q = q * np.sign(np.diag(r))
    centers = spread * q.T
    labels = np.repeat(np.arange(n_classes), per_class)
    features = centers[labels] + rng.standard_normal((labels.size, d_in))
    return LabeledSet(features, labels, n_classes)


def synth_features(n_classes=100, d_in=64, per_class=500, seed=0, offset=15.0, group_spread=3.0,
                   spread=4.0, groups=20, hubs=10, hub_noise=2.0, noise=1.0) -> LabeledSet:
    """Stand-in for penultimate-layer CNN features (more classes than dimensions allowed).

    Row of class c: ``offset*m + group_spread*g[c % groups] + spread*u[c] + noise*eps``
    with unit directions m (shared by every class), g (per group) and u (per
    class).  The last ``hubs`` classes are broad catch-all classes sitting
    on the shared mean (no group or class component, ``hub_noise`` spread).
    The large shared component is what unconstrained adapters collide on.
    Features are rounded to float32 so the set survives a FEAT1 round trip.
    """
    if n_classes < 2 or d_in < 1 or per_class < 1:
        raise ConfigError("synth_features needs n_classes >= 2, d_in >= 1, per_class >= 1")
    if not 0 <= hubs < n_classes or groups < 1:
        raise ConfigError("synth_features needs 0 <= hubs < n_classes and groups >= 1")
    rng = np.random.default_rng(seed)

    def unit(*shape):
        v = rng.standard_normal(shape + (d_in,))
        return v / np.linalg.norm(v, axis=-1, keepdims=True)

    shared, group_dirs, class_dirs = unit(), unit(groups), unit(n_classes)
    centers = offset * shared + group_spread * group_dirs[np.arange(n_classes) % groups] + spread * class_dirs
    scale = np.full(n_classes, noise)
    if hubs:
        centers[n_classes - hubs:] = offset * shared
        scale[n_classes - hubs:] = hub_noise
    labels = np.repeat(np.arange(n_classes), per_class)
    features = centers[labels] + scale[labels, None] * rng.standard_normal((labels.size, d_in))
    return LabeledSet(features.astype(np.float32).astype(np.float64), labels, n_classes)


# --- FEAT1 -----------------------------------------------------------------


def save_features(path, data: LabeledSet):
    if data.n_classes > 0xFFFF:
        raise ValueError("FEAT1 labels are u16")
    header = FEAT_MAGIC + struct.pack("<3I", data.d_in, len(data), data.n_classes)
    body = data.labels.astype("<u2").tobytes() + data.features.astype("<f4").tobytes()
    Path(path).write_bytes(header + body)


def load_features(path) -> LabeledSet:
    raw = _read_bytes(path)
    if len(raw) < 20:
        raise TruncatedFileError(path, f"header needs 20 bytes, file has {len(raw)}")
    if raw[:8] != FEAT_MAGIC:
        raise BadMagicError(path, f"magic {raw[:8]!r}, expected {FEAT_MAGIC!r}")
    d_in, n, n_classes = struct.unpack("<3I", raw[8:20])
    need = 20 + 2 * n + 4 * n * d_in
    if len(raw) < need:
        raise TruncatedFileError(path, f"header promises {need} bytes, file has {len(raw)}")
    if len(raw) > need:
        raise CountMismatchError(path, f"{len(raw) - need} trailing bytes beyond declared payload")
    labels = np.frombuffer(raw, dtype="<u2", count=n, offset=20).astype(np.int64)
    feats = np.frombuffer(raw, dtype="<f4", count=n * d_in, offset=20 + 2 * n).astype(np.float64)
    if labels.size and labels.max() >= n_classes:
        raise DatasetError(path, f"label {labels.max()} >= n_classes {n_classes}")
    return LabeledSet(feats.reshape(n, d_in), labels, int(n_classes))


# --- partitioning ----------------------------------------------------------


def holdout(data: LabeledSet, seed=0, train_frac=0.8):
    """Deterministic shuffled train/eval split."""
    perm = np.random.default_rng(seed).permutation(len(data))
    cut = int(round(train_frac * len(data)))
    return data.subset(np.sort(perm[:cut])), data.subset(np.sort(perm[cut:]))


def check_split(data: LabeledSet, spec: SplitSpec):
    present = set(np.unique(data.labels).tolist())
    missing = [c for c in spec.forget_classes if c not in present]
    if missing:
        raise ConfigError(f"forget classes {missing} are absent from the data")


def split(data: LabeledSet, spec: SplitSpec, k: int):
    """Return (forget_k, retain, forgotten_so_far) for task index k (0-based)."""
    if not 0 <= k < len(spec.forget_classes):
        raise IndexError(f"task index {k} outside 0..{len(spec.forget_classes) - 1}")
    check_split(data, spec)
    done = spec.forget_classes[: k + 1]
    forget_k = data.of_classes([spec.forget_classes[k]])
    retain = data.subset(np.flatnonzero(~np.isin(data.labels, done)))
    forgotten = data.of_classes(done)
    return forget_k, retain, forgotten
