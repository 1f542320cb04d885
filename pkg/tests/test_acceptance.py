"""Acceptance criteria AC1-AC9, each at its stated tolerance and runtime budget."""

import os
import time
from pathlib import Path

import numpy as np
import pytest

from ortho_unlearn import linalg
from ortho_unlearn import unlearn as ul
from ortho_unlearn.dataset import LabeledSet, save_features, synth_features
from ortho_unlearn.harness import cli, runner
from ortho_unlearn.harness.config import ExperimentConfig
from ortho_unlearn.model import Backbone, FrozenHead, LoraAdapter, ce_loss_and_grads, load_checkpoint, logits, \
    save_checkpoint
from ortho_unlearn.router import Gate, moe_forward

N_TASKS = 30
BENCH_FORGET = tuple(range(N_TASKS))


def random_projector(rng, d, k):
    q = np.linalg.qr(rng.standard_normal((d, k)))[0] if k else np.zeros((d, 0))
    return ul.ProjectionState(linalg.projector_from_basis(q, d), q)


def test_ac1_gradient_feasibility(record_property):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    residuals = []
    for inst in range(20):
        d_in = int(rng.integers(4, 65))
        d_out = int(rng.integers(2, 12))
        state = random_projector(rng, d_in, int(rng.integers(1, d_in)))
        head = FrozenHead(rng.standard_normal((d_in, d_out)), rng.standard_normal(d_out))
        forget = LabeledSet(rng.standard_normal((40, d_in)), rng.integers(0, d_out, 40), d_out)
        ul.train_constrained(head, Backbone(), state, forget, ul.TrainConfig(epochs=5, seed=inst),
                             rank=min(4, d_in, d_out),
                             on_step=lambda e, lg: residuals.append(ul.gradient_feasibility_residual(state, lg.grad_a)))
    elapsed = time.perf_counter() - t0
    record_property("detail", f"{len(residuals)} steps, max residual {max(residuals):.2e}, {elapsed:.2f}s")
    assert len(residuals) == 100
    assert max(residuals) <= 1e-10
    assert elapsed < 5


def _fd(head, ad, proj, x, y, h=1e-5):
    out = {}
    for name in ("a", "b"):
        base = getattr(ad, name)
        g = np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            vals = []
            for step in (h, -h):
                moved = base.copy()
                moved[idx] += step
                setattr(ad, name, moved)
                vals.append(ce_loss_and_grads(head, ad, proj, x, y).loss)
            g[idx] = (vals[0] - vals[1]) / (2 * h)
        setattr(ad, name, base)
        out[name] = g
    return out


def test_ac2_gradient_oracle(record_property):
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    worst = 0.0
    for inst in range(20):
        d_in, d_out = int(rng.integers(2, 17)), int(rng.integers(2, 13))
        r = int(rng.integers(1, min(4, d_in, d_out) + 1))
        head = FrozenHead(rng.standard_normal((d_in, d_out)), rng.standard_normal(d_out))
        ad = LoraAdapter(rng.standard_normal((d_in, r)), rng.standard_normal((r, d_out)))
        proj = random_projector(rng, d_in, int(rng.integers(0, d_in))).p if inst % 2 else None
        x, y = rng.standard_normal((10, d_in)), rng.integers(0, d_out, 10)
        lg = ce_loss_and_grads(head, ad, proj, x, y)
        fd = _fd(head, ad, proj, x, y)
        for name, g in (("a", lg.grad_a), ("b", lg.grad_b)):
            scale = max(np.max(np.abs(g)), np.max(np.abs(fd[name])), 1e-300)
            worst = max(worst, np.max(np.abs(g - fd[name])) / scale)
    elapsed = time.perf_counter() - t0
    record_property("detail", f"max relative error {worst:.2e}, {elapsed:.2f}s")
    assert worst <= 1e-6
    assert elapsed < 10


def test_ac3_projector_suite(record_property):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    d = 64
    worst = {"sym": 0.0, "idem": 0.0, "trace": 0.0, "dual": 0.0}
    for _ in range(200):
        state = ul.ProjectionState.initial(d)
        literal = np.eye(d)
        for _ in range(int(rng.integers(1, 17))):
            basis = linalg.orthonormalize_against(rng.standard_normal((d, int(rng.integers(1, 5)))), state.basis)
            state = ul.update_projection(state, basis)
            literal = literal - basis @ basis.T
            p = state.p
            worst["sym"] = max(worst["sym"], np.max(np.abs(p - p.T)))
            worst["idem"] = max(worst["idem"], np.max(np.abs(p @ p - p)))
            worst["trace"] = max(worst["trace"], abs(np.trace(p) - (d - state.basis.shape[1])))
            worst["dual"] = max(worst["dual"], np.max(np.abs(p - literal)))
    elapsed = time.perf_counter() - t0
    record_property("detail", ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f", {elapsed:.2f}s")
    assert worst["sym"] <= 1e-9 and worst["idem"] <= 1e-9 and worst["trace"] <= 1e-9
    assert worst["dual"] <= 1e-8
    assert elapsed < 30


# --- shared N=30 run on the 64-dim / 100-class synthetic benchmark -----------------


@pytest.fixture(scope="module")
def bench():
    data = synth_features()  # 100 classes, 64 dims, 500 per class, seed 0
    cfg = ExperimentConfig(features_path="bundled", strategy=("static", "in_training", "moe"),
                           forget_classes=BENCH_FORGET, lambdas=(1.0,), rank=4)
    t0 = time.perf_counter()
    prep = runner.prepare(cfg, data, runner.pretrain_baseline(cfg, data, save=False)[:2])
    pre_s = time.perf_counter() - t0
    out = {"cfg": cfg, "prep": prep, "pretrain_s": pre_s, "runs": {}, "results": {}, "seconds": {}}
    for strategy in cfg.strategy:
        results = []
        t0 = time.perf_counter()
        runs, _ = runner.run_strategy(prep, cfg, strategy, results)
        out["seconds"][strategy] = time.perf_counter() - t0
        out["runs"][strategy] = runs[0]
        out["results"][strategy] = results
    return out


def test_ac4_cross_task_orthogonality(bench, record_property):
    results = bench["results"]["in_training"]
    worst = 0.0
    for k, res in enumerate(results):
        dw = res.adapter.delta()
        for prev in results[:k]:
            if prev.basis.shape[1]:
                worst = max(worst, np.max(np.abs(prev.basis.T @ dw)))
    elapsed = bench["pretrain_s"] + bench["seconds"]["in_training"]
    record_property("detail", f"max |U_j^T dW_k| {worst:.2e} over {len(results)} tasks, {elapsed:.1f}s")
    assert len(results) == N_TASKS
    assert worst <= 1e-8
    assert elapsed < 120


def test_ac5_subspace_depletion(bench, record_property):
    run = bench["runs"]["in_training"]
    free = [run.baseline.free_dims] + [r.free_dims for r in run.records]
    ranks = [r.effective_rank for r in run.records]
    record_property("detail", f"free_dims {free[:18]}..., ranks {ranks[:17]}...")
    assert free[0] == 64
    assert all(free[k] == free[k - 1] - ranks[k - 1] for k in range(1, len(free)))
    assert ranks[:16] == [4] * 16
    assert free[16] == 0 and free[1:17] == [64 - 4 * k for k in range(1, 17)]


def test_ac6_static_collapse_trend(bench, record_property):
    base = bench["prep"].baseline_retain_acc
    st = bench["runs"]["static"].records[-1]
    it = bench["runs"]["in_training"].records[-1]
    elapsed = bench["pretrain_s"] + bench["seconds"]["static"] + bench["seconds"]["in_training"]
    record_property("detail", f"baseline {base:.4f}; static retain {st.retain_acc:.4f} forget {st.forget_acc_cum:.4f}; "
                              f"in_training retain {it.retain_acc:.4f} forget {it.forget_acc_cum:.4f}; {elapsed:.1f}s")
    assert st.task_index == it.task_index == N_TASKS
    assert st.retain_acc <= it.retain_acc - 0.25
    assert it.retain_acc >= base - 0.05
    assert st.forget_acc_cum <= it.forget_acc_cum
    assert elapsed < 300


def test_ac7_moe_trend(bench, record_property):
    run = bench["runs"]["moe"]
    gaps = {n: run.records[n - 1].retain_acc - run.records[n - 1].retain_acc_baseline for n in (5, 10, 20, 30)}
    prep = bench["prep"]
    ad = bench["results"]["moe"][0].adapter
    x = prep.test.features
    single = moe_forward(prep.head, [ad], Gate(np.zeros((64, 1)), np.zeros(1)), x, 1.0)
    static = logits(prep.head, x, ul.summed_delta([ad], 1.0))
    degenerate = float(np.max(np.abs(single - static)))
    elapsed = bench["pretrain_s"] + bench["seconds"]["moe"]
    record_property("detail", "retain - baseline " + ", ".join(f"N={n}: {g:+.4f}" for n, g in gaps.items())
                    + f"; single-adapter gap {degenerate:.1e}; {elapsed:.1f}s")
    assert all(abs(g) <= 0.02 for g in gaps.values())
    assert degenerate <= 1e-12
    assert elapsed < 300


# --- MNIST -----------------------------------------------------------------------------


def _mnist_files():
    root = Path(os.environ.get("MNIST_DIR", Path(__file__).resolve().parents[1] / "data" / "mnist"))
    for img, lab in (("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
                     ("train-images.idx3-ubyte", "train-labels.idx1-ubyte")):
        if (root / img).exists() and (root / lab).exists():
            return root / img, root / lab
    return None


def test_ac8_mnist_lambda_sweep(tmp_path, record_property):
    files = _mnist_files()
    if files is None:
        record_property("detail", "MNIST IDX files not found (set MNIST_DIR)")
        pytest.skip("MNIST IDX files not found; set MNIST_DIR")
    t0 = time.perf_counter()
    cfg = ExperimentConfig(dataset="mnist", images=str(files[0]), labels=str(files[1]),
                           strategy=("static", "in_training"), forget_classes=(9, 5, 3),
                           lambdas=(0.0, 0.25, 0.5, 1.0, 2.0), output_dir=str(tmp_path))
    prep = runner.prepare(cfg)
    runs = runner.run_sequence(cfg, prep)
    static = {r.lam: r.records[-1].retain_acc for r in runs if r.strategy == "static"}
    inside = {r.lam: r.records[-1].retain_acc for r in runs if r.strategy == "in_training"}
    seq = [static[lam] for lam in cfg.lambdas]
    elapsed = time.perf_counter() - t0
    record_property("detail", f"baseline {prep.baseline_retain_acc:.4f}; static {['%.4f' % v for v in seq]}; "
                              f"in_training@2 {inside[2.0]:.4f}; {elapsed:.0f}s")
    assert all(a >= b for a, b in zip(seq, seq[1:]))
    assert seq[0] - seq[-1] >= 0.10
    assert inside[2.0] >= prep.baseline_retain_acc - 0.05
    assert elapsed < 600


# --- determinism and persistence ---------------------------------------------------------


def test_ac9_determinism_and_persistence(tmp_path, record_property):
    save_features(tmp_path / "feats.bin", synth_features(n_classes=30, d_in=16, per_class=60, groups=6, hubs=3))
    (tmp_path / "exp.cfg").write_text(
        "dataset = features\nfeatures_path = feats.bin\nstrategy = static, posthoc, in_training, moe\n"
        "forget_classes = 4, 8, 15, 16\nlambdas = 0.5, 1.0\nhead_epochs = 40\n")
    csvs = []
    for out in ("run1", "run2"):
        assert cli.main(["run", "--config", str(tmp_path / "exp.cfg"), "--out", str(tmp_path / out)]) == 0
        csvs.append((tmp_path / out / "results.csv").read_bytes())
    ckpt = tmp_path / "run1" / "baseline.oulm"
    backbone, head = load_checkpoint(ckpt)
    save_checkpoint(tmp_path / "again.oulm", backbone, head)
    archives_ok = []
    for strategy in ("static", "posthoc", "in_training", "moe"):
        path = tmp_path / "run1" / f"adapters_{strategy}.oula"
        tasks, gate = ul.load_archive(path)
        d_out = tasks[0][0].b.shape[1]
        again = tmp_path / f"again_{strategy}.oula"
        ul.save_archive(again, [ul.TaskResult(ad, b.shape[1], 0.0, 0.0, b) for ad, b in tasks],
                        head.d_in, d_out, 4, gate=gate)
        archives_ok.append(path.read_bytes() == again.read_bytes())
    record_property("detail", f"csv identical {csvs[0] == csvs[1]}, checkpoint identical "
                              f"{ckpt.read_bytes() == (tmp_path / 'again.oulm').read_bytes()}, "
                              f"archives identical {all(archives_ok)}")
    assert csvs[0] == csvs[1] and len(csvs[0].splitlines()) == 1 + 4 * 2 * 4
    assert ckpt.read_bytes() == (tmp_path / "again.oulm").read_bytes()
    assert all(archives_ok)
