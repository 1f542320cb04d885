"""Quick invariant suite behind ``ortho-unlearn selftest``."""

from __future__ import annotations

import tempfile
from pathlib import Path

import numpy as np

from .. import linalg
from .. import unlearn as ul
from ..dataset import synth_clusters
from ..model import Backbone, FrozenHead, LoraAdapter, ce_loss_and_grads, load_checkpoint, save_checkpoint


def _svd_matches_numpy():
    rng = np.random.default_rng(0)
    worst = 0.0
    for shape in [(5, 3), (3, 5), (16, 16), (64, 10)]:
        m = rng.standard_normal(shape)
        res = linalg.svd(m)
        worst = max(worst, np.max(np.abs(res.s - np.linalg.svd(m, compute_uv=False))),
                    np.max(np.abs(res.reconstruct() - m)))
    return worst <= 1e-9, f"max error {worst:.2e}"


def _projector_properties():
    rng = np.random.default_rng(1)
    state = ul.ProjectionState.initial(64)
    worst = 0.0
    for _ in range(16):
        t = linalg.orthonormalize_against(rng.standard_normal((64, 4)), state.basis)
        state = ul.update_projection(state, t)
        p = state.p
        worst = max(worst, np.max(np.abs(p - p.T)), np.max(np.abs(p @ p - p)),
                    abs(np.trace(p) - (64 - state.basis.shape[1])))
    return worst <= 1e-8 and ul.free_subspace_dim(state) == 0, f"max defect {worst:.2e}"


def _gradient_feasibility():
    rng = np.random.default_rng(2)
    q = np.linalg.qr(rng.standard_normal((32, 12)))[0]
    state = ul.ProjectionState(linalg.projector_from_basis(q, 32), q)
    head = FrozenHead(rng.standard_normal((32, 6)), np.zeros(6))
    ad = LoraAdapter(rng.standard_normal((32, 4)), rng.standard_normal((4, 6)))
    lg = ce_loss_and_grads(head, ad, state.p, rng.standard_normal((50, 32)), rng.integers(0, 6, 50))
    res = ul.gradient_feasibility_residual(state, lg.grad_a)
    return res <= ul.FEASIBILITY_TOL, f"residual {res:.2e}"


def _finite_differences():
    rng = np.random.default_rng(3)
    head = FrozenHead(rng.standard_normal((8, 5)), rng.standard_normal(5))
    ad = LoraAdapter(rng.standard_normal((8, 2)), rng.standard_normal((2, 5)))
    x, y = rng.standard_normal((20, 8)), rng.integers(0, 5, 20)
    lg = ce_loss_and_grads(head, ad, None, x, y)
    h, worst = 1e-5, 0.0
    for name, grad in (("a", lg.grad_a), ("b", lg.grad_b)):
        base = getattr(ad, name)
        num = np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            vals = []
            for step in (h, -h):
                moved = base.copy()
                moved[idx] += step
                setattr(ad, name, moved)
                vals.append(ce_loss_and_grads(head, ad, None, x, y).loss)
            num[idx] = (vals[0] - vals[1]) / (2 * h)
        setattr(ad, name, base)
        worst = max(worst, np.max(np.abs(num - grad)) / max(np.max(np.abs(num)), np.max(np.abs(grad))))
    return worst <= 1e-6, f"max relative error {worst:.2e}"


def _round_trips():
    rng = np.random.default_rng(4)
    head = FrozenHead(rng.standard_normal((6, 3)).astype(np.float32), rng.standard_normal(3).astype(np.float32))
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "m.oulm"
        save_checkpoint(path, Backbone(), head)
        _, back = load_checkpoint(path)
        ok = np.array_equal(back.w_base, head.w_base) and np.array_equal(back.bias, head.bias)
    return ok, "checkpoint bit-exact" if ok else "checkpoint differs"


def _data_sanity():
    data = synth_clusters(4, 8, 50, seed=0)
    return len(data) == 200 and data.d_in == 8, f"{len(data)} rows"


CHECKS = [
    ("svd matches reference", _svd_matches_numpy),
    ("projector symmetric, idempotent, trace", _projector_properties),
    ("gradient stays in free subspace", _gradient_feasibility),
    ("analytic vs finite-difference gradients", _finite_differences),
    ("checkpoint round trip", _round_trips),
    ("synthetic data shape", _data_sanity),
]


def run_selftest(out=print) -> bool:
    all_ok = True
    for name, fn in CHECKS:
        try:
            ok, detail = fn()
        except Exception as exc:  # report, keep going
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        all_ok &= ok
        out(f"{'PASS' if ok else 'FAIL'}  {name}  ({detail})")
    return all_ok
