"""Continual unlearning with LoRA adapters on a frozen head.

Each deletion request gets its own adapter trained to fit the class being
forgotten; subtracting ``lam * delta`` from the base weights then removes it.
Three ways to keep the adapters from colliding are provided:

* static: no constraint (the baseline that collapses),
* post-hoc: train freely, then project ``a`` onto the free subspace,
* in-training: keep the projector inside the forward pass, so every step
  of gradient descent stays in the free subspace.

The free subspace is tracked by :class:`ProjectionState` as an accumulated
orthonormal basis ``Q`` of occupied input directions with ``P = I - Q Q^T``.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import linalg
from .dataset import LabeledSet
from .errors import ConfigError, DivergenceError, NumericalError, ShapeError
from .model import Backbone, FrozenHead, LoraAdapter, _Reader, ce_loss_and_grads, features

log = logging.getLogger(__name__)

ARCHIVE_MAGIC = b"OULA1\0\0\0"
FEASIBILITY_TOL = 1e-10
DUAL_FORM_TOL = 1e-8
BASIS_DROP_TOL = 1e-6


@dataclass(frozen=True)
class ProjectionState:
    p: np.ndarray
    basis: np.ndarray
    sv_threshold: float = 1e-3

    @classmethod
    def initial(cls, d_in, sv_threshold=1e-3):
        return cls(np.eye(d_in), np.zeros((d_in, 0)), sv_threshold)

    @property
    def d_in(self):
        return self.p.shape[0]


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 300
    learning_rate: float = 0.5
    batch_size: object = "full"
    seed: int = 0
    init_scale: float = 0.01

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if not self.learning_rate >= 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.batch_size != "full" and int(self.batch_size) < 1:
            raise ConfigError(f"batch_size must be 'full' or a positive integer, got {self.batch_size}")


@dataclass
class TaskResult:
    adapter: LoraAdapter
    effective_rank: int
    forget_acc_during: float
    final_loss: float
    basis: np.ndarray = field(repr=False, default=None)


def init_adapter(d_in, d_out, rank, cfg: TrainConfig, task=0) -> LoraAdapter:
    rng = np.random.default_rng(cfg.seed)
    a = rng.standard_normal((d_in, rank)) * cfg.init_scale
    return LoraAdapter(a, np.zeros((rank, d_out)), task=task)


def _batches(n, cfg, rng):
    if cfg.batch_size == "full" or int(cfg.batch_size) >= n:
        yield np.arange(n)
        return
    bs = int(cfg.batch_size)
    order = rng.permutation(n)
    for start in range(0, n, bs):
        yield order[start : start + bs]


def _descend(head, backbone, forget, rank, cfg, projector=None, task=0, on_step=None):
    if cfg.epochs < 1:
        raise ConfigError("adapter training needs epochs >= 1")
    if len(forget) == 0:
        raise ValueError("forget set is empty")
    feats = features(backbone, forget.features)
    adapter = init_adapter(head.d_in, head.d_out, rank, cfg, task)
    rng = np.random.default_rng([cfg.seed, 1])
    lr = cfg.learning_rate
    for epoch in range(cfg.epochs):
        for rows in _batches(len(forget), cfg, rng):
            lg = ce_loss_and_grads(head, adapter, projector, feats[rows], forget.labels[rows])
            if not np.isfinite(lg.loss):
                raise DivergenceError(epoch, lg.loss)
            if on_step is not None:
                on_step(epoch, lg)
            adapter.a = adapter.a - lr * lg.grad_a
            adapter.b = adapter.b - lr * lg.grad_b
        if not (np.all(np.isfinite(adapter.a)) and np.all(np.isfinite(adapter.b))):
            raise DivergenceError(epoch, float("nan"))
    return adapter


def train_unconstrained(head: FrozenHead, backbone: Backbone, forget: LabeledSet, cfg: TrainConfig,
                        rank=4, task=0, on_step=None) -> LoraAdapter:
    """Fit an adapter to the true labels of the forget set, no constraint."""
    return _descend(head, backbone, forget, rank, cfg, None, task, on_step)


def posthoc_project(state: ProjectionState, adapter: LoraAdapter) -> LoraAdapter:
    if adapter.a.shape[0] != state.d_in:
        raise ShapeError(f"adapter d_in {adapter.a.shape[0]} vs projector {state.d_in}")
    return LoraAdapter(state.p @ adapter.a, adapter.b.copy(), task=adapter.task)


def train_posthoc(head: FrozenHead, backbone: Backbone, state: ProjectionState, forget: LabeledSet,
                  cfg: TrainConfig, rank=4, task=0, on_step=None) -> LoraAdapter:
    """Train without the constraint, then project ``a`` onto the free subspace."""
    return posthoc_project(state, train_unconstrained(head, backbone, forget, cfg, rank, task, on_step))


def gradient_feasibility_residual(state: ProjectionState, grad_a) -> float:
    """max |(I - P) grad_a|; zero for any gradient in the free subspace."""
    return float(np.max(np.abs(grad_a - state.p @ grad_a), initial=0.0))


def train_constrained(head: FrozenHead, backbone: Backbone, state: ProjectionState, forget: LabeledSet,
                      cfg: TrainConfig, rank=4, task=0, on_step=None) -> LoraAdapter:
    """Gradient descent on (a, b) with the projector in the forward pass.

    The returned adapter has the projection folded into ``a``, so its plain
    ``delta()`` is the deployed update.
    """
    if state.basis.shape[1] == 0:
        # P = I exactly; skip the no-op products so results match the
        # unconstrained trainer bit for bit.
        return _descend(head, backbone, forget, rank, cfg, None, task, on_step)

    def check(epoch, lg):
        res = gradient_feasibility_residual(state, lg.grad_a)
        if res > FEASIBILITY_TOL:
            raise NumericalError(f"gradient left the feasible subspace (residual {res:.3e}) at epoch {epoch}")
        if on_step is not None:
            on_step(epoch, lg)

    adapter = _descend(head, backbone, forget, rank, cfg, state.p, task, check)
    return LoraAdapter(state.p @ adapter.a, adapter.b, task=task)


def effective_basis(adapter: LoraAdapter, sv_threshold) -> np.ndarray:
    """Left singular vectors of the delta above ``sv_threshold * s_max`` (at most rank)."""
    res = linalg.svd(adapter.delta())
    if res.s[0] <= 0.0:
        return np.zeros((adapter.a.shape[0], 0))
    keep = int(np.sum(res.s > sv_threshold * res.s[0]))
    return res.u[:, : min(keep, adapter.rank)]


def extract_task_basis(state: ProjectionState, adapter: LoraAdapter) -> np.ndarray:
    """Directions task k occupies, orthonormalized against earlier tasks."""
    top = effective_basis(adapter, state.sv_threshold)
    if top.shape[1] == 0:
        log.info("task %d: delta is zero at threshold %g, no directions claimed", adapter.task, state.sv_threshold)
        return top
    return linalg.orthonormalize_against(top, state.basis, tol=BASIS_DROP_TOL)


def update_projection(state: ProjectionState, task_basis) -> ProjectionState:
    """Claim ``task_basis`` and rebuild P = I - Q Q^T.

    The literal recursive form P - U U^T is computed alongside as a
    cross-check.
    """
    t = np.asarray(task_basis, dtype=np.float64)
    if t.size == 0:
        return state
    if t.ndim != 2 or t.shape[0] != state.d_in:
        raise ShapeError(f"task basis {t.shape} vs d_in {state.d_in}")
    if not linalg.is_orthonormal(t):
        raise ValueError("task basis columns are not orthonormal")
    if state.basis.shape[1] and np.max(np.abs(state.basis.T @ t)) > linalg.ORTHO_TOL:
        raise ValueError("task basis overlaps the already-claimed subspace")
    q = np.hstack([state.basis, t])
    p = linalg.projector_from_basis(q, state.d_in)
    literal = state.p - t @ t.T
    gap = float(np.max(np.abs(p - literal)))
    if gap > DUAL_FORM_TOL:
        raise NumericalError(f"projector forms disagree by {gap:.3e}")
    return ProjectionState(p, q, state.sv_threshold)


def summed_delta(adapters, lam) -> Optional[np.ndarray]:
    """-lam * sum of deltas, summed in task order. None for no adapters."""
    if not adapters:
        return None
    ordered = sorted(adapters, key=lambda ad: ad.task)
    total = ordered[0].delta().copy()
    for ad in ordered[1:]:
        total += ad.delta()
    return -lam * total


def fuse(head: FrozenHead, adapters, lam) -> np.ndarray:
    """W_fused = W_base - lam * sum_k delta_k."""
    d = summed_delta(list(adapters), lam)
    if d is None:
        return head.w_base.copy()
    if d.shape != head.w_base.shape:
        raise ShapeError(f"adapter deltas {d.shape} vs head {head.w_base.shape}")
    return head.w_base + d


def free_subspace_dim(state: ProjectionState) -> int:
    return int(round(float(np.trace(state.p))))


# --- adapter archive -------------------------------------------------------


def save_archive(path, results, d_in, d_out, rank, gate=None):
    """Write per-task adapters and bases; optionally append a gate block."""
    out = [ARCHIVE_MAGIC, struct.pack("<4I", len(results), d_in, d_out, rank)]
    for res in results:
        ad = res.adapter
        if ad.a.shape != (d_in, rank) or ad.b.shape != (rank, d_out):
            raise ShapeError(f"task {ad.task}: adapter shape does not match archive header")
        basis = res.basis if res.basis is not None else np.zeros((d_in, 0))
        out.append(struct.pack("<I", basis.shape[1]))
        out.append(ad.a.astype("<f4").tobytes())
        out.append(ad.b.astype("<f4").tobytes())
        out.append(np.ascontiguousarray(basis).astype("<f4").tobytes())
    if gate is not None:
        from .router import gate_bytes

        out.append(gate_bytes(gate))
    Path(path).write_bytes(b"".join(out))


def load_archive(path):
    """Returns ([(LoraAdapter, basis), ...], gate or None)."""
    rd = _Reader(path, Path(path).read_bytes())
    rd.magic(ARCHIVE_MAGIC)
    n_tasks, d_in, d_out, rank = rd.u32(4)
    tasks = []
    for k in range(n_tasks):
        eff = rd.u32()
        a = rd.f32(d_in, rank)
        b = rd.f32(rank, d_out)
        basis = rd.f32(d_in, eff)
        tasks.append((LoraAdapter(a, b, task=k + 1), basis))
    gate = None
    if rd.remaining:
        from .router import read_gate

        gate = read_gate(rd)
    return tasks, gate
