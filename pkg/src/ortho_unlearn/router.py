"""Softmax-gated mixture of adapters, the dynamic-routing baseline.

The gate is one affine layer over the frozen features. When trained with
:func:`train_gate` it has one extra output, the "null" expert (zero delta),
which retain inputs are routed to.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .dataset import LabeledSet
from .errors import DivergenceError, ShapeError
from .model import Backbone, FrozenHead, _Reader, features, softmax
from .unlearn import TrainConfig

GATE_MAGIC = b"OULG1\0\0\0"


@dataclass
class Gate:
    theta_g: np.ndarray  # d_in x n_experts
    gate_bias: np.ndarray  # n_experts

    def __post_init__(self):
        self.theta_g = np.asarray(self.theta_g, dtype=np.float64)
        self.gate_bias = np.ravel(np.asarray(self.gate_bias, dtype=np.float64))
        if self.theta_g.ndim != 2 or self.theta_g.shape[1] != self.gate_bias.shape[0]:
            raise ShapeError(f"gate weights {self.theta_g.shape} vs bias {self.gate_bias.shape}")

    @property
    def n_experts(self):
        return self.theta_g.shape[1]


def route(gate: Gate, feats) -> np.ndarray:
    feats = np.asarray(feats, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[1] != gate.theta_g.shape[0]:
        raise ShapeError(f"features {feats.shape} vs gate d_in {gate.theta_g.shape[0]}")
    return softmax(feats @ gate.theta_g + gate.gate_bias)


def moe_forward(head: FrozenHead, adapters, gate: Gate, feats, lam) -> np.ndarray:
    """Base logits minus lam * sum_k alpha_k(x) * (x @ delta_k).

    The gate may carry one output more than there are adapters; that last
    output is the null expert and contributes nothing.
    """
    adapters = list(adapters)
    k = len(adapters)
    if gate.n_experts not in (k, k + 1):
        raise ShapeError(f"gate has {gate.n_experts} outputs for {k} adapters")
    feats = np.asarray(feats, dtype=np.float64)
    alpha = route(gate, feats)
    out = feats @ head.w_base + head.bias
    for j, ad in enumerate(adapters):
        out -= lam * alpha[:, j : j + 1] * (feats @ ad.delta())
    return out


def train_gate(head: FrozenHead, backbone: Backbone, adapters, forget_sets, retain: LabeledSet,
               cfg: TrainConfig) -> Gate:
    """Fit routing: rows of forget set k go to expert k, retain rows to the null expert.

    Gradient descent on the routing cross-entropy, starting from a zero gate
    (uniform routing), so ``cfg.epochs == 0`` returns the uniform gate.
    """
    if len(forget_sets) != len(adapters):
        raise ValueError(f"{len(forget_sets)} forget sets for {len(adapters)} adapters")
    if len(retain) == 0:
        raise ValueError("retain set is empty")
    k = len(adapters)
    parts = [features(backbone, fs.features) for fs in forget_sets] + [features(backbone, retain.features)]
    x = np.vstack(parts)
    y = np.concatenate([np.full(len(fs), j) for j, fs in enumerate(forget_sets)] + [np.full(len(retain), k)])
    d_in = x.shape[1]
    if d_in != head.d_in:
        raise ShapeError(f"features d_in {d_in} vs head d_in {head.d_in}")

    # Standardize inside the fit; fold the scaling back into the affine gate.
    mu = x.mean(axis=0)
    sd = x.std(axis=0)
    sd[sd == 0] = 1.0
    xs = (x - mu) / sd

    w = np.zeros((d_in, k + 1))
    b = np.zeros(k + 1)
    rng = np.random.default_rng(cfg.seed)
    n = len(y)
    bs = n if cfg.batch_size == "full" else min(int(cfg.batch_size), n)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n) if bs < n else np.arange(n)
        for start in range(0, n, bs):
            rows = order[start : start + bs]
            p = softmax(xs[rows] @ w + b)
            p[np.arange(len(rows)), y[rows]] -= 1.0
            w -= cfg.learning_rate * (xs[rows].T @ p) / len(rows)
            b -= cfg.learning_rate * p.mean(axis=0)
        if not np.all(np.isfinite(w)):
            raise DivergenceError(epoch, float("nan"))
    theta = w / sd[:, None]
    return Gate(theta, b - mu @ theta)


def routing_accuracy(gate: Gate, feats, targets) -> float:
    return float(np.mean(np.argmax(route(gate, feats), axis=1) == np.asarray(targets)))


def gate_bytes(gate: Gate) -> bytes:
    d_in, n = gate.theta_g.shape
    return (GATE_MAGIC + struct.pack("<2I", d_in, n) + gate.theta_g.astype("<f4").tobytes()
            + gate.gate_bias.astype("<f4").tobytes())


def read_gate(rd: _Reader) -> Gate:
    rd.magic(GATE_MAGIC)
    d_in, n = rd.u32(2)
    return Gate(rd.f32(d_in, n), rd.f32(n))
