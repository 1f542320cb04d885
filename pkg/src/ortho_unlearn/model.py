"""Frozen feature extractor + linear head, with LoRA adapters on the head.

Gradients are written out by hand for exactly this architecture; there is
no autodiff.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import LabeledSet
from .errors import BadMagicError, CountMismatchError, ShapeError, TruncatedFileError
from .linalg import as_matrix

CHECKPOINT_MAGIC = b"OULM1\0\0\0"


def _frozen(x):
    arr = np.array(x, dtype=np.float64)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Stage:
    """relu(x @ weight + bias)"""

    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "weight", _frozen(self.weight))
        object.__setattr__(self, "bias", _frozen(np.ravel(self.bias)))
        if self.bias.shape[0] != self.weight.shape[1]:
            raise ShapeError(f"stage bias length {self.bias.shape[0]} != weight cols {self.weight.shape[1]}")


@dataclass(frozen=True)
class Backbone:
    stages: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))
        for prev, nxt in zip(self.stages, self.stages[1:]):
            if prev.weight.shape[1] != nxt.weight.shape[0]:
                raise ShapeError("backbone stages do not chain")

    @property
    def out_dim(self):
        return self.stages[-1].weight.shape[1] if self.stages else None


@dataclass(frozen=True)
class FrozenHead:
    w_base: np.ndarray  # d_in x d_out
    bias: np.ndarray  # d_out

    def __post_init__(self):
        object.__setattr__(self, "w_base", _frozen(self.w_base))
        object.__setattr__(self, "bias", _frozen(np.ravel(self.bias)))
        if self.w_base.ndim != 2 or self.bias.shape[0] != self.w_base.shape[1]:
            raise ShapeError(f"head weights {self.w_base.shape} and bias {self.bias.shape} disagree")

    @property
    def d_in(self):
        return self.w_base.shape[0]

    @property
    def d_out(self):
        return self.w_base.shape[1]


@dataclass
class LoraAdapter:
    a: np.ndarray  # d_in x r
    b: np.ndarray  # r x d_out
    task: int = 0

    def __post_init__(self):
        self.a = as_matrix(self.a, "adapter a")
        self.b = as_matrix(self.b, "adapter b").reshape(self.a.shape[1], -1)
        r = self.a.shape[1]
        if r > min(self.a.shape[0], self.b.shape[1]):
            raise ShapeError(f"rank {r} exceeds min(d_in, d_out) = {min(self.a.shape[0], self.b.shape[1])}")

    @property
    def rank(self):
        return self.a.shape[1]

    def delta(self, projector=None):
        return delta(self, projector)


@dataclass
class LossGrad:
    loss: float
    grad_a: np.ndarray
    grad_b: np.ndarray
    logits: np.ndarray = field(repr=False, default=None)


def features(backbone: Backbone, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    for i, st in enumerate(backbone.stages):
        if x.shape[1] != st.weight.shape[0]:
            raise ShapeError(f"stage {i} expects {st.weight.shape[0]} inputs, got {x.shape[1]}")
        x = np.maximum(x @ st.weight + st.bias, 0.0)
    return x


def _check_delta(head, effective_delta):
    if effective_delta is not None and effective_delta.shape != head.w_base.shape:
        raise ShapeError(f"delta {effective_delta.shape} does not match head {head.w_base.shape}")


def logits(head: FrozenHead, feats, effective_delta=None) -> np.ndarray:
    feats = np.asarray(feats, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[1] != head.d_in:
        raise ShapeError(f"features {feats.shape} do not match head d_in={head.d_in}")
    _check_delta(head, effective_delta)
    w = head.w_base if effective_delta is None else head.w_base + effective_delta
    return feats @ w + head.bias


def delta(adapter: LoraAdapter, projector=None) -> np.ndarray:
    a = adapter.a
    if projector is not None:
        if projector.shape != (a.shape[0], a.shape[0]):
            raise ShapeError(f"projector {projector.shape} vs adapter d_in {a.shape[0]}")
        a = projector @ a
    return a @ adapter.b


def softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(z, labels):
    z = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    return float(np.mean(logsum - z[np.arange(len(labels)), labels]))


def ce_loss_and_grads(head: FrozenHead, adapter: LoraAdapter, projector, feats, labels) -> LossGrad:
    """Mean cross-entropy of softmax(feats @ (W + P a b) + bias) and its exact grads.

    With G = feats^T (softmax - onehot) / n:
        grad_b = (P a)^T G,    grad_a = P G b^T
    so grad_a always lies in the range of P.
    """
    labels = np.asarray(labels, dtype=np.int64)
    n = len(labels)
    if n == 0:
        raise ValueError("empty batch")
    if feats.shape[0] != n:
        raise ShapeError(f"{feats.shape[0]} feature rows but {n} labels")
    pa = adapter.a if projector is None else projector @ adapter.a
    z = logits(head, feats, pa @ adapter.b)
    probs = softmax(z)
    loss = cross_entropy(z, labels)
    probs[np.arange(n), labels] -= 1.0
    g = feats.T @ probs / n
    grad_b = pa.T @ g
    grad_a = g @ adapter.b.T
    if projector is not None:
        grad_a = projector @ grad_a
    return LossGrad(loss, grad_a, grad_b, z)


def accuracy(head: FrozenHead, backbone: Backbone, effective_delta, data: LabeledSet) -> float:
    if len(data) == 0:
        raise ValueError("accuracy of an empty set")
    z = logits(head, features(backbone, data.features), effective_delta)
    return float(np.mean(np.argmax(z, axis=1) == data.labels))


# --- pretraining -----------------------------------------------------------


def train_head(feats, labels, n_classes, epochs=200, lr=0.5, batch_size=None, seed=0, l2=0.0) -> FrozenHead:
    """Multinomial logistic regression by gradient descent."""
    rng = np.random.default_rng(seed)
    n, d = feats.shape
    w = np.zeros((d, n_classes))
    b = np.zeros(n_classes)
    bs = n if batch_size in (None, "full") else int(batch_size)
    for _ in range(epochs):
        order = rng.permutation(n) if bs < n else np.arange(n)
        for start in range(0, n, bs):
            rows = order[start : start + bs]
            x, y = feats[rows], labels[rows]
            p = softmax(x @ w + b)
            p[np.arange(len(rows)), y] -= 1.0
            w -= lr * (x.T @ p / len(rows) + l2 * w)
            b -= lr * p.mean(axis=0)
    return FrozenHead(w, b)


def train_mlp(feats, labels, n_classes, hidden=128, epochs=5, lr=0.1, batch_size=64, seed=0):
    """Two-layer ReLU MLP by mini-batch SGD. Returns (Backbone, FrozenHead)."""
    rng = np.random.default_rng(seed)
    n, d = feats.shape
    w1 = rng.standard_normal((d, hidden)) * np.sqrt(2.0 / d)
    b1 = np.zeros(hidden)
    w2 = rng.standard_normal((hidden, n_classes)) * np.sqrt(1.0 / hidden)
    b2 = np.zeros(n_classes)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            rows = order[start : start + batch_size]
            x, y = feats[rows], labels[rows]
            pre = x @ w1 + b1
            h = np.maximum(pre, 0.0)
            p = softmax(h @ w2 + b2)
            p[np.arange(len(rows)), y] -= 1.0
            p /= len(rows)
            dh = (p @ w2.T) * (pre > 0)
            w2 -= lr * (h.T @ p)
            b2 -= lr * p.sum(axis=0)
            w1 -= lr * (x.T @ dh)
            b1 -= lr * dh.sum(axis=0)
    return Backbone((Stage(w1, b1),)), FrozenHead(w2, b2)


def to_float32(backbone: Backbone, head: FrozenHead):
    """Round all weights to float32 so a checkpoint round trip is exact."""

    def r(x):
        return np.asarray(x, dtype=np.float32).astype(np.float64)

    return (
        Backbone(tuple(Stage(r(s.weight), r(s.bias)) for s in backbone.stages)),
        FrozenHead(r(head.w_base), r(head.bias)),
    )


# --- checkpoint ------------------------------------------------------------


def save_checkpoint(path, backbone: Backbone, head: FrozenHead):
    out = [CHECKPOINT_MAGIC, struct.pack("<3I", head.d_in, head.d_out, len(backbone.stages))]
    for st in backbone.stages:
        out.append(struct.pack("<2I", *st.weight.shape))
        out.append(st.weight.astype("<f4").tobytes())
        out.append(st.bias.astype("<f4").tobytes())
    out.append(head.w_base.astype("<f4").tobytes())
    out.append(head.bias.astype("<f4").tobytes())
    Path(path).write_bytes(b"".join(out))


class _Reader:
    def __init__(self, path, raw, off=0):
        self.path, self.raw, self.off = path, raw, off

    def take(self, n):
        if self.off + n > len(self.raw):
            raise TruncatedFileError(self.path, f"needs {self.off + n} bytes, file has {len(self.raw)}")
        chunk = self.raw[self.off : self.off + n]
        self.off += n
        return chunk

    def u32(self, count=1):
        vals = struct.unpack(f"<{count}I", self.take(4 * count))
        return vals if count > 1 else vals[0]

    def f32(self, *shape):
        n = int(np.prod(shape))
        return np.frombuffer(self.take(4 * n), dtype="<f4").astype(np.float64).reshape(shape)

    def magic(self, expected):
        got = self.take(len(expected))
        if got != expected:
            raise BadMagicError(self.path, f"magic {got!r}, expected {expected!r}")

    @property
    def remaining(self):
        return len(self.raw) - self.off


def load_checkpoint(path):
    rd = _Reader(path, Path(path).read_bytes())
    rd.magic(CHECKPOINT_MAGIC)
    d_in, d_out, n_stages = rd.u32(3)
    stages = []
    for _ in range(n_stages):
        i, o = rd.u32(2)
        stages.append(Stage(rd.f32(i, o), rd.f32(o)))
    head = FrozenHead(rd.f32(d_in, d_out), rd.f32(d_out))
    if rd.remaining:
        raise CountMismatchError(path, f"{rd.remaining} trailing bytes after the head")
    return Backbone(tuple(stages)), head
