"""Dense float64 linear algebra used by the unlearning pipeline.

Matrices are plain 2-D ``numpy.ndarray`` objects of dtype float64.  The
functions here validate shape and finiteness at their boundaries so that a
NaN produced anywhere upstream is caught before it reaches a projector.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConvergenceError, NumericalError, ShapeError

MAX_SWEEPS = 60
ROTATION_TOL = 1e-12
ORTHO_TOL = 1e-9


def as_matrix(x, name="matrix") -> np.ndarray:
    """Coerce to a finite, non-empty float64 2-D array."""
    m = np.asarray(x, dtype=np.float64)
    if m.ndim == 1:
        m = m.reshape(-1, 1)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got ndim={m.ndim}")
    if not np.all(np.isfinite(m)):
        raise NumericalError(f"{name} contains NaN or Inf")
    return m


def matmul(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    out = a @ b
    if not np.all(np.isfinite(out)):
        raise NumericalError(f"non-finite product of {a.shape} and {b.shape}")
    return out


@dataclass(frozen=True)
class SvdResult:
    u: np.ndarray  # m x p
    s: np.ndarray  # p, descending
    v: np.ndarray  # n x p

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.s) @ self.v.T


def _round_robin(n):
    """Disjoint column pairings covering every pair once per sweep.

    Circle method; ``n`` is padded to even with a sentinel index that is
    filtered out.
    """
    idx = list(range(n)) + ([-1] if n % 2 else [])
    k = len(idx)
    rounds = []
    for _ in range(k - 1):
        left = idx[: k // 2]
        right = idx[k // 2 :][::-1]
        pairs = [(i, j) for i, j in zip(left, right) if i >= 0 and j >= 0]
        if pairs:
            p = np.array([min(i, j) for i, j in pairs])
            q = np.array([max(i, j) for i, j in pairs])
            rounds.append((p, q))
        idx = [idx[0], idx[-1]] + idx[1:-1]
    return rounds


def _zero_norm(a):
    """Column norms at or below this are treated as exactly zero."""
    return max(a.shape) * np.finfo(float).eps * float(np.linalg.norm(a))


def _jacobi_tall(a):
    """One-sided cyclic Jacobi on a tall (m >= n) matrix.

    Returns (w, v) with w = a @ v having mutually orthogonal columns.
    """
    m, n = a.shape
    w = a.copy()
    v = np.eye(n)
    if n == 1:
        return w, v
    zero2 = _zero_norm(a) ** 2
    rounds = _round_robin(n)
    for sweep in range(MAX_SWEEPS):
        rotated = False
        for p, q in rounds:
            wp, wq = w[:, p], w[:, q]
            alpha = np.einsum("ij,ij->j", wp, wp)
            beta = np.einsum("ij,ij->j", wq, wq)
            gamma = np.einsum("ij,ij->j", wp, wq)
            active = (np.abs(gamma) > ROTATION_TOL * np.sqrt(alpha * beta)) & (alpha > zero2) & (beta > zero2)
            if not active.any():
                continue
            rotated = True
            p, q = p[active], q[active]
            alpha, beta, gamma = alpha[active], beta[active], gamma[active]
            zeta = (beta - alpha) / (2.0 * gamma)
            t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            wp, wq = w[:, p], w[:, q]
            w[:, p] = c * wp - s * wq
            w[:, q] = s * wp + c * wq
            vp, vq = v[:, p], v[:, q]
            v[:, p] = c * vp - s * vq
            v[:, q] = s * vp + c * vq
        if not rotated:
            return w, v
    raise ConvergenceError(f"Jacobi SVD did not converge within the {MAX_SWEEPS}-sweep cap")


def _complete_columns(u, missing):
    """Fill ``missing`` column slots of u with an orthonormal completion."""
    m = u.shape[0]
    keep = [j for j in range(u.shape[1]) if j not in missing]
    basis = u[:, keep]
    extra = orthonormalize_against(np.eye(m), basis, tol=1e-6)
    for slot, col in zip(sorted(missing), extra.T):
        u[:, slot] = col
    return u


def svd(m) -> SvdResult:
    """Thin SVD by one-sided Jacobi, with a deterministic sign convention.

    Singular values come back in descending order (ties keep column order).
    Each column of U is flipped so its largest-magnitude entry is positive,
    with V flipped to match.
    """
    m = as_matrix(m, "svd input")
    if m.size == 0:
        raise ShapeError("svd of an empty matrix")
    rows, cols = m.shape
    transposed = rows < cols
    a = m.T if transposed else m

    w, v = _jacobi_tall(a)
    s = np.linalg.norm(w, axis=0)
    order = np.argsort(-s, kind="stable")
    s, w, v = s[order], w[:, order], v[:, order]

    # Margin over the Jacobi cutoff: every column kept here was rotated
    # against every other kept column in the final sweep.
    floor = 2.0 * _zero_norm(a)
    u = np.zeros_like(w)
    missing = set()
    for j, sj in enumerate(s):
        if sj > floor and sj > 0.0:
            u[:, j] = w[:, j] / sj
        else:
            missing.add(j)
    if missing:
        u = _complete_columns(u, missing)

    if transposed:
        u, v = v, u

    # Sign fix on the (final) left vectors.
    pivot = np.argmax(np.abs(u), axis=0)
    signs = np.where(u[pivot, np.arange(u.shape[1])] < 0, -1.0, 1.0)
    u = u * signs
    v = v * signs
    return SvdResult(u=u, s=s, v=v)


def orthonormalize_against(candidate, basis, tol=1e-10) -> np.ndarray:
    """Gram-Schmidt the candidate columns against ``basis`` and each other.

    Two modified Gram-Schmidt passes per column. Columns left with norm below
    ``tol`` are dropped, so the result may have zero columns.
    """
    candidate = as_matrix(candidate, "candidate")
    d = candidate.shape[0]
    if basis is None:
        basis = np.zeros((d, 0))
    basis = np.asarray(basis, dtype=np.float64)
    if basis.size == 0:
        basis = np.zeros((d, 0))
    if basis.ndim != 2 or basis.shape[0] != d:
        raise ShapeError(f"candidate has {d} rows but basis has {basis.shape[0]}")

    accepted = []
    for j in range(candidate.shape[1]):
        x = candidate[:, j].copy()
        for _ in range(2):
            for k in range(basis.shape[1]):
                x -= (basis[:, k] @ x) * basis[:, k]
            for q in accepted:
                x -= (q @ x) * q
        nrm = np.linalg.norm(x)
        if nrm < tol:
            continue
        accepted.append(x / nrm)
    if not accepted:
        return np.zeros((d, 0))
    return np.column_stack(accepted)


def is_orthonormal(q, tol=ORTHO_TOL) -> bool:
    if q.shape[1] == 0:
        return True
    return float(np.max(np.abs(q.T @ q - np.eye(q.shape[1])))) <= tol


def projector_from_basis(basis, dim) -> np.ndarray:
    """P = I - Q Q^T for an orthonormal Q (d x m). Empty Q gives I."""
    q = np.asarray(basis, dtype=np.float64)
    if q.size == 0:
        q = np.zeros((dim, 0))
    if q.ndim != 2 or q.shape[0] != dim:
        raise ShapeError(f"basis has {q.shape[0]} rows, expected {dim}")
    if not np.all(np.isfinite(q)):
        raise NumericalError("basis contains NaN or Inf")
    if not is_orthonormal(q):
        raise ValueError("projector_from_basis: basis columns are not orthonormal")
    p = np.eye(dim) - q @ q.T
    return 0.5 * (p + p.T)
