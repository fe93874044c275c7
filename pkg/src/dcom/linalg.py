"""Dense linear-algebra kernels and a one-sided Jacobi SVD oracle.

Matrices are plain numpy arrays. Inputs are validated into 32-bit storage
(:func:`as_matrix`) while every reduction accumulates in 64-bit.
"""
from __future__ import annotations

from typing import NamedTuple, Sequence

import numpy as np
import scipy.linalg

from .errors import ParameterError, ShapeError, ValidationError

__all__ = [
    "as_matrix",
    "as_vector",
    "matmul",
    "frobenius_norm",
    "orthogonalize_against",
    "Orthogonalized",
    "svd_oracle",
    "ORACLE_MAX_DIM",
]

ORACLE_MAX_DIM = 1024
_EPS64 = np.finfo(np.float64).eps


def as_matrix(data, name: str = "matrix") -> np.ndarray:
    """Validate ``data`` as a finite 2-D matrix stored row-major in float32."""
    a = np.ascontiguousarray(data, dtype=np.float32)
    if a.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {a.shape}")
    if not np.isfinite(a).all():
        raise ValidationError(f"{name} contains NaN or Inf")
    return a


def as_vector(data, name: str = "vector") -> np.ndarray:
    v = np.ascontiguousarray(data, dtype=np.float32)
    if v.ndim != 1:
        raise ShapeError(f"{name} must be 1-D, got shape {v.shape}")
    if not np.isfinite(v).all():
        raise ValidationError(f"{name} contains NaN or Inf")
    return v


def matmul(a, b) -> np.ndarray:
    """Product ``a @ b`` accumulated in float64 and stored as float32."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    out = np.asarray(a, dtype=np.float64) @ np.asarray(b, dtype=np.float64)
    return out.astype(np.float32)


def frobenius_norm(a) -> float:
    a = np.asarray(a, dtype=np.float64)
    return float(np.sqrt(np.sum(a * a)))


class Orthogonalized(NamedTuple):
    vector: np.ndarray
    norm: float
    breakdown: bool


def _basis_matrix(basis, n: int) -> np.ndarray:
    if isinstance(basis, np.ndarray) and basis.ndim == 2:
        q = np.asarray(basis, dtype=np.float64)
    else:
        cols = [np.asarray(v, dtype=np.float64) for v in basis]
        q = np.stack(cols, axis=1) if cols else np.zeros((n, 0))
    if q.shape[0] != n:
        raise ShapeError(f"basis vectors have length {q.shape[0]}, expected {n}")
    return q


def orthogonalize_against(
    z, basis: Sequence | np.ndarray, passes: int = 2, tol: float | None = None
) -> Orthogonalized:
    """Classical Gram-Schmidt of ``z`` against an orthonormal ``basis``.

    ``basis`` is either a sequence of vectors or a 2-D array whose columns
    are the basis vectors. The projection is repeated ``passes`` times.
    ``norm`` is the length of the projected vector before normalization;
    when it falls to ``tol`` or below (default ``1e-8 * |z|``) the vector is
    returned unnormalized with ``breakdown=True``.
    """
    if passes < 1:
        raise ParameterError("passes must be >= 1")
    z = np.array(z, dtype=np.float64)
    if z.ndim != 1:
        raise ShapeError("z must be a vector")
    q = _basis_matrix(basis, z.shape[0])
    if tol is None:
        tol = 1e-8 * float(np.linalg.norm(z))
    for _ in range(passes):
        if q.shape[1]:
            z -= q @ (q.T @ z)
    beta = float(np.linalg.norm(z))
    if beta <= tol or beta == 0.0:
        return Orthogonalized(z, beta, True)
    return Orthogonalized(z / beta, beta, False)


def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Pairings for one parallel Jacobi sweep; every pair appears once."""
    m = n + (n % 2)
    players = list(range(m))
    rounds = []
    for _ in range(m - 1):
        half = m // 2
        p = np.array(players[:half])
        q = np.array(players[half:][::-1])
        keep = (p < n) & (q < n)
        rounds.append((p[keep], q[keep]))
        players = [players[0]] + [players[-1]] + players[1:-1]
    return rounds


def _one_sided_jacobi(a: np.ndarray, max_sweeps: int = 60):
    """Hestenes one-sided Jacobi on a tall matrix (rows >= cols).

    Returns (G, V, rotations) with ``a @ V == G`` and the columns of ``G``
    mutually orthogonal.
    """
    # rows of gt / vt are the columns being rotated; keeps gathers contiguous
    gt = np.array(a, dtype=np.float64).T.copy()
    n = gt.shape[0]
    vt = np.eye(n)
    rotations = 0
    if n < 2:
        return gt.T.copy(), vt.T.copy(), rotations
    rounds = _round_robin(n)
    tol = n * _EPS64
    for _ in range(max_sweeps):
        rotated = 0
        for p, q in rounds:
            gp, gq = gt[p], gt[q]
            alpha = np.einsum("ij,ij->i", gp, gp)
            beta = np.einsum("ij,ij->i", gq, gq)
            gamma = np.einsum("ij,ij->i", gp, gq)
            act = np.abs(gamma) > tol * np.sqrt(alpha * beta)
            if not act.any():
                continue
            if not act.all():
                p, q, gp, gq = p[act], q[act], gp[act], gq[act]
                alpha, beta, gamma = alpha[act], beta[act], gamma[act]
            zeta = (beta - alpha) / (2.0 * gamma)
            t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            c = (1.0 / np.sqrt(1.0 + t * t))[:, None]
            s = c * t[:, None]
            gt[p] = c * gp - s * gq
            gt[q] = s * gp + c * gq
            vp, vq = vt[p], vt[q]
            vt[p] = c * vp - s * vq
            vt[q] = s * vp + c * vq
            rotated += len(p)
        rotations += rotated
        if rotated == 0:
            break
    return gt.T.copy(), vt.T.copy(), rotations


def _complete_columns(u: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Replace the columns of ``u`` not flagged ``valid`` by an orthonormal completion."""
    u = u.copy()
    m = u.shape[0]
    basis = [u[:, i] for i in np.flatnonzero(valid)]
    candidate = 0
    for i in np.flatnonzero(~valid):
        while True:
            e = np.zeros(m)
            e[candidate % m] = 1.0
            candidate += 1
            res = orthogonalize_against(e, basis, passes=2, tol=1e-6)
            if not res.breakdown:
                break
        u[:, i] = res.vector
        basis.append(res.vector)
    return u


def _svd_with_count(a):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"svd_oracle needs a 2-D matrix, got {a.shape}")
    rows, cols = a.shape
    if min(rows, cols) > ORACLE_MAX_DIM:
        raise ParameterError(
            f"svd_oracle is limited to min(rows, cols) <= {ORACLE_MAX_DIM}, got {min(rows, cols)}"
        )
    if not np.isfinite(a).all():
        raise ValidationError("svd_oracle input contains NaN or Inf")
    transposed = rows < cols
    work = a.T if transposed else a
    m, n = work.shape
    if n == 0:
        return np.zeros((rows, 0)), np.zeros(0), np.zeros((0, cols)), 0
    # work[:, piv] = Q R; Jacobi on R^T converges in far fewer sweeps than on work
    q, r, piv = scipy.linalg.qr(work, mode="economic", pivoting=True)
    g, w, rotations = _one_sided_jacobi(r.T)
    # R^T = G W^T  =>  work = (Q W) diag(s) (P G/s)^T
    s = np.sqrt(np.einsum("ij,ij->j", g, g))
    order = np.argsort(-s, kind="stable")
    s, g, w = s[order], g[:, order], w[:, order]
    perm_g = np.empty_like(g)
    perm_g[piv] = g
    g, v = q @ w, perm_g
    valid = s > max(m, n) * _EPS64 * (s[0] if s[0] > 0 else 1.0)
    # g is orthonormal already; v carries the scaled right vectors
    u = g
    rv = np.zeros_like(v)
    rv[:, valid] = v[:, valid] / s[valid]
    s = np.where(valid, s, 0.0)
    if not valid.all():
        rv = _complete_columns(rv, valid)
    v = rv
    # left factor of ``work`` is u, right factor is v (work = u diag(s) v^T)
    if transposed:
        left, right = v, u
    else:
        left, right = u, v
    lead = np.argmax(np.abs(left), axis=0)
    signs = np.where(left[lead, np.arange(left.shape[1])] < 0, -1.0, 1.0)
    left = left * signs
    right = right * signs
    return left, s, right.T, rotations


def svd_oracle(a) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Thin SVD ``a = U @ diag(s) @ V`` by one-sided Jacobi.

    ``U`` is ``rows x p`` with orthonormal columns, ``V`` is ``p x cols`` with
    orthonormal rows, ``p = min(rows, cols)``; ``s`` is sorted descending.
    The largest-magnitude entry of every column of ``U`` is non-negative.
    All outputs are float64.
    """
    u, s, v, _ = _svd_with_count(a)
    return u, s, v


def jacobi_rotation_count(a) -> int:
    """Number of plane rotations the oracle applies to ``a``."""
    return _svd_with_count(a)[3]
