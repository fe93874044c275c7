"""Seeded synthetic matrices and activations for benches, sweeps and tests."""
from __future__ import annotations

import numpy as np


def orthonormal(rows: int, cols: int, rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((rows, cols)))
    return q * np.sign(np.diag(r))


def spectrum_matrix(rows: int, cols: int, spectrum, seed: int = 0) -> np.ndarray:
    """``Q1 diag(spectrum) Q2^T`` with random orthonormal factors, as float32."""
    rng = np.random.default_rng(seed)
    s = np.asarray(spectrum, dtype=np.float64)
    r = s.size
    a = (orthonormal(rows, r, rng) * s) @ orthonormal(cols, r, rng).T
    return a.astype(np.float32)


def named_spectrum(kind: str, n: int, rank: int | None = None) -> np.ndarray:
    """``flat`` (all ones), ``decay`` (2^-i) or ``planted`` (rank ones, then zeros)."""
    if kind == "flat":
        return np.ones(n)
    if kind == "decay":
        return 2.0 ** -np.arange(n, dtype=np.float64)
    if kind == "planted":
        s = np.zeros(n)
        s[: rank if rank is not None else max(1, n // 4)] = 1.0
        return s
    raise ValueError(f"unknown spectrum kind {kind!r}")


def integer_low_rank(rows: int, cols: int, rank: int, seed: int = 0) -> np.ndarray:
    """Exact-rank matrix with small integer entries (exact in float32)."""
    rng = np.random.default_rng(seed)
    x = rng.integers(-3, 4, size=(rows, rank))
    y = rng.integers(-3, 4, size=(rank, cols))
    return (x @ y).astype(np.float32)


def planted_channels(S: int, H: int, idx, magnitude: float = 100.0, seed: int = 0) -> np.ndarray:
    """N(0, 1) background with the listed channels at +/- ``magnitude``."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((S, H))
    idx = np.asarray(idx)
    signs = rng.choice([-1.0, 1.0], size=(S, idx.size))
    x[:, idx] = magnitude * signs
    return x.astype(np.float32)


def synthetic_activations(
    S: int,
    H: int,
    seed: int = 0,
    *,
    rank: int = 8,
    noise: float = 0.05,
    outlier_fraction: float = 0.05,
    outlier_scale: float = 20.0,
    outlier_spread: float = 4.0,
    heavy_tail: bool = False,
    channels_seed: int | None = None,
):
    """Activation-like prompt: low-rank body, small noise, a few loud channels.

    The outlier channels are drawn once from ``channels_seed`` (defaults to
    ``seed``) so that several prompts can share the same outlier layout, as
    they do in real models. Their scales are spread geometrically from
    ``outlier_scale`` to ``outlier_scale * outlier_spread`` so that extracting
    a smaller share catches the loudest ones first. Returns ``(x, idx)``.
    """
    layout = np.random.default_rng(seed if channels_seed is None else channels_seed)
    m = int(round(outlier_fraction * H))
    idx = np.sort(layout.choice(H, size=m, replace=False)) if m else np.zeros(0, dtype=int)
    scales = outlier_scale * outlier_spread ** layout.permutation(np.linspace(0.0, 1.0, m)) if m else np.zeros(0)

    rng = np.random.default_rng(seed)
    spec = 2.0 ** -np.arange(rank, dtype=np.float64) * np.sqrt(S * H / rank)
    body = (orthonormal(S, rank, rng) * spec) @ orthonormal(H, rank, rng).T
    if heavy_tail:
        body += noise * rng.standard_t(3, size=(S, H))
    else:
        body += noise * rng.standard_normal((S, H))
    if m:
        body[:, idx] = scales * rng.standard_normal((S, m))
    return body.astype(np.float32), idx
