"""Channel-wise outlier extraction and multi-track decomposition.

A channel (column) is an outlier when at least ``c * S`` of its entries
exceed the layer threshold ``T`` in magnitude. Outlier channels bypass the
low-rank path and are kept exactly.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .decomp import BatchActivations, OpCounter, matmul_input_decomposed
from .errors import CalibrationError, ParameterError, ShapeError, ValidationError
from .lanczos import DecomposedMatrix, lanczos_svd
from .linalg import as_matrix

DEFAULT_COUNT_FRACTION = 0.01


@dataclass(frozen=True)
class ThresholdEntry:
    layer: int
    threshold: float
    count_fraction: float = DEFAULT_COUNT_FRACTION

    def __post_init__(self):
        if not self.threshold > 0:
            raise ValidationError(f"layer {self.layer}: threshold must be > 0")
        if not 0 < self.count_fraction < 1:
            raise ValidationError(f"layer {self.layer}: count_fraction must be in (0, 1)")


@dataclass
class ThresholdTable:
    entries: list = field(default_factory=list)

    def __post_init__(self):
        layers = [e.layer for e in self.entries]
        if len(set(layers)) != len(layers):
            raise ValidationError("duplicate layer ids in threshold table")
        self.entries = sorted(self.entries, key=lambda e: e.layer)

    def lookup(self, layer: int) -> ThresholdEntry:
        for e in self.entries:
            if e.layer == layer:
                return e
        raise KeyError(f"no threshold for layer {layer}")

    def to_json(self) -> str:
        rows = [
            {"layer": e.layer, "threshold": e.threshold, "count_fraction": e.count_fraction}
            for e in self.entries
        ]
        return json.dumps(rows, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "ThresholdTable":
        rows = json.loads(text)
        return cls([
            ThresholdEntry(int(r["layer"]), float(r["threshold"]),
                           float(r.get("count_fraction", DEFAULT_COUNT_FRACTION)))
            for r in rows
        ])

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path) -> "ThresholdTable":
        with open(path) as fh:
            return cls.from_json(fh.read())


def _min_count(S: int, c: float) -> int:
    return max(1, math.ceil(c * S))


def _check_tc(T: float, c: float):
    if not T > 0:
        raise ParameterError("threshold T must be > 0")
    if not 0 < c < 1:
        raise ParameterError("count fraction c must be in (0, 1)")


def flag_channels(x, T: float, c: float) -> np.ndarray:
    """Boolean mask of channels with at least ``c * S`` entries above ``T``."""
    _check_tc(T, c)
    x = np.asarray(x)
    counts = np.count_nonzero(np.abs(x) > T, axis=0)
    return counts >= c * x.shape[0]


@dataclass(frozen=True)
class ChannelSplit:
    residual: np.ndarray
    outlier_cols: np.ndarray
    outlier_idx: np.ndarray
    H: int

    @property
    def keep_idx(self) -> np.ndarray:
        return np.setdiff1d(np.arange(self.H), self.outlier_idx)

    @property
    def fraction(self) -> float:
        return len(self.outlier_idx) / self.H


def extract_outlier_channels(x, T: float, c: float = DEFAULT_COUNT_FRACTION) -> ChannelSplit:
    x = as_matrix(x)
    mask = flag_channels(x, T, c)
    idx = np.flatnonzero(mask)
    return ChannelSplit(
        residual=np.ascontiguousarray(x[:, ~mask]),
        outlier_cols=np.ascontiguousarray(x[:, idx]),
        outlier_idx=idx,
        H=x.shape[1],
    )


@dataclass(frozen=True)
class MultiTrackDecomposition:
    """Low-rank residual over the kept channels plus exact outlier columns."""

    residual: DecomposedMatrix
    outlier_cols: np.ndarray
    outlier_idx: np.ndarray
    H: int

    def __post_init__(self):
        idx = np.asarray(self.outlier_idx)
        if idx.size and (np.any(np.diff(idx) <= 0) or idx[0] < 0 or idx[-1] >= self.H):
            raise ValidationError("outlier_idx must be strictly increasing and within [0, H)")
        if self.outlier_cols.shape[1] != idx.size:
            raise ShapeError("outlier_cols width does not match outlier_idx")

    @property
    def m(self) -> int:
        return int(np.asarray(self.outlier_idx).size)

    @property
    def fraction(self) -> float:
        return self.m / self.H

    @property
    def keep_idx(self) -> np.ndarray:
        return np.setdiff1d(np.arange(self.H), self.outlier_idx)

    @property
    def shape(self) -> tuple[int, int]:
        return self.residual.shape[0], self.H

    def reconstruct(self) -> np.ndarray:
        S = self.residual.shape[0]
        out = np.zeros((S, self.H))
        out[:, self.keep_idx] = self.residual.reconstruct()
        out[:, self.outlier_idx] = self.outlier_cols
        return out

    def metadata(self) -> dict:
        return {"extracted_channels": self.m, "fraction": self.fraction}


def multitrack_decompose(x, k: int, T: float, c: float = DEFAULT_COUNT_FRACTION,
                         eps: float | None = None, seed: int = 0, **kw) -> MultiTrackDecomposition:
    split = extract_outlier_channels(x, T, c)
    S, rest = split.residual.shape
    if rest == 0:
        raise ParameterError("every channel was flagged as an outlier; nothing left to decompose")
    if not 1 <= k <= min(S, rest):
        raise ParameterError(f"rank {k} outside [1, min(S, H - m)] = [1, {min(S, rest)}]")
    d, _ = lanczos_svd(split.residual, k, eps=eps, seed=seed, **kw)
    return MultiTrackDecomposition(d, split.outlier_cols, split.outlier_idx, split.H)


def multitrack_matmul(mt: MultiTrackDecomposition, w, counter: OpCounter | None = None) -> np.ndarray:
    """``reconstruct(mt) @ w`` without materializing the reconstruction."""
    w = as_matrix(w, name="weight").astype(np.float64)
    if w.shape[0] != mt.H:
        raise ShapeError(f"weight has {w.shape[0]} rows, activation has H={mt.H}")
    out = matmul_input_decomposed(mt.residual, w[mt.keep_idx], counter)
    if mt.m:
        side = np.asarray(mt.outlier_cols, dtype=np.float64)
        out = out + (counter.mm(side, w[mt.outlier_idx], "outlier") if counter else side @ w[mt.outlier_idx])
    return out


def channel_flag_levels(x, c: float) -> np.ndarray:
    """Per channel, the largest T at which it is still flagged (exclusive bound)."""
    x = np.abs(np.asarray(x, dtype=np.float64))
    m = _min_count(x.shape[0], c)
    # m-th largest magnitude in each column
    return -np.partition(-x, m - 1, axis=0)[m - 1]


def _prompts(sample) -> Iterable[np.ndarray]:
    if isinstance(sample, BatchActivations):
        return sample.prompts
    arr = np.asarray(sample)
    if arr.ndim == 2:
        return [arr]
    if arr.ndim == 3:
        return list(arr)
    raise ShapeError(f"calibration sample must be 2-D or 3-D, got {arr.shape}")


def solve_threshold(levels: np.ndarray, target_fraction: float) -> float:
    """Threshold flagging ``round(target * N)`` of the given channel levels.

    The threshold sits at the geometric midpoint of the gap between the last
    selected and first unselected level, which keeps it robust to new data.
    """
    t = np.sort(np.asarray(levels, dtype=np.float64))[::-1]
    n = t.size
    n_sel = int(round(target_fraction * n))
    if n_sel <= 0:
        return float(t[0] * 2.0) if t[0] > 0 else 1.0
    hi = t[n_sel - 1]
    lo = t[n_sel] if n_sel < n else 0.0
    if hi <= 0:
        raise CalibrationError("calibration data has no non-zero channels")
    if lo <= 0:
        return float(hi / 2.0)
    return float(math.sqrt(hi * lo))


def calibrate_thresholds(samples: Mapping, target_fraction: float,
                         count_fraction: float = DEFAULT_COUNT_FRACTION) -> ThresholdTable:
    """Per-layer thresholds that flag about ``target_fraction`` of channels.

    ``samples`` maps a layer id to a list of calibration inputs (2-D prompts,
    3-D batches or :class:`BatchActivations`). Every (prompt, channel) pair
    contributes one flag level; the threshold is the order statistic that
    selects the target share of them.
    """
    if not 0 < target_fraction <= 0.1:
        raise ParameterError("target_fraction must be in (0, 0.1]")
    if not 0 < count_fraction < 1:
        raise ParameterError("count_fraction must be in (0, 1)")
    if not samples:
        raise CalibrationError("no calibration samples given")
    entries = []
    for layer in sorted(samples):
        levels = [channel_flag_levels(p, count_fraction)
                  for s in samples[layer] for p in _prompts(s)]
        if not levels:
            raise CalibrationError(f"layer {layer}: no calibration samples")
        T = solve_threshold(np.concatenate(levels), target_fraction)
        entries.append(ThresholdEntry(int(layer), T, count_fraction))
    return ThresholdTable(entries)
