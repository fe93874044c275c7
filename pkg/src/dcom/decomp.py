"""Matmul schemes on decomposed activations/weights and their cost accounting.

Every scheme takes an optional :class:`OpCounter`; it records each small
matmul so that FLOP and peak-intermediate counts can be checked against the
closed forms in :func:`cost_report`.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Mapping, Sequence

import numpy as np

from .errors import DecompositionError, DcomError, ParameterError, ShapeError
from .lanczos import DecomposedMatrix, lanczos_svd
from .linalg import as_matrix

BYTES_PER_ELEMENT = 2  # FP16 on the accelerator, independent of host storage


class Scheme(str, Enum):
    DENSE = "dense"
    INPUT = "input"
    INPUT_PRESERVED = "input_preserved"
    INPUT_WEIGHT = "input_weight"
    INPUT_WEIGHT_PRESERVED = "input_weight_preserved"

    @property
    def weight_decomposed(self) -> bool:
        return self in (Scheme.INPUT_WEIGHT, Scheme.INPUT_WEIGHT_PRESERVED)

    @property
    def input_decomposed(self) -> bool:
        return self is not Scheme.DENSE

    @property
    def preserved(self) -> bool:
        return self in (Scheme.INPUT_PRESERVED, Scheme.INPUT_WEIGHT_PRESERVED)


@dataclass
class OpCounter:
    """Tally of matmuls: FLOPs (2 per multiply-add) and largest product size."""

    flops: int = 0
    peak_elements: int = 0
    log: list = field(default_factory=list)

    def mm(self, a: np.ndarray, b: np.ndarray, tag: str) -> np.ndarray:
        m, k = a.shape
        n = b.shape[1]
        f = 2 * m * k * n
        self.flops += f
        self.peak_elements = max(self.peak_elements, m * n)
        self.log.append((tag, m, k, n, f))
        return a @ b

    def flops_for(self, tag: str) -> int:
        return sum(entry[4] for entry in self.log if entry[0] == tag)


def _mm(counter: OpCounter | None, a, b, tag: str):
    if counter is None:
        return a @ b
    return counter.mm(a, b, tag)


def _check_inner(left: int, right: int, what: str):
    if left != right:
        raise ShapeError(f"{what}: inner dimensions differ ({left} vs {right})")


def _as_weight(w) -> np.ndarray:
    return as_matrix(w, name="weight").astype(np.float64)


def matmul_input_decomposed(d: DecomposedMatrix, w, counter: OpCounter | None = None) -> np.ndarray:
    """Dense ``(U Sigma V) W`` evaluated as ``U (Sigma (V W))``."""
    w = _as_weight(w)
    _check_inner(d.V.shape[1], w.shape[0], "V x W")
    t1 = _mm(counter, d.V, w, "vw")
    t2 = _mm(counter, d.Sigma, t1, "sigma")
    return _mm(counter, d.U, t2, "u")


def matmul_preserved_input(d: DecomposedMatrix, w, counter: OpCounter | None = None) -> DecomposedMatrix:
    """Keep the product factored: only ``V`` is replaced by ``V W``."""
    w = _as_weight(w)
    _check_inner(d.V.shape[1], w.shape[0], "V x W")
    v_star = _mm(counter, d.V, w, "vw")
    return DecomposedMatrix(d.U, d.Sigma, v_star, diagonal=d.diagonal)


def _core_product(dx: DecomposedMatrix, dw: DecomposedMatrix, counter):
    _check_inner(dx.V.shape[1], dw.U.shape[0], "V_I x U_W")
    t1 = _mm(counter, dx.V, dw.U, "vi_uw")
    t2 = _mm(counter, t1, dw.Sigma, "sigma_w")
    return _mm(counter, dx.Sigma, t2, "sigma_i")


def matmul_input_weight_decomposed(
    dx: DecomposedMatrix, dw: DecomposedMatrix, counter: OpCounter | None = None
) -> np.ndarray:
    """Dense product of a decomposed input and a decomposed weight.

    Pairing order: ``V_I U_W`` first, then ``Sigma_W``, ``Sigma_I``, ``V_W``
    and finally ``U_I``; every intermediate stays rank-sized until the last step.
    """
    t3 = _core_product(dx, dw, counter)
    t4 = _mm(counter, t3, dw.V, "vw_out")
    return _mm(counter, dx.U, t4, "u")


def matmul_preserved_input_weight(
    dx: DecomposedMatrix, dw: DecomposedMatrix, counter: OpCounter | None = None
) -> DecomposedMatrix:
    """Factored product ``(U_I, Sigma*, V_W)`` with a dense ``r1 x p2`` core."""
    core = _core_product(dx, dw, counter)
    return DecomposedMatrix(dx.U, core, dw.V, diagonal=False)


@dataclass
class BatchActivations:
    prompts: list

    def __post_init__(self):
        self.prompts = [as_matrix(p, name=f"prompt {i}") for i, p in enumerate(self.prompts)]
        shapes = {p.shape for p in self.prompts}
        if len(shapes) > 1:
            raise ShapeError(f"prompts have mixed shapes {sorted(shapes)}")

    @classmethod
    def from_array(cls, x) -> "BatchActivations":
        x = np.asarray(x)
        if x.ndim != 3:
            raise ShapeError(f"expected a B x S x H array, got shape {x.shape}")
        return cls(list(x))

    @property
    def B(self) -> int:
        return len(self.prompts)

    @property
    def S(self) -> int:
        return self.prompts[0].shape[0] if self.prompts else 0

    @property
    def H(self) -> int:
        return self.prompts[0].shape[1] if self.prompts else 0


@dataclass
class DecomposedBatch:
    items: list
    r1: int
    r2: int

    def __len__(self):
        return len(self.items)

    def __getitem__(self, i) -> DecomposedMatrix:
        return self.items[i]


def _pad(d: DecomposedMatrix, k: int) -> DecomposedMatrix:
    r = d.r1
    if r == k:
        return d
    n1, n2 = d.shape
    u = np.zeros((n1, k))
    u[:, :r] = d.U
    s = np.zeros((k, k))
    s[:r, :r] = d.Sigma
    v = np.zeros((k, n2))
    v[:r] = d.V
    return DecomposedMatrix(u, s, v)


def decompose_batch(x: BatchActivations, k: int, eps: float | None = None, seed: int = 0, **kw) -> DecomposedBatch:
    """Decompose every prompt independently; prompt i uses seed ``seed + i``.

    Prompts whose Lanczos run ends early are zero-padded to rank ``k`` so the
    batch carries uniform ranks.
    """
    if not isinstance(x, BatchActivations):
        x = BatchActivations(list(x))
    if x.B and k > min(x.S, x.H):
        raise ParameterError(f"rank {k} exceeds min(S, H) = {min(x.S, x.H)}")
    items = []
    for i, prompt in enumerate(x.prompts):
        try:
            d, _ = lanczos_svd(prompt, k, eps=eps, seed=seed + i, **kw)
        except DcomError as exc:
            raise DecompositionError(i, exc) from exc
        items.append(_pad(d, k))
    return DecomposedBatch(items, k, k)


@dataclass
class CostReport:
    """Per-matmul cost of one scheme; FLOPs and bytes cover the whole batch."""

    flops: int
    input_bytes: int
    weight_bytes: int
    output_bytes: int
    compute_reduction_ratio_paper: float
    compute_reduction_ratio_true: float
    input_compression_ratio: float
    weight_compression_ratio: float
    breakeven_rank: float

    @property
    def compute_reduction_ratio(self) -> float:
        return self.compute_reduction_ratio_paper

    def to_dict(self) -> dict:
        return asdict(self)


def breakeven_rank(d: int, w: int) -> float:
    """Largest factor rank for which ``d p + p^2 + p w < d w`` (positive root)."""
    return (math.sqrt((d + w) ** 2 + 4 * d * w) - (d + w)) / 2


def scheme_flops(S: int, H: int, W: int, r1: int, r2: int, p1: int, p2: int, scheme: Scheme) -> int:
    """Closed-form FLOPs of one prompt's matmul under ``scheme``."""
    scheme = Scheme(scheme)
    if scheme is Scheme.DENSE:
        return 2 * S * H * W
    if scheme is Scheme.INPUT:
        return 2 * (r2 * H * W + r1 * r2 * W + S * r1 * W)
    if scheme is Scheme.INPUT_PRESERVED:
        return 2 * r2 * H * W
    core = 2 * (r2 * H * p1 + r2 * p1 * p2 + r1 * r2 * p2)
    if scheme is Scheme.INPUT_WEIGHT_PRESERVED:
        return core
    return core + 2 * (r1 * p2 * W + S * r1 * W)


def _factored(n1: int, n2: int, a: int, b: int) -> int:
    return n1 * a + a * b + b * n2


def cost_report(dims: Mapping, ranks: Mapping | None = None, scheme=Scheme.INPUT) -> CostReport:
    """Closed-form cost of a ``[S, H] x [H, W_cols]`` matmul over a batch of ``B``.

    ``dims`` holds ``S``, ``H``, ``W_cols`` and optionally ``B`` (default 1);
    ``ranks`` holds ``r1``, ``r2`` and, for weight-decomposed schemes, ``p1``
    and ``p2``. The headline compute ratio is ``S / r2`` for input-only
    schemes and dense MACs over the three core MAC terms for input+weight
    schemes; the true ratio divides by every FLOP the scheme performs.
    """
    scheme = Scheme(scheme)
    ranks = dict(ranks or {})
    B = int(dims.get("B", 1))
    S, H, W = int(dims["S"]), int(dims["H"]), int(dims["W_cols"])
    if min(B, S, H, W) < 1:
        raise ParameterError("dims must be positive")
    r1 = int(ranks.get("r1", S))
    r2 = int(ranks.get("r2", r1 if "r1" in ranks else H))
    p1 = int(ranks.get("p1", H))
    p2 = int(ranks.get("p2", p1 if "p1" in ranks else W))
    if scheme.input_decomposed:
        if "r1" not in ranks and "r2" not in ranks:
            raise ParameterError(f"scheme {scheme.value} needs input ranks r1/r2")
        if not (1 <= r1 <= S and 1 <= r2 <= H):
            raise ParameterError(f"input ranks ({r1}, {r2}) outside [1, S={S}] x [1, H={H}]")
    if scheme.weight_decomposed:
        if "p1" not in ranks and "p2" not in ranks:
            raise ParameterError(f"scheme {scheme.value} needs weight ranks p1/p2")
        if not (1 <= p1 <= H and 1 <= p2 <= W):
            raise ParameterError(f"weight ranks ({p1}, {p2}) outside [1, H={H}] x [1, W={W}]")

    dense = 2 * S * H * W
    flops = scheme_flops(S, H, W, r1, r2, p1, p2, scheme)
    if not scheme.input_decomposed:
        headline = 1.0
    elif scheme.weight_decomposed:
        headline = (S * H * W) / (r2 * H * p1 + r2 * p1 * p2 + r1 * r2 * p2)
    else:
        headline = S / r2

    in_elems = _factored(S, H, r1, r2) if scheme.input_decomposed else S * H
    w_elems = _factored(H, W, p1, p2) if scheme.weight_decomposed else H * W
    if scheme is Scheme.INPUT_PRESERVED:
        out_elems = _factored(S, W, r1, r2)
    elif scheme is Scheme.INPUT_WEIGHT_PRESERVED:
        out_elems = _factored(S, W, r1, p2)
    else:
        out_elems = S * W

    return CostReport(
        flops=B * flops,
        input_bytes=B * in_elems * BYTES_PER_ELEMENT,
        weight_bytes=w_elems * BYTES_PER_ELEMENT,
        output_bytes=B * out_elems * BYTES_PER_ELEMENT,
        compute_reduction_ratio_paper=float(headline),
        compute_reduction_ratio_true=dense / flops,
        input_compression_ratio=(S * H) / in_elems,
        weight_compression_ratio=(H * W) / w_elems,
        breakeven_rank=breakeven_rank(H, W),
    )


def run_scheme(scheme, dx: DecomposedMatrix | None, w=None, dw: DecomposedMatrix | None = None,
               x=None, counter: OpCounter | None = None):
    """Dispatch one matmul of ``scheme``; used by tests and the harness."""
    scheme = Scheme(scheme)
    if scheme is Scheme.DENSE:
        return _mm(counter, np.asarray(x, dtype=np.float64), _as_weight(w), "dense")
    if scheme is Scheme.INPUT:
        return matmul_input_decomposed(dx, w, counter)
    if scheme is Scheme.INPUT_PRESERVED:
        return matmul_preserved_input(dx, w, counter)
    if scheme is Scheme.INPUT_WEIGHT:
        return matmul_input_weight_decomposed(dx, dw, counter)
    return matmul_preserved_input_weight(dx, dw, counter)


def preserved_chain(d: DecomposedMatrix, weights: Sequence, counter: OpCounter | None = None) -> DecomposedMatrix:
    """Apply consecutive weights without ever leaving factored form."""
    for w in weights:
        if isinstance(w, DecomposedMatrix):
            d = matmul_preserved_input_weight(d, w, counter)
        else:
            d = matmul_preserved_input(d, w, counter)
    return d
