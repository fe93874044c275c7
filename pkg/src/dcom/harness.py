"""Experiment plans, end-to-end estimates, sweeps and the convergence bench."""
from __future__ import annotations

import csv
import io
import json
import re
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import dcomsim
from .decomp import Scheme, cost_report
from .dcomsim import BaselineConfig, HardwareConfig
from .errors import ParameterError, PlanError, ValidationError
from .lanczos import convergence_study, lanczos_svd, reconstruction_error, write_trace_csv
from .matio import load_matrix
from .outlier import calibrate_thresholds, multitrack_decompose
from .synthetic import named_spectrum, spectrum_matrix, synthetic_activations

# Layer sets of the four decomposition configurations studied for the 7B model.
TABLE_LAYER_SETS = (
    (10, 15, 20, 25),
    (6, 10, 14, 18, 22, 26),
    (7, 10, 13, 16, 19, 22, 25, 28),
    (9, 10, 13, 14, 17, 18, 21, 22, 26, 27),
)


@dataclass(frozen=True)
class MatmulSpec:
    name: str
    in_dim: int
    out_dim: int
    group: str  # matmuls in one group consume the same activation


def llama_inventory(H: int = 4096, ffn: int = 11008) -> tuple:
    return (
        MatmulSpec("q", H, H, "attn_in"),
        MatmulSpec("k", H, H, "attn_in"),
        MatmulSpec("v", H, H, "attn_in"),
        MatmulSpec("o", H, H, "attn_out"),
        MatmulSpec("gate", H, ffn, "mlp_in"),
        MatmulSpec("up", H, ffn, "mlp_in"),
        MatmulSpec("down", ffn, H, "mlp_mid"),
    )


@dataclass(frozen=True)
class ModelPlan:
    """Architectural constants of a Llama-2-7B-like decoder (not measurements)."""

    num_layers: int = 32
    S: int = 4096
    H: int = 4096
    B: int = 64
    inventory: tuple = field(default_factory=llama_inventory)

    def __post_init__(self):
        if min(self.num_layers, self.S, self.H, self.B) < 1:
            raise ValidationError("model dims must be positive")
        if not self.inventory:
            raise ValidationError("model inventory is empty")
        outs = {m.out_dim for m in self.inventory}
        dims = {}
        for m in self.inventory:
            if min(m.in_dim, m.out_dim) < 1:
                raise ValidationError(f"matmul {m.name}: dims must be positive")
            if m.in_dim != self.H and m.in_dim not in outs:
                raise ValidationError(f"matmul {m.name}: input dim {m.in_dim} is neither H nor produced by another matmul")
            if dims.setdefault(m.group, m.in_dim) != m.in_dim:
                raise ValidationError(f"group {m.group} mixes input dims")

    @property
    def groups(self) -> list[tuple[str, int]]:
        seen = {}
        for m in self.inventory:
            seen.setdefault(m.group, m.in_dim)
        return list(seen.items())

    def to_dict(self) -> dict:
        d = asdict(self)
        d["inventory"] = [asdict(m) for m in self.inventory]
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelPlan":
        d = dict(d)
        if "inventory" in d:
            d["inventory"] = tuple(MatmulSpec(**m) for m in d["inventory"])
        elif "ffn_dim" in d:
            d["inventory"] = llama_inventory(int(d.get("H", 4096)), int(d.pop("ffn_dim")))
        _check_keys(cls, d, "model")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ModelPlan":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _check_keys(cls, d: Mapping, what: str) -> None:
    unknown = sorted(set(d) - {f.name for f in fields(cls)})
    if unknown:
        raise ValidationError(f"unknown {what} fields: {unknown}")


@dataclass(frozen=True)
class DecompPlan:
    decomposed_layer_ids: tuple = ()
    rank: int = 1
    scheme: str = "input"  # input | input_weight
    preserved: bool = False
    weight_rank: int = 256
    expansion_factor: int = 8
    outlier_enabled: bool = False
    outlier_target_fraction: float = 0.03

    def __post_init__(self):
        ids = tuple(sorted(int(i) for i in self.decomposed_layer_ids))
        object.__setattr__(self, "decomposed_layer_ids", ids)
        if len(set(ids)) != len(ids):
            dup = sorted({i for i in ids if ids.count(i) > 1})
            raise PlanError("duplicate layer ids", dup)
        if self.scheme not in ("input", "input_weight"):
            raise ValidationError(f"unknown scheme {self.scheme!r}; expected input or input_weight")
        if self.rank < 1 or self.weight_rank < 1:
            raise ValidationError("ranks must be >= 1")
        if self.outlier_enabled and not 0 < self.outlier_target_fraction <= 0.1:
            raise ValidationError("outlier target fraction must be in (0, 0.1]")

    def validate_for(self, model: ModelPlan) -> None:
        bad = [i for i in self.decomposed_layer_ids if not 0 <= i < model.num_layers]
        if bad:
            raise PlanError(f"layer ids outside [0, {model.num_layers})", bad)
        too_big = [i for i in self.decomposed_layer_ids if self.rank > min(model.S, model.H)]
        if too_big:
            raise PlanError(f"rank {self.rank} exceeds min(S, H)", too_big)

    def runs(self) -> list[list[int]]:
        """Maximal runs of consecutive decomposed layers."""
        out: list[list[int]] = []
        for i in self.decomposed_layer_ids:
            if out and out[-1][-1] == i - 1:
                out[-1].append(i)
            else:
                out.append([i])
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        d["decomposed_layer_ids"] = list(self.decomposed_layer_ids)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "DecompPlan":
        d = dict(d)
        outlier = d.pop("outlier", None)
        if outlier is not None:
            d["outlier_enabled"] = bool(outlier.get("enabled", False))
            d["outlier_target_fraction"] = float(outlier.get("target_fraction", 0.03))
        d["decomposed_layer_ids"] = tuple(d.get("decomposed_layer_ids", ()))
        _check_keys(cls, d, "plan")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "DecompPlan":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _gemm_seconds(flops: float, nbytes: float, cfg: BaselineConfig) -> float:
    tc, tm = dcomsim.roofline_time(flops, nbytes, cfg)
    return max(tc, tm) + cfg.kernel_launch_overhead


@dataclass
class LayerEstimate:
    layer: int
    decomposed: bool
    matmuls: list
    flops_dense: int
    flops: int
    bytes_dense: int
    bytes: int
    gemm_seconds: float
    decomp_seconds: float
    seconds_dense: float
    seconds: float
    decompositions: int
    redecompositions: int

    def to_dict(self) -> dict:
        d = asdict(self)
        d["matmuls"] = [{"name": n, "scheme": s, **c.to_dict()} for n, s, c in self.matmuls]
        return d


LAYER_COLUMNS = ("layer", "decomposed", "flops_dense", "flops", "bytes_dense", "bytes",
                 "gemm_seconds", "decomp_seconds", "seconds_dense", "seconds",
                 "decompositions", "redecompositions")
SUMMED = ("flops_dense", "flops", "bytes_dense", "bytes", "gemm_seconds", "decomp_seconds",
          "seconds_dense", "seconds", "decompositions", "redecompositions")


@dataclass
class ExperimentReport:
    layers: list
    totals: dict
    memory_reduction_pct: float
    flops_reduction_pct: float
    runtime_ratio: float
    runtime_reduction_pct: float
    decomposition_latency_seconds: float
    config: dict
    provenance: dict
    quality: str = "not-evaluated"

    def to_dict(self) -> dict:
        return {
            "layers": [l.to_dict() for l in self.layers],
            "totals": dict(self.totals),
            "memory_reduction_pct": self.memory_reduction_pct,
            "flops_reduction_pct": self.flops_reduction_pct,
            "runtime_ratio": self.runtime_ratio,
            "runtime_reduction_pct": self.runtime_reduction_pct,
            "decomposition_latency_seconds": self.decomposition_latency_seconds,
            "quality": self.quality,
            "config": self.config,
            "provenance": self.provenance,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        rows = [{c: getattr(l, c) for c in LAYER_COLUMNS} for l in self.layers]
        rows.append({"layer": "total", "decomposed": sum(l.decomposed for l in self.layers),
                     **self.totals})
        return rows_to_csv(rows, LAYER_COLUMNS)


def _layer_schemes(plan: DecompPlan, model: ModelPlan, layer: int, last_in_run: bool) -> list:
    weight = plan.scheme == "input_weight"
    groups = [g for g, _ in model.groups]
    out = []
    for m in model.inventory:
        # outputs stay factored except where the run hands back to a dense layer
        keep = plan.preserved and not (last_in_run and m.group == groups[-1])
        if weight:
            s = Scheme.INPUT_WEIGHT_PRESERVED if keep else Scheme.INPUT_WEIGHT
        else:
            s = Scheme.INPUT_PRESERVED if keep else Scheme.INPUT
        out.append((m, s))
    return out


def estimate_plan(model: ModelPlan, plan: DecompPlan, hw: HardwareConfig | None = None,
                  baseline_cfg: BaselineConfig | None = None) -> ExperimentReport:
    """Cost and runtime of running ``model`` with the layers in ``plan`` decomposed.

    GEMMs are costed with the GPU roofline. The accelerator decomposes the
    next prompt while the GPU multiplies the current one, so a decomposed
    layer takes ``max(gemm, decomposition) + one prompt's decomposition``.
    Without preservation every activation group of a decomposed layer is
    decomposed again; with it only the first layer of a consecutive run is.
    """
    hw = hw or HardwareConfig()
    cfg = baseline_cfg or BaselineConfig()
    plan.validate_for(model)
    S, B, k = model.S, model.B, plan.rank
    decomposed = set(plan.decomposed_layer_ids)
    run_start = {r[0] for r in plan.runs()}
    run_end = {r[-1] for r in plan.runs()}
    lanczos_cache: dict[int, float] = {}

    def lanczos_seconds(h: int) -> float:
        if h not in lanczos_cache:
            lanczos_cache[h] = dcomsim.simulate_lanczos({"S": S, "H": h}, k, plan.expansion_factor, hw).seconds
        return lanczos_cache[h]

    layers = []
    for layer in range(model.num_layers):
        flops_d = bytes_d = flops = nbytes = 0
        gemm_d = gemm = 0.0
        matmuls = []
        schemes = (_layer_schemes(plan, model, layer, layer in run_end) if layer in decomposed
                   else [(m, Scheme.DENSE) for m in model.inventory])
        for m, scheme in schemes:
            dims = {"B": B, "S": S, "H": m.in_dim, "W_cols": m.out_dim}
            dense = cost_report(dims, None, Scheme.DENSE)
            ranks = None
            if scheme is not Scheme.DENSE:
                ranks = {"r1": k, "r2": k}
                if scheme.weight_decomposed:
                    p = min(plan.weight_rank, m.in_dim, m.out_dim)
                    ranks.update(p1=p, p2=p)
            rep = cost_report(dims, ranks, scheme)
            matmuls.append((m.name, scheme.value, rep))
            db = dense.input_bytes + dense.weight_bytes + dense.output_bytes
            rb = rep.input_bytes + rep.weight_bytes + rep.output_bytes
            rf = rep.flops
            if scheme is not Scheme.DENSE and plan.outlier_enabled:
                # extracted channels stay dense on a side track
                side = round(plan.outlier_target_fraction * m.in_dim)
                rf += B * 2 * S * side * m.out_dim
                rb += B * S * side * hw.bytes_per_element
            flops_d += dense.flops
            bytes_d += db
            flops += rf
            nbytes += rb
            gemm_d += _gemm_seconds(dense.flops, db, cfg)
            gemm += _gemm_seconds(rf, rb, cfg)
        events = redo = 0
        decomp = 0.0
        seconds = gemm
        if layer in decomposed:
            if plan.preserved:
                groups = model.groups[:1] if layer in run_start else []
            else:
                groups = model.groups
            events = len(groups)
            redo = events if layer not in run_start else max(0, events - 1)
            if groups:
                one = sum(lanczos_seconds(h) for _, h in groups)
                decomp = B * one
                seconds = max(gemm, decomp) + one
        layers.append(LayerEstimate(layer, layer in decomposed, matmuls, flops_d, flops, bytes_d, nbytes,
                                    gemm, decomp, gemm_d, seconds, events, redo))

    totals = {c: sum(getattr(l, c) for l in layers) for c in SUMMED}
    if not decomposed:
        # identical arithmetic already, but keep the ratio exact
        totals["seconds"] = totals["seconds_dense"]
    ratio = totals["seconds"] / totals["seconds_dense"]
    return ExperimentReport(
        layers=layers,
        totals=totals,
        memory_reduction_pct=100.0 * (1 - totals["bytes"] / totals["bytes_dense"]),
        flops_reduction_pct=100.0 * (1 - totals["flops"] / totals["flops_dense"]),
        runtime_ratio=ratio,
        runtime_reduction_pct=100.0 * (1 - ratio),
        decomposition_latency_seconds=(
            dcomsim.simulate_lanczos({"S": S, "H": model.H}, k, plan.expansion_factor, hw).seconds
            if decomposed else 0.0),
        config={"model": model.to_dict(), "plan": plan.to_dict(), "hw": hw.to_dict(),
                "baseline": cfg.to_dict()},
        provenance={"calibration": dcomsim.CALIBRATION,
                    "bytes_per_element": hw.bytes_per_element,
                    "model": "architectural constants, not measurements"},
    )


def _fmt(v) -> str:
    if isinstance(v, bool):
        return str(v).lower()
    if isinstance(v, float):
        return repr(v)
    return str(v)


def rows_to_csv(rows: Sequence[Mapping], columns: Sequence[str] | None = None) -> str:
    columns = list(columns or (rows[0].keys() if rows else []))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r.get(c, "")) for c in columns])
    return buf.getvalue()


SWEEP_KEYS = ("rank", "f", "layers", "outlier")


def parse_layer_set(text: str) -> tuple:
    text = text.strip().strip("[]")
    if not text:
        return ()
    return tuple(int(t) for t in re.split(r"[,\s;]+", text) if t)


def _report_row(rep: ExperimentReport) -> dict:
    return {
        "memory_reduction_pct": rep.memory_reduction_pct,
        "flops_reduction_pct": rep.flops_reduction_pct,
        "runtime_ratio": rep.runtime_ratio,
        "runtime_reduction_pct": rep.runtime_reduction_pct,
        "decomposition_latency_seconds": rep.decomposition_latency_seconds,
        "decompositions": rep.totals["decompositions"],
        "redecompositions": rep.totals["redecompositions"],
    }


def outlier_sweep_rows(values, S: int = 256, H: int = 512, ranks=(1, 10), seed: int = 0,
                       calib_prompts: int = 4) -> list[dict]:
    """Reconstruction error of multi-track decomposition per extraction share.

    Thresholds are calibrated on separate prompts sharing the outlier layout
    of the evaluation prompt; a share of 0 is the plain decomposition.
    """
    make = lambda s: synthetic_activations(S, H, seed=s, channels_seed=seed)[0]
    x = make(seed + 1000)
    calib = [make(seed + 1 + i) for i in range(calib_prompts)]
    rows = []
    for frac in values:
        frac = float(frac)
        row = {"outlier_fraction": frac}
        if frac == 0:
            T = None
            row["threshold"] = ""
            row["extracted_fraction"] = 0.0
        else:
            T = calibrate_thresholds({0: calib}, frac).lookup(0).threshold
            row["threshold"] = T
        for k in ranks:
            if T is None:
                d, _ = lanczos_svd(x, k, seed=seed)
                err = reconstruction_error(x, d)
            else:
                mt = multitrack_decompose(x, k, T, seed=seed)
                row["extracted_fraction"] = mt.fraction
                err = float(np.linalg.norm(x - mt.reconstruct()) / np.linalg.norm(x))
            row[f"error_rank{k}"] = err
        rows.append(row)
    return rows


def sweep(vary: str, values: Sequence, fixed: Mapping | None = None) -> list[dict]:
    """One row per value of ``vary``; other settings come from ``fixed``.

    ``fixed`` may carry ``model``, ``plan``, ``hw`` and ``baseline`` objects.
    """
    if vary not in SWEEP_KEYS:
        raise ParameterError(f"unknown sweep key {vary!r}; expected one of {', '.join(SWEEP_KEYS)}")
    values = list(values)
    if not values:
        raise ParameterError("sweep needs at least one value")
    fixed = dict(fixed or {})
    model = fixed.get("model") or ModelPlan()
    plan = fixed.get("plan") or DecompPlan(TABLE_LAYER_SETS[0], rank=10)
    hw = fixed.get("hw") or HardwareConfig()
    cfg = fixed.get("baseline") or BaselineConfig()
    rows = []
    if vary == "f":
        dims = {"S": model.S, "H": model.H}
        for f in values:
            f = int(f)
            row = dcomsim.expansion_sweep(dims, plan.rank, [f], hw)[0]
            row["seconds"] = dcomsim.simulate_lanczos(dims, plan.rank, f, hw).seconds
            rows.append(row)
    elif vary == "rank":
        for k in values:
            rep = estimate_plan(model, _replace(plan, rank=int(k)), hw, cfg)
            rows.append({"rank": int(k), **_report_row(rep)})
    elif vary == "layers":
        for v in values:
            ids = parse_layer_set(v) if isinstance(v, str) else tuple(v)
            rep = estimate_plan(model, _replace(plan, decomposed_layer_ids=ids), hw, cfg)
            rows.append({"layers": " ".join(map(str, ids)), "num_layers": len(ids), **_report_row(rep)})
    else:
        rows = outlier_sweep_rows(values, seed=int(fixed.get("seed", 0)))
    return rows


def _replace(plan: DecompPlan, **kw) -> DecompPlan:
    return DecompPlan.from_dict({**plan.to_dict(), **kw})


def load_source(source) -> np.ndarray:
    """A matrix file, or a synthetic spec ``kind:ROWSxCOLS[:seed]`` with kind flat|decay|planted."""
    text = str(source)
    m = re.fullmatch(r"(flat|decay|planted):(\d+)x(\d+)(?::(\d+))?", text)
    if m:
        kind, rows, cols = m.group(1), int(m.group(2)), int(m.group(3))
        seed = int(m.group(4) or 0)
        n = min(rows, cols)
        return spectrum_matrix(rows, cols, named_spectrum(kind, n, rank=max(1, n // 8)), seed)
    path = Path(text)
    if not path.exists():
        raise FileNotFoundError(f"{text}: no such matrix file (or synthetic spec kind:ROWSxCOLS)")
    return load_matrix(path)


CONVERGENCE_COLUMNS = ("rank", "effective_rank", "iterations", "lanczos_error", "oracle_error",
                       "flops_matvec", "flops_reorth_u", "flops_reorth_v", "flops_normalize",
                       "flops_total", "reorth_share")


def run_convergence_bench(source, ranks, outdir=None, seed: int = 0) -> str:
    """Convergence table as CSV; with ``outdir`` also one trace CSV per rank."""
    a = load_source(source)
    rows, traces = convergence_study(a, ranks, seed=seed)
    text = rows_to_csv(rows, CONVERGENCE_COLUMNS)
    if outdir is not None:
        out = Path(outdir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "convergence.csv").write_text(text)
        for k, trace in traces.items():
            write_trace_csv(trace, out / f"trace_rank{k}.csv")
    return text
