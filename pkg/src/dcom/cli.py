"""Command-line entry point.

Tabular output goes to stdout as CSV with a header row. Failures exit
nonzero with a JSON error object on stderr.
"""
from __future__ import annotations

import argparse
import json
import re
import sys
from pathlib import Path

import numpy as np

from . import harness
from .dcomsim import BaselineConfig, HardwareConfig
from .errors import DcomError, ParameterError
from .lanczos import lanczos_svd, reconstruction_error
from .matio import load_matrix, write_csv_matrix, write_dcm
from .outlier import ThresholdTable, calibrate_thresholds, extract_outlier_channels, multitrack_decompose

EXIT_USAGE = 2
EXIT_DOMAIN = 3
EXIT_IO = 4


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_decompose(args) -> None:
    a = load_matrix(args.matrix)
    row = {"rows": a.shape[0], "cols": a.shape[1], "rank": args.rank}
    if args.outliers:
        if args.threshold is not None:
            T, c = args.threshold, args.count_fraction
        elif args.thresholds:
            entry = ThresholdTable.load(args.thresholds).lookup(args.layer)
            T, c = entry.threshold, entry.count_fraction
        else:
            raise ParameterError("--outliers needs --thresholds FILE or --threshold T")
        mt = multitrack_decompose(a, args.rank, T, c, eps=args.eps, seed=args.seed)
        d = mt.residual
        err = float(np.linalg.norm(a - mt.reconstruct()) / max(np.linalg.norm(a), np.finfo(float).tiny))
        row.update(effective_rank=d.r1, rel_error=err, threshold=T, extracted_channels=mt.m,
                   outlier_fraction=mt.fraction)
        outlier_idx, outlier_cols = mt.outlier_idx, mt.outlier_cols
    else:
        d, _ = lanczos_svd(a, args.rank, eps=args.eps, seed=args.seed)
        row.update(effective_rank=d.r1, rel_error=reconstruction_error(a, d), threshold="",
                   extracted_channels=0, outlier_fraction=0.0)
        outlier_idx = outlier_cols = None
    s = d.singular_values
    for i in range(args.rank):
        row[f"sigma_{i + 1}"] = float(s[i]) if i < s.size else 0.0
    if args.save:
        prefix = Path(args.save)
        write_dcm(f"{prefix}_U.dcm", d.U)
        write_csv_matrix(f"{prefix}_S.csv", np.atleast_2d(s) if s.size else np.zeros((1, 1)))
        write_dcm(f"{prefix}_V.dcm", d.V)
        if outlier_idx is not None:
            meta = {"outlier_idx": [int(i) for i in outlier_idx], "H": int(a.shape[1])}
            Path(f"{prefix}_outliers.json").write_text(json.dumps(meta, indent=2) + "\n")
            if outlier_cols.size:
                write_dcm(f"{prefix}_outlier_cols.dcm", outlier_cols)
    _emit(harness.rows_to_csv([row]), args.out)


def cmd_bench(args) -> None:
    _emit(harness.run_convergence_bench(args.source, args.ranks, args.outdir, seed=args.seed), args.out)


def _fixed(args) -> dict:
    fixed = {"seed": args.seed}
    if args.model:
        fixed["model"] = harness.ModelPlan.load(args.model)
    if args.plan:
        fixed["plan"] = harness.DecompPlan.load(args.plan)
    if args.hw:
        fixed["hw"] = HardwareConfig.load(args.hw)
    if args.baseline:
        fixed["baseline"] = BaselineConfig.load(args.baseline)
    return fixed


def _sweep_values(vary: str, values: list[str]) -> list:
    try:
        if vary in ("rank", "f"):
            return [int(v) for v in values]
        if vary == "outlier":
            return [float(v) for v in values]
    except ValueError as exc:
        raise ParameterError(f"bad --values for {vary}: {exc}") from None
    return [harness.parse_layer_set(v) for v in values]


def cmd_sweep(args) -> None:
    rows = harness.sweep(args.vary, _sweep_values(args.vary, args.values), _fixed(args))
    _emit(harness.rows_to_csv(rows), args.out)


def cmd_estimate(args) -> None:
    model = harness.ModelPlan.load(args.model)
    plan = harness.DecompPlan.load(args.plan)
    hw = HardwareConfig.load(args.hw)
    cfg = BaselineConfig.load(args.baseline) if args.baseline else BaselineConfig()
    rep = harness.estimate_plan(model, plan, hw, cfg)
    if args.report:
        Path(args.report).write_text(rep.to_json())
    _emit(rep.to_csv(), args.out)


_LAYER_FILE = re.compile(r"layer[_-]?(\d+)")


def _collect_samples(root: Path) -> dict:
    """``layer<ID>...`` files, or files inside ``layer<ID>`` directories."""
    if not root.is_dir():
        raise FileNotFoundError(f"{root}: samples directory not found")
    samples: dict[int, list] = {}
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        rel = path.relative_to(root)
        m = None
        for part in rel.parts:
            m = _LAYER_FILE.match(part)
            if m:
                break
        if m is None:
            continue
        samples.setdefault(int(m.group(1)), []).append(load_matrix(path))
    if not samples:
        raise ParameterError(f"{root}: no layer<ID> sample files found")
    return samples


def cmd_calibrate(args) -> None:
    samples = _collect_samples(Path(args.samples))
    table = calibrate_thresholds(samples, args.target_fraction, args.count_fraction)
    if args.table:
        table.save(args.table)
    rows = []
    for e in table.entries:
        fracs = [extract_outlier_channels(x, e.threshold, e.count_fraction).fraction for x in samples[e.layer]]
        rows.append({"layer": e.layer, "threshold": e.threshold, "count_fraction": e.count_fraction,
                     "samples": len(fracs), "mean_extracted_fraction": float(np.mean(fracs))})
    _emit(harness.rows_to_csv(rows), args.out)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dcom", description="Activation low-rank decomposition toolkit and accelerator model.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    d = sub.add_parser("decompose", help="rank-K Lanczos decomposition of one matrix")
    d.add_argument("matrix")
    d.add_argument("--rank", type=int, required=True)
    d.add_argument("--outliers", action="store_true", help="extract outlier channels first")
    d.add_argument("--thresholds", help="threshold table JSON from `calibrate`")
    d.add_argument("--layer", type=int, default=0, help="layer id to look up in the table")
    d.add_argument("--threshold", type=float, help="explicit threshold instead of a table")
    d.add_argument("--count-fraction", type=float, default=0.01)
    d.add_argument("--eps", type=float)
    d.add_argument("--save", metavar="PREFIX", help="write factors to PREFIX_{U,V}.dcm and PREFIX_S.csv")
    d.set_defaults(func=cmd_decompose)

    b = sub.add_parser("bench-convergence", help="Lanczos vs optimal truncation error per rank")
    b.add_argument("--source", default="decay:256x192",
                   help="matrix file or synthetic spec kind:ROWSxCOLS[:seed] (default %(default)s)")
    b.add_argument("--ranks", type=int, nargs="+", default=[1, 10, 20])
    b.add_argument("--outdir", help="also write convergence.csv and per-rank traces here")
    b.set_defaults(func=cmd_bench)

    s = sub.add_parser("sweep", help="one CSV row per value of a single parameter")
    s.add_argument("--vary", required=True, choices=harness.SWEEP_KEYS)
    s.add_argument("--values", nargs="+", required=True,
                   help="ints for rank/f, floats for outlier, comma lists for layers")
    for flag in ("--model", "--plan", "--hw", "--baseline"):
        s.add_argument(flag)
    s.set_defaults(func=cmd_sweep)

    e = sub.add_parser("estimate", help="end-to-end cost of a decomposition plan")
    e.add_argument("--model", required=True)
    e.add_argument("--plan", required=True)
    e.add_argument("--hw", required=True)
    e.add_argument("--baseline")
    e.add_argument("--report", help="write the full JSON report here")
    e.set_defaults(func=cmd_estimate)

    c = sub.add_parser("calibrate", help="per-layer outlier thresholds from sample activations")
    c.add_argument("--samples", required=True)
    c.add_argument("--target-fraction", type=float, required=True)
    c.add_argument("--count-fraction", type=float, default=0.01)
    c.add_argument("--table", help="write the threshold table JSON here")
    c.set_defaults(func=cmd_calibrate)

    for sp in (d, b, s, e, c):
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", help="write CSV here instead of stdout")
    return p


def _fail(payload: dict, code: int) -> int:
    sys.stderr.write(json.dumps(payload, sort_keys=True) + "\n")
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        args.func(args)
    except _UsageError as exc:
        return _fail({"error": "usage_error", "message": str(exc)}, EXIT_USAGE)
    except DcomError as exc:
        return _fail(exc.to_dict(), EXIT_DOMAIN)
    except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
        kind = "io_error" if isinstance(exc, OSError) else "config_error"
        return _fail({"error": kind, "message": str(exc)}, EXIT_IO)
    return 0


if __name__ == "__main__":
    sys.exit(main())
