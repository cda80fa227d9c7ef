"""Command-line front end: ``pivsem fit | moments | simulate``.

Exit status: 0 success, 1 estimation failure, 2 input error.
"""

from __future__ import annotations

import argparse
import io
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd

from . import __version__
from .modelir import IdentificationError, InstrumentError, ModelSpec, ModelSyntaxError, SpecificationError, parse_model
from .moments1 import CategoryCollapseError, PairwiseError, Stage1Error, assemble_omega
from .pivfit import (
    EstimationError,
    FitResult,
    MomentInput,
    build_metas,
    dumps_moments,
    fit_moments,
    loads_moments,
    resolve_reparam,
)
from .reparam import ReparamError, transform_moments
from .simlab import ConfigError, StudySummary, load_config, benchmark_design, run_study

log = logging.getLogger("pivsem")

EXIT_OK, EXIT_ESTIMATION, EXIT_INPUT = 0, 1, 2


class InputError(Exception):
    pass


# -- parsing helpers --------------------------------------------------------------

def parse_types(text: str | None) -> dict[str, str]:
    """``"y6=ordinal,y7=ordinal,y1=continuous"`` -> mapping."""
    out: dict[str, str] = {}
    if not text:
        return out
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        name, sep, kind = item.partition("=")
        kind = kind.strip().lower()
        if not sep or kind not in ("ordinal", "continuous"):
            raise InputError(f"--types entry {item!r}: expected name=ordinal or name=continuous")
        out[name.strip()] = kind
    return out


def parse_anchors(text: str | None) -> dict[str, tuple[tuple[int, float], ...]]:
    """``"madeg:1=12,3=16;padeg:1=12,3=16"`` -> {name: ((k, value), ...)}."""
    out: dict[str, tuple[tuple[int, float], ...]] = {}
    if not text:
        return out
    for block in text.split(";"):
        block = block.strip()
        if not block:
            continue
        name, sep, rest = block.partition(":")
        if not sep:
            raise InputError(f"--anchors entry {block!r}: expected name:k=value[,k=value]")
        pairs = []
        for pv in rest.split(","):
            k, sep2, v = pv.partition("=")
            try:
                pairs.append((int(k), float(v)))
            except ValueError:
                raise InputError(f"--anchors entry {block!r}: bad pair {pv!r}") from None
            if not sep2:
                raise InputError(f"--anchors entry {block!r}: bad pair {pv!r}")
        out[name.strip()] = tuple(pairs)
    return out


def read_model(path: str) -> ModelSpec:
    p = Path(path)
    if not p.is_file():
        raise InputError(f"model file not found: {path}")
    return parse_model(p.read_text(encoding="utf-8"))


def read_data(path: str, needed: Sequence[str], ordinal: Sequence[str]) -> pd.DataFrame:
    p = Path(path)
    if not p.is_file():
        raise InputError(f"data file not found: {path}")
    try:
        df = pd.read_csv(p, encoding="utf-8")
    except (pd.errors.ParserError, UnicodeDecodeError, pd.errors.EmptyDataError) as exc:
        raise InputError(f"{path}: cannot read CSV ({exc})") from None
    missing = [n for n in needed if n not in df.columns]
    if missing:
        raise InputError(f"data has no column(s) {', '.join(missing)} (referenced by the model)")
    df = df[list(needed)]
    for n in needed:
        col = pd.to_numeric(df[n], errors="coerce")
        if col.isna().any():
            bad = int(col.isna().sum())
            raise InputError(f"column {n}: {bad} missing or non-numeric value(s); complete cases are required")
        df[n] = col
    for n in ordinal:
        v = df[n].to_numpy(float)
        if np.any(v < 0) or np.any(v != np.round(v)):
            raise InputError(f"column {n}: ordinal codes must be nonnegative integers")
    return df


def _ordinal_names(model: ModelSpec, types: dict[str, str]) -> list[str]:
    unknown = [n for n in types if n not in model.observed]
    if unknown:
        raise InputError(f"--types names variable(s) not in the model: {', '.join(unknown)}")
    ords = {n for n, k in types.items() if k == "ordinal"} | set(model.thresholds)
    clash = [n for n in model.thresholds if types.get(n) == "continuous"]
    if clash:
        raise InputError(f"variable(s) {', '.join(clash)} have thresholds in the model but were declared continuous")
    return [n for n in model.observed if n in ords]


def moments_from_args(args, model: ModelSpec) -> MomentInput:
    types = parse_types(args.types)
    ordinal = _ordinal_names(model, types)
    data = read_data(args.data, model.observed, ordinal)
    metas = build_metas(model, ordinal)
    try:
        stats = assemble_omega(data, metas, acov="sandwich")
    except (CategoryCollapseError,) as exc:
        raise InputError(str(exc)) from None
    except PairwiseError as exc:
        raise EstimationError("moments", str(exc)) from None
    except Stage1Error as exc:
        raise InputError(str(exc)) from None
    try:
        spec = resolve_reparam(model, stats.metas, args.parameterization, parse_anchors(args.anchors) or None)
        rs = transform_moments(stats, spec)
    except ReparamError as exc:
        raise InputError(str(exc)) from None
    except ValueError as exc:
        raise InputError(str(exc)) from None
    return MomentInput.from_reparam(rs)


# -- reporting ---------------------------------------------------------------------

def _sorted_rows(res: FitResult, model: ModelSpec):
    def key(r):
        lab = r.label
        kind = lab[0]
        if kind == "lambda":
            return (0, model.lat_index(lab[2]), model.obs_index(lab[1]))
        if kind == "beta":
            return (1, model.lat_index(lab[1]), model.lat_index(lab[2]))
        if kind == "tau":
            return (2, model.obs_index(lab[1]), lab[2])
        if kind == "alpha_eta":
            return (3, model.lat_index(lab[1]), 0)
        if kind == "alpha_y":
            return (4, model.obs_index(lab[1]), 0)
        if kind == "psi":
            return (5, model.lat_index(lab[2]), model.lat_index(lab[1]))
        return (6, model.obs_index(lab[2]), model.obs_index(lab[1]))

    return sorted(res.params, key=key)


def _fmt(v, width=10, digits=3) -> str:
    if v is None or (isinstance(v, float) and not np.isfinite(v)):
        return " " * width
    return f"{v:{width}.{digits}f}"


def report_table(res: FitResult, model: ModelSpec) -> str:
    out = io.StringIO()
    mi = res.moments
    if mi is not None and mi.n_obs:
        out.write(f"Observations: {mi.n_obs}\n")
    out.write(f"{'Parameter':<28}{'Est.':>10}{'Std.Err.':>10}{'z':>10}{'R2_S':>10}\n")
    for r in _sorted_rows(res, model):
        se = r.se
        z = r.z
        out.write(f"{r.name:<28}{_fmt(r.est)}{_fmt(se)}{_fmt(z, digits=2)}{_fmt(r.r2_shea, digits=2)}\n")
    out.write("\nEquations and model-implied instruments\n")
    for eq in res.equations:
        r2 = res.shea.get(eq.label, np.empty(0))
        r2s = ", ".join(f"{n}: {v:.2f}" for n, v in zip(eq.regressors, r2))
        out.write(f"  {eq.label}\n    MIIVs: {', '.join(eq.instruments)}\n")
        if r2s:
            out.write(f"    Shea R2: {r2s}\n")
    for w in res.warnings:
        out.write(f"WARNING: {w}\n")
    return out.getvalue()


def report_json(res: FitResult, model: ModelSpec) -> str:
    obj = res.to_json()
    obj["n_obs"] = res.moments.n_obs if res.moments is not None else None
    return json.dumps(obj, indent=1, allow_nan=False)


def report_csv(res: FitResult, model: ModelSpec) -> str:
    rows = [
        {"parameter": r.name, "est": r.est, "se": r.se, "z": r.z, "r2_shea": r.r2_shea, "fixed": r.fixed}
        for r in _sorted_rows(res, model)
    ]
    return pd.DataFrame(rows).to_csv(index=False, float_format="%.17g")


REPORTERS = {"table": report_table, "json": report_json, "csv": report_csv}


def _emit(text: str, path: str | None) -> None:
    if path:
        Path(path).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


# -- subcommands ---------------------------------------------------------------------

def cmd_fit(args) -> int:
    model = read_model(args.model)
    if args.from_moments:
        if args.data:
            raise InputError("give either --data or --from-moments, not both")
        p = Path(args.from_moments)
        if not p.is_file():
            raise InputError(f"moment bundle not found: {args.from_moments}")
        try:
            mi = loads_moments(p.read_text(encoding="utf-8"))
        except (ValueError, KeyError) as exc:
            raise InputError(f"{args.from_moments}: {exc}") from None
        missing = [n for n in model.observed if n not in mi.names]
        if missing:
            raise InputError(f"moment bundle lacks variable(s) {', '.join(missing)} (referenced by the model)")
    else:
        if not args.data:
            raise InputError("fit needs --data or --from-moments")
        mi = moments_from_args(args, model)
        if args.moments_out:
            Path(args.moments_out).write_text(dumps_moments(mi), encoding="utf-8")
    res = fit_moments(model, mi, weight=args.weight)
    _emit(REPORTERS[args.format](res, model), args.out)
    for w in res.warnings:
        print(f"warning: {w}", file=sys.stderr)
    return EXIT_OK


def cmd_moments(args) -> int:
    model = read_model(args.model)
    mi = moments_from_args(args, model)
    if args.format == "json":
        _emit(dumps_moments(mi), args.out)
    elif args.format == "csv":
        df = pd.DataFrame(mi.sigma, index=mi.names, columns=mi.names)
        _emit(df.to_csv(float_format="%.17g"), args.out)
    else:
        buf = io.StringIO()
        buf.write("Sigma*\n" + pd.DataFrame(mi.sigma, index=mi.names, columns=mi.names).round(4).to_string() + "\n")
        buf.write("mu*\n" + pd.Series(mi.mu, index=mi.names).round(4).to_string() + "\n")
        if mi.thresholds:
            buf.write("thresholds\n")
            for n, t in mi.thresholds.items():
                buf.write(f"  {n}: {' '.join(f'{v:.4f}' for v in t)}\n")
        _emit(buf.getvalue(), args.out)
    return EXIT_OK


def cmd_simulate(args) -> int:
    if args.config:
        if not Path(args.config).is_file():
            raise InputError(f"config file not found: {args.config}")
        cfg = load_config(args.config)
    else:
        cfg = benchmark_design()
    over = {}
    if args.reps is not None:
        over["reps"] = args.reps
    if args.seed is not None:
        over["seed"] = args.seed
    if args.sizes:
        try:
            over["sample_sizes"] = tuple(int(x) for x in args.sizes.split(","))
        except ValueError:
            raise InputError(f"--sizes {args.sizes!r}: expected comma-separated integers") from None
    if args.npd_policy != "both":
        over["npd_policies"] = (args.npd_policy,)
    if args.parameterization:
        over["parameterizations"] = (args.parameterization,)
    if over:
        cfg = type(cfg).from_json({**cfg.to_json(), **{k: list(v) if isinstance(v, tuple) else v for k, v in over.items()}})
    summary = run_study(cfg, workers=args.workers)
    text = summary_text(summary, args.format)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        summary.table.to_csv(out / "summary.csv", index=False, float_format="%.10g")
        summary.rates.to_csv(out / "rates.csv", index=False, float_format="%.10g")
        summary.params.to_csv(out / "parameters.csv", index=False, float_format="%.10g")
        summary.shea.to_csv(out / "shea.csv", index=False, float_format="%.10g")
        (out / "bias_table.txt").write_text(summary.to_text(), encoding="utf-8")
    sys.stdout.write(text)
    return EXIT_OK


def summary_text(summary: StudySummary, fmt: str) -> str:
    if fmt == "csv":
        return summary.table.to_csv(index=False, float_format="%.10g")
    if fmt == "json":
        obj = {
            "schema_version": 1,
            "groups": json.loads(summary.table.to_json(orient="records")),
            "rates": json.loads(summary.rates.to_json(orient="records")),
        }
        return json.dumps(obj, indent=1) + "\n"
    return summary.to_text()


# -- entry point ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="pivsem", description="MIIV/PIV estimation of SEMs with mixed ordinal and continuous variables")
    ap.add_argument("--version", action="version", version=f"pivsem {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, need_data=True):
        p.add_argument("--model", required=True, help="model syntax file")
        p.add_argument("--data", required=need_data, help="CSV file with a header row")
        p.add_argument("--types", help="variable types, e.g. y6=ordinal,y7=ordinal (default continuous)")
        p.add_argument("--parameterization", choices=("standard", "alternative"), help="threshold parameterization")
        p.add_argument("--anchors", help="anchored thresholds, e.g. madeg:1=12,3=16;padeg:1=12,3=16")
        p.add_argument("--out", help="write output here instead of stdout")

    pf = sub.add_parser("fit", help="estimate a model")
    common(pf, need_data=False)
    pf.add_argument("--from-moments", help="moment bundle written by 'moments' or --moments-out")
    pf.add_argument("--moments-out", help="also write the moment bundle used for the fit")
    pf.add_argument("--format", choices=("table", "json", "csv"), default="table")
    pf.add_argument("--weight", choices=("full", "diagonal", "identity"), default="full", help="weight for the variance step")
    pf.set_defaults(func=cmd_fit)

    pm = sub.add_parser("moments", help="stage-one (and reparameterized) moments only")
    common(pm)
    pm.add_argument("--format", choices=("table", "json", "csv"), default="json")
    pm.set_defaults(func=cmd_moments)

    ps = sub.add_parser("simulate", help="run a Monte Carlo study")
    ps.add_argument("--config", help="study config (JSON); default: bundled benchmark design")
    ps.add_argument("--reps", type=int)
    ps.add_argument("--seed", type=int)
    ps.add_argument("--sizes", help="comma-separated sample sizes")
    ps.add_argument("--parameterization", choices=("standard", "alternative"))
    ps.add_argument("--npd-policy", choices=("exclude", "include", "both"), default="both")
    ps.add_argument("--workers", type=int, default=None)
    ps.add_argument("--format", choices=("table", "json", "csv"), default="table")
    ps.add_argument("--out", help="directory for CSV summaries and the text table")
    ps.set_defaults(func=cmd_simulate)
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (InputError, ModelSyntaxError, SpecificationError, ConfigError) as exc:
        print(f"error [input]: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except EstimationError as exc:
        print(f"error {exc}", file=sys.stderr)
        return EXIT_ESTIMATION
    except (IdentificationError, InstrumentError) as exc:
        print(f"error [model]: {exc}", file=sys.stderr)
        return EXIT_ESTIMATION


if __name__ == "__main__":
    sys.exit(main())
