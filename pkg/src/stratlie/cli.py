"""
Command-line interface.

Subcommands::

    check      structural assumptions, dimensions and the critical exponent
    classify   Métivier / Heisenberg-type classification
    decompose  spectral decomposition of J_mu at one frequency
    exponent   exact exponent arithmetic
    kernel     sample a multiplier kernel on a grid (CSV plus JSON sidecar)
    verify     run one numerical experiment
    report     re-render saved experiment reports

Exit status is 0 on success or a passing verdict, 1 on usage errors and 2
on numerical failures or any verdict other than pass.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import sys
import time
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import verify as V
from .group import (
    Grid,
    GroupSpecError,
    group_to_spec,
    parse_builtin,
    parse_group_spec,
    shared_center_reiter,
)
from .kernels import (
    Multiplier,
    QuadratureSpec,
    ScalePartition,
    cap_partition,
    evaluate_kernel,
)
from .spectral import (
    TOL_CLUSTER,
    TOL_PROJ,
    ClusteringError,
    check_assumption_A,
    check_assumption_B,
    classify_group,
    critical_exponent,
    exponents,
    spectral_decompose,
)
from .sphere import DEFAULT_SEED

__all__ = ["main", "build_parser"]

EXPERIMENTS = ("plancherel", "weighted-slope", "sobolev", "propagation", "localization",
               "restriction")


class UsageError(Exception):
    pass


# ----------------------------------------------------------------------------
# argument helpers


def _floats(text: str) -> list[float]:
    try:
        return [float(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _ints(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _fraction(text: str) -> Fraction:
    try:
        return Fraction(text)
    except (ValueError, ZeroDivisionError):
        raise argparse.ArgumentTypeError(f"expected a rational number, got {text!r}")


def _group_args(p: argparse.ArgumentParser, required: bool = True) -> None:
    src = p.add_mutually_exclusive_group(required=required)
    src.add_argument("--builtin", metavar="FAMILY:PARAMS",
                     help="built-in group, e.g. heisenberg:1, n32_glued:2, heisenberg_reiter:1,2, "
                          "shared_center_reiter")
    src.add_argument("--group", metavar="FILE", type=Path, help="JSON group spec")


def _output_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--format", choices=("json", "text", "csv"), default="json")
    p.add_argument("--out", type=Path, help="write output here instead of stdout")


def _multiplier_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--bump", type=_floats, default=[0.5, 2.0], metavar="A,B",
                   help="canonical bump supported on [A, B] (default 0.5,2)")


def _quad_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--quad", metavar="JSON",
                   help='quadrature spec, e.g. {"radial": 32, "sphere": 32, "xi": 24}')


def _load_group(args):
    if args.builtin:
        if args.builtin.strip() == "shared_center_reiter":
            return shared_center_reiter()
        try:
            return parse_builtin(args.builtin)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    try:
        text = args.group.read_text()
    except OSError as exc:
        raise UsageError(f"cannot read group file: {exc}") from None
    try:
        return parse_group_spec(text)
    except GroupSpecError as exc:
        raise UsageError(str(exc)) from None


def _multiplier(args) -> Multiplier:
    if len(args.bump) != 2 or not 0 <= args.bump[0] < args.bump[1]:
        raise UsageError("--bump needs two numbers 0 <= A < B")
    return Multiplier.canonical_bump(*args.bump)


def _quad(args) -> QuadratureSpec | None:
    if not getattr(args, "quad", None):
        return None
    try:
        return QuadratureSpec.from_json(args.quad)
    except (ValueError, TypeError) as exc:
        raise UsageError(f"bad --quad: {exc}") from None


def _cap(g, args):
    if args.delta is None:
        return None
    if not 0 < args.delta <= np.pi:
        raise UsageError("--delta must lie in (0, pi]")
    part = cap_partition(g.d2, args.delta, args.seed)
    if args.cap is not None and not 0 <= args.cap < len(part):
        raise UsageError(f"--cap must lie in [0, {len(part)})")
    return part, args.cap


# ----------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="stratlie",
                                 description="Spectral multipliers on two-step stratified groups.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("check", help="assumptions, dimensions and critical exponent")
    _group_args(p)
    p.add_argument("--samples", type=int, default=500)
    p.add_argument("--tol-proj", type=float, default=TOL_PROJ)
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    _output_args(p)

    p = sub.add_parser("classify", help="Métivier / Heisenberg-type classification")
    _group_args(p)
    p.add_argument("--samples", type=int, default=500)
    p.add_argument("--tol-proj", type=float, default=TOL_PROJ)
    _output_args(p)

    p = sub.add_parser("decompose", help="spectral decomposition of J_mu")
    _group_args(p)
    p.add_argument("--mu", type=_floats, required=True, metavar="M1,M2,...")
    p.add_argument("--tol-cluster", type=float, default=TOL_CLUSTER)
    _output_args(p)

    p = sub.add_parser("exponent", help="exact exponent arithmetic")
    p.add_argument("--dbar", type=int, required=True, help="nondegenerate first-layer dimension")
    p.add_argument("--d2", type=int, required=True)
    p.add_argument("--p", type=_fraction, help="also tabulate exponents at this p")
    p.add_argument("--d1", type=int, help="first-layer dimension (default: dbar)")
    p.add_argument("--variant", choices=("derived", "printed"), default="derived")
    _output_args(p)

    p = sub.add_parser("kernel", help="sample a multiplier kernel on a grid")
    _group_args(p)
    _multiplier_args(p)
    _quad_args(p)
    p.add_argument("--ell", type=int, default=0)
    p.add_argument("--delta", type=float, help="cap size; omit for no angular cutoff")
    p.add_argument("--cap", type=int, default=0, help="cap index")
    p.add_argument("--grid", type=_floats, required=True, metavar="XH,NX,UH,NU",
                   help="symmetric grid [-XH,XH]^d1 x [-UH,UH]^d2 with NX and NU nodes per axis")
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.add_argument("--out", type=Path, required=True, help="CSV path; metadata goes to PATH.json")

    p = sub.add_parser("verify", help="run a numerical experiment")
    p.add_argument("experiment", choices=EXPERIMENTS)
    _group_args(p, required=False)
    _multiplier_args(p)
    _quad_args(p)
    p.add_argument("--ell", type=int, help="dyadic level (localization: calibrated default)")
    p.add_argument("--ells", type=_ints, help="levels for sweeps, e.g. 0,1,2,3,4")
    p.add_argument("--iota", type=int, help="propagation piece (localization: calibrated default)")
    p.add_argument("--iotas", type=_ints, help="several pieces: report the drift across them")
    p.add_argument("--delta", type=float)
    p.add_argument("--cap", type=int, default=0)
    p.add_argument("--alpha", type=float, default=0.0)
    p.add_argument("--law", choices=("stated", "scaling"), default="stated")
    p.add_argument("--s", type=float, default=1.0, help="Sobolev order")
    p.add_argument("--c", type=float, help="ball radius factor (default: calibrated)")
    p.add_argument("--C", type=float, help="localization constant (default: calibrated)")
    p.add_argument("--layer", choices=("first", "second"), default="first")
    p.add_argument("--gamma", type=float)
    p.add_argument("--force", action="store_true",
                   help="measure the second layer even when kernel vectors do not commute")
    p.add_argument("--p", type=_fraction, default=Fraction(1))
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    _output_args(p)

    p = sub.add_parser("report", help="re-render saved JSON experiment reports")
    p.add_argument("files", type=Path, nargs="+")
    _output_args(p)
    return ap


# ----------------------------------------------------------------------------
# commands


def _cmd_check(args):
    g = _load_group(args)
    a = check_assumption_A(g, args.samples, args.tol_proj)
    b = check_assumption_B(g, args.samples, args.tol_proj)
    cls = classify_group(g, args.samples, args.tol_proj)
    dbar1 = None if cls.r0 is None else g.d1 - cls.r0
    try:
        pc = critical_exponent(dbar1, g.d2) if dbar1 is not None else None
    except ValueError:
        pc = None
    doc = {
        "group": g.name or group_to_spec(g),
        "d1": g.d1, "d2": g.d2, "Q": g.Q,
        "assumptionA": a.to_dict(), "assumptionB": b.to_dict(),
        "r0": cls.r0, "dbar1": dbar1,
        "pCritical": None if pc is None else _frac_str(pc),
    }
    ok = a.holds and b.holds
    return doc, 0 if ok else 2, _check_text


def _frac_str(v: Fraction) -> str:
    return str(v.numerator) if v.denominator == 1 else f"{v.numerator}/{v.denominator}"


def _check_text(doc) -> str:
    lines = [f"group        {doc['group']}",
             f"dimensions   d1={doc['d1']} d2={doc['d2']} Q={doc['Q']}",
             f"assumption A {'holds' if doc['assumptionA']['holds'] else 'fails'}",
             f"assumption B {'holds' if doc['assumptionB']['holds'] else 'fails'}",
             f"r0           {doc['r0']}",
             f"dbar1        {doc['dbar1']}",
             f"pCritical    {doc['pCritical']}"]
    return "\n".join(lines) + "\n"


def _cmd_classify(args):
    g = _load_group(args)
    doc = {"group": g.name or group_to_spec(g),
           **classify_group(g, args.samples, args.tol_proj).to_dict()}
    return doc, 0, None


def _cmd_decompose(args):
    g = _load_group(args)
    mu = np.asarray(args.mu, dtype=float)
    if mu.size != g.d2:
        raise UsageError(f"--mu needs {g.d2} components, got {mu.size}")
    if not np.any(mu):
        raise UsageError("--mu must be nonzero")
    try:
        d = spectral_decompose(g, mu, args.tol_cluster)
    except ClusteringError as exc:
        return {"error": str(exc)}, 2, None
    doc = {"group": g.name or group_to_spec(g), **d.to_dict()}
    doc["P0"] = np.round(d.P0, 15).tolist()
    return doc, 0, None


def _cmd_exponent(args):
    try:
        pc = critical_exponent(args.dbar, args.d2, args.variant)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    doc = {"dbar1": args.dbar, "d2": args.d2, "variant": args.variant,
           "pCritical": _frac_str(pc), "pCriticalValue": float(pc)}
    if args.p is not None:
        d1 = args.d1 or args.dbar
        try:
            doc["table"] = exponents(args.p, d1, args.d2, d1 - args.dbar).to_dict()
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    return doc, 0, None


def _cmd_kernel(args):
    g = _load_group(args)
    if len(args.grid) != 4:
        raise UsageError("--grid needs XH,NX,UH,NU")
    xh, nx, uh, nu = args.grid
    grid = Grid.symmetric(g.d1, g.d2, xh, int(nx), uh, int(nu))
    ks = evaluate_kernel(g, _multiplier(args), ScalePartition(), args.ell, _cap(g, args), grid,
                         _quad(args))
    timing = ks.metadata.pop("timing")
    args.out.parent.mkdir(parents=True, exist_ok=True)
    with open(args.out, "w", newline="") as fh:
        ks.to_csv(fh)
    meta_path = args.out.with_name(args.out.name + ".json")
    meta_path.write_text(ks.metadata_json())
    _timing_sidecar(args.out, timing["seconds"])
    return None, 0, None


def _default_group(args, experiment):
    defaults = {"plancherel": "heisenberg:1", "weighted-slope": "heisenberg:1",
                "propagation": "heisenberg:1", "restriction": "heisenberg:1",
                "localization": "n32_glued:1" if args.layer == "first" else "heisenberg_reiter:1,2"}
    if args.builtin is None and args.group is None:
        if experiment == "sobolev":
            return None
        args.builtin = defaults[experiment]
    return _load_group(args)


def _cmd_verify(args):
    g = _default_group(args, args.experiment)
    F = _multiplier(args)
    e = args.experiment
    if e == "localization":
        gold = V.GOLDENS["localization"][args.layer].get(V._group_id(g), {})
        args.ell = gold.get("ell", 0) if args.ell is None else args.ell
        args.iota = gold.get("iota", 0) if args.iota is None else args.iota
    args.ell = 0 if args.ell is None else args.ell
    args.iota = 0 if args.iota is None else args.iota
    if e == "plancherel":
        rep = V.plancherel_crosscheck(g, F, None, args.ell, _cap(g, args), quad=_quad(args))
    elif e == "weighted-slope":
        ells = args.ells or list(range(5))
        rep = V.weighted_plancherel_slope(g, F, None, args.alpha, ells, args.law)
    elif e == "sobolev":
        rep = V.sobolev_embedding_check(F, args.s)
    elif e == "propagation":
        if args.iotas:
            rep = V.propagation_covariance(g, F, args.iotas, args.c)
        else:
            rep = V.propagation_support_fraction(g, F, args.iota, args.c)
    elif e == "localization":
        rep = V.localization_profile(g, args.layer, F, None, args.ell, args.iota, args.cap,
                                     args.gamma, args.C, args.force)
    else:
        ells = args.ells or list(range(5))
        part = cap_partition(g.d2, args.delta, args.seed) if args.delta is not None else None
        rep = V.restriction_ratio_experiment(g, F, None, ells, part, args.p, args.trials,
                                             seed=args.seed)
    return rep, 0 if rep.verdict in ("pass", "info") else 2, None


def _cmd_report(args):
    reps = []
    for f in args.files:
        try:
            reps.append(json.loads(f.read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read report {f}: {exc}") from None
    return {"reports": reps}, 0 if all(r.get("verdict") in ("pass", "info") for r in reps) \
        else 2, _reports_text


def _reports_text(doc) -> str:
    out = []
    for r in doc["reports"]:
        out.append(f"{r.get('experiment')}: {str(r.get('verdict')).upper()}")
        for c in r.get("checks", []):
            out.append(f"  {c['name']:<32} {c['measured']!s:<24} {c['verdict']}")
    return "\n".join(out) + "\n"


def _timing_sidecar(out: Path | None, seconds: float) -> None:
    if out is None:
        return
    side = out.with_name(out.name + ".timing.json")
    side.write_text(json.dumps({"seconds": seconds}) + "\n")


def _render(doc, fmt: str, text_fn) -> str:
    if isinstance(doc, V.ExperimentReport):
        return {"json": doc.to_json, "text": doc.to_text, "csv": doc.to_csv}[fmt]()
    if fmt == "json":
        return json.dumps(V._jsonable(doc), sort_keys=True, indent=2) + "\n"
    if fmt == "text" and text_fn is not None:
        return text_fn(doc)
    flat = _flatten(doc)
    if fmt == "text":
        w = max(len(k) for k in flat) if flat else 0
        return "".join(f"{k:<{w}}  {v}\n" for k, v in flat.items())
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["key", "value"])
    for k, v in flat.items():
        wr.writerow([k, v])
    return buf.getvalue()


def _flatten(doc, prefix: str = "") -> dict:
    """Dotted-key view of nested dictionaries; lists are kept as JSON."""
    if isinstance(doc, dict):
        out = {}
        for k, v in doc.items():
            out.update(_flatten(v, f"{prefix}{k}."))
        return out
    v = V._jsonable(doc)
    return {prefix.rstrip("."): json.dumps(v) if isinstance(v, list) else v}


_COMMANDS = {"check": _cmd_check, "classify": _cmd_classify, "decompose": _cmd_decompose,
             "exponent": _cmd_exponent, "kernel": _cmd_kernel, "verify": _cmd_verify,
             "report": _cmd_report}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    t0 = time.perf_counter()
    try:
        doc, code, text_fn = _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"stratlie: error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"stratlie: numerical failure: {exc}", file=sys.stderr)
        return 2
    if doc is None:
        return code
    text = _render(doc, args.format, text_fn)
    out = getattr(args, "out", None)
    if out is not None:
        out.parent.mkdir(parents=True, exist_ok=True)
        tmp = out.with_name(out.name + ".tmp")
        tmp.write_text(text)
        tmp.replace(out)
        seconds = doc.runtime if isinstance(doc, V.ExperimentReport) else \
            time.perf_counter() - t0
        _timing_sidecar(out, seconds)
    else:
        sys.stdout.write(text)
    return code


if __name__ == "__main__":
    sys.exit(main())
