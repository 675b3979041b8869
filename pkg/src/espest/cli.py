"""Command-line front end: ``espest {estimate,test,region,profile,mc}``.

Results go to ``--output`` or standard output as JSON or CSV.  Exit status is
0 on success, 2 for bad input (arguments, files, data) and 3 for numerical
failures (no root, empty support, singular matrices).
"""

from __future__ import annotations

import argparse
import io
import sys

import numpy as np

from ._format import dumps
from .errors import EspError, InvalidInputError
from .esp_objective import EspProblem, profile, write_profile_csv
from .estimation import Restriction, estimate_constrained, estimate_esp, estimate_mm_et
from .inference import (
    alr_test,
    et_test,
    invert_confidence_region,
    lm_test,
    wald_test,
    write_region_csv,
)
from .moment_model import (
    Dataset,
    builtin_crra,
    builtin_hall_horowitz,
    builtin_location,
    read_csv,
)
from .simulation import McConfig, run_mc, write_mc_csv

EXIT_INPUT = 2
EXIT_NUMERIC = 3

MODELS = ("hall-horowitz", "crra", "location")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise InvalidInputError(message)


def parse_grid(text: str) -> np.ndarray:
    """``lo:hi:n`` -> ``n`` evenly spaced points, ``n >= 2`` and ``lo < hi``."""
    parts = text.split(":")
    if len(parts) != 3:
        raise InvalidInputError(f"grid must look like lo:hi:n, got {text!r}")
    try:
        lo, hi = float(parts[0]), float(parts[1])
        n = int(parts[2])
    except ValueError:
        raise InvalidInputError(f"grid must look like lo:hi:n, got {text!r}") from None
    if n < 2:
        raise InvalidInputError(f"grid needs at least 2 points, got {n}")
    if not (np.isfinite(lo) and np.isfinite(hi)) or lo >= hi:
        raise InvalidInputError(f"grid bounds must satisfy lo < hi, got {lo}, {hi}")
    return np.linspace(lo, hi, n)


def _vector(text: str) -> np.ndarray:
    try:
        return np.array([float(v) for v in text.split(",")], dtype=float)
    except ValueError:
        raise InvalidInputError(f"expected comma-separated numbers, got {text!r}") from None


def _restriction(items, m: int) -> Restriction:
    if not items:
        raise InvalidInputError("at least one --restrict idx=value is required")
    idx, vals = [], []
    for item in items:
        key, sep, val = item.partition("=")
        if not sep:
            raise InvalidInputError(f"restriction must look like idx=value, got {item!r}")
        try:
            idx.append(int(key))
            vals.append(float(val))
        except ValueError:
            raise InvalidInputError(f"restriction must look like idx=value, got {item!r}") from None
    return Restriction.fix(m, idx, vals)


def _model(args):
    name = args.model
    if name == "hall-horowitz":
        model = builtin_hall_horowitz()
    elif name == "crra":
        model = builtin_crra()
    elif name == "location":
        model = builtin_location()
    elif name == "external-spec":
        raise InvalidInputError(
            "external model specifications are not supported; build a MomentModel in Python instead"
        )
    else:
        raise InvalidInputError(
            f"unknown model {name!r}; built-in models are {', '.join(MODELS)}"
        )
    if args.lower is not None or args.upper is not None:
        lo = model.lower if args.lower is None else _vector(args.lower)
        hi = model.upper if args.upper is None else _vector(args.upper)
        model = model.with_box(lo, hi)
    return model


def _data(args, model) -> Dataset:
    if args.data is None:
        raise InvalidInputError("--data is required")
    try:
        data = read_csv(args.data)
    except OSError as exc:
        raise InvalidInputError(f"cannot read {args.data}: {exc.strerror or exc}") from None
    names = data.column_names or ()
    if model.name == "hall-horowitz" and {"x", "y"} <= set(names):
        data = Dataset(data.columns(["x", "y"]), ("x", "y"))
    model.design(data)  # validate columns and rows up front
    return data


def _starts(args):
    return [_vector(s) for s in args.start or ()]


def cmd_estimate(args) -> str:
    model = _model(args)
    data = _data(args, model)
    starts = _starts(args)
    if args.method in ("et", "mm"):
        res = estimate_mm_et(model, data, starts)
    else:
        res = estimate_esp(model, data, starts)
    tr = res.optimizer_trace
    return dumps({
        "method": res.method,
        "theta_hat": res.theta_hat,
        "std_errors": res.std_errors,
        "objective": res.objective_value,
        "trace": {
            "iterations": tr.iterations,
            "restarts": tr.restarts,
            "evaluations": tr.evaluations,
            "status": tr.status,
        },
    }) + "\n"


def cmd_test(args) -> str:
    model = _model(args)
    data = _data(args, model)
    restriction = _restriction(args.restrict, model.m)
    starts = _starts(args)
    prob = EspProblem(model, data)
    kinds = ("wald", "lm", "alr", "et") if args.kind == "all" else (args.kind,)
    unc = con = None
    if {"wald", "alr"} & set(kinds):
        unc = estimate_esp(model, data, starts, problem=prob)
    if {"lm", "alr", "et"} & set(kinds):
        con = estimate_constrained(model, data, restriction, starts, problem=prob)
    out = []
    for kind in kinds:
        if kind == "wald":
            r = wald_test(model, data, unc, restriction)
        elif kind == "lm":
            r = lm_test(model, data, con, restriction)
        elif kind == "alr":
            r = alr_test(prob.evaluate(unc.theta_hat), prob.evaluate(con.theta_hat), restriction.q)
        else:
            r = et_test(model, data, con)
        out.append(r.to_json())
    body = out[0] if len(out) == 1 else "[" + ", ".join(out) + "]"
    return body + "\n"


def cmd_region(args) -> str:
    model = _model(args)
    data = _data(args, model)
    grid = parse_grid(args.grid) if args.grid else None
    reg = invert_confidence_region(model, data, args.kind, args.level, grid, _starts(args))
    buf = io.StringIO()
    write_region_csv(reg, buf)
    spans = " U ".join(f"[{a:.6g}, {b:.6g}]" for a, b in reg.accepted_intervals) or "empty"
    print(f"{args.kind} {args.level:g} region: {spans}", file=sys.stderr)
    return buf.getvalue()


def cmd_profile(args) -> str:
    grid = parse_grid(args.grid)
    model = _model(args)
    if model.m != 1:
        raise InvalidInputError("profile takes a scalar-parameter model")
    data = _data(args, model)
    rows = profile(model, data, grid)
    buf = io.StringIO()
    write_profile_csv(rows, buf)
    return buf.getvalue()


def cmd_mc(args) -> str:
    try:
        sizes = [int(v) for v in args.T.split(",")] if args.T else [25, 50, 100, 200]
    except ValueError:
        raise InvalidInputError(f"--T expects comma-separated integers, got {args.T!r}") from None
    summaries = [
        run_mc(McConfig(sample_size=T, replications=args.reps, seed=args.seed))
        for T in sizes
    ]
    buf = io.StringIO()
    write_mc_csv(summaries, buf)
    return buf.getvalue()


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="espest", description="Empirical saddlepoint estimation and inference.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--model", required=True, help=f"one of {', '.join(MODELS)}")
        sp.add_argument("--data", help="CSV file with a header line")
        sp.add_argument("--lower", help="comma-separated lower parameter bounds")
        sp.add_argument("--upper", help="comma-separated upper parameter bounds")
        sp.add_argument("--start", action="append", help="start point, comma-separated (repeatable)")
        sp.add_argument("--output", "-o", help="output file (default: standard output)")

    sp = sub.add_parser("estimate", help="MM/ET or ESP point estimate (JSON)")
    common(sp)
    sp.add_argument("--method", choices=("et", "mm", "esp"), default="esp")
    sp.set_defaults(func=cmd_estimate)

    sp = sub.add_parser("test", help="Wald, LM, ALR or ET test of pinned parameters (JSON)")
    common(sp)
    sp.add_argument("--restrict", action="append", help="pin parameter idx to value: idx=value")
    sp.add_argument("--kind", choices=("wald", "lm", "alr", "et", "all"), default="all")
    sp.set_defaults(func=cmd_test)

    sp = sub.add_parser("region", help="confidence region by test inversion (CSV)")
    common(sp)
    sp.add_argument("--kind", choices=("alr", "alr-et"), default="alr")
    sp.add_argument("--level", type=float, default=0.95)
    sp.add_argument("--grid", help="lo:hi:n (default: 1024 points over the parameter box)")
    sp.set_defaults(func=cmd_region)

    sp = sub.add_parser("profile", help="objective decomposition and densities on a grid (CSV)")
    common(sp)
    sp.add_argument("--grid", required=True, help="lo:hi:n")
    sp.set_defaults(func=cmd_profile)

    sp = sub.add_parser("mc", help="Hall-Horowitz Monte-Carlo table (CSV)")
    sp.add_argument("--T", help="comma-separated sample sizes (default 25,50,100,200)")
    sp.add_argument("--reps", type=int, default=1000)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--output", "-o")
    sp.set_defaults(func=cmd_mc)
    return p


# flags whose values may start with "-" (negative bounds, grids, starts)
_VALUE_FLAGS = ("--grid", "--start", "--lower", "--upper", "--restrict")


def _fuse_values(argv):
    """Rewrite ``--grid -1:2:3`` as ``--grid=-1:2:3`` so argparse keeps the value."""
    out, it = [], iter(argv)
    for tok in it:
        if tok in _VALUE_FLAGS:
            nxt = next(it, None)
            out.append(tok if nxt is None else f"{tok}={nxt}")
        else:
            out.append(tok)
    return out


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = build_parser().parse_args(_fuse_values(argv))
        if getattr(args, "level", None) is not None and not 0.0 < args.level < 1.0:
            raise InvalidInputError(f"--level must lie in (0, 1), got {args.level}")
        text = args.func(args)
    except InvalidInputError as exc:
        print(f"espest: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except EspError as exc:
        print(f"espest: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    if args.output:
        try:
            with open(args.output, "w", newline="") as fh:
                fh.write(text)
        except OSError as exc:
            print(f"espest: error: cannot write {args.output}: {exc.strerror}", file=sys.stderr)
            return EXIT_INPUT
    else:
        sys.stdout.write(text)
    return 0


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
