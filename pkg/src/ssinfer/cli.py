"""Command-line interface.

Exit codes: 0 success, 2 bad input or unsupported request, 3 fit failure,
4 Monte Carlo experiment marked invalid.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
import warnings
from pathlib import Path

import numpy as np

from .eigenbasis import EigenSolverError
from .fitter import FitError, default_eigensystem, fit, select_lambda
from .inference import (UnsupportedError, local_lrt, plrt, plrt_composite, pointwise_ci,
                        scb, undersmoothed_lambda)
from .models import GaussianFamily, make_family
from .simharness import COVERAGE_GRID, ScenarioError, load_scenarios, reports_to_csv, run

EXIT_OK, EXIT_INPUT, EXIT_FIT, EXIT_INVALID = 0, 2, 3, 4


class InputError(Exception):
    pass


def read_csv(path):
    """Read a ``z,y`` file; errors name the offending data row (1-based)."""
    p = Path(path)
    if not p.is_file():
        raise InputError(f"input file {path} not found")
    z, y = [], []
    with p.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip().lower() for h in header] != ["z", "y"]:
            raise InputError(f"{path}: header must be 'z,y'")
        for row_no, row in enumerate(reader, start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 2:
                raise InputError(f"{path}: row {row_no} (line {row_no + 1}) has {len(row)} fields, expected 2")
            try:
                zi, yi = float(row[0]), float(row[1])
            except ValueError:
                raise InputError(f"{path}: row {row_no} (line {row_no + 1}) is not numeric: {row}") from None
            if not (math.isfinite(zi) and math.isfinite(yi)):
                raise InputError(f"{path}: row {row_no} (line {row_no + 1}) has a non-finite value")
            if not 0.0 <= zi <= 1.0:
                raise InputError(f"{path}: row {row_no} (line {row_no + 1}): z={zi} outside [0, 1]")
            z.append(zi)
            y.append(yi)
    if len(z) < 8:
        raise InputError(f"{path}: need at least 8 data rows, found {len(z)}")
    return np.array(z), np.array(y)


def _family(spec):
    spec = spec.strip()
    try:
        return make_family(json.loads(spec) if spec.startswith("{") else spec)
    except (ValueError, TypeError) as exc:
        raise InputError(f"bad --family: {exc}") from None


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, obj):
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _write_csv(path: Path, header, rows):
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([f"{v:.6g}" if isinstance(v, (float, np.floating)) else v for v in r])


def _prepare(args, undersmooth=False):
    """Load data, build the basis and choose lambda."""
    data = read_csv(args.input)
    fam = _family(args.family)
    try:
        fam.check_response(data[1])
    except ValueError as exc:
        raise InputError(str(exc)) from None
    es = default_eigensystem(data[0].size, args.m, args.basis == "periodic")
    X = es.evaluate(data[0])
    meta = {"basis": args.basis, "m": args.m}
    if args.lam is not None:
        lam = args.lam
        meta["lambda_rule"] = "fixed"
    else:
        lam, _ = select_lambda(data, fam, es, X=X)
        meta["lambda_rule"] = "gcv"
        meta["lambda_gcv"] = lam
        if undersmooth and not args.no_undersmooth:
            lam = undersmoothed_lambda(lam, data[0].size, args.m)
            meta["undersmoothed"] = True
    return data, fam, es, X, lam, meta


def cmd_fit(args):
    data, fam, es, X, lam, meta = _prepare(args)
    f = fit(data, fam, es, lam, X=X)
    out = _out(args)
    _write_json(out / "fit.json", {**f.to_dict(), **meta})
    grid = np.linspace(0, 1, 201)
    _write_csv(out / "curve.csv", ["z", "ghat"], zip(grid, f(grid)))
    print(f"fit: lambda={lam:.6g} traceA={f.traceA:.4f} iterations={f.iterations}")
    return EXIT_OK


def cmd_ci(args):
    data, fam, es, X, lam, meta = _prepare(args, undersmooth=True)
    f = fit(data, fam, es, lam, X=X)
    pts = COVERAGE_GRID if args.z0 is None else np.atleast_1d(args.z0)
    methods = ["ACI", "NCI", "WCI"] if args.method == "all" else [args.method]
    res = [pointwise_ci(f, float(z0), args.alpha, m) for m in methods for z0 in pts]
    out = _out(args)
    _write_json(out / "ci.json", {"intervals": [r.to_dict() for r in res], "lambda": lam, **meta})
    _write_csv(out / "ci.csv", ["method", "z0", "center", "lower", "upper"],
               [(r.method, r.z0, r.center, r.lower, r.upper) for r in res])
    print(f"ci: {len(res)} intervals at level {1 - args.alpha:g}")
    return EXIT_OK


def cmd_band(args):
    fam = _family(args.family)
    if not isinstance(fam, GaussianFamily) or args.m != 2:
        raise UnsupportedError("unsupported-combination: bands require --family gaussian and --m 2")
    data, fam, es, X, lam, meta = _prepare(args, undersmooth=True)
    f = fit(data, fam, es, lam, X=X)
    band = scb(f, args.alpha, args.phi, args.dn_mode)
    out = _out(args)
    _write_json(out / "band.json", {**band.to_dict(), "lambda": lam, **meta})
    _write_csv(out / "band.csv", ["z", "center", "lower", "upper"],
               zip(band.z, band.centers, band.lower, band.upper))
    print(f"band: half-width={band.half_widths[0]:.6g} on [{band.z[0]:.4f}, {band.z[-1]:.4f}]")
    return EXIT_OK


def _report_test(args, res, meta):
    out = _out(args)
    _write_json(out / "test.json", {**res.to_dict(), **meta})
    print(res.summary())
    return EXIT_OK


def cmd_test_local(args):
    data, fam, es, X, lam, meta = _prepare(args, undersmooth=True)
    res = local_lrt(data, fam, es, lam, args.z0, args.w0, args.alpha, X=X)
    return _report_test(args, res, meta)


_SAFE = {k: getattr(np, k) for k in ("sin", "cos", "exp", "log", "sqrt", "pi", "abs", "tanh")}


def _g0(expr):
    def g(z):
        val = eval(expr, {"__builtins__": {}}, {**_SAFE, "z": np.asarray(z)})
        return np.broadcast_to(np.asarray(val, dtype=float), np.shape(z))
    try:
        g(np.linspace(0, 1, 5))
    except Exception as exc:  # user expression
        raise InputError(f"bad --g0 expression {expr!r}: {exc}") from None
    return g


def cmd_test_global(args):
    g0 = _g0(args.g0)
    data, fam, es, X, lam, meta = _prepare(args)
    res = plrt(data, fam, es, lam, g0, args.alpha, args.calibration, J0=args.g0_penalty,
               B=args.bootstrap, seed=args.seed, X=X, bias_correction=args.bias_correction)
    return _report_test(args, res, {**meta, "g0": args.g0})


def cmd_test_linear(args):
    if args.basis == "periodic" and args.q >= 1:
        raise UnsupportedError("unsupported-combination: polynomial nulls need --basis galerkin")
    data, fam, es, X, lam, meta = _prepare(args)
    res = plrt_composite(data, fam, es, lam, args.q, args.alpha, args.calibration,
                         B=args.bootstrap, seed=args.seed, X=X)
    return _report_test(args, res, meta)


def cmd_simulate(args):
    p = Path(args.scenario)
    if not p.is_file():
        raise InputError(f"scenario file {p} not found")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise InputError(f"scenario file is not valid JSON: {exc}") from None
    if isinstance(doc, dict):
        if args.reps is not None:
            doc["reps"] = args.reps
        if args.seed is not None:
            doc["seed"] = args.seed
    try:
        cells = load_scenarios(doc)
    except ScenarioError as exc:
        raise InputError(f"invalid scenario: {exc}") from None
    reports = []
    for i, sc in enumerate(cells):
        label = sc.name or f"cell {i + 1}"

        def progress(k, total, label=label):
            if k == total or k % max(1, total // 10) == 0:
                print(f"[{label}] {k}/{total}", file=sys.stderr, flush=True)

        reports.append(run(sc, jobs=args.jobs, progress=progress))
    out = _out(args)
    (out / "report.csv").write_text(reports_to_csv(reports))
    _write_json(out / "report.json", [r.to_dict() for r in reports])
    for r in reports:
        name = r.scenario.get("name") or r.scenario["generator"]
        if r.rejection is not None:
            print(f"{name}: rejection={r.rejection:.4f} (se {r.rejection_se:.4f})")
        elif r.band_coverage is not None:
            print(f"{name}: band coverage={r.band_coverage:.4f} (se {r.band_se:.4f})")
        else:
            print(f"{name}: " + " ".join(f"len_{k}={v:.5g}" for k, v in r.avg_length.items()))
    bad = [r for r in reports if not r.valid]
    if bad:
        print(f"{len(bad)} experiment(s) invalid: more than 5% of replications failed",
              file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


def _common(p, data=True):
    if data:
        p.add_argument("input", help="CSV file with header z,y")
    p.add_argument("--family", default="gaussian",
                   help="family name or JSON spec, e.g. '{\"family\": \"gamma\", \"alpha\": 2}'")
    p.add_argument("--m", type=int, default=2, help="penalty order")
    p.add_argument("--basis", choices=["periodic", "galerkin"], default="galerkin")
    lam = p.add_mutually_exclusive_group()
    lam.add_argument("--lambda", dest="lam", type=float, help="fixed smoothing parameter")
    lam.add_argument("--gcv", action="store_true", help="select lambda by GCV (default)")
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=".", help="output directory")


def build_parser():
    ap = argparse.ArgumentParser(prog="ssinfer", description="Smoothing-spline inference")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit and write the curve")
    _common(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("ci", help="pointwise confidence intervals")
    _common(p)
    p.add_argument("--z0", type=float, nargs="+", help="points (default: 30-point grid)")
    p.add_argument("--method", choices=["ACI", "WCI", "NCI", "all"], default="ACI")
    p.add_argument("--no-undersmooth", action="store_true")
    p.set_defaults(func=cmd_ci)

    p = sub.add_parser("band", help="simultaneous confidence band")
    _common(p)
    p.add_argument("--phi", type=float, default=0.9)
    p.add_argument("--dn-mode", choices=["simple", "exact"], default="simple")
    p.add_argument("--no-undersmooth", action="store_true")
    p.set_defaults(func=cmd_band)

    p = sub.add_parser("test-local", help="local likelihood ratio test of g(z0) = w0")
    _common(p)
    p.add_argument("--z0", type=float, required=True)
    p.add_argument("--w0", type=float, required=True)
    p.add_argument("--no-undersmooth", action="store_true")
    p.set_defaults(func=cmd_test_local)

    for name, func, helptext in (("test-global", cmd_test_global, "PLRT of g = g0"),
                                 ("test-linear", cmd_test_linear, "PLRT of a polynomial null")):
        p = sub.add_parser(name, help=helptext)
        _common(p)
        p.add_argument("--calibration", choices=["asymptotic", "bootstrap"], default="asymptotic")
        p.add_argument("--bootstrap", type=int, default=500, help="bootstrap resamples")
        if name == "test-global":
            p.add_argument("--g0", default="0*z", help="numpy expression in z")
            p.add_argument("--g0-penalty", type=float, default=None, help="J(g0, g0) if known")
            p.add_argument("--bias-correction", action="store_true",
                           help="centre the statistic by the smoothing bias of g0")
        else:
            p.add_argument("--q", type=int, default=1, help="polynomial degree under the null")
        p.set_defaults(func=func)

    p = sub.add_parser("simulate", help="run a Monte Carlo scenario file")
    p.add_argument("scenario", help="scenario JSON")
    p.add_argument("--reps", type=int, default=None, help="override replications")
    p.add_argument("--seed", type=int, default=None, help="override seed")
    p.add_argument("--jobs", type=int, default=1, help="worker processes")
    p.add_argument("--out", default=".", help="output directory")
    p.set_defaults(func=cmd_simulate)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "m", 2) < 2:
        print("error: --m must be >= 2", file=sys.stderr)
        return EXIT_INPUT
    if hasattr(args, "alpha") and not 0 < args.alpha < 1:
        print("error: --alpha must lie in (0, 1)", file=sys.stderr)
        return EXIT_INPUT
    if getattr(args, "lam", None) is not None and not args.lam > 0:
        print("error: --lambda must be positive", file=sys.stderr)
        return EXIT_INPUT
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            return args.func(args)
    except (InputError, UnsupportedError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (FitError, EigenSolverError) as exc:
        print(f"fit failed: {exc}", file=sys.stderr)
        return EXIT_FIT
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
