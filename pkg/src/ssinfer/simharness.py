"""Seeded Monte Carlo experiments for coverage and power.

Each replication draws its data from a Philox stream keyed by
``(seed, rep, stream)`` so results do not depend on the order or process in
which replications run.  Scenarios are plain dictionaries (usually loaded
from JSON) validated into :class:`Scenario`.
"""

from __future__ import annotations

import csv
import io
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np
from scipy import linalg, stats

from .eigenbasis import EigenSolverError
from .fitter import FitError, default_eigensystem, fit, select_lambda
from .inference import (local_lrt, plrt, plrt_composite, pointwise_ci, scb,
                        undersmoothed_lambda)
from .models import make_family

__all__ = ["Scenario", "MCReport", "generate", "run_coverage", "run_power", "run",
           "true_function", "load_scenarios", "ScenarioError", "COVERAGE_GRID"]

GENERATORS = ("caseI-beta-mix", "caseII-sine", "linearity", "logistic-poly")
COVERAGE_GRID = np.arange(1, 31) / 31.0
MAX_FAILURE_RATE = 0.05


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class Scenario:
    """One Monte Carlo cell.

    ``task`` is ``coverage`` (pointwise intervals on the 30-point grid),
    ``band`` (simultaneous band) or ``power`` (rejection rate of ``test``:
    ``linear``, ``local`` or ``global``).
    """

    generator: str
    n: int
    reps: int = 500
    seed: int = 0
    task: str = "power"
    sigma: Optional[float] = None
    c: float = 0.0
    omega: float = 1.0
    family: Optional[str] = None
    basis: Optional[str] = None
    m: int = 2
    alpha: float = 0.05
    test: str = "linear"
    z0: float = 0.3
    methods: tuple = ("ACI", "NCI", "WCI")
    undersmooth: Optional[bool] = None
    calibration: str = "asymptotic"
    constants: str = "series"
    bootstrap_reps: int = 200
    phi: float = 0.9
    dn_mode: str = "simple"
    name: str = ""

    def __post_init__(self):
        if self.generator not in GENERATORS:
            raise ScenarioError(f"unknown generator {self.generator!r}; choose from {GENERATORS}")
        if self.reps < 1:
            raise ScenarioError("reps must be >= 1")
        if self.n < 8:
            raise ScenarioError("n must be at least 8")
        if self.task not in ("coverage", "band", "power"):
            raise ScenarioError(f"unknown task {self.task!r}")
        if self.test not in ("linear", "local", "global"):
            raise ScenarioError(f"unknown test {self.test!r}")
        if self.sigma is not None and self.sigma < 0:
            raise ScenarioError("sigma must be nonnegative")
        if self.generator == "linearity" and self.omega <= 0:
            raise ScenarioError("omega must be positive")
        if not 0 < self.alpha < 1:
            raise ScenarioError("alpha must lie in (0, 1)")
        if self.resolved_family() == "logistic" and self.task != "power":
            raise ScenarioError("intervals and bands are simulated for the Gaussian family only")
        if self.calibration not in ("asymptotic", "bootstrap"):
            raise ScenarioError(f"unknown calibration {self.calibration!r}")
        if self.constants not in ("series", "closed"):
            raise ScenarioError(f"unknown constants mode {self.constants!r}")
        if self.basis not in (None, "periodic", "galerkin"):
            raise ScenarioError(f"unknown basis {self.basis!r}")
        object.__setattr__(self, "methods", tuple(self.methods))

    @classmethod
    def from_dict(cls, doc: dict) -> "Scenario":
        known = {f.name for f in fields(cls)}
        extra = set(doc) - known
        if extra:
            raise ScenarioError(f"unknown scenario fields {sorted(extra)}")
        try:
            return cls(**doc)
        except TypeError as exc:
            raise ScenarioError(str(exc)) from exc

    def to_dict(self) -> dict:
        d = asdict(self)
        d["methods"] = list(self.methods)
        return d

    def resolved_family(self) -> str:
        if self.family:
            return self.family
        return "logistic" if self.generator == "logistic-poly" else "gaussian"

    def resolved_sigma(self) -> float:
        return 0.05 if self.sigma is None else float(self.sigma)

    def resolved_basis(self) -> str:
        if self.task == "power" and self.test == "linear":
            return "galerkin"
        if self.basis:
            return self.basis
        return "periodic" if self.generator == "caseI-beta-mix" else "galerkin"

    def resolved_undersmooth(self) -> bool:
        if self.undersmooth is not None:
            return bool(self.undersmooth)
        return not (self.task == "power" and self.test in ("linear", "global"))


def true_function(sc: Scenario):
    """Vectorized ``g0`` of a scenario."""
    if sc.generator == "caseI-beta-mix":
        return lambda z: 0.6 * stats.beta.pdf(z, 30, 17) + 0.4 * stats.beta.pdf(z, 3, 11)
    if sc.generator == "caseII-sine":
        return lambda z: np.sin(2.8 * np.pi * np.asarray(z, dtype=float))
    if sc.generator == "linearity":
        c, w = sc.c, sc.omega

        def g(z):
            z = np.asarray(z, dtype=float)
            return -0.5 + z + c * (np.sin(w * np.pi * z) - 0.5)
        return g

    def g(z):
        z = np.asarray(z, dtype=float)
        return 0.15e6 * z ** 11 * (1 - z) ** 6 + 0.5e4 * z ** 3 * (1 - z) ** 10 - 1
    return g


def _family(sc: Scenario):
    return make_family(sc.resolved_family())


def rep_rng(seed: int, rep: int, stream: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(rep), int(stream)])))


def generate(sc: Scenario, rep: int):
    """Dataset ``(z, y)`` of replication ``rep``."""
    rng = rep_rng(sc.seed, rep, 0)
    z = rng.random(sc.n)
    g = true_function(sc)(z)
    if sc.resolved_family() == "logistic":
        y = make_family("logistic").sample(rng, g)
    else:
        y = g + sc.resolved_sigma() * rng.standard_normal(sc.n)
    return z, y


def _setup(sc: Scenario):
    periodic = sc.resolved_basis() == "periodic"
    return _family(sc), default_eigensystem(sc.n, sc.m, periodic)


def _fit_lambda(sc, data, fam, es, X):
    lam, _ = select_lambda(data, fam, es, X=X)
    if sc.resolved_undersmooth():
        lam = undersmoothed_lambda(lam, sc.n, sc.m)
    return lam


_FAILURES = (FitError, EigenSolverError, linalg.LinAlgError, ValueError, FloatingPointError)


def _coverage_rep(sc: Scenario, rep: int):
    g0 = true_function(sc)
    if sc.resolved_sigma() == 0.0:
        # noise-free data are interpolated exactly; the width check is skipped
        k = len(sc.methods)
        if sc.task == "band":
            return {"band": 1.0, "length": 0.0}
        return {"cover": np.ones((k, COVERAGE_GRID.size)), "length": np.zeros(k)}
    fam, es = _setup(sc)
    data = generate(sc, rep)
    X = es.evaluate(data[0])
    lam = _fit_lambda(sc, data, fam, es, X)
    f = fit(data, fam, es, lam, X=X)
    if sc.task == "band":
        band = scb(f, sc.alpha, sc.phi, sc.dn_mode)
        return {"band": float(band.covers(g0)), "length": float(2 * band.half_widths[0])}
    truth = g0(COVERAGE_GRID)
    cover = np.zeros((len(sc.methods), COVERAGE_GRID.size))
    length = np.zeros(len(sc.methods))
    for i, meth in enumerate(sc.methods):
        for j, z0 in enumerate(COVERAGE_GRID):
            ci = pointwise_ci(f, z0, sc.alpha, meth)
            cover[i, j] = abs(ci.center - truth[j]) <= ci.half_width
            length[i] += 2 * ci.half_width / COVERAGE_GRID.size
    return {"cover": cover, "length": length}


def _power_rep(sc: Scenario, rep: int):
    fam, es = _setup(sc)
    data = generate(sc, rep)
    X = es.evaluate(data[0])
    lam = _fit_lambda(sc, data, fam, es, X)
    boot = dict(B=sc.bootstrap_reps, seed=sc.seed * 1_000_003 + rep, constants=sc.constants)
    if sc.test == "linear":
        res = plrt_composite(data, fam, es, lam, 1, sc.alpha, sc.calibration, X=X, **boot)
    elif sc.test == "local":
        g0 = true_function(sc)
        res = local_lrt(data, fam, es, lam, sc.z0, float(np.asarray(g0(sc.z0))), sc.alpha, X=X)
    else:
        res = plrt(data, fam, es, lam, true_function(sc), sc.alpha, sc.calibration, X=X, **boot)
    return {"reject": float(res.reject), "statistic": res.statistic}


def _run_one(args):
    sc, rep = args
    work = _power_rep if sc.task == "power" else _coverage_rep
    try:
        with np.errstate(over="ignore", under="ignore"):
            return rep, work(sc, rep)
    except _FAILURES as exc:
        return rep, {"error": f"{type(exc).__name__}: {exc}"}


@dataclass
class MCReport:
    """Aggregated Monte Carlo output; ``runtime`` is kept out of serialized forms."""

    scenario: dict
    reps: int
    failures: int
    valid: bool
    coverage: dict = field(default_factory=dict)
    coverage_se: dict = field(default_factory=dict)
    avg_length: dict = field(default_factory=dict)
    band_coverage: Optional[float] = None
    band_se: Optional[float] = None
    rejection: Optional[float] = None
    rejection_se: Optional[float] = None
    grid: list = field(default_factory=list)
    errors: list = field(default_factory=list)
    runtime: float = 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("runtime")
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    def csv_rows(self):
        """Rows ``(name, quantity, z, value, se)`` with six significant digits."""
        name = self.scenario.get("name") or self.scenario["generator"]
        fmt = lambda v: "" if v is None else f"{v:.6g}"
        rows = []
        if self.rejection is not None:
            rows.append([name, "rejection", "", fmt(self.rejection), fmt(self.rejection_se)])
        if self.band_coverage is not None:
            rows.append([name, "band_coverage", "", fmt(self.band_coverage), fmt(self.band_se)])
        for meth, cov in self.coverage.items():
            for z, p, s in zip(self.grid, cov, self.coverage_se[meth]):
                rows.append([name, f"coverage_{meth}", fmt(z), fmt(p), fmt(s)])
        for meth, L in self.avg_length.items():
            rows.append([name, f"length_{meth}", "", fmt(L), ""])
        return rows


CSV_HEADER = ["scenario", "quantity", "z", "value", "mc_se"]


def reports_to_csv(reports) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in reports:
        w.writerows(r.csv_rows())
    return buf.getvalue()


def _se(p, k):
    return math.sqrt(p * (1 - p) / k) if k > 0 else float("nan")


def _execute(sc: Scenario, jobs: int, progress=None):
    tasks = [(sc, r) for r in range(sc.reps)]
    if jobs > 1 and sc.reps > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            out = []
            for i, res in enumerate(ex.map(_run_one, tasks, chunksize=max(1, sc.reps // (4 * jobs)))):
                out.append(res)
                if progress:
                    progress(i + 1, sc.reps)
    else:
        out = []
        for i, t in enumerate(tasks):
            out.append(_run_one(t))
            if progress:
                progress(i + 1, sc.reps)
    out.sort(key=lambda t: t[0])
    return [r for _, r in out]


def _finish(sc, results):
    errors = [r["error"] for r in results if "error" in r]
    good = [r for r in results if "error" not in r]
    k = len(good)
    valid = len(errors) <= MAX_FAILURE_RATE * sc.reps and k > 0
    rep = MCReport(sc.to_dict(), sc.reps, len(errors), valid, errors=sorted(set(errors))[:10])
    return rep, good, k


def run_coverage(sc: Scenario, jobs: int = 1, progress=None) -> MCReport:
    """Pointwise coverage on the 30-point grid, or simultaneous band coverage."""
    if sc.task not in ("coverage", "band"):
        raise ScenarioError("run_coverage needs task 'coverage' or 'band'")
    t0 = time.perf_counter()
    results = _execute(sc, jobs, progress)
    rep, good, k = _finish(sc, results)
    if k and sc.task == "band":
        p = float(np.mean([r["band"] for r in good]))
        rep.band_coverage, rep.band_se = p, _se(p, k)
        rep.avg_length = {"SCB": float(np.mean([r["length"] for r in good]))}
    elif k:
        cover = np.mean([r["cover"] for r in good], axis=0)
        length = np.mean([r["length"] for r in good], axis=0)
        rep.grid = COVERAGE_GRID.tolist()
        for i, meth in enumerate(sc.methods):
            rep.coverage[meth] = cover[i].tolist()
            rep.coverage_se[meth] = [_se(p, k) for p in cover[i]]
            rep.avg_length[meth] = float(length[i])
    rep.runtime = time.perf_counter() - t0
    return rep


def run_power(sc: Scenario, jobs: int = 1, progress=None) -> MCReport:
    """Rejection proportion of the configured test at level ``alpha``."""
    if sc.task != "power":
        raise ScenarioError("run_power needs task 'power'")
    t0 = time.perf_counter()
    results = _execute(sc, jobs, progress)
    rep, good, k = _finish(sc, results)
    if k:
        p = float(np.mean([r["reject"] for r in good]))
        rep.rejection, rep.rejection_se = p, _se(p, k)
    rep.runtime = time.perf_counter() - t0
    return rep


def run(sc: Scenario, jobs: int = 1, progress=None) -> MCReport:
    return run_power(sc, jobs, progress) if sc.task == "power" else run_coverage(sc, jobs, progress)


def load_scenarios(doc) -> list:
    """Scenarios from a JSON document: a single cell, or ``{"cells": [...], ...defaults}``."""
    if isinstance(doc, (str, bytes)):
        doc = json.loads(doc)
    if not isinstance(doc, dict):
        raise ScenarioError("scenario document must be a JSON object")
    if "cells" in doc:
        base = {k: v for k, v in doc.items() if k != "cells"}
        cells = doc["cells"]
        if not isinstance(cells, list) or not cells:
            raise ScenarioError("'cells' must be a nonempty list")
        return [Scenario.from_dict({**base, **cell}) for cell in cells]
    return [Scenario.from_dict(doc)]
