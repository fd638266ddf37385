"""End-to-end acceptance checks.

Each test prints one ``criterion N: PASS|FAIL`` line with the measured
values before asserting. Monte Carlo criteria are marked ``slow``.
"""
import json
import math
from pathlib import Path

import numpy as np
import pytest
from scipy import optimize

from ssinfer.eigenbasis import (KernelEval, asymptotic_Il, galerkin_eigensystem, power_law_alpha,
                                q_ratio_c0, spectral_sums, trig_eigensystem)
from ssinfer.fitter import fit, uniform_galerkin
from ssinfer.inference import (equivalent_kernel_omega0, local_lrt, omega0_norm2, plrt,
                               plrt_composite)
from ssinfer.models import derivatives_check, make_family
from ssinfer.simharness import (COVERAGE_GRID, Scenario, load_scenarios, reports_to_csv, run)

ROOT = Path(__file__).resolve().parents[1]
SEED = 20120101


@pytest.fixture
def report(capsys):
    def emit(k, checks):
        ok = all(c for _, c in checks)
        detail = "; ".join(f"{name} {'ok' if c else 'FAILED'}" for name, c in checks)
        with capsys.disabled():
            print(f"\ncriterion {k}: {'PASS' if ok else 'FAIL'} | {detail}")
        assert ok, detail
    return emit


def test_criterion_1_constants(report):
    c0 = {m: q_ratio_c0(KernelEval(trig_eigensystem(m, 1.0, 4001), 1e-6), 0.3) for m in (2, 3)}
    sigma = 0.5
    ks = KernelEval(trig_eigensystem(2, sigma, 2001), 1e-8)
    _, _, rK, un = spectral_sums(ks, tail=True)
    scaled_un = un * ks.h * math.sqrt(sigma)
    ratio = asymptotic_Il(2, 2) / asymptotic_Il(2, 1)
    w0, w2 = float(equivalent_kernel_omega0(0.0)), omega0_norm2()
    report(1, [
        (f"c0(m=2)={c0[2]:.4f}", abs(c0[2] - 0.75) <= 0.01),
        (f"c0(m=3)={c0[3]:.4f}", abs(c0[3] - 0.83) <= 0.01),
        (f"r_K={rK:.4f}", abs(rK - 4 / 3) <= 0.01),
        (f"u_n*h*sigma^0.5={scaled_un:.4f}", abs(scaled_un - 0.4714) <= 0.01),
        (f"I2/I1={ratio:.12f}", abs(ratio - 0.75) <= 1e-8),
        (f"omega0(0)={w0:.7f}", abs(w0 - 0.3535534) <= 5e-8),
        (f"int omega0^2={w2:.6f}", abs(w2 - 0.265165) <= 1e-5),
    ])


def _trig_design(z, K):
    cols = [np.ones_like(z)]
    for k in range(1, K + 1):
        cols += [math.sqrt(2) * np.sin(2 * np.pi * k * z), math.sqrt(2) * np.cos(2 * np.pi * k * z)]
    gam = [0.0] + [float((2 * np.pi * k) ** 4) for k in range(1, K + 1) for _ in range(2)]
    return np.column_stack(cols), np.array(gam)


def test_criterion_2_oracle_equivalence(report):
    worst = 0.0
    for cfg in range(50):
        rng = np.random.default_rng([cfg, 7])
        n = int(rng.integers(20, 300))
        lam = 10.0 ** rng.uniform(-8, 0)
        z = rng.random(n)
        y = np.cos(2 * np.pi * z) + rng.standard_normal(n)
        K = int(rng.integers(2, min(20, n // 2)))
        X, gam = _trig_design(z, K)
        oracle = np.linalg.solve(X.T @ X / n + lam * np.diag(gam), X.T @ y / n)
        got = fit((z, y), make_family("gaussian"), trig_eigensystem(2, 1.0, 2 * K + 1), lam).coef
        worst = max(worst, np.linalg.norm(got - oracle) / np.linalg.norm(oracle))
    ks = KernelEval(uniform_galerkin(2, 201), 1e-8)
    c0 = q_ratio_c0(ks, 0.5)
    _, _, rK, un = spectral_sums(ks, tail=True)
    closed_un = math.sqrt(2) / 3
    rel = {"c0": c0 / 0.75 - 1, "r_K": rK / (4 / 3) - 1, "u_n": un * ks.h / closed_un - 1}
    report(2, [(f"ridge max rel err={worst:.1e}", worst <= 1e-8)]
           + [(f"galerkin {k} rel dev={v:+.4f}", abs(v) <= 0.02) for k, v in rel.items()])


def _cell(reports, name):
    return next(r for r in reports if r.scenario["name"] == name)


@pytest.mark.slow
def test_criterion_3_table1_linearity(report):
    cells = load_scenarios(json.loads((ROOT / "scenarios" / "table1.json").read_text()))
    reps = [run(sc) for sc in cells]
    size = _cell(reps, "n200_c0").rejection
    p70 = _cell(reps, "n70_c1.5").rejection
    p20 = _cell(reps, "n20_c2").rejection
    report(3, [(f"reps={cells[0].reps}", all(r.valid and r.reps == 500 for r in reps)),
               (f"n200 c0 size={size:.3f}", 0.032 <= size <= 0.075),
               (f"n70 c1.5 power={p70:.3f}", p70 >= 0.99),
               (f"n20 c2 power={p20:.3f}", p20 >= 0.94)])


@pytest.mark.slow
def test_criterion_4_table3_logistic(report):
    power = run(Scenario("linearity", 500, reps=300, seed=SEED, c=1.0, family="logistic"))
    size = run(Scenario("linearity", 70, reps=300, seed=SEED, c=0.0, family="logistic"))
    report(4, [(f"valid", power.valid and size.valid),
               (f"n500 c1 power={power.rejection:.3f}", 0.72 <= power.rejection <= 0.87),
               (f"n70 c0 size={size.rejection:.3f}", 0.015 <= size.rejection <= 0.08)])


@pytest.mark.slow
def test_criterion_5_coverage(report):
    rep = run(Scenario("caseI-beta-mix", 2000, reps=500, seed=SEED, task="coverage"))
    inside = (COVERAGE_GRID >= 0.1) & (COVERAGE_GRID <= 0.4)
    cov = np.asarray(rep.coverage["ACI"])[inside]
    L = rep.avg_length
    r_nci, r_wci = L["NCI"] / L["ACI"], L["WCI"] / L["ACI"]
    report(5, [("valid", rep.valid),
               (f"ACI coverage on [0.1,0.4] in [{cov.min():.3f}, {cov.max():.3f}]",
                bool(np.all((cov >= 0.91) & (cov <= 0.98)))),
               ("ACI < NCI < WCI", L["ACI"] < L["NCI"] < L["WCI"]),
               (f"NCI/ACI-sqrt(9/8)={r_nci - math.sqrt(9 / 8):.1e}", abs(r_nci - math.sqrt(9 / 8)) < 1e-9),
               (f"WCI/ACI-sqrt(4/3)={r_wci - math.sqrt(4 / 3):.1e}", abs(r_wci - math.sqrt(4 / 3)) < 1e-9)])


@pytest.mark.slow
def test_criterion_6_band(report):
    rep = run(Scenario("caseII-sine", 1000, reps=300, seed=SEED, task="band"))
    report(6, [("valid", rep.valid),
               (f"simultaneous coverage={rep.band_coverage:.3f}", rep.band_coverage >= 0.88)])


@pytest.mark.slow
def test_criterion_7_local_lrt_size(report):
    rep = run(Scenario("caseI-beta-mix", 1000, reps=1000, seed=SEED, test="local", z0=0.3))
    report(7, [("valid", rep.valid),
               (f"rejection={rep.rejection:.3f}", 0.03 <= rep.rejection <= 0.08)])


def test_criterion_8_eigensolver(report):
    gal = uniform_galerkin(2, 41)
    nu = np.arange(6, 13)
    r = gal.gamma[nu] / nu ** 4
    spread = r.max() / r.min() - 1
    # independent check: free-free beam frequencies cosh(b) cos(b) = 1
    f = lambda b: math.cos(b) - 1.0 / math.cosh(b)
    beam = np.array([optimize.brentq(f, (k - 0.5) * np.pi - 0.3, (k - 0.5) * np.pi + 0.3)
                     for k in nu]) ** 4
    beam_err = float(np.max(np.abs(gal.gamma[nu] / beam - 1)))
    fam = make_family("logistic")
    es = galerkin_eigensystem(lambda z: fam.info(-0.5 + z), m=2, N=41)
    alpha = power_law_alpha(es)
    report(8, [(f"gamma/nu^4 spread over 6..12={spread:.4f} ({r.min():.1f}..{r.max():.1f})",
                spread <= 0.01),
               (f"beam-root rel err={beam_err:.1e}", beam_err < 1e-6),
               (f"logistic alpha={alpha:.4f}", abs(alpha / 4.40 - 1) <= 0.03)])


def test_criterion_9_invariants(report):
    checks = []
    fams = {"gaussian": np.linspace(-3, 3, 25), "logistic": np.tile([0.0, 1.0], 12),
            "gamma": np.linspace(0.1, 5, 25)}
    for name, y in fams.items():
        rep = derivatives_check(make_family(name), y, np.linspace(-2, 2, y.size))
        checks.append((f"FD {name}", rep.ok))

    gauss = make_family("gaussian")
    es = uniform_galerkin(2, 21)
    stats = []
    for s in range(10):
        rng = np.random.default_rng([s, 3])
        z = rng.random(80)
        y = np.sin(2 * np.pi * z) + 0.3 * rng.standard_normal(80)
        stats.append(local_lrt((z, y), gauss, es, 1e-4, 0.4, float(rng.normal())).statistic)
        stats.append(plrt((z, y), gauss, es, 1e-4, lambda t: np.sin(2 * np.pi * t)).statistic)
        stats.append(plrt_composite((z, y), gauss, es, 1e-4, 1).statistic)
    checks.append((f"min statistic={min(stats):.2e}", min(stats) >= 0))

    sc = Scenario("linearity", 60, reps=10, seed=4, c=0.5)
    a, b = run(sc), run(sc)
    checks.append(("same seed same bytes", a.to_json() == b.to_json()
                   and reports_to_csv([a]) == reports_to_csv([b])))

    hd = 1e-3
    x = 2 * np.pi * hd * np.arange(1, 200001)
    for m in (2, 3):
        for l in (1, 2):
            s = float(np.sum((1 + x ** (2 * m)) ** (-l)) * 2 * np.pi * hd)
            checks.append((f"sum m={m} l={l} rel={s / asymptotic_Il(m, l) - 1:+.1e}",
                           abs(s / asymptotic_Il(m, l) - 1) <= 0.01))
    report(9, checks)
