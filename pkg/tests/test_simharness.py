import json
import math

import numpy as np
import pytest
from scipy import integrate

from ssinfer.simharness import (COVERAGE_GRID, MCReport, Scenario, ScenarioError, generate,
                                load_scenarios, reports_to_csv, rep_rng, run, run_power,
                                true_function)


def test_generators():
    line = true_function(Scenario("linearity", 50, c=0.0))
    z = np.linspace(0, 1, 11)
    assert np.array_equal(line(z), -0.5 + z)
    bump = true_function(Scenario("caseI-beta-mix", 50))
    assert integrate.quad(bump, 0, 1, limit=200)[0] == pytest.approx(1.0, abs=1e-10)
    assert float(true_function(Scenario("logistic-poly", 50))(0.0)) == -1.0
    sine = true_function(Scenario("caseII-sine", 50))
    assert float(sine(0.25)) == pytest.approx(math.sin(0.7 * math.pi))
    wavy = true_function(Scenario("linearity", 50, c=1.0, omega=2.8))
    assert float(wavy(0.5)) == pytest.approx(-0.5 + 0.5 + math.sin(1.4 * math.pi) - 0.5)


def test_generate_is_keyed_by_seed_and_rep():
    sc = Scenario("caseI-beta-mix", 40, seed=5)
    a = generate(sc, 3)
    b = generate(sc, 3)
    c = generate(sc, 4)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
    assert not np.array_equal(a[0], c[0])
    assert np.all((a[0] >= 0) & (a[0] <= 1))


def test_logistic_generator_is_binary():
    z, y = generate(Scenario("logistic-poly", 200), 0)
    assert set(np.unique(y)) <= {0.0, 1.0}


def test_rep_rng_streams_differ():
    assert rep_rng(1, 2, 0).random() != rep_rng(1, 2, 1).random()
    assert rep_rng(1, 2, 0).random() == rep_rng(1, 2, 0).random()


@pytest.mark.parametrize("doc", [
    {"generator": "nope", "n": 50},
    {"generator": "linearity", "n": 50, "reps": 0},
    {"generator": "linearity", "n": 4},
    {"generator": "linearity", "n": 50, "sigma": -1},
    {"generator": "linearity", "n": 50, "bogus": 1},
    {"generator": "linearity", "n": 50, "task": "fly"},
    {"generator": "logistic-poly", "n": 50, "task": "coverage"},
])
def test_invalid_scenarios(doc):
    with pytest.raises(ScenarioError):
        load_scenarios(doc)


def test_load_cells_with_shared_defaults():
    cells = load_scenarios({"generator": "linearity", "n": 50, "reps": 3,
                            "cells": [{"c": 0.0}, {"c": 1.0, "n": 70}]})
    assert [(s.n, s.c, s.reps) for s in cells] == [(50, 0.0, 3), (70, 1.0, 3)]
    with pytest.raises(ScenarioError):
        load_scenarios({"generator": "linearity", "n": 50, "cells": []})


def test_shipped_table1_scenario():
    with open("scenarios/table1.json") as fh:
        cells = load_scenarios(json.load(fh))
    assert len(cells) == 4
    assert {(s.n, s.c) for s in cells} == {(200, 0.0), (200, 0.5), (70, 1.5), (20, 2.0)}


def test_resolution_rules():
    assert Scenario("linearity", 50, basis="periodic").resolved_basis() == "galerkin"
    assert Scenario("caseI-beta-mix", 50, task="coverage").resolved_basis() == "periodic"
    assert Scenario("caseI-beta-mix", 50, task="coverage").resolved_undersmooth()
    assert not Scenario("linearity", 50).resolved_undersmooth()
    assert Scenario("logistic-poly", 50).resolved_family() == "logistic"


def test_zero_noise_coverage_is_one():
    rep = run(Scenario("caseI-beta-mix", 100, reps=2, task="coverage", sigma=0.0))
    for meth in ("ACI", "NCI", "WCI"):
        assert rep.coverage[meth] == [1.0] * COVERAGE_GRID.size
    assert rep.valid and rep.failures == 0


def test_coverage_report_shape_and_order():
    rep = run(Scenario("caseI-beta-mix", 300, reps=4, task="coverage", seed=2))
    assert rep.grid == COVERAGE_GRID.tolist() and len(rep.grid) == 30
    L = rep.avg_length
    assert L["ACI"] < L["NCI"] < L["WCI"]
    assert L["WCI"] / L["ACI"] == pytest.approx(math.sqrt(4 / 3), abs=1e-9)
    for meth, cov in rep.coverage.items():
        assert all(0 <= p <= 1 for p in cov)
        for p, s in zip(cov, rep.coverage_se[meth]):
            assert s == pytest.approx(math.sqrt(p * (1 - p) / 4))


def test_band_report():
    rep = run(Scenario("caseII-sine", 300, reps=3, task="band", seed=1))
    assert 0 <= rep.band_coverage <= 1 and rep.avg_length["SCB"] > 0


def test_determinism_bytes():
    sc = Scenario("linearity", 60, reps=6, c=0.5, seed=11)
    a, b = run(sc), run(sc)
    assert a.to_json() == b.to_json()
    assert reports_to_csv([a]) == reports_to_csv([b])


def test_parallel_matches_serial():
    sc = Scenario("caseI-beta-mix", 80, reps=6, task="power", test="local", seed=4)
    assert run(sc, jobs=1).to_json() == run(sc, jobs=2).to_json()


def test_single_rep_report():
    rep = run(Scenario("linearity", 60, reps=1, c=2.0))
    assert rep.rejection in (0.0, 1.0) and rep.rejection_se == 0.0


def test_failures_mark_experiment_invalid():
    # eight Bernoulli responses are usually separable by a line
    rep = run_power(Scenario("logistic-poly", 8, reps=20, c=0.0))
    assert rep.failures > 1 and not rep.valid
    assert rep.errors


def test_runtime_not_serialized():
    rep = run(Scenario("linearity", 40, reps=1))
    assert rep.runtime > 0 and "runtime" not in rep.to_dict()


def test_csv_six_significant_digits():
    rep = MCReport({"generator": "linearity", "name": "x"}, 3, 0, True,
                   rejection=2 / 3, rejection_se=math.sqrt(2 / 27))
    row = rep.csv_rows()[0]
    assert row[3] == "0.666667" and row[4] == "0.272166"


def test_power_monotone_in_c():
    reps = 100
    rates = []
    for c in (0.0, 0.4, 0.8):
        rep = run(Scenario("linearity", 100, reps=reps, c=c, seed=3))
        rates.append((rep.rejection, rep.rejection_se))
    for (p0, s0), (p1, s1) in zip(rates, rates[1:]):
        assert p1 >= p0 - 2 * math.hypot(s0, s1)


@pytest.mark.slow
@pytest.mark.parametrize("generator, n", [("linearity", 200), ("logistic-poly", 200)])
def test_size_at_c0(generator, n):
    sc = Scenario("linearity", n, reps=200, c=0.0, seed=8)
    if generator == "logistic-poly":
        sc = Scenario("linearity", n, reps=200, c=0.0, seed=8, family="logistic")
    rep = run(sc)
    assert abs(rep.rejection - 0.05) <= 3 * math.sqrt(0.05 * 0.95 / rep.reps)
