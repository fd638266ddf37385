import math

import numpy as np
import pytest
from scipy import optimize
from hypothesis import given, settings, strategies as st

from ssinfer.eigenbasis import (DegeneratePointError, EigenSystem, KernelEval, apply_W_lambda,
                                asymptotic_Il, galerkin_eigensystem, kernel_value,
                                power_law_alpha, q_ratio_c0, restricted_kernel, spectral_sums,
                                trig_eigensystem)
from ssinfer.fitter import uniform_galerkin


@pytest.fixture(scope="module")
def gal():
    return uniform_galerkin(2, 41)


@pytest.fixture(scope="module")
def trig():
    return trig_eigensystem(2, 1.0, 41)


# -- trigonometric system ---------------------------------------------------

def test_trig_first_eigenvalue():
    es = trig_eigensystem(2, 1.0, 5)
    # (2 pi)^4
    assert es.gamma[2] == pytest.approx(1558.5454565440389, rel=1e-14)
    assert es.gamma[1] == es.gamma[2]
    assert es.gamma[0] == 0.0


def test_trig_constant_function():
    es = trig_eigensystem(2, 1.0, 7)
    z = np.linspace(0, 1, 9)
    assert np.all(es.evaluate(z)[:, 0] == 1.0)


def test_trig_orthogonality_by_quadrature():
    sigma = 0.3
    es = trig_eigensystem(2, sigma, 9)
    z = (np.arange(4000) + 0.5) / 4000
    H = es.evaluate(z)
    assert abs(np.mean(H[:, 2] * H[:, 4]) / sigma ** 2) < 1e-12
    G = H.T @ H / z.size / sigma ** 2
    assert np.allclose(G, np.eye(9), atol=1e-10)


@pytest.mark.parametrize("N, scale", [(4, 1.0), (1, 1.0), (5, 0.0), (5, -1.0)])
def test_trig_rejects_bad_arguments(N, scale):
    with pytest.raises(ValueError):
        trig_eigensystem(2, scale, N)


# -- Galerkin system --------------------------------------------------------

def test_galerkin_null_space(gal):
    assert gal.gamma[0] == 0.0 and gal.gamma[1] == 0.0
    assert gal.gamma[2] > 100
    assert np.all(np.diff(gal.gamma) >= 0)


@pytest.mark.parametrize("weight", [None, lambda z: 1.0 + 0.5 * np.sin(3 * z)])
def test_galerkin_orthonormality(weight):
    es = galerkin_eigensystem(weight, m=2, N=21)
    V = es.gram_V()
    J = es.gram_J()
    assert np.max(np.abs(V - np.eye(es.N))) < 1e-8
    off = J - np.diag(es.gamma)
    assert np.all(np.abs(off) <= 1e-8 * (1 + es.gamma)[:, None])


def test_galerkin_uniform_matches_beam_frequencies(gal):
    # free-free beam: gamma_nu = beta^4 with cosh(beta) cos(beta) = 1
    f = lambda b: math.cos(b) - 1.0 / math.cosh(b)
    nu = np.arange(2, 15)
    ref = np.array([optimize.brentq(f, (k - 0.5) * np.pi - 0.3, (k - 0.5) * np.pi + 0.3)
                    for k in nu]) ** 4
    assert np.max(np.abs(gal.gamma[nu] / ref - 1)) < 1e-6
    # asymptotically ((nu - 1/2) pi)^4, so gamma_nu / nu^4 drifts upward
    assert gal.gamma[12] / ((11.5 * np.pi) ** 4) == pytest.approx(1, abs=1e-7)


def test_galerkin_growth_bounded(gal):
    nu = np.arange(2, gal.N)
    r = gal.gamma[nu] / nu ** 4
    assert r.min() > 10 and r.max() < 100


def test_galerkin_eigenfunctions_bounded(gal):
    H = gal.evaluate(np.linspace(0, 1, 1001))
    assert np.max(np.abs(H)) < 3.0


def test_galerkin_singular_weight_rejected():
    with pytest.raises(Exception):
        galerkin_eigensystem(lambda z: np.zeros_like(z), m=2, N=11)


def test_power_law_alpha_uniform(gal):
    # slope of gamma^(1/4) is pi for the beam frequencies
    assert power_law_alpha(gal) == pytest.approx(np.pi, rel=1e-4)


@pytest.mark.parametrize("kind", ["trig", "gal"])
def test_json_round_trip(kind, trig, gal):
    es = trig if kind == "trig" else gal
    back = EigenSystem.from_json(es.to_json())
    z = np.random.default_rng(3).random(50)
    assert np.array_equal(back.gamma, es.gamma)
    assert np.allclose(back.evaluate(z), es.evaluate(z), atol=1e-7)


# -- kernel series ----------------------------------------------------------

@settings(max_examples=60, deadline=None)
@given(z1=st.floats(0, 1), z2=st.floats(0, 1), loglam=st.floats(-9, 0))
def test_kernel_symmetry(z1, z2, loglam):
    for es in (trig_eigensystem(2, 1.0, 41), uniform_galerkin(2, 41)):
        ks = KernelEval(es, 10.0 ** loglam)
        assert kernel_value(ks, z1, z2) == kernel_value(ks, z2, z1)


def test_kernel_matrix_matches_scalar(gal):
    rng = np.random.default_rng(0)
    ks = KernelEval(gal, 1e-5)
    a, b = rng.random(12), rng.random(9)
    M = ks.matrix(a, b)
    ref = np.array([[kernel_value(ks, x, y) for y in b] for x in a])
    assert np.max(np.abs(M - ref)) < 1e-10 * np.max(np.abs(ref))


def test_kernel_large_lambda_limit(gal):
    ks = KernelEval(gal, 1e12)
    z1, z2 = 0.2, 0.7
    H1, H2 = gal.evaluate(z1)[0], gal.evaluate(z2)[0]
    assert kernel_value(ks, z1, z2) == pytest.approx(H1[:2] @ H2[:2], abs=1e-6)


def test_reproducing_property(gal):
    rng = np.random.default_rng(1)
    ks = KernelEval(gal, 1e-4)
    c = rng.standard_normal(gal.N) / (1 + np.arange(gal.N)) ** 2
    for z in rng.random(5):
        kz = gal.evaluate(z)[0] * ks.weights
        g = gal.evaluate(z)[0] @ c
        assert ks.inner(kz, c) == pytest.approx(g, abs=1e-8)


def test_restricted_kernel(gal):
    ks = KernelEval(gal, 1e-4)
    z0 = 0.37
    for z in np.linspace(0, 1, 7):
        assert abs(restricted_kernel(ks, z0, z0, z)) < 1e-10 * kernel_value(ks, z0, z0)
        assert restricted_kernel(ks, z0, z, 0.81) == pytest.approx(
            restricted_kernel(ks, z0, 0.81, z), rel=1e-12, abs=1e-12)
        assert restricted_kernel(ks, z0, z, z) <= kernel_value(ks, z, z) + 1e-12


def test_restricted_kernel_degenerate():
    es = trig_eigensystem(2, 1.0, 3)
    ks = KernelEval(es, 1e30)
    with pytest.raises(DegeneratePointError):
        restricted_kernel(ks, 0.5, 0.1, 0.2, tol=2.0)


@settings(max_examples=60, deadline=None)
@given(z0=st.floats(0, 1), loglam=st.floats(-10, 3))
def test_q_ratio_in_unit_interval(z0, loglam):
    for es in (trig_eigensystem(2, 1.0, 41), uniform_galerkin(2, 41)):
        ks = KernelEval(es, 10.0 ** loglam)
        r = q_ratio_c0(ks, z0)
        assert 0 < r <= 1 + 1e-12
        assert ks.Q(z0, 2)[0] <= ks.Q(z0, 1)[0]


def test_q_ratio_large_lambda(trig):
    assert q_ratio_c0(KernelEval(trig, 1e12), 0.3) == pytest.approx(1.0, abs=1e-6)


@pytest.mark.parametrize("m, lam, target", [(2, 1e-6, 0.75), (3, 1e-10, 5 / 6)])
def test_q_ratio_periodic_constants(m, lam, target):
    es = trig_eigensystem(m, 1.0, 4001)
    assert q_ratio_c0(KernelEval(es, lam), 0.3) == pytest.approx(target, abs=0.01)


@settings(max_examples=40, deadline=None)
@given(loglam=st.floats(-9, 1))
def test_spectral_sum_ordering(loglam):
    s2, r2, rK, un = spectral_sums(KernelEval(uniform_galerkin(2, 41), 10.0 ** loglam))
    assert s2 >= r2 > 0 and rK >= 1 and un > 0


def test_spectral_sums_periodic_limits():
    sigma = 0.5
    lam = 1e-8
    es = trig_eigensystem(2, sigma, 2001)
    ks = KernelEval(es, lam)
    _, _, rK, un = spectral_sums(ks, tail=True)
    assert rK == pytest.approx(4 / 3, abs=0.01)
    # u_n h sigma^(1/2) with h = lam^(1/4) in these (sigma-scaled) units
    assert un * ks.h * math.sqrt(sigma) == pytest.approx(0.4714, abs=0.01)


def test_sigma_K_matches_monte_carlo_trace(gal):
    ks = KernelEval(gal, 1e-5)
    s2, *_ = spectral_sums(ks)
    z = np.random.default_rng(5).random(20000)
    emp = ks.h * np.mean(ks.Q(z, 1))
    assert emp == pytest.approx(s2, rel=0.02)


def test_tail_extension_is_small_for_large_truncation():
    es = trig_eigensystem(2, 1.0, 801)
    ks = KernelEval(es, 1e-6)
    plain = spectral_sums(ks)
    tail = spectral_sums(ks, tail=True)
    assert tail[0] >= plain[0]
    assert tail[0] == pytest.approx(plain[0], rel=1e-4)


# -- integrals --------------------------------------------------------------

def test_Il_closed_forms():
    assert asymptotic_Il(2, 1) == pytest.approx(math.pi / (2 * math.sqrt(2)), abs=1e-10)
    assert asymptotic_Il(2, 2) == pytest.approx(3 * math.pi / (8 * math.sqrt(2)), abs=1e-10)
    assert asymptotic_Il(2, 2) / asymptotic_Il(2, 1) == pytest.approx(0.75, abs=1e-8)


def test_Il_rejects_bad_order():
    with pytest.raises(ValueError):
        asymptotic_Il(1, 1)
    with pytest.raises(ValueError):
        asymptotic_Il(2, 3)


@pytest.mark.parametrize("m", [2, 3])
@pytest.mark.parametrize("l", [1, 2])
def test_riemann_sum_converges_to_Il(m, l):
    hd = 1e-3
    k = np.arange(1, 200001)
    x = 2 * np.pi * hd * k
    s = np.sum((1 + x ** (2 * m)) ** (-l)) * 2 * np.pi * hd
    assert s == pytest.approx(asymptotic_Il(m, l), rel=0.01)


# -- W_lambda ---------------------------------------------------------------

def test_W_lambda_identity(gal):
    rng = np.random.default_rng(2)
    ks = KernelEval(gal, 3e-4)
    for _ in range(5):
        c = rng.standard_normal(gal.N)
        lhs = ks.inner(apply_W_lambda(ks, c), c)
        rhs = ks.lam * c @ gal.gram_J() @ c
        assert lhs == pytest.approx(rhs, rel=1e-8)


def test_W_lambda_null_and_limit(gal):
    c = np.ones(gal.N)
    w = apply_W_lambda(KernelEval(gal, 1e-3), c)
    assert np.all(w[:2] == 0)
    w_inf = apply_W_lambda(KernelEval(gal, 1e14), c)
    assert np.allclose(w_inf[2:], 1.0, atol=1e-6)
