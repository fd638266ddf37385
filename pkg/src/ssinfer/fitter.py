"""Penalized likelihood fits in an eigenbasis.

The estimate maximizes

    l_{n,lam}(c) = (1/n) sum_i l(y_i; sum_nu c_nu h_nu(z_i)) - (lam/2) c' P c

with ``P = diag(gamma)`` for an :class:`~ssinfer.eigenbasis.EigenSystem`.
Gaussian problems are solved in one linear solve, everything else by damped
Newton (penalized IRLS).  Coordinates may be restricted to an affine
subspace ``c = shift + T theta``, which is how the pointwise constraint of
the local test is imposed.
"""

from __future__ import annotations

import functools
import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import linalg

from .eigenbasis import (DegeneratePointError, EigenSystem, default_truncation,
                         galerkin_eigensystem, trig_eigensystem)
from .models import GaussianFamily, LogisticFamily, ModelFamily

__all__ = [
    "FitError",
    "ConvergenceError",
    "SeparationError",
    "FittedSpline",
    "ConstrainedFit",
    "fit",
    "fit_constrained",
    "fit_polynomial",
    "polynomial_penalty",
    "select_lambda",
    "sigma_hat",
    "default_lambda_grid",
    "default_eigensystem",
    "uniform_galerkin",
]

MAX_ITER = 100
MAX_HALVINGS = 30
COEF_LIMIT = 1e6


class FitError(RuntimeError):
    """Base class for fitting failures."""


class ConvergenceError(FitError):
    pass


class SeparationError(FitError):
    pass


def default_lambda_grid(num: int = 40, lo: float = 1e-8, hi: float = 1.0) -> np.ndarray:
    return np.logspace(math.log10(lo), math.log10(hi), num)


@functools.lru_cache(maxsize=16)
def uniform_galerkin(m: int, N: int) -> EigenSystem:
    """Cached unit-weight Galerkin system (the nonperiodic fitting basis)."""
    return galerkin_eigensystem(m=m, N=N)


def default_eigensystem(n: int, m: int = 2, periodic: bool = True,
                        lam_min: float = 1e-8) -> EigenSystem:
    """Basis sized for the smallest smoothing parameter that will be used."""
    N = default_truncation(n, lam_min ** (1.0 / (2 * m)))
    if periodic:
        return trig_eigensystem(m, 1.0, N)
    return uniform_galerkin(m, max(N, m + 1))


def _as_data(data):
    z, y = data
    z = np.asarray(z, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    if z.shape != y.shape:
        raise ValueError("z and y must have the same length")
    if np.any(z < 0) or np.any(z > 1):
        raise ValueError("covariates must lie in [0, 1]")
    return z, y


@dataclass(frozen=True)
class FittedSpline:
    """Result of :func:`fit`."""

    es: EigenSystem
    family: ModelFamily
    lam: float
    coef: np.ndarray
    traceA: float
    n: int
    objective: float
    iterations: int
    converged: bool
    grad_norm: float
    sigma2hat: Optional[float] = None
    history: tuple = ()
    meta: dict = field(default_factory=dict)

    @property
    def h(self) -> float:
        return self.lam ** (1.0 / (2 * self.es.m))

    def __call__(self, z) -> np.ndarray:
        return self.es.evaluate(z) @ self.coef

    def penalty(self) -> float:
        """``J(g, g)`` of the fitted function."""
        return float(np.sum(self.es.gamma * self.coef ** 2))

    def to_dict(self) -> dict:
        return {"lambda": self.lam, "h": self.h, "coeffs": self.coef.tolist(),
                "traceA": self.traceA, "sigma2hat": self.sigma2hat,
                "converged": self.converged, "iterations": self.iterations,
                "objective": self.objective, "family": self.family.to_dict(),
                "m": self.es.m, "periodic": self.es.periodic, **self.meta}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


@dataclass(frozen=True)
class ConstrainedFit(FittedSpline):
    """Fit under ``g(z0) = w0``."""

    z0: float = 0.0
    w0: float = 0.0

    def to_dict(self) -> dict:
        d = super().to_dict()
        d.update(z0=self.z0, w0=self.w0)
        return d


def _penalty_terms(P, c):
    """``(c' P c, P c)`` for diagonal (vector) or dense ``P``."""
    if P.ndim == 1:
        Pc = P * c
    else:
        Pc = P @ c
    return float(c @ Pc), Pc


def _objective(fam, X, y, lam, P, c):
    quad, _ = _penalty_terms(P, c)
    return float(np.mean(fam.loglik(y, X @ c))) - 0.5 * lam * quad


def _hess_pen(P, N):
    return np.diag(P) if P.ndim == 1 else P


def penalized_mle(X, y, fam: ModelFamily, lam: float, P, *, T=None, shift=None,
                  start=None, tol: float = 1e-9):
    """Maximize the penalized criterion over ``c = shift + T theta``.

    Returns ``(c, objective, iterations, grad_norm, history, info_weights)``;
    ``info_weights`` are ``-l''`` at the optimum.
    """
    n, N = X.shape
    P = np.asarray(P, dtype=float)
    Pm = _hess_pen(P, N)
    if T is None:
        T = np.eye(N)
    if shift is None:
        shift = np.zeros(N)
    Xt = X @ T
    off = X @ shift
    PT = Pm @ T
    Hp = T.T @ PT
    bp = T.T @ (Pm @ shift)
    scale_tol = tol * (1.0 + float(np.max(np.abs(y))))

    def obj(theta):
        return _objective(fam, X, y, lam, P, shift + T @ theta)

    def grad(theta, eta):
        return Xt.T @ fam.d1(y, eta) / n - lam * (Hp @ theta + bp)

    theta = np.zeros(T.shape[1]) if start is None else np.asarray(start, dtype=float).copy()

    if isinstance(fam, GaussianFamily):
        A = Xt.T @ Xt / (n * fam.sigma2) + lam * Hp
        rhs = Xt.T @ (y - off) / (n * fam.sigma2) - lam * bp
        history = [obj(theta)]
        theta = _spd_solve(A, rhs)
        history.append(obj(theta))
        eta = off + Xt @ theta
        g = grad(theta, eta)
        w = -fam.d2(y, eta)
        return shift + T @ theta, history[-1], 1, float(np.max(np.abs(g))), tuple(history), w

    eta = off + Xt @ theta
    f = obj(theta)
    history = [f]
    for it in range(1, MAX_ITER + 1):
        g = grad(theta, eta)
        gnorm = float(np.max(np.abs(g)))
        if gnorm <= scale_tol:
            _check_separation(fam, y, eta)
            return shift + T @ theta, f, it - 1, gnorm, tuple(history), -fam.d2(y, eta)
        w = -fam.d2(y, eta)
        A = (Xt * w[:, None]).T @ Xt / n + lam * Hp
        step = _spd_solve(A, g)
        t = 1.0
        for _ in range(MAX_HALVINGS + 1):
            cand = theta + t * step
            fc = obj(cand)
            if np.isfinite(fc) and fc >= f:
                break
            t *= 0.5
        else:
            if gnorm <= 1e-6 * (1.0 + float(np.max(np.abs(y)))):
                return shift + T @ theta, f, it, gnorm, tuple(history), w
            raise ConvergenceError(f"line search failed (gradient norm {gnorm:.3e})")
        theta, f = cand, fc
        history.append(f)
        eta = off + Xt @ theta
        if np.max(np.abs(theta)) > COEF_LIMIT:
            raise SeparationError("coefficients diverged (|c| > 1e6); the data may be separable")
    g = grad(theta, eta)
    gnorm = float(np.max(np.abs(g)))
    if gnorm <= 1e-6 * (1.0 + float(np.max(np.abs(y)))):
        return shift + T @ theta, f, MAX_ITER, gnorm, tuple(history), -fam.d2(y, eta)
    raise ConvergenceError(f"no convergence after {MAX_ITER} iterations (gradient norm {gnorm:.3e})")


def _check_separation(fam, y, eta):
    # a perfect logistic fit means the criterion has no finite maximizer
    if isinstance(fam, LogisticFamily) and np.max(np.abs(fam.d1(y, eta))) < 1e-6:
        raise SeparationError("fitted probabilities match every 0/1 response; the data are separable")


def _spd_solve(A, b):
    A = (A + A.T) / 2
    try:
        return linalg.cho_solve(linalg.cho_factor(A), b)
    except linalg.LinAlgError:
        return linalg.lstsq(A, b)[0]


def _trace(X, w, lam, P, n):
    Pm = _hess_pen(np.asarray(P, dtype=float), X.shape[1])
    F = (X * w[:, None]).T @ X / n
    A = (F + F.T) / 2 + lam * Pm
    try:
        M = linalg.cho_solve(linalg.cho_factor(A), F)
    except linalg.LinAlgError:
        M = linalg.lstsq(A, F)[0]
    return float(np.trace(M))


def _start(fam, X, y, null_cols):
    N = X.shape[1]
    c = np.zeros(N)
    if isinstance(fam, GaussianFamily) or not len(null_cols):
        return c
    target = np.full(X.shape[0], fam.link_init(y))
    c[null_cols] = linalg.lstsq(X[:, null_cols], target)[0]
    return c


def fit(data, fam: ModelFamily, es: EigenSystem, lam: float, *, X=None,
        start=None) -> FittedSpline:
    """Penalized maximum likelihood estimate at a fixed ``lam``."""
    z, y = _as_data(data)
    fam.check_response(y)
    if not lam > 0:
        raise ValueError("lambda must be positive")
    n = y.size
    if n < 2 * es.null_dim:
        raise ValueError("need at least twice the null-space dimension of observations")
    if X is None:
        X = es.evaluate(z)
    null_cols = np.flatnonzero(es.gamma == 0)
    if start is None:
        start = _start(fam, X, y, null_cols)
    c, f, it, gnorm, hist, w = penalized_mle(X, y, fam, lam, es.gamma, start=start)
    tr = _trace(X, w, lam, es.gamma, n)
    s2 = None
    if isinstance(fam, GaussianFamily) and n > tr:
        s2 = float(np.sum((y - X @ c) ** 2) / (n - tr))
    return FittedSpline(es, fam, float(lam), c, tr, n, f, it, True, gnorm, s2, hist)


def fit_constrained(data, fam: ModelFamily, es: EigenSystem, lam: float, z0: float,
                    w0: float, *, X=None) -> ConstrainedFit:
    """Maximize the same criterion subject to ``g(z0) = w0``.

    The constraint ``a' c = w0`` with ``a = (h_nu(z0))`` is eliminated by
    writing ``c = a w0 / |a|^2 + T theta`` where ``T`` spans the orthogonal
    complement of ``a``.
    """
    z, y = _as_data(data)
    fam.check_response(y)
    if not math.isfinite(w0):
        raise ValueError("w0 must be finite")
    a = es.evaluate(z0)[0]
    na = float(a @ a)
    if na <= 1e-24:
        raise DegeneratePointError(f"basis vanishes at z0 = {z0}")
    n = y.size
    if X is None:
        X = es.evaluate(z)
    shift = a * (w0 / na)
    T = linalg.null_space(a[None, :])
    start = None
    if not isinstance(fam, GaussianFamily):
        c0 = _start(fam, X, y, np.flatnonzero(es.gamma == 0))
        start = T.T @ (c0 - shift)
    c, f, it, gnorm, hist, w = penalized_mle(X, y, fam, lam, es.gamma, T=T, shift=shift,
                                             start=start)
    tr = _trace(X @ T, w, lam, T.T @ np.diag(es.gamma) @ T, n)
    return ConstrainedFit(es, fam, float(lam), c, tr, n, f, it, True, gnorm, None, hist,
                          z0=float(z0), w0=float(w0))


def polynomial_penalty(q: int, m: int) -> np.ndarray:
    """``D_jk = int_0^1 (z^j)^(m) (z^k)^(m) dz`` for ``j, k = 0..q``, exactly."""
    D = np.zeros((q + 1, q + 1))
    for j in range(m, q + 1):
        cj = math.perm(j, m)
        for k in range(m, q + 1):
            ck = math.perm(k, m)
            D[j, k] = cj * ck / (j + k - 2 * m + 1)
    return D


def fit_polynomial(data, fam: ModelFamily, q: int, m: int, lam: float):
    """Penalized MLE over polynomials of degree ``q``.

    Returns ``(coef, objective, fitted link values)`` in the monomial basis.
    """
    z, y = _as_data(data)
    fam.check_response(y)
    if q + 1 >= y.size:
        raise ValueError("polynomial order too large for the sample size")
    X = np.vander(z, q + 1, increasing=True)
    D = polynomial_penalty(q, m)
    start = np.zeros(q + 1)
    if not isinstance(fam, GaussianFamily):
        start[0] = fam.link_init(y)
    c, f, _, _, _, _ = penalized_mle(X, y, fam, lam, D, start=start)
    return c, f, X @ c


def sigma_hat(fit: FittedSpline, data) -> float:
    """``sqrt(sum (y - g(z))^2 / (n - traceA))``."""
    if not isinstance(fit.family, GaussianFamily):
        raise ValueError("sigma_hat applies to the Gaussian family only")
    z, y = _as_data(data)
    if fit.traceA >= y.size:
        raise FitError("traceA >= n; residual scale undefined")
    return math.sqrt(float(np.sum((y - fit(z)) ** 2)) / (y.size - fit.traceA))


def select_lambda(data, fam: ModelFamily, es: EigenSystem, grid=None, *, X=None):
    """Minimize GCV over ``grid``.

    Returns ``(lam_star, table)`` where ``table`` is an array of
    ``(lambda, score)`` rows in the order of ``grid``; failed fits score
    ``inf``.  Ties go to the larger ``lambda``.
    """
    z, y = _as_data(data)
    fam.check_response(y)
    grid = default_lambda_grid() if grid is None else np.asarray(grid, dtype=float)
    if grid.size == 0:
        raise ValueError("empty lambda grid")
    if X is None:
        X = es.evaluate(z)
    n = y.size
    order = np.argsort(-grid, kind="stable")
    scores = np.full(grid.size, np.inf)
    if isinstance(fam, GaussianFamily):
        F = X.T @ X / n
        b = X.T @ y / n
        for i in order:
            A = F + grid[i] * np.diag(es.gamma)
            try:
                cf = linalg.cho_factor((A + A.T) / 2)
            except linalg.LinAlgError:
                continue
            c = linalg.cho_solve(cf, b)
            tr = float(np.trace(linalg.cho_solve(cf, F)))
            if tr >= n - 1e-8:
                continue
            rss = float(np.sum((y - X @ c) ** 2))
            scores[i] = (rss / n) / (1.0 - tr / n) ** 2
    else:
        start = None
        for i in order:
            try:
                f = fit((z, y), fam, es, grid[i], X=X, start=start)
            except (FitError, linalg.LinAlgError):
                continue
            start = f.coef
            eta = X @ f.coef
            w = -fam.d2(y, eta)
            if f.traceA >= n - 1e-8 or np.any(w <= 0):
                continue
            resid = fam.d1(y, eta)
            scores[i] = float(np.mean(resid ** 2 / w)) / (1.0 - f.traceA / n) ** 2
    if not np.any(np.isfinite(scores)):
        raise FitError("every fit on the lambda grid failed")
    best = order[int(np.argmin(scores[order]))]
    return float(grid[best]), np.column_stack([grid, scores])
