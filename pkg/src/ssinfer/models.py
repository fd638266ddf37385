"""Criterion functions for the supported regression families.

Each family supplies ``l(y; a)`` together with its first three partial
derivatives in the link value ``a``, the Fisher information
``I = -E[l''(Y; a)]``, the mean map and a sampler.  All methods broadcast
over numpy arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import integrate, optimize, special

__all__ = [
    "ModelFamily",
    "GaussianFamily",
    "LogisticFamily",
    "GammaFamily",
    "QuasiFamily",
    "make_family",
    "derivatives_check",
    "DerivativeReport",
]


class ModelFamily:
    """Base class; subclasses implement the criterion and its derivatives."""

    name = "abstract"

    def loglik(self, y, a):
        raise NotImplementedError

    def d1(self, y, a):
        raise NotImplementedError

    def d2(self, y, a):
        raise NotImplementedError

    def d3(self, y, a):
        raise NotImplementedError

    def info(self, a):
        raise NotImplementedError

    def mean(self, a):
        raise NotImplementedError

    def link_init(self, y) -> float:
        """Constant link value used to start Newton iterations."""
        raise NotImplementedError

    def sample(self, rng: np.random.Generator, a):
        raise NotImplementedError

    def check_response(self, y) -> None:
        pass

    def to_dict(self) -> dict:
        return {"family": self.name}

    def __repr__(self):
        args = ", ".join(f"{k}={v!r}" for k, v in self.to_dict().items() if k != "family")
        return f"{type(self).__name__}({args})"


class GaussianFamily(ModelFamily):
    """``l = -(y - a)^2 / (2 sigma^2)``; ``sigma2 = 1`` gives least-squares units."""

    name = "gaussian"

    def __init__(self, sigma2: float = 1.0):
        if not sigma2 > 0:
            raise ValueError("gaussian family needs sigma2 > 0")
        self.sigma2 = float(sigma2)

    def loglik(self, y, a):
        return -0.5 * (np.asarray(y) - a) ** 2 / self.sigma2

    def d1(self, y, a):
        return (np.asarray(y) - a) / self.sigma2

    def d2(self, y, a):
        return np.full(np.broadcast(np.asarray(y), np.asarray(a)).shape, -1.0 / self.sigma2)

    def d3(self, y, a):
        return np.zeros(np.broadcast(np.asarray(y), np.asarray(a)).shape)

    def info(self, a):
        return np.full(np.shape(a), 1.0 / self.sigma2)

    def mean(self, a):
        return np.asarray(a, dtype=float)

    def link_init(self, y):
        return float(np.mean(y))

    def sample(self, rng, a):
        a = np.asarray(a, dtype=float)
        return a + math.sqrt(self.sigma2) * rng.standard_normal(a.shape)

    def to_dict(self):
        return {"family": self.name, "sigma2": self.sigma2}


class LogisticFamily(ModelFamily):
    """Bernoulli response with ``P(Y = 1) = e^a / (1 + e^a)``."""

    name = "logistic"

    def loglik(self, y, a):
        return np.asarray(y) * a - np.logaddexp(0.0, a)

    def d1(self, y, a):
        return np.asarray(y) - special.expit(a)

    def d2(self, y, a):
        p = special.expit(a)
        return np.broadcast_to(-p * (1 - p), np.broadcast(np.asarray(y), p).shape).copy()

    def d3(self, y, a):
        p = special.expit(a)
        return np.broadcast_to(-p * (1 - p) * (1 - 2 * p),
                               np.broadcast(np.asarray(y), p).shape).copy()

    def info(self, a):
        p = special.expit(a)
        return p * (1 - p)

    def mean(self, a):
        return special.expit(a)

    def link_init(self, y):
        ybar = float(np.clip(np.mean(y), 0.01, 0.99))
        return float(special.logit(ybar))

    def sample(self, rng, a):
        p = special.expit(np.asarray(a, dtype=float))
        return (rng.random(p.shape) < p).astype(float)

    def check_response(self, y):
        y = np.asarray(y)
        if np.any((y != 0) & (y != 1)):
            raise ValueError("logistic responses must be 0 or 1")


class GammaFamily(ModelFamily):
    """``Y | Z ~ Gamma(alpha, rate e^g)``: ``l = alpha a + (alpha - 1) log y - y e^a``."""

    name = "gamma"

    def __init__(self, alpha: float = 1.0):
        if not alpha > 0:
            raise ValueError("gamma family needs alpha > 0")
        self.alpha = float(alpha)

    def loglik(self, y, a):
        y = np.asarray(y, dtype=float)
        return self.alpha * a + (self.alpha - 1) * np.log(y) - y * np.exp(a)

    def d1(self, y, a):
        return self.alpha - np.asarray(y) * np.exp(a)

    def d2(self, y, a):
        return -np.asarray(y) * np.exp(a)

    d3 = d2

    def info(self, a):
        return np.full(np.shape(a), self.alpha)

    def mean(self, a):
        return self.alpha * np.exp(-np.asarray(a, dtype=float))

    def link_init(self, y):
        return float(math.log(self.alpha / np.mean(y)))

    def sample(self, rng, a):
        a = np.asarray(a, dtype=float)
        return rng.gamma(self.alpha, np.exp(-a))

    def check_response(self, y):
        if np.any(np.asarray(y) <= 0):
            raise ValueError("gamma responses must be positive")

    def to_dict(self):
        return {"family": self.name, "alpha": self.alpha}


@dataclass
class QuasiFamily(ModelFamily):
    """Quasi-likelihood ``Q(y; F(a)) = int_y^F(a) (y - s) / V(s) ds``.

    ``F`` is the mean map with derivatives ``dF``, ``d2F``; ``V`` is the
    variance function with derivative ``dV``.  The third derivative in ``a``
    is obtained by central differences of the analytic second derivative.
    """

    F: Callable
    dF: Callable
    d2F: Callable
    V: Callable
    dV: Callable
    sampler: Optional[Callable] = None
    name: str = field(default="quasi")

    def loglik(self, y, a):
        y, a = np.broadcast_arrays(np.asarray(y, dtype=float), np.asarray(a, dtype=float))
        out = np.empty(y.shape)
        for idx in np.ndindex(y.shape):
            yi = y[idx]
            out[idx] = integrate.quad(lambda s: (yi - s) / self.V(s), yi, self.F(a[idx]),
                                      epsabs=1e-13, epsrel=1e-12)[0]
        return out

    def d1(self, y, a):
        mu = self.F(a)
        return (np.asarray(y) - mu) / self.V(mu) * self.dF(a)

    def d2(self, y, a):
        mu, f1, f2 = self.F(a), self.dF(a), self.d2F(a)
        v, dv = self.V(mu), self.dV(mu)
        r = np.asarray(y) - mu
        return -f1 ** 2 / v - r * dv * f1 ** 2 / v ** 2 + r * f2 / v

    def d3(self, y, a, step: float = 1e-5):
        return (self.d2(y, np.asarray(a) + step) - self.d2(y, np.asarray(a) - step)) / (2 * step)

    def info(self, a):
        return self.dF(a) ** 2 / self.V(self.F(a))

    def mean(self, a):
        return self.F(a)

    def link_init(self, y):
        target = float(np.mean(y))
        try:
            return float(optimize.brentq(lambda a: self.F(a) - target, -30.0, 30.0))
        except ValueError:
            return 0.0

    def sample(self, rng, a):
        if self.sampler is None:
            raise NotImplementedError("quasi family has no sampler")
        return self.sampler(rng, a)


def make_family(spec) -> ModelFamily:
    """Build a family from a name or a mapping such as ``{"family": "gamma", "alpha": 2}``.

    Recognised names are ``gaussian`` (``sigma2``, default 1), ``logistic``,
    ``gamma`` (``alpha``, default 1) and ``quasi`` (callables ``F, dF, d2F,
    V, dV``).
    """
    if isinstance(spec, ModelFamily):
        return spec
    if isinstance(spec, str):
        spec = {"family": spec}
    spec = dict(spec)
    name = str(spec.pop("family", "")).lower()
    if name == "gaussian":
        if "sigma" in spec:
            spec["sigma2"] = float(spec.pop("sigma")) ** 2
        return GaussianFamily(**spec)
    if name == "logistic":
        if spec:
            raise ValueError(f"logistic family takes no parameters, got {sorted(spec)}")
        return LogisticFamily()
    if name == "gamma":
        return GammaFamily(**spec)
    if name == "quasi":
        return QuasiFamily(**spec)
    raise ValueError(f"unknown family {name!r}")


@dataclass
class DerivativeReport:
    """Finite-difference comparison of analytic derivatives."""

    ok: bool
    rows: list

    def __str__(self):
        lines = [f"{'order':>5} {'y':>12} {'a':>12} {'analytic':>16} {'finite diff':>16}"]
        for r in self.rows:
            flag = "" if r["ok"] else "  MISMATCH"
            lines.append(f"{r['order']:>5} {r['y']:12.6g} {r['a']:12.6g} "
                         f"{r['analytic']:16.10g} {r['numeric']:16.10g}{flag}")
        return "\n".join(lines)


def derivatives_check(fam: ModelFamily, y, a, step: float = 1e-5,
                      rtol: float = 1e-6) -> DerivativeReport:
    """Compare ``l', l'', l'''`` against central differences of the next lower order.

    Each derivative is checked against ``(f(a + s) - f(a - s)) / 2s`` of the
    preceding analytic function; agreement is required to ``rtol`` relative to
    ``max(1, |analytic|)``.
    """
    y, a = np.broadcast_arrays(np.asarray(y, dtype=float), np.asarray(a, dtype=float))
    funcs = [fam.loglik, fam.d1, fam.d2, fam.d3]
    rows = []
    ok = True
    for order in (1, 2, 3):
        lower = funcs[order - 1]
        numeric = (lower(y, a + step) - lower(y, a - step)) / (2 * step)
        analytic = np.broadcast_to(funcs[order](y, a), y.shape)
        good = np.abs(numeric - analytic) <= rtol * np.maximum(1.0, np.abs(analytic))
        ok &= bool(np.all(good))
        for idx in np.ndindex(y.shape):
            rows.append({"order": order, "y": float(y[idx]), "a": float(a[idx]),
                         "analytic": float(analytic[idx]), "numeric": float(numeric[idx]),
                         "ok": bool(good[idx])})
    return DerivativeReport(ok, rows)
