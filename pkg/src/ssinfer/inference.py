"""Pointwise intervals, simultaneous bands and likelihood ratio tests.

Gaussian fits are carried out in the units of the family's ``sigma2``; the
inference routines rescale the eigensystem by the residual scale estimate so
that all constants refer to ``I = sigma_hat**-2`` as the theory requires.
For other families the eigensystem is rebuilt with the estimated information
``I(z) = -E l''(Y; g_hat(z))``.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import integrate, stats

from .eigenbasis import (EigenSystem, KernelEval, asymptotic_Il, galerkin_eigensystem,
                         power_law_alpha, q_ratio_c0, spectral_sums, trig_eigensystem)
from .fitter import (FittedSpline, fit, fit_constrained, fit_polynomial,
                     polynomial_penalty)
from .models import GammaFamily, GaussianFamily, ModelFamily

__all__ = [
    "IntervalResult",
    "BandResult",
    "TestResult",
    "UnsupportedError",
    "pointwise_ci",
    "local_lrt",
    "scb",
    "scb_critical",
    "equivalent_kernel_omega0",
    "plrt",
    "plrt_composite",
    "info_eigensystem",
    "undersmoothed_lambda",
    "SIGMA_OMEGA0",
]

SIGMA_OMEGA0 = 0.5149418
INFO_FLOOR = 1e-4
WIDTH_RATIO = {"ACI": 1.0, "WCI": math.sqrt(4.0 / 3.0), "NCI": math.sqrt(9.0 / 8.0)}


class UnsupportedError(ValueError):
    """Requested procedure is outside the supported model scope."""


@dataclass(frozen=True)
class IntervalResult:
    z0: float
    center: float
    half_width: float
    method: str
    alpha: float

    @property
    def lower(self):
        return self.center - self.half_width

    @property
    def upper(self):
        return self.center + self.half_width

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class BandResult:
    z: np.ndarray
    centers: np.ndarray
    half_widths: np.ndarray
    phi: float
    d_n: float
    alpha: float
    h: float
    delta: float
    dn_mode: str

    @property
    def lower(self):
        return self.centers - self.half_widths

    @property
    def upper(self):
        return self.centers + self.half_widths

    def covers(self, g0: Callable) -> bool:
        return bool(np.all(np.abs(np.asarray(g0(self.z)) - self.centers) <= self.half_widths))

    def to_dict(self):
        return {"z": self.z.tolist(), "center": self.centers.tolist(),
                "half_width": self.half_widths.tolist(), "phi": self.phi, "d_n": self.d_n,
                "alpha": self.alpha, "h": self.h, "delta": self.delta, "dn_mode": self.dn_mode}


@dataclass(frozen=True)
class TestResult:
    kind: str
    statistic: float
    null_law: dict
    p_value: float
    reject: bool
    alpha: float
    calibration: str
    details: dict = field(default_factory=dict)

    __test__ = False  # keep pytest from collecting this class

    def to_dict(self):
        d = {"kind": self.kind, "statistic": self.statistic, "p_value": self.p_value,
             "reject": self.reject, "alpha": self.alpha, "calibration": self.calibration,
             "null_law": self.null_law}
        d.update({k: v for k, v in self.null_law.items() if k != "law"})
        d.update(self.details)
        return d

    def to_json(self):
        return json.dumps(self.to_dict())

    def summary(self) -> str:
        law = self.null_law["law"]
        return (f"{self.kind}: statistic={self.statistic:.4f} null={law} "
                f"p={self.p_value:.4f} {'reject' if self.reject else 'retain'} at alpha={self.alpha}")


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def undersmoothed_lambda(lam: float, n: int, m: int) -> float:
    """Shrink ``h = lam^(1/2m)`` from the ``n^(-1/(2m+1))`` to the ``n^(-1/(2m+1/2))`` rate."""
    expo = 1.0 / (2 * m + 1) - 1.0 / (2 * m + 0.5)
    return lam * float(n) ** (2 * m * expo)


def _gaussian_units(fit: FittedSpline):
    """Eigensystem, lambda and sigma_hat rescaled to ``I = sigma_hat**-2``."""
    fam = fit.family
    if fit.sigma2hat is None or not fit.sigma2hat > 0:
        raise ValueError("residual scale unavailable (zero residuals or traceA >= n)")
    factor = math.sqrt(fit.sigma2hat / fam.sigma2)
    return fit.es.rescaled(factor), fit.lam / factor ** 2, math.sqrt(fit.sigma2hat)


def info_eigensystem(fit: FittedSpline, N: int = 41) -> EigenSystem:
    """Eigensystem diagonalizing ``V`` under the fitted information.

    Gaussian: the fitting system rescaled by ``sigma_hat``.  Constant
    information on a periodic system: trigonometric basis with
    ``scale = I**-1/2``.  Otherwise a Galerkin solve with
    ``I(z) = info(g_hat(z))``.
    """
    fam = fit.family
    if isinstance(fam, GaussianFamily):
        return _gaussian_units(fit)[0]
    if isinstance(fam, GammaFamily) and fit.es.periodic:
        return trig_eigensystem(fit.es.m, fam.alpha ** -0.5, fit.es.N)
    m = fit.es.m

    def weight(z):
        # saturated fitted probabilities would make V singular
        return np.maximum(fam.info(fit(z)), INFO_FLOOR)

    return galerkin_eigensystem(weight, m=m, N=max(N, m + 3))


def _null_constants(fit: FittedSpline, es_info: Optional[EigenSystem]):
    """``(KernelEval, scale)`` where statistics in family units multiply by ``scale``."""
    if isinstance(fit.family, GaussianFamily):
        es_s, lam_s, _ = _gaussian_units(fit)
        return KernelEval(es_s if es_info is None else es_info, lam_s), fit.family.sigma2 / fit.sigma2hat
    es = info_eigensystem(fit) if es_info is None else es_info
    return KernelEval(es, fit.lam), 1.0


# ---------------------------------------------------------------------------
# pointwise intervals
# ---------------------------------------------------------------------------

def pointwise_ci(fit: FittedSpline, z0: float, alpha: float = 0.05, method: str = "ACI",
                 *, form: str = "auto", es_info: Optional[EigenSystem] = None) -> IntervalResult:
    """Asymptotic pointwise interval for ``g(z0)``.

    ``ACI`` uses ``sigma_z0 / sqrt(nh)`` with ``sigma_z0^2 = h sum h_nu(z0)^2
    / (1 + lam gamma_nu)^2``; for periodic Gaussian fits (``form="auto"`` or
    ``"closed"``) this is replaced by its limit
    ``sigma_hat^(1-1/2m) sqrt(I_2 / (pi n h))``.  ``WCI`` and ``NCI`` are the
    Bayesian intervals' asymptotic equivalents, wider by ``sqrt(4/3)`` and
    ``sqrt(9/8)``; they are defined for Gaussian ``m = 2`` only.
    """
    method = method.upper()
    if method not in WIDTH_RATIO:
        raise ValueError(f"unknown interval method {method!r}")
    gaussian = isinstance(fit.family, GaussianFamily)
    if method != "ACI" and not (gaussian and fit.es.m == 2):
        raise UnsupportedError("unsupported-combination: WCI/NCI require the Gaussian family with m=2")
    if not 0 < alpha <= 1:
        raise ValueError("alpha must lie in (0, 1]")
    q = stats.norm.isf(alpha / 2)
    center = float(fit(z0)[0])
    if gaussian:
        es_s, lam_s, sig = _gaussian_units(fit)
        closed = form == "closed" or (form == "auto" and fit.es.kind == "trig")
        if closed:
            m = fit.es.m
            h = lam_s ** (1.0 / (2 * m))
            base = sig ** (1 - 1 / (2 * m)) * math.sqrt(asymptotic_Il(m, 2) / (math.pi * fit.n * h))
        else:
            base = math.sqrt(float(KernelEval(es_s if es_info is None else es_info, lam_s).Q(z0, 2)[0]) / fit.n)
    else:
        es = info_eigensystem(fit) if es_info is None else es_info
        base = math.sqrt(float(KernelEval(es, fit.lam).Q(z0, 2)[0]) / fit.n)
    return IntervalResult(float(z0), center, float(q * base * WIDTH_RATIO[method]), method, float(alpha))


# ---------------------------------------------------------------------------
# local likelihood ratio test
# ---------------------------------------------------------------------------

def local_lrt(data, fam: ModelFamily, es: EigenSystem, lam: float, z0: float, w0: float,
              alpha: float = 0.05, *, es_info: Optional[EigenSystem] = None,
              X=None) -> TestResult:
    """Test ``H0: g(z0) = w0`` against the ``c0 chi^2_1`` null law.

    ``c0`` is ``I_2 / I_1`` for periodic systems with ``m`` in ``{2, 3}`` and
    ``Q_2 / Q_1`` at ``(lam, z0)`` otherwise.
    """
    z, y = data
    if X is None:
        X = es.evaluate(np.asarray(z, dtype=float))
    full = fit(data, fam, es, lam, X=X)
    cons = fit_constrained(data, fam, es, lam, z0, w0, X=X)
    ks, scale = _null_constants(full, es_info)
    stat = -2.0 * full.n * scale * (cons.objective - full.objective)
    if es.periodic and es.m in (2, 3):
        c0 = asymptotic_Il(es.m, 2) / asymptotic_Il(es.m, 1)
    else:
        c0 = q_ratio_c0(ks, z0)
    p = float(stats.chi2.sf(max(stat, 0.0) / c0, 1))
    return TestResult("localLRT", float(stat), {"law": "c0*chi2_1", "c0": float(c0)}, p,
                      bool(p < alpha), float(alpha), "asymptotic",
                      {"z0": float(z0), "w0": float(w0), "lambda": float(lam)})


# ---------------------------------------------------------------------------
# simultaneous confidence band
# ---------------------------------------------------------------------------

def equivalent_kernel_omega0(t):
    """Equivalent kernel of the cubic smoothing spline (unit noise)."""
    t = np.asarray(t, dtype=float)
    r = np.abs(t) / math.sqrt(2.0)
    return np.exp(-r) * (np.cos(t / math.sqrt(2.0)) + np.sin(r)) / (2 * math.sqrt(2.0))


def scb_critical(alpha: float) -> float:
    """``c*_alpha = -log(-log(1 - alpha) / 2)``."""
    return -math.log(-math.log1p(-alpha) / 2.0)


def _d_n(h: float, phi: float, mode: str, rho: float) -> float:
    if mode == "simple":
        return math.sqrt(-2.0 * math.log(h))
    if mode == "exact":
        L = 1.0 / h - 2.0 * h ** (phi - 1.0)
        if L <= math.e:
            raise ValueError(f"exact d_n undefined: h^-1 - 2 h^(phi-1) = {L:.4g} <= e "
                             f"(h={h:.4g}, phi={phi}); use a larger phi or dn_mode='simple'")
        root = math.sqrt(2.0 * math.log(L))
        return root + (1.0 / rho - 0.5) * math.log(math.log(L)) / root
    raise ValueError(f"unknown d_n mode {mode!r}")


def scb(fit: FittedSpline, alpha: float = 0.05, phi: float = 0.9, dn_mode: str = "simple",
        rho: float = 2.0, grid_size: int = 201) -> BandResult:
    """Simultaneous band ``g_hat(z) +- 0.5149418 (nh)^-1/2 sigma_hat^(3/4) (c*/sqrt(-2 log h) + d_n)``.

    The band lives on ``[h^phi, 1 - h^phi]`` and is defined for the Gaussian
    family with ``m = 2``.
    """
    if not isinstance(fit.family, GaussianFamily) or fit.es.m != 2:
        raise UnsupportedError("unsupported-combination: bands require the Gaussian family with m=2")
    if not 0 < phi < 1:
        raise ValueError("phi must lie in (0, 1)")
    if not 0 < rho <= 2:
        raise ValueError("rho must lie in (0, 2]")
    _, lam_s, sig = _gaussian_units(fit)
    h = lam_s ** 0.25
    if h >= 1:
        raise ValueError("band requires h < 1")
    lo = h ** phi
    if lo >= 0.5:
        raise ValueError(f"boundary layer h^phi = {lo:.3f} leaves no interior grid")
    d_n = _d_n(h, phi, dn_mode, rho)
    half = SIGMA_OMEGA0 * sig ** 0.75 / math.sqrt(fit.n * h) * (
        scb_critical(alpha) / math.sqrt(-2.0 * math.log(h)) + d_n)
    z = np.linspace(lo, 1.0 - lo, grid_size)
    centers = fit(z)
    return BandResult(z, centers, np.full(z.size, half), float(phi), float(d_n), float(alpha),
                      float(h), float(-math.log(h) / math.log(fit.n)), dn_mode)


# ---------------------------------------------------------------------------
# penalized likelihood ratio tests
# ---------------------------------------------------------------------------

def _chi2_decision(stat, u_n, alpha):
    return float(stats.chi2.sf(max(stat, 0.0), u_n))


def _plrt_constants(ks: KernelEval, skip: int, constants: str):
    """``(r_K, u_n)`` from the spectral sums or from their power-law limits.

    ``series`` sums ``1/(1 + lam gamma_nu)`` over the components not shared
    by the null and alternative fits.  ``closed`` uses
    ``gamma_nu ~ (alpha nu)^(2m)``, giving ``r_K = I_1/I_2`` and
    ``u_n = I_1^2 / (I_2 alpha h)``.
    """
    if constants == "series":
        _, _, r_K, u_n = spectral_sums(ks, tail=True, skip=skip)
        return r_K, u_n
    if constants == "closed":
        m = ks.es.m
        I1, I2 = asymptotic_Il(m, 1), asymptotic_Il(m, 2)
        if ks.es.kind == "trig":
            alpha = math.pi * ks.es.scale ** (1.0 / m)
        else:
            alpha = power_law_alpha(ks.es)
        return I1 / I2, I1 * I1 / (I2 * alpha * ks.h)
    raise ValueError(f"unknown constants mode {constants!r}")


def _rng(seed, b):
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(b), 7])))


def _gaussian_smoother(X, lam, P, sigma2):
    """Linear map ``y -> c`` of a Gaussian penalized fit."""
    n = X.shape[0]
    Pm = np.diag(P) if np.ndim(P) == 1 else np.asarray(P)
    A = X.T @ X / (n * sigma2) + lam * Pm
    return np.linalg.solve((A + A.T) / 2, X.T / (n * sigma2))


def _gaussian_objectives(X, Y, C, lam, P, sigma2):
    """Penalized criterion for each column pair of ``Y`` and ``C``."""
    R = Y - X @ C
    Pm = np.diag(P) if np.ndim(P) == 1 else np.asarray(P)
    pen = np.einsum("ib,ij,jb->b", C, Pm, C)
    return -np.mean(R * R, axis=0) / (2 * sigma2) - 0.5 * lam * pen, np.sum(R * R, axis=0)


def _resolve_g0(g0, es):
    """``(callable, J(g0, g0))`` from a callable or coefficient vector."""
    if callable(g0):
        return g0, None
    c = np.asarray(g0, dtype=float)
    return (lambda z: es.evaluate(z) @ c), float(np.sum(es.gamma * c * c))


def plrt(data, fam: ModelFamily, es: EigenSystem, lam: float, g0, alpha: float = 0.05,
         calibration: str = "asymptotic", *, J0: Optional[float] = None, B: int = 500,
         seed: int = 0, es_info: Optional[EigenSystem] = None, X=None,
         constants: str = "series", bias_correction: bool = False) -> TestResult:
    """Penalized likelihood ratio test of ``H0: g = g0``.

    ``g0`` is a callable or a coefficient vector in ``es``.  ``J0`` is its
    penalty ``J(g0, g0)``; for callables it defaults to the penalty of the
    V-projection onto ``es``.

    With ``bias_correction`` the statistic is centred by the smoothing bias
    ``n r_K ||W_lam g0||^2`` before the ``chi^2_{u_n}`` comparison.  The term
    is ``o(u_n)`` asymptotically but can be a sizeable fraction of ``u_n``
    for sharply curved ``g0`` at moderate ``n``.
    """
    z, y = np.asarray(data[0], dtype=float), np.asarray(data[1], dtype=float)
    g0f, Jc = _resolve_g0(g0, es)
    if J0 is None:
        if Jc is None:
            c0 = es.project(g0f)
            Jc = float(np.sum(es.gamma * c0 * c0))
        J0 = Jc
    if X is None:
        X = es.evaluate(z)
    full = fit((z, y), fam, es, lam, X=X)
    ks, scale = _null_constants(full, es_info)
    r_K, u_n = _plrt_constants(ks, 0, constants)
    n = y.size
    gz = np.asarray(g0f(z), dtype=float)
    obj0 = float(np.mean(fam.loglik(y, gz))) - 0.5 * lam * J0
    stat = -2.0 * n * r_K * scale * (obj0 - full.objective)
    null = {"law": "chi2", "r_K": float(r_K), "u_n": float(u_n)}
    details = {"lambda": float(lam), "h": float(ks.h)}
    calibration = _check_calibration(calibration, u_n)
    if calibration == "asymptotic":
        bias = _smoothing_bias(ks, g0f, n, r_K) if bias_correction else 0.0
        if bias_correction:
            details["bias"] = bias
        p = _chi2_decision(stat - bias, u_n, alpha)
    else:
        boot = _bootstrap_simple(z, gz, J0, fam, es, lam, X, r_K, full, B, seed)
        p = float(np.mean(boot >= stat))
        details["B"] = int(B)
    return TestResult("PLRT", float(stat), null, p, bool(p < alpha), float(alpha),
                      calibration, details)


def _smoothing_bias(ks: KernelEval, g0f, n, r_K):
    """``n r_K ||W_lam g0||^2`` in the norm ``V + lam J`` of ``ks``."""
    c = ks.es.project(g0f)
    lg = ks.lam * ks.es.gamma
    return float(n * r_K * np.sum(lg * lg / (1.0 + lg) * c * c))


def _check_calibration(calibration, u_n):
    if calibration not in ("asymptotic", "bootstrap"):
        raise ValueError(f"unknown calibration {calibration!r}")
    if calibration == "asymptotic" and u_n < 1:
        warnings.warn(f"u_n = {u_n:.3f} < 1; switching to bootstrap calibration", RuntimeWarning)
        return "bootstrap"
    return calibration


def _bootstrap_simple(z, gz, J0, fam, es, lam, X, r_K, full, B, seed):
    n = z.size
    if isinstance(fam, GaussianFamily):
        sig = math.sqrt(full.sigma2hat)
        E = np.column_stack([_rng(seed, b).standard_normal(n) for b in range(B)])
        Y = gz[:, None] + sig * E
        S = _gaussian_smoother(X, lam, es.gamma, fam.sigma2)
        C = S @ Y
        obj1, rss = _gaussian_objectives(X, Y, C, lam, es.gamma, fam.sigma2)
        obj0 = -np.mean((Y - gz[:, None]) ** 2, axis=0) / (2 * fam.sigma2) - 0.5 * lam * J0
        s2 = rss / (n - full.traceA)
        return -2.0 * n * r_K * (fam.sigma2 / s2) * (obj0 - obj1)
    out = np.empty(B)
    for b in range(B):
        yb = fam.sample(_rng(seed, b), gz)
        fb = fit((z, yb), fam, es, lam, X=X)
        obj0 = float(np.mean(fam.loglik(yb, gz))) - 0.5 * lam * J0
        out[b] = -2.0 * n * r_K * (obj0 - fb.objective)
    return out


def plrt_composite(data, fam: ModelFamily, es: EigenSystem, lam: float, q: int = 1,
                   alpha: float = 0.05, calibration: str = "asymptotic", *, B: int = 500,
                   seed: int = 0, es_info: Optional[EigenSystem] = None, X=None,
                   constants: str = "series") -> TestResult:
    """PLRT of ``H0: g`` is a polynomial of degree ``q``.

    The null estimate maximizes the same penalized criterion over
    polynomials, with the penalty Gram matrix of the monomials integrated
    exactly.
    """
    z, y = np.asarray(data[0], dtype=float), np.asarray(data[1], dtype=float)
    if q < 0:
        raise ValueError("q must be nonnegative")
    if q + 1 >= y.size:
        raise ValueError("q + 1 must be smaller than n")
    if es.periodic and q >= 1:
        raise UnsupportedError("unsupported-combination: a periodic space contains no "
                               "nonconstant polynomials; use the galerkin basis")
    if X is None:
        X = es.evaluate(z)
    full = fit((z, y), fam, es, lam, X=X)
    cstar, objstar, etastar = fit_polynomial((z, y), fam, q, es.m, lam)
    ks, scale = _null_constants(full, es_info)
    # the q+1 lowest components (polynomials of degree <= q) cancel between fits
    r_K, u_n = _plrt_constants(ks, q + 1, constants)
    n = y.size
    stat = -2.0 * n * r_K * scale * (objstar - full.objective)
    null = {"law": "chi2", "r_K": float(r_K), "u_n": float(u_n)}
    details = {"lambda": float(lam), "h": float(ks.h), "q": int(q),
               "null_coef": [float(v) for v in cstar]}
    calibration = _check_calibration(calibration, u_n)
    if calibration == "asymptotic":
        p = _chi2_decision(stat, u_n, alpha)
    else:
        boot = _bootstrap_composite(z, etastar, q, fam, es, lam, X, r_K, full, B, seed)
        p = float(np.mean(boot >= stat))
        details["B"] = int(B)
    return TestResult("compositePLRT", float(stat), null, p, bool(p < alpha), float(alpha),
                      calibration, details)


def _bootstrap_composite(z, etastar, q, fam, es, lam, X, r_K, full, B, seed):
    n = z.size
    m = es.m
    if isinstance(fam, GaussianFamily):
        sig = math.sqrt(full.sigma2hat)
        E = np.column_stack([_rng(seed, b).standard_normal(n) for b in range(B)])
        Y = etastar[:, None] + sig * E
        S = _gaussian_smoother(X, lam, es.gamma, fam.sigma2)
        C = S @ Y
        obj1, rss = _gaussian_objectives(X, Y, C, lam, es.gamma, fam.sigma2)
        V = np.vander(z, q + 1, increasing=True)
        D = polynomial_penalty(q, m)
        Sp = _gaussian_smoother(V, lam, D, fam.sigma2)
        obj0, _ = _gaussian_objectives(V, Y, Sp @ Y, lam, D, fam.sigma2)
        s2 = rss / (n - full.traceA)
        return -2.0 * n * r_K * (fam.sigma2 / s2) * (obj0 - obj1)
    out = np.empty(B)
    for b in range(B):
        yb = fam.sample(_rng(seed, b), etastar)
        fb = fit((z, yb), fam, es, lam, X=X)
        _, ob, _ = fit_polynomial((z, yb), fam, q, m, lam)
        out[b] = -2.0 * n * r_K * (ob - fb.objective)
    return out


def omega0_norm2() -> float:
    """``int omega_0(t)^2 dt`` by quadrature."""
    f = lambda t: float(equivalent_kernel_omega0(t)) ** 2
    return 2.0 * integrate.quad(f, 0.0, np.inf, epsabs=1e-13, epsrel=1e-12, limit=200)[0]
