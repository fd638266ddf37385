"""Simultaneously diagonalizing bases for the variance and penalty forms.

An :class:`EigenSystem` holds pairs ``(gamma_nu, h_nu)`` with

    V(h_mu, h_nu) = delta_{mu nu},    J(h_mu, h_nu) = gamma_mu delta_{mu nu},

where ``V(g, f) = E{I(Z) g(Z) f(Z)}`` and ``J(g, f) = int g^(m) f^(m)``.
Two constructors are provided: the closed-form trigonometric system for
periodic splines and a Galerkin solution of the eigen-ODE on B-splines for
the general (nonperiodic, weighted) case.  :class:`KernelEval` binds a
smoothing parameter to a system and evaluates the reproducing kernel series
and its spectral constants.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy import integrate, linalg, sparse
from scipy.interpolate import BSpline, CubicSpline

__all__ = [
    "EigenSystem",
    "KernelEval",
    "EigenSolverError",
    "DegeneratePointError",
    "trig_eigensystem",
    "galerkin_eigensystem",
    "default_truncation",
    "kernel_value",
    "restricted_kernel",
    "q_ratio_c0",
    "spectral_sums",
    "asymptotic_Il",
    "apply_W_lambda",
    "power_law_alpha",
]

JSON_VERSION = 1


class EigenSolverError(RuntimeError):
    """Raised when the generalized eigenproblem cannot be solved reliably."""


class DegeneratePointError(ValueError):
    """Raised when a point carries (numerically) zero kernel mass."""


def _as_grid(z) -> np.ndarray:
    z = np.atleast_1d(np.asarray(z, dtype=float))
    if np.any(z < -1e-12) or np.any(z > 1 + 1e-12):
        raise ValueError("evaluation points must lie in [0, 1]")
    return np.clip(z, 0.0, 1.0)


def default_truncation(n: int, h: float) -> int:
    """Number of retained eigenpairs, ``min(n, 2*ceil(1/h) + 1)``, made odd."""
    if h <= 0:
        raise ValueError("h must be positive")
    N = min(int(n), 2 * math.ceil(1.0 / h) + 1)
    if N % 2 == 0:
        N -= 1
    return max(N, 3)


class EigenSystem:
    """Eigenvalues and evaluable eigenfunctions on [0, 1].

    Parameters are normally supplied by :func:`trig_eigensystem` or
    :func:`galerkin_eigensystem`; direct construction is for deserialization.
    """

    def __init__(self, m, periodic, gamma, kind, *, scale=1.0, knots=None,
                 degree=None, coef=None, weight=None, density=None,
                 quad_nodes=None, quad_weights=None, tabulated=None):
        self.m = int(m)
        self.periodic = bool(periodic)
        self.gamma = np.asarray(gamma, dtype=float)
        self.gamma.setflags(write=False)
        self.kind = kind
        self.scale = float(scale)
        self.knots = knots
        self.degree = degree
        self.coef = coef
        self.weight = weight
        self.density = density
        self._quad = (quad_nodes, quad_weights)
        self._tabulated = tabulated
        if kind == "bspline":
            self._spline = BSpline(knots, coef, degree, extrapolate=False)

    @property
    def N(self) -> int:
        return self.gamma.size

    @property
    def null_dim(self) -> int:
        return int(np.count_nonzero(self.gamma == 0.0))

    def __repr__(self):
        return (f"EigenSystem(kind={self.kind!r}, m={self.m}, "
                f"periodic={self.periodic}, N={self.N})")

    def evaluate(self, z, derivative: int = 0) -> np.ndarray:
        """Matrix ``H[i, nu] = h_nu^(derivative)(z_i)``."""
        z = _as_grid(z)
        if self.kind == "trig":
            return _trig_matrix(z, self.N, self.scale, derivative)
        if self.kind == "bspline":
            if derivative == 0:
                dm = BSpline.design_matrix(z, self.knots, self.degree)
                return np.asarray(dm @ self.coef)
            return self._spline.derivative(derivative)(z)
        out = np.column_stack([f(z, derivative) for f in self._tabulated])
        return out

    def info_weight(self, z) -> np.ndarray:
        """I(z) * pi(z) as used in the V form."""
        z = _as_grid(z)
        if self.kind == "trig":
            return np.full(z.shape, self.scale ** -2)
        w = np.ones_like(z)
        if self.weight is not None:
            w = w * self.weight(z)
        if self.density is not None:
            w = w * self.density(z)
        return w

    def quadrature(self):
        """Nodes and V-weights reproducing the discrete V form of the system."""
        nodes, weights = self._quad
        if nodes is None:
            M = max(4 * self.N, 64)
            nodes = np.arange(M) / M
            weights = np.full(M, self.scale ** -2 / M)
            self._quad = (nodes, weights)
        return nodes, weights

    def project(self, func: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
        """Coefficients ``V(func, h_nu)`` by the system's quadrature."""
        nodes, weights = self.quadrature()
        H = self.evaluate(nodes)
        return H.T @ (weights * np.asarray(func(nodes), dtype=float))

    def gram_V(self) -> np.ndarray:
        nodes, weights = self.quadrature()
        H = self.evaluate(nodes)
        return H.T @ (H * weights[:, None])

    def gram_J(self) -> np.ndarray:
        """Penalty Gram matrix of the retained functions by quadrature."""
        if self.kind == "trig":
            M = max(4 * self.N, 64)
            nodes = np.arange(M) / M
            D = self.evaluate(nodes, self.m)
            return D.T @ D / M
        if self.kind == "bspline":
            nodes, w = _gauss_nodes(self.knots, self.degree, self.m + 1)
            D = _derivative_design(nodes, self.knots, self.degree, self.m) @ self.coef
            return D.T @ (D * w[:, None])
        raise NotImplementedError("penalty Gram unavailable for tabulated bases")

    def rescaled(self, factor: float) -> "EigenSystem":
        """System for ``I -> I / factor**2``: ``h -> factor*h``, ``gamma -> factor**2*gamma``."""
        if factor <= 0:
            raise ValueError("factor must be positive")
        f2 = factor * factor
        if self.kind == "trig":
            return trig_eigensystem(self.m, self.scale * factor, self.N)
        weight = self.weight
        new_weight = (lambda z: weight(z) / f2) if weight is not None else (lambda z: np.full(np.shape(z), 1.0 / f2))
        nodes, weights = self._quad
        if self.kind == "bspline":
            return EigenSystem(self.m, self.periodic, self.gamma * f2, "bspline",
                               knots=self.knots, degree=self.degree,
                               coef=self.coef * factor, weight=new_weight,
                               density=self.density, quad_nodes=nodes,
                               quad_weights=None if weights is None else weights / f2)
        tab = [(lambda z, d=0, f=f: factor * f(z, d)) for f in self._tabulated]
        return EigenSystem(self.m, self.periodic, self.gamma * f2, "tabulated",
                           tabulated=tab, weight=new_weight,
                           quad_nodes=nodes,
                           quad_weights=None if weights is None else weights / f2)

    # -- serialization -------------------------------------------------
    def to_dict(self, grid_size: int = 513) -> dict:
        doc = {"version": JSON_VERSION, "m": self.m, "periodic": self.periodic,
               "gamma": self.gamma.tolist()}
        if self.kind == "trig":
            doc["basis"] = {"type": "trig", "scale": self.scale}
            return doc
        grid = np.linspace(0.0, 1.0, grid_size)
        basis = {"type": "tabulated", "grid": grid.tolist(),
                 "values": self.evaluate(grid).tolist()}
        if self.kind == "bspline":
            basis["bspline"] = {"knots": np.asarray(self.knots).tolist(),
                                "degree": int(self.degree),
                                "coef": np.asarray(self.coef).tolist()}
        doc["basis"] = basis
        return doc

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(**kw))

    @classmethod
    def from_dict(cls, doc: dict) -> "EigenSystem":
        if doc.get("version", JSON_VERSION) != JSON_VERSION:
            raise ValueError(f"unsupported eigensystem document version {doc.get('version')}")
        basis = doc["basis"]
        m, periodic = int(doc["m"]), bool(doc["periodic"])
        gamma = np.asarray(doc["gamma"], dtype=float)
        if basis["type"] == "trig":
            return trig_eigensystem(m, float(basis["scale"]), gamma.size)
        if basis["type"] != "tabulated":
            raise ValueError(f"unknown basis type {basis['type']!r}")
        if "bspline" in basis:
            b = basis["bspline"]
            knots = np.asarray(b["knots"], dtype=float)
            return _bspline_system(m, periodic, gamma, knots, int(b["degree"]),
                                   np.asarray(b["coef"], dtype=float))
        grid = np.asarray(basis["grid"], dtype=float)
        values = np.asarray(basis["values"], dtype=float)
        splines = [CubicSpline(grid, values[:, j]) for j in range(values.shape[1])]
        tab = [(lambda z, d=0, s=s: s(z, d)) for s in splines]
        # Without the original weights, V is approximated by the trapezoid rule
        # with unit I*pi on the tabulation grid.
        return EigenSystem(m, periodic, gamma, "tabulated", tabulated=tab,
                           quad_nodes=grid, quad_weights=_trapezoid_weights(grid))

    @classmethod
    def from_json(cls, text: str) -> "EigenSystem":
        return cls.from_dict(json.loads(text))


def _trapezoid_weights(grid):
    w = np.zeros_like(grid)
    d = np.diff(grid)
    w[:-1] += d / 2
    w[1:] += d / 2
    return w


# ---------------------------------------------------------------------------
# trigonometric (periodic) system
# ---------------------------------------------------------------------------

def _trig_matrix(z, N, scale, derivative):
    K = (N - 1) // 2
    out = np.empty((z.size, N))
    out[:, 0] = scale if derivative == 0 else 0.0
    if K == 0:
        return out
    k = np.arange(1, K + 1)
    w = 2 * np.pi * k
    arg = np.outer(z, w)
    amp = math.sqrt(2.0) * scale * w ** derivative
    # d^j/dz^j of sin/cos cycles through a phase shift of j*pi/2.
    shift = derivative * np.pi / 2
    out[:, 1::2] = amp * np.sin(arg + shift)
    out[:, 2::2] = amp * np.cos(arg + shift)
    return out


def trig_eigensystem(m: int, scale: float, N: int) -> EigenSystem:
    """Periodic system ``h_0 = s``, ``h_{2k-1} = sqrt2 s sin(2 pi k z)``, ``h_{2k} = sqrt2 s cos``.

    ``scale`` is ``sigma`` for Gaussian regression (``I = sigma**-2``) or
    ``alpha**-1/2`` for the gamma model.  Eigenvalues are
    ``gamma_{2k-1} = gamma_{2k} = s**2 (2 pi k)**(2m)``.
    """
    if int(m) != m or m < 2:
        raise ValueError("penalty order m must be an integer >= 2")
    if N < 3 or N % 2 == 0:
        raise ValueError("truncation N must be odd and >= 3 (sine/cosine pairs plus constant)")
    if not scale > 0:
        raise ValueError("scale must be positive")
    K = (N - 1) // 2
    k = np.repeat(np.arange(1, K + 1), 2)
    gamma = np.concatenate([[0.0], scale ** 2 * (2 * np.pi * k) ** (2 * m)])
    return EigenSystem(m, True, gamma, "trig", scale=scale)


# ---------------------------------------------------------------------------
# Galerkin system for the weighted eigen-ODE
# ---------------------------------------------------------------------------

def _gauss_nodes(knots, degree, npts):
    """Gauss-Legendre nodes/weights on every nondegenerate knot interval."""
    brk = np.unique(knots)
    x, w = np.polynomial.legendre.leggauss(npts)
    a, b = brk[:-1], brk[1:]
    half = (b - a) / 2
    nodes = (a[:, None] + half[:, None] * (x[None, :] + 1)).ravel()
    weights = (half[:, None] * w[None, :]).ravel()
    return nodes, weights


def _bspline_system(m, periodic, gamma, knots, degree, coef, weight=None,
                    density=None, quad=None):
    if quad is None:
        nodes, w = _gauss_nodes(knots, degree, degree + 3)
        iw = np.ones_like(nodes)
        if weight is not None:
            iw = iw * weight(nodes)
        if density is not None:
            iw = iw * density(nodes)
        quad = (nodes, w * iw)
    return EigenSystem(m, periodic, gamma, "bspline", knots=knots, degree=degree,
                       coef=coef, weight=weight, density=density,
                       quad_nodes=quad[0], quad_weights=quad[1])


def galerkin_eigensystem(weight: Optional[Callable] = None,
                         density: Optional[Callable] = None,
                         m: int = 2, grid_size: Optional[int] = None,
                         N: int = 41, *, residual_tol: float = 1e-6) -> EigenSystem:
    """Solve ``(-1)^m h^(2m) = gamma I pi h`` with natural boundary conditions.

    The weak form ``J(h, v) = gamma V(h, v)`` is discretized on clamped
    B-splines of order ``2m`` over ``grid_size`` uniform knot intervals
    (default ``10 N``); the natural conditions ``h^(j)(0) = h^(j)(1) = 0``,
    ``j = m..2m-1``, are implied by the weak form.  The ``m``-dimensional
    null space is returned as V-orthonormalized monomials.

    ``weight`` is I(z) and ``density`` the design density pi(z); both default
    to 1 and must be bounded away from zero.
    """
    if int(m) != m or m < 2:
        raise ValueError("penalty order m must be an integer >= 2")
    if N <= m:
        raise ValueError("N must exceed the null-space dimension m")
    if grid_size is None:
        grid_size = 10 * N
    if grid_size < 10 * N:
        raise ValueError("grid_size must be at least 10*N")
    degree = 2 * m - 1
    brk = np.linspace(0.0, 1.0, grid_size + 1)
    knots = np.concatenate([np.zeros(degree), brk, np.ones(degree)])

    nodes, qw = _gauss_nodes(knots, degree, degree + 3)
    iw = np.ones_like(nodes)
    if weight is not None:
        iw = iw * np.asarray(weight(nodes), dtype=float)
    if density is not None:
        iw = iw * np.asarray(density(nodes), dtype=float)
    if not np.all(np.isfinite(iw)) or iw.min() <= 0:
        raise EigenSolverError("I*pi must be finite and bounded away from zero on [0, 1]")
    vw = qw * iw

    B = BSpline.design_matrix(nodes, knots, degree).tocsr()
    Dm = _derivative_design(nodes, knots, degree, m)
    G = (B.T @ B.multiply(vw[:, None])).toarray()
    P = (Dm.T @ Dm.multiply(qw[:, None])).toarray()
    G = (G + G.T) / 2
    P = (P + P.T) / 2

    # Null space: V-orthonormalized monomials 1, z, ..., z^(m-1).
    rhs = np.column_stack([B.T @ (vw * nodes ** j) for j in range(m)])
    try:
        mono = linalg.solve(G, rhs, assume_a="pos")
        L = linalg.cholesky(mono.T @ G @ mono, lower=True)
        gam, vec = linalg.eigh(P, G, subset_by_index=[0, N - 1])
    except linalg.LinAlgError as exc:
        raise EigenSolverError(f"variance Gram matrix not positive definite: {exc}") from exc
    null = linalg.solve_triangular(L, mono.T, lower=True).T

    resid = np.linalg.norm(P @ vec - (G @ vec) * gam, axis=0)
    rel = resid / (np.linalg.norm(P, ord=1) * np.linalg.norm(vec, axis=0))
    worst = float(np.max(rel))
    if not np.isfinite(worst) or worst > residual_tol:
        raise EigenSolverError(f"eigensolver did not converge (relative residual {worst:.3e})")
    if not np.all(np.abs(gam[:m]) < 0.05 * gam[m]):
        raise EigenSolverError(
            f"penalty null space has unexpected dimension (leading eigenvalues {gam[:m + 1]})")

    # The dense solve has absolute eigenvalue error ~ eps*|P|, which is large
    # relative to the low modes.  Its span is accurate, so a Rayleigh-Ritz pass
    # with Gram matrices formed from evaluated functions and m-th derivatives
    # (never from P itself) restores accurate eigenvalues and V/J orthogonality.
    rest = vec[:, m:]
    rest = rest - null @ (null.T @ (G @ rest))
    bv = B @ rest
    dv = Dm @ rest
    Gs = bv.T @ (bv * vw[:, None])
    Ps = dv.T @ (dv * qw[:, None])
    rgam, rot = linalg.eigh((Ps + Ps.T) / 2, (Gs + Gs.T) / 2)
    rest = rest @ rot
    vec = np.column_stack([null, rest])
    gam = np.concatenate([np.zeros(m), rgam])
    if np.any(gam[m:] <= 0):
        raise EigenSolverError("nonpositive eigenvalue outside the null space")

    # Deterministic signs: h_nu(0) > 0, falling back to the largest coefficient.
    for j in range(m, N):
        col = vec[:, j]
        ref = col[0] if abs(col[0]) > 1e-8 * np.abs(col).max() else col[np.argmax(np.abs(col))]
        if ref < 0:
            vec[:, j] = -col
    return _bspline_system(m, False, gam, knots, degree, vec, weight=weight,
                           density=density, quad=(nodes, vw))


def _derivative_design(nodes, knots, degree, order):
    """Sparse matrix of ``order``-th derivatives of every B-spline at ``nodes``.

    Differentiation maps coefficients through a sparse difference operator onto
    the degree ``degree - order`` B-splines of the trimmed knot vector, so no
    dense basis matrix is ever formed.
    """
    t = np.asarray(knots, dtype=float)
    k = degree
    nb = t.size - k - 1
    op = sparse.identity(nb, format="csr")
    for _ in range(order):
        n_out = t.size - k - 2
        denom = t[k + 1:k + 1 + n_out] - t[1:1 + n_out]
        scale = np.where(denom > 0, k / np.where(denom > 0, denom, 1.0), 0.0)
        d = sparse.diags([-scale, scale], [0, 1], shape=(n_out, n_out + 1), format="csr")
        op = d @ op
        t = t[1:-1]
        k -= 1
    low = BSpline.design_matrix(nodes, t, k).tocsr()
    return (low @ op).tocsr()


def power_law_alpha(es: EigenSystem, nu_min: int = 3, nu_max: Optional[int] = None) -> float:
    """Growth constant ``alpha`` in ``gamma_nu ~ (alpha nu)^(2m)``.

    Least-squares slope of ``gamma_nu**(1/(2m))`` against ``nu`` over
    ``nu_min..nu_max`` (default ``N // 2``); an intercept absorbs the
    boundary-induced index offset of nonperiodic systems.
    """
    if nu_max is None:
        nu_max = es.N // 2
    nu = np.arange(nu_min, nu_max + 1)
    root = es.gamma[nu] ** (1.0 / (2 * es.m))
    slope, _ = np.polyfit(nu, root, 1)
    return float(slope)


# ---------------------------------------------------------------------------
# kernel series
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class KernelEval:
    """Reproducing kernel of ``<g, f> = V(g, f) + lam J(g, f)`` over a system."""

    es: EigenSystem
    lam: float

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError("lambda must be positive")

    @property
    def h(self) -> float:
        return self.lam ** (1.0 / (2 * self.es.m))

    @property
    def weights(self) -> np.ndarray:
        return 1.0 / (1.0 + self.lam * self.es.gamma)

    def matrix(self, z1, z2=None) -> np.ndarray:
        """Kernel matrix ``K(z1_i, z2_j)``."""
        H1 = self.es.evaluate(z1)
        H2 = H1 if z2 is None else self.es.evaluate(z2)
        return (H1 * self.weights) @ H2.T

    def Q(self, z, power: int) -> np.ndarray:
        H = self.es.evaluate(z)
        return (H * H) @ self.weights ** power

    def inner(self, c1, c2) -> float:
        return float(np.sum(np.asarray(c1) * np.asarray(c2) * (1.0 + self.lam * self.es.gamma)))


def kernel_value(ks: KernelEval, z1: float, z2: float) -> float:
    """``K(z1, z2) = sum_nu h_nu(z1) h_nu(z2) / (1 + lam gamma_nu)``."""
    a = ks.es.evaluate(z1)[0]
    b = ks.es.evaluate(z2)[0]
    return float(np.sum(a * b * ks.weights))


def restricted_kernel(ks: KernelEval, z0: float, z1: float, z2: float,
                      tol: float = 1e-12) -> float:
    """Kernel of the subspace ``{g : g(z0) = 0}``."""
    k00 = kernel_value(ks, z0, z0)
    if k00 <= tol:
        raise DegeneratePointError(f"K(z0, z0) = {k00:.3e} is numerically zero")
    return kernel_value(ks, z1, z2) - kernel_value(ks, z1, z0) * kernel_value(ks, z0, z2) / k00


def q_ratio_c0(ks: KernelEval, z0: float) -> float:
    """Finite-lambda local-LRT scale ``Q_2(lam, z0) / Q_1(lam, z0)``."""
    h = ks.es.evaluate(z0)[0]
    h2 = h * h
    w = ks.weights
    return float(np.sum(h2 * w * w) / np.sum(h2 * w))


def _tail_gamma(es: EigenSystem, lam: float, cutoff: float = 1e10) -> np.ndarray:
    """Eigenvalues beyond the truncation, extrapolated until ``lam*gamma > cutoff``."""
    p = 2 * es.m
    if es.kind == "trig":
        k0 = (es.N - 1) // 2 + 1
        kmax = max(k0, int((cutoff / (lam * es.scale ** 2)) ** (1 / p) / (2 * np.pi)) + 1)
        kmax = min(kmax, k0 + 10 ** 7)
        k = np.arange(k0, kmax + 1, dtype=float)
        return np.repeat(es.scale ** 2 * (2 * np.pi * k) ** p, 2)
    lo = max(es.null_dim + 1, es.N // 2)
    nu = np.arange(lo, es.N)
    if nu.size < 2:
        return np.empty(0)
    slope, icpt = np.polyfit(nu, es.gamma[nu] ** (1.0 / p), 1)
    if slope <= 0:
        return np.empty(0)
    numax = int(((cutoff / lam) ** (1 / p) - icpt) / slope) + 1
    numax = min(max(numax, es.N), es.N + 10 ** 7)
    nu = np.arange(es.N, numax + 1, dtype=float)
    return (slope * nu + icpt) ** p


def spectral_sums(ks: KernelEval, tail: bool = False, skip: int = 0):
    """``(sigma_K^2, rho_K^2, r_K, u_n)`` over the retained eigenvalues.

    With ``tail=True`` the sums continue past the truncation using the exact
    trigonometric eigenvalues, or for tabulated systems a power law
    ``gamma_nu = (a nu + b)^(2m)`` fitted to the upper half of the spectrum.
    ``skip`` drops the leading ``skip`` terms (components shared by the null
    and alternative fits of a composite test).
    """
    h = ks.h
    w = ks.weights[skip:]
    if tail:
        w = np.concatenate([w, 1.0 / (1.0 + ks.lam * _tail_gamma(ks.es, ks.lam))])
    sigma2 = h * float(np.sum(w))
    rho2 = h * float(np.sum(w * w))
    r_K = sigma2 / rho2
    u_n = sigma2 ** 2 / (h * rho2)
    return sigma2, rho2, r_K, u_n


def asymptotic_Il(m: int, l: int) -> float:
    """``I_l = int_0^inf (1 + x^(2m))^(-l) dx`` by adaptive quadrature."""
    if m < 2 or l not in (1, 2):
        raise ValueError("requires m >= 2 and l in {1, 2}")
    f = lambda x: (1.0 + x ** (2 * m)) ** (-l)
    head, _ = integrate.quad(f, 0.0, 1.0, epsabs=1e-13, epsrel=1e-13)
    tail, _ = integrate.quad(f, 1.0, np.inf, epsabs=1e-13, epsrel=1e-13)
    return head + tail


def apply_W_lambda(ks: KernelEval, coeffs) -> np.ndarray:
    """Coefficients of ``W_lam g``: multiply by ``lam gamma / (1 + lam gamma)``."""
    lg = ks.lam * ks.es.gamma
    return np.asarray(coeffs, dtype=float) * (lg / (1.0 + lg))
