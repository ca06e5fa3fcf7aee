"""Minimum-energy curves under a Riemannian metric.

Curves are Chebyshev series on s in [0, 1] with c(0) = x_d and c(1) = x
pinned by construction: c(s) = x_d + s (x - x_d) + sum_j z_j phi_j(s), where
each phi_j = T_j - T_(j mod 2) vanishes at both ends. The energy
integral of c_s' M(c) c_s is evaluated with Clenshaw-Curtis quadrature.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional

import numpy as np
from numpy.polynomial import chebyshev as cheb

from .metrics import MetricError, MetricFamily
from .optkit import SolveReport, minimize_smooth

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Quadrature:
    nodes: np.ndarray
    weights: np.ndarray

    @classmethod
    def clenshaw_curtis(cls, K: int = 13) -> "Quadrature":
        return _clenshaw_curtis(K)

    def integrate(self, values):
        return np.tensordot(self.weights, np.asarray(values), axes=(0, 0))


@lru_cache(maxsize=16)
def _clenshaw_curtis(K: int) -> Quadrature:
    if K < 2:
        raise ValueError("need at least two quadrature nodes")
    n = K - 1
    k = np.arange(K)
    theta = np.pi * k / n
    w = np.zeros(K)
    v = np.ones(K - 2)
    inner = k[1:-1]
    if n % 2 == 0:
        w[0] = w[-1] = 1.0 / (n * n - 1)
        for j in range(1, n // 2):
            v -= 2.0 * np.cos(2 * j * theta[inner]) / (4 * j * j - 1)
        v -= np.cos(n * theta[inner]) / (n * n - 1)
    else:
        w[0] = w[-1] = 1.0 / (n * n)
        for j in range(1, (n - 1) // 2 + 1):
            v -= 2.0 * np.cos(2 * j * theta[inner]) / (4 * j * j - 1)
    w[inner] = 2.0 * v / n
    # map [-1, 1] -> [0, 1]; node order ascending in s
    s = 0.5 * (1.0 - np.cos(theta))
    return Quadrature(s, 0.5 * w)


@dataclass
class ChebCurve:
    """Chebyshev curve on [0, 1]; ``coeffs`` is n x (N+1)."""

    coeffs: np.ndarray

    @property
    def degree(self):
        return self.coeffs.shape[1] - 1

    def __call__(self, s):
        return cheb.chebval(2.0 * np.asarray(s) - 1.0, self.coeffs.T).T

    def derivative(self, s):
        d = cheb.chebder(self.coeffs.T, scl=2.0)
        return cheb.chebval(2.0 * np.asarray(s) - 1.0, d).T

    @classmethod
    def from_interior(cls, x, x_d, z, degree):
        """Curve through x_d (s=0) and x (s=1) with interior coefficients z.

        ``z`` has shape (degree-1, n) for the T_2..T_N coefficients.
        """
        x = np.asarray(x, dtype=float)
        x_d = np.asarray(x_d, dtype=float)
        a = np.zeros((degree + 1, x.size))
        if degree >= 2:
            a[2:] = z
        a[0] = 0.5 * (x + x_d) - a[2::2].sum(axis=0)
        a[1] = 0.5 * (x - x_d) - a[3::2].sum(axis=0)
        return cls(a.T.copy())


@dataclass
class GeodesicResult:
    curve: ChebCurve
    energy: float
    gamma_s0: np.ndarray
    gamma_s1: np.ndarray
    interior: np.ndarray
    solver_report: Optional[SolveReport] = None
    fallback: bool = False
    info: dict = field(default_factory=dict)


@lru_cache(maxsize=16)
def _basis(degree: int, K: int):
    """phi_j and dphi_j/ds at the quadrature nodes, j = 2..degree."""
    quad = _clenshaw_curtis(K)
    tau = 2.0 * quad.nodes - 1.0
    V = cheb.chebvander(tau, degree)  # (K, N+1)
    dV = np.zeros_like(V)
    for j in range(degree + 1):
        e = np.zeros(degree + 1)
        e[j] = 1.0
        dV[:, j] = 2.0 * cheb.chebval(tau, cheb.chebder(e))
    js = np.arange(2, degree + 1)
    phi = V[:, js] - V[:, js % 2]
    dphi = dV[:, js] - dV[:, js % 2]
    return quad, phi, dphi


class _EnergyModel:
    """Energy, gradient and Newton direction for fixed endpoints."""

    def __init__(self, x, x_d, metric: MetricFamily, theta_hat, degree, K, region=None, region_weight=1e4):
        self.x = np.asarray(x, dtype=float)
        self.x_d = np.asarray(x_d, dtype=float)
        self.metric = metric
        self.theta_hat = theta_hat
        self.degree = degree
        self.quad, self.phi, self.dphi = _basis(degree, K)
        self.n = self.x.size
        self._cache_key = None
        # metrics depending on one state coordinate get closed-form derivatives
        self.coord = None
        if getattr(metric, "single_coordinate", None) is not None and hasattr(metric, "coordinate_W") \
                and not metric.param_dependent:
            self.coord = metric.single_coordinate
        self._set_region(region, region_weight)

    def _set_region(self, region, weight):
        """Box the curve is held in, widened to contain both endpoints.

        ``region`` maps a state index to ``(lo, hi)``. The exterior penalty
        rho * sum_k w_k |c_k - clip(c_k)|^2 uses rho = weight * |M(x)|_2 so it
        dominates the energy of any excursion.
        """
        self.region = None
        if not region:
            return
        n = self.x.size
        lo = np.full(n, -np.inf)
        hi = np.full(n, np.inf)
        for i, (a, b) in region.items():
            lo[int(i)], hi[int(i)] = a, b
        self.region = (np.minimum(lo, np.minimum(self.x, self.x_d)), np.maximum(hi, np.maximum(self.x, self.x_d)))
        self.region_rho = float(weight) * float(np.linalg.norm(self.metric.eval_M(self.x, self.theta_hat), 2))

    def _excess(self, c):
        lo, hi = self.region
        return c - np.clip(c, lo, hi)

    def objective(self, zflat):
        E = self.energy(zflat)
        if self.region is None or not np.isfinite(E):
            return E
        c, _ = self.nodes(zflat)
        ex = self._excess(c)
        return E + self.region_rho * float(self.quad.weights @ np.einsum("ka,ka->k", ex, ex))

    def objective_gradient(self, zflat):
        g = self.gradient(zflat)
        if self.region is None:
            return g
        c, _ = self.nodes(zflat)
        ex = self._excess(c)
        return g + (2.0 * self.region_rho * self.phi.T @ (self.quad.weights[:, None] * ex)).ravel()

    def _region_hessian(self, zflat):
        c, _ = self.nodes(zflat)
        outside = (self._excess(c) != 0).astype(float)  # (K, n)
        J, n = self.phi.shape[1], self.n
        H = 2.0 * self.region_rho * np.einsum("k,kj,kl,ka->jal", self.quad.weights, self.phi, self.phi, outside)
        full = np.zeros((J, n, J, n))
        idx = np.arange(n)
        full[:, idx, :, idx] = H.transpose(1, 0, 2)
        return full.reshape(J * n, J * n)

    def nodes(self, zflat):
        z = zflat.reshape(-1, self.n)
        s = self.quad.nodes[:, None]
        c = self.x_d + s * (self.x - self.x_d) + self.phi @ z
        cs = (self.x - self.x_d) + self.dphi @ z
        return c, cs

    def _coordinate_terms(self, c, order):
        """M and its derivatives in the single coordinate, at the nodes."""
        W, W1, W2 = self.metric.coordinate_W(c[:, self.coord])
        try:
            np.linalg.cholesky(W)
        except np.linalg.LinAlgError:
            raise MetricError("W not positive definite",
                              locate=lambda: c[int(np.argmin(np.linalg.eigvalsh(W).min(axis=1)))])
        M = np.linalg.inv(W)
        MW1 = M @ W1
        M1 = -MW1 @ M
        if order == 1:
            return M, M1, None
        M2 = (2.0 * MW1 @ MW1 - M @ W2) @ M
        return M, M1, M2

    def _eval(self, zflat):
        key = zflat.tobytes()
        if key == self._cache_key:
            return self._cached
        c, cs = self.nodes(zflat)
        w = self.quad.weights
        if self.coord is not None:
            M, M1, _ = self._coordinate_terms(c, 1)
            Mcs = np.einsum("kab,kb->ka", M, cs)
            E = float(w @ np.einsum("ka,ka->k", cs, Mcs))
            grad = 2.0 * self.dphi.T @ (w[:, None] * Mcs)
            grad[:, self.coord] += self.phi.T @ (w * np.einsum("ka,kab,kb->k", cs, M1, cs))
            self._cache_key, self._cached = key, (E, grad.ravel())
            return self._cached
        M, dM = self.metric.M_derivatives(c, self.theta_hat, order=1)
        Mcs = np.einsum("kab,kb->ka", M, cs)
        E = float(w @ np.einsum("ka,ka->k", cs, Mcs))
        curv = np.einsum("kiab,ka,kb->ki", dM, cs, cs)
        grad = 2.0 * self.dphi.T @ (w[:, None] * Mcs) + self.phi.T @ (w[:, None] * curv)
        self._cache_key, self._cached = key, (E, grad.ravel())
        return self._cached

    def energy(self, zflat):
        try:
            return self._eval(zflat)[0]
        except MetricError:
            return np.inf

    def gradient(self, zflat):
        return self._eval(zflat)[1]

    def hessian(self, zflat):
        if self.coord is not None:
            return self._hessian_coordinate(zflat)
        c, cs = self.nodes(zflat)
        M, dM, d2M = self.metric.M_derivatives(c, self.theta_hat, order=2)
        w = self.quad.weights
        phi, dphi = self.phi, self.dphi
        # T[k, a, b] = (dM/dx_b cs)_a ;  S[k, a, b] = cs' d2M/dx_a dx_b cs
        T = np.einsum("kbac,kc->kab", dM, cs)
        S = np.einsum("kabcd,kc,kd->kab", d2M, cs, cs)
        H = 2.0 * np.einsum("k,kj,kl,kab->jalb", w, dphi, dphi, M)
        cross = 2.0 * np.einsum("k,kj,kl,kab->jalb", w, dphi, phi, T)
        H += cross + cross.transpose(2, 3, 0, 1)
        H += np.einsum("k,kj,kl,kab->jalb", w, phi, phi, S)
        size = phi.shape[1] * self.n
        H = H.reshape(size, size)
        return 0.5 * (H + H.T)

    def _hessian_coordinate(self, zflat):
        c, cs = self.nodes(zflat)
        M, M1, M2 = self._coordinate_terms(c, 2)
        w = self.quad.weights
        phi, dphi = self.phi, self.dphi
        J, n, j0 = phi.shape[1], self.n, self.coord
        H = 2.0 * np.einsum("k,kj,kl,kab->jalb", w, dphi, dphi, M)
        # only the coordinate column of c carries metric curvature
        v = np.einsum("kab,kb->ka", M1, cs)
        cross = 2.0 * np.einsum("k,kj,kl,ka->jal", w, dphi, phi, v)
        H[:, :, :, j0] += cross
        H[:, j0, :, :] += cross.transpose(2, 0, 1)
        m2 = np.einsum("ka,kab,kb->k", cs, M2, cs)
        H[:, j0, :, j0] += np.einsum("k,kj,kl->jl", w * m2, phi, phi)
        H = H.reshape(J * n, J * n)
        return 0.5 * (H + H.T)

    def _gauss_newton_part(self, zflat):
        """2 sum_k w_k dphi' M dphi, the always positive definite term of the Hessian."""
        c, _ = self.nodes(zflat)
        if self.coord is not None:
            M = self._coordinate_terms(c, 1)[0]
        else:
            M = self.metric.M_derivatives(c, self.theta_hat, order=0)[0]
        J, n = self.phi.shape[1], self.n
        H = 2.0 * np.einsum("k,kj,kl,kab->jalb", self.quad.weights, self.dphi, self.dphi, M)
        return H.reshape(J * n, J * n)

    def _boundary_fraction(self, zflat, step, frac=0.02):
        """Largest t <= 1 keeping the nodes within ``frac`` of the region span past its faces."""
        lo, hi = self.region
        span = np.where(np.isfinite(hi - lo), hi - lo, np.inf)
        c, _ = self.nodes(zflat)
        dc = self.phi @ step.reshape(-1, self.n)
        lo2 = np.minimum(lo - frac * span, c)
        hi2 = np.maximum(hi + frac * span, c)
        with np.errstate(divide="ignore", invalid="ignore"):
            up = np.where(dc > 0, (hi2 - c) / dc, np.inf)
            dn = np.where(dc < 0, (lo2 - c) / dc, np.inf)
        return max(min(1.0, float(np.nanmin(up)), float(np.nanmin(dn))), 1e-12)

    def newton_direction(self, zflat, g):
        """Newton step on the full Hessian when it is positive definite, else on
        its positive definite part; with a region the step is shortened so the
        nodes do not jump far past the region faces."""
        H = self.hessian(zflat)
        if self.region is not None:
            H = H + self._region_hessian(zflat)
        try:
            L = np.linalg.cholesky(H)
        except np.linalg.LinAlgError:
            H = self._gauss_newton_part(zflat)
            if self.region is not None:
                H = H + self._region_hessian(zflat)
            L = np.linalg.cholesky(H)
        d = np.linalg.solve(L.T, np.linalg.solve(L, g))
        if self.region is not None:
            d = d * self._boundary_fraction(zflat, -d)
        return d

def energy(curve: ChebCurve, metric: MetricFamily, theta_hat=None, quad: Optional[Quadrature] = None) -> float:
    quad = quad or Quadrature.clenshaw_curtis()
    c = curve(quad.nodes)
    cs = curve.derivative(quad.nodes)
    M = metric.M_batch(np.atleast_2d(c), theta_hat)
    return float(quad.weights @ np.einsum("ka,kab,kb->k", cs, M, cs))


def solve_geodesic(x, x_d, metric: MetricFamily, theta_hat=None, opts: Optional[dict] = None,
                   warm_start=None) -> GeodesicResult:
    """Minimise the curve energy over interior coefficients, endpoints pinned.

    Starts from the straight line (and from ``warm_start`` interior
    coefficients when given, keeping the better of the two). If the
    descent fails the straight line is returned with ``fallback=True``; its
    energy is an upper bound on the geodesic energy.
    """
    opts = dict(opts or {})
    N = int(opts.get("N", 6))
    K = int(opts.get("K", 13))
    x = np.asarray(x, dtype=float)
    x_d = np.asarray(x_d, dtype=float)
    n = x.size
    if np.linalg.norm(x - x_d) <= 1e-9:
        curve = ChebCurve.from_interior(x, x_d, np.zeros((max(N - 1, 0), n)), N)
        zero = np.zeros(n)
        return GeodesicResult(curve, 0.0, zero, zero, np.zeros((max(N - 1, 0), n)))

    model = _EnergyModel(x, x_d, metric, theta_hat, N, K, opts.get("region"),
                         float(opts.get("region_weight", 1e4)))
    z_lin = np.zeros((N - 1) * n)
    E_lin = model.energy(z_lin)
    if not np.isfinite(E_lin):
        raise MetricError("metric not positive definite along the straight line", x)
    start, E_start = z_lin, E_lin
    if warm_start is not None:
        zw = np.asarray(warm_start, dtype=float).ravel()
        Ew = model.energy(zw)
        if Ew < E_start:
            start, E_start = zw, Ew

    fallback = False
    report = None
    solver_opts = {"max_iter": int(opts.get("max_iter", 30)),
                   "grad_tol": float(opts.get("grad_tol", 1e-12)),
                   "f_tol": float(opts.get("f_tol", 1e-10))}
    starts = [start]
    if opts.get("restart_linear", False) and start is not z_lin:
        starts.append(z_lin)
    z, E, best = z_lin, np.inf, np.inf
    for z0 in starts:
        try:
            rep = minimize_smooth(model.objective, model.objective_gradient, z0, solver_opts,
                                  precondition=model.newton_direction)
        except (np.linalg.LinAlgError, ValueError) as exc:
            log.warning("geodesic solve failed (%s)", exc)
            continue
        E_rep = model.energy(rep.solution)
        if rep.objective < best:
            z, E, report, best = rep.solution, E_rep, rep, rep.objective
    if report is None:
        log.warning("no geodesic candidate; using the straight line")
        z, E, fallback = z_lin, E_lin, True
    if not E <= E_lin:
        z, E, fallback = z_lin, E_lin, True

    zmat = z.reshape(N - 1, n)
    curve = ChebCurve.from_interior(x, x_d, zmat, N)
    gamma_s0 = (x - x_d) + model.dphi[0] @ zmat
    gamma_s1 = (x - x_d) + model.dphi[-1] @ zmat
    return GeodesicResult(curve, float(E), gamma_s0, gamma_s1, zmat, report, fallback)


def energy_rate_lhs(result: GeodesicResult, metric: MetricFamily, theta_hat, xdot_hat, xdot_d,
                    M_x=None, M_xd=None) -> float:
    """gamma_s(1)' M(x) xdot_hat - gamma_s(0)' M(x_d) xdot_d.

    ``M_x``/``M_xd`` may be passed to reuse metric evaluations.
    """
    if result.energy == 0.0:
        return 0.0
    x = result.curve(1.0)
    x_d = result.curve(0.0)
    if M_x is None:
        M_x = metric.eval_M(x, theta_hat)
    if M_xd is None:
        M_xd = metric.eval_M(x_d, theta_hat)
    return float(result.gamma_s1 @ M_x @ np.asarray(xdot_hat, dtype=float)
                 - result.gamma_s0 @ M_xd @ np.asarray(xdot_d, dtype=float))
