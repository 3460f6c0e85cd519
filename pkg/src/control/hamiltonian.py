"""Risk-sensitive Hamiltonian g_theta, its minimum h_theta over A ∩ U_delta, and H_theta.

    g(t, x, u) = -(theta/2)(r + b.u) + (theta/4)(theta/2 + 1) u'au
                 + sum_j int ((1 + [u'eta(z)]_j)^(-theta/2) - 1) nu_j(dz)

g is strictly convex in u, so every local method lands on the same minimiser.
"""
from __future__ import annotations

import logging
import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import pandas as pd
from scipy.integrate import simpson
from scipy.optimize import OptimizeResult, minimize_scalar, nnls
from scipy.optimize import minimize as scipy_minimize

from config import (
    CLOSED_FORM_MIN_U,
    GL_NODES,
    NEWTON_FD_STEP,
    NEWTON_MAX_ITER,
    NEWTON_STALL_TOL,
    NEWTON_TOL,
    TIME_SIMPSON_PANELS,
)
from src.errors import ConvergenceError
from src.market.market import (
    MarketSpec,
    admissible_interval,
    diffusion_matrix,
    excess_drift,
    jump_floor,
    linear_constraints,
    membership,
    require_admissible,
)

log = logging.getLogger(__name__)

_ARMIJO = 1e-4
_MIN_STEP = 1e-12
_ACTIVE_SLACK = 1e-8
_QUAD_CHECK_TOL = 1e-10


@dataclass(frozen=True)
class HamiltonianResult:
    value: float
    minimizer: np.ndarray
    iterations: int
    gradient_norm: float
    method: str = "projected-newton"


# ---------------------------------------------------------------------------
# g_theta and its gradient
# ---------------------------------------------------------------------------

def _uniform_closed_form(spec: MarketSpec, u: float) -> float:
    """Jump integral for identity eta and uniform nu on [a, b], theta != 2, u != 0."""
    half = spec.theta / 2.0
    total = 0.0
    for measure in spec.nu:
        a, b = measure.support
        power = 1.0 - half
        integral = ((1.0 + b * u) ** power - (1.0 + a * u) ** power) / (u * power * (b - a))
        total += measure.density_mass * (integral - 1.0)
    return total


def _use_closed_form(spec: MarketSpec, u: np.ndarray) -> bool:
    return (
        spec.n == 1
        and spec.uniform_identity_jumps
        and spec.theta != 2.0
        and abs(float(u[0])) >= CLOSED_FORM_MIN_U
    )


def jump_integral(spec: MarketSpec, u: np.ndarray, closed_form: bool = True, nodes: int | None = None) -> float:
    if closed_form and nodes is None and _use_closed_form(spec, u):
        return _uniform_closed_form(spec, float(u[0]))
    half = spec.theta / 2.0
    total = 0.0
    for j, measure in enumerate(spec.nu):
        if nodes is None:
            w, etas = spec.jump_quadrature[j]
        else:
            z, w = measure.quadrature(nodes)
            etas = np.vstack([spec.eta[j][l](z) for l in range(spec.n)])
        if w.size == 0:
            continue
        s = np.maximum(1.0 + u @ etas, np.finfo(float).tiny)
        total += float(np.dot(w, s ** -half - 1.0))
    return total


def _jump_gradient(spec: MarketSpec, u: np.ndarray) -> np.ndarray:
    half = spec.theta / 2.0
    grad = np.zeros(spec.n)
    for w, etas in spec.jump_quadrature:
        if w.size == 0:
            continue
        s = np.maximum(1.0 + u @ etas, np.finfo(float).tiny)
        grad += etas @ (w * -half * s ** (-half - 1.0))
    return grad


def _coefficients(spec: MarketSpec, t: float, x: Sequence[int]) -> tuple[float, np.ndarray, np.ndarray]:
    return spec.r(t, x), excess_drift(spec, t, x), diffusion_matrix(spec, t, x)


def _g_value(spec: MarketSpec, coeffs, u: np.ndarray, closed_form: bool = True) -> float:
    r, b, a = coeffs
    half = spec.theta / 2.0
    return float(-half * (r + b @ u) + 0.5 * half * (half + 1.0) * (u @ a @ u) + jump_integral(spec, u, closed_form))


def _g_gradient(spec: MarketSpec, coeffs, u: np.ndarray) -> np.ndarray:
    _, b, a = coeffs
    half = spec.theta / 2.0
    return -half * b + half * (half + 1.0) * (a @ u) + _jump_gradient(spec, u)


def g_theta(spec: MarketSpec, t: float, x: Sequence[int], u, closed_form: bool = True) -> float:
    """g_theta(t, x, u); u must lie in A ∩ U_delta."""
    u = require_admissible(spec, u)
    return _g_value(spec, _coefficients(spec, t, x), u, closed_form)


def g_theta_gradient(spec: MarketSpec, t: float, x: Sequence[int], u) -> np.ndarray:
    u = require_admissible(spec, u)
    return _g_gradient(spec, _coefficients(spec, t, x), u)


def merton_fraction(spec: MarketSpec, t: float, x: Sequence[int]) -> np.ndarray:
    """Stationary point of the no-jump quadratic: a^-1 b / (1 + theta/2)."""
    b = excess_drift(spec, t, x)
    a = diffusion_matrix(spec, t, x)
    return np.linalg.solve(a, b) / (1.0 + spec.theta / 2.0)


def lower_bound(spec: MarketSpec, t: float, x: Sequence[int]) -> float:
    """Lower bound on h_theta from minimising the quadratic part freely and bounding the jump part by -nu(R)."""
    r, b, a = _coefficients(spec, t, x)
    half = spec.theta / 2.0
    quad = half * half * float(b @ np.linalg.solve(a, b)) / (2.0 * half * (half + 1.0))
    return -half * r - quad - sum(m.mass for m in spec.nu)


# ---------------------------------------------------------------------------
# Minimisation
# ---------------------------------------------------------------------------

def numerical_hessian(grad: Callable[[np.ndarray], np.ndarray], u: np.ndarray, max_step: float = np.inf) -> np.ndarray:
    """Central differences of the gradient, step NEWTON_FD_STEP * (1 + |u_k|)."""
    n = u.shape[0]
    hess = np.empty((n, n))
    for k in range(n):
        h = min(NEWTON_FD_STEP * (1.0 + abs(u[k])), max_step)
        e = np.zeros(n)
        e[k] = h
        hess[:, k] = (grad(u + e) - grad(u - e)) / (2.0 * h)
    return 0.5 * (hess + hess.T)


def _blocked(g: np.ndarray, x: np.ndarray, lb: np.ndarray, ub: np.ndarray) -> np.ndarray:
    return ((x <= lb) & (g > 0)) | ((x >= ub) & (g < 0))


def _projected_gradient(g: np.ndarray, x: np.ndarray, lb: np.ndarray, ub: np.ndarray) -> np.ndarray:
    return np.where(_blocked(g, x, lb, ub), 0.0, g)


def projected_newton(
    fun: Callable[[np.ndarray], float],
    jac: Callable[[np.ndarray], np.ndarray],
    hess: Callable[[np.ndarray], np.ndarray],
    lb: np.ndarray,
    ub: np.ndarray,
    x0: np.ndarray,
    feasible: Callable[[np.ndarray], bool] = lambda x: True,
    tol: float = NEWTON_TOL,
    max_iter: int = NEWTON_MAX_ITER,
    stall_tol: float = NEWTON_STALL_TOL,
) -> OptimizeResult:
    """Active-set projected Newton with backtracking on a box intersected with a convex region.

    ``feasible`` must hold at ``x0``; trial points failing it are rejected by the line search.
    When f differences drop below rounding, a trial is accepted if it shrinks the projected
    gradient. If no trial moves x, the point is returned as converged when |pg| <= ``stall_tol``.
    """
    x = np.clip(x0, lb, ub)
    f_val = fun(x)
    g = jac(x)
    for i in range(max_iter):
        projected = _projected_gradient(g, x, lb, ub)
        pg_norm = float(np.linalg.norm(projected))
        log.debug(f"newton iter={i} f={f_val:.15e} |pg|={pg_norm:.3e}")
        if pg_norm <= tol:
            return OptimizeResult(x=x, fun=f_val, jac=g, nit=i, success=True, pg_norm=pg_norm,
                                  message="Projected gradient norm below tolerance.")

        free = ~_blocked(g, x, lb, ub)
        d = np.zeros_like(x)
        try:
            h_free = hess(x)[np.ix_(free, free)]
            d[free] = np.linalg.solve(h_free, -g[free])
        except np.linalg.LinAlgError:
            d = -projected
        if float(g @ d) >= 0:
            d = -projected

        noise = 64 * np.finfo(float).eps * max(1.0, abs(f_val))
        alpha = 1.0
        accepted = False
        while alpha >= _MIN_STEP:
            trial = np.clip(x + alpha * d, lb, ub)
            if feasible(trial) and not np.array_equal(trial, x):
                f_trial = fun(trial)
                if f_trial <= f_val + _ARMIJO * float(g @ (trial - x)):
                    accepted = True
                    break
                if abs(f_trial - f_val) <= noise:
                    g_trial = jac(trial)
                    if np.linalg.norm(_projected_gradient(g_trial, trial, lb, ub)) < pg_norm:
                        accepted = True
                        break
            alpha /= 2.0
        if not accepted:
            if pg_norm <= stall_tol:
                return OptimizeResult(x=x, fun=f_val, jac=g, nit=i, success=True, pg_norm=pg_norm,
                                      message="Line search stalled at the rounding floor.")
            return OptimizeResult(x=x, fun=f_val, jac=g, nit=i, success=False, pg_norm=pg_norm,
                                  message="Line search failed to find a suitable step.")
        x, f_val = trial, f_trial
        g = jac(x)

    pg_norm = float(np.linalg.norm(_projected_gradient(g, x, lb, ub)))
    if pg_norm <= stall_tol:
        return OptimizeResult(x=x, fun=f_val, jac=g, nit=max_iter, success=True, pg_norm=pg_norm,
                              message="Iteration limit reached at the rounding floor.")
    return OptimizeResult(x=x, fun=f_val, jac=g, nit=max_iter, success=False,
                          pg_norm=pg_norm, message="Maximum number of iterations reached.")


class Hamiltonian:
    """Minimiser of g_theta with a per-(t, x) cache.

    For time-homogeneous coefficients the cache is keyed by x alone, so u*(t, x) is the same
    object for every t. Cached results are computed once under a lock and are identical
    whatever the number of threads querying them.
    """

    def __init__(self, spec: MarketSpec, check_quadrature: bool = False) -> None:
        self.spec = spec
        self.check_quadrature = check_quadrature
        self._cache: dict[tuple, HamiltonianResult] = {}
        self._lock = threading.Lock()
        self._eta_scale = float(np.abs(spec.eta_bounds).sum(axis=(0, 2)).max()) if spec.m2 else 0.0

    def _key(self, t: float, x: Sequence[int]) -> tuple:
        if self.spec.time_homogeneous:
            return (tuple(int(v) for v in x),)
        return (round(float(t), 12), tuple(int(v) for v in x))

    def minimize(self, t: float, x: Sequence[int]) -> HamiltonianResult:
        key = self._key(t, x)
        with self._lock:
            hit = self._cache.get(key)
            if hit is None:
                hit = self._solve(t, x)
                self._cache[key] = hit
        return hit

    def h(self, t: float, x: Sequence[int]) -> float:
        return self.minimize(t, x).value

    def u_star(self, t: float, x: Sequence[int]) -> np.ndarray:
        return self.minimize(t, x).minimizer

    def big_h(self, t1: float, t2: float, x: Sequence[int], quadrature_steps: int = TIME_SIMPSON_PANELS) -> float:
        """H_theta(t1, t2, x) = int_{t1}^{t2} h_theta(s, x) ds."""
        if t2 < t1:
            raise ValueError(f"big_h needs t1 <= t2. Got t1={t1}, t2={t2}")
        if t2 == t1:
            return 0.0
        if self.spec.time_homogeneous:
            return (t2 - t1) * self.h(t1, x)
        nodes = np.linspace(t1, t2, 2 * max(1, int(quadrature_steps)) + 1)
        values = np.array([self.h(s, x) for s in nodes])
        return float(simpson(values, x=nodes))

    def table(self, times: Sequence[float]) -> pd.DataFrame:
        """(t, x, h, u*) grid for inspection and CSV dumps."""
        rows = []
        for x in self.spec.regimes():
            for t in times:
                res = self.minimize(float(t), x)
                row = {"t": float(t), "x": "-".join(map(str, x)), "h": res.value}
                row.update({f"u{l}": res.minimizer[l] for l in range(self.spec.n)})
                rows.append(row)
        return pd.DataFrame(rows)

    def dump_csv(self, path: str, times: Sequence[float]) -> None:
        self.table(times).to_csv(path, index=False, float_format="%.17g")
        log.info(f"Wrote Hamiltonian table to {path}")

    # -- internals ----------------------------------------------------------------------------

    def _hessian_step_cap(self, u: np.ndarray) -> float:
        if self._eta_scale == 0.0:
            return np.inf
        return 0.5 * jump_floor(u, self.spec.eta_bounds) / self._eta_scale

    def _solve(self, t: float, x: Sequence[int]) -> HamiltonianResult:
        spec = self.spec
        coeffs = _coefficients(spec, t, x)
        # value and gradient both by quadrature; the closed form only reports the final value
        fun = lambda u: _g_value(spec, coeffs, u, closed_form=False)
        jac = lambda u: _g_gradient(spec, coeffs, u)
        hess = lambda u: numerical_hessian(jac, u, self._hessian_step_cap(u))
        feasible = lambda u: membership(spec.constraint, u, spec.eta_bounds)

        if spec.n == 1:
            lb, ub = admissible_interval(spec)
            x0 = self._bracket_1d(fun, jac, lb, ub)
            lb_arr, ub_arr = np.array([lb]), np.array([ub])
        else:
            lb_arr, ub_arr = spec.constraint.lower, spec.constraint.upper
            x0 = np.zeros(spec.n)

        res = projected_newton(fun, jac, hess, lb_arr, ub_arr, x0, feasible)
        method = "projected-newton"
        if spec.n > 1 and linear_constraints(spec)[0].size and (not res.success or self._nonbox_active(res.x)):
            log.warning(f"Non-box constraint active at t={t}, x={tuple(x)}; switching to SLSQP.")
            res = self._slsqp(fun, jac, res.x)
            method = "slsqp"
        if not res.success:
            raise ConvergenceError(
                f"Hamiltonian minimisation failed at t={t}, x={tuple(x)}: {res.message}",
                diagnostics={"t": t, "x": tuple(x), "u": res.x.tolist(), "pg_norm": res.pg_norm, "iterations": res.nit},
            )
        if self.check_quadrature:
            coarse = jump_integral(spec, res.x, closed_form=False)
            fine = jump_integral(spec, res.x, closed_form=False, nodes=2 * GL_NODES)
            if abs(coarse - fine) > _QUAD_CHECK_TOL:
                log.warning(f"Jump quadrature not converged at x={tuple(x)}: |I64 - I128| = {abs(coarse - fine):.3e}")
        value = _g_value(spec, coeffs, np.asarray(res.x, dtype=np.float64))
        return HamiltonianResult(value, np.asarray(res.x, dtype=np.float64), int(res.nit), float(res.pg_norm), method)

    def _bracket_1d(self, fun, jac, lb: float, ub: float) -> np.ndarray:
        """Golden-section bracket of the scalar minimiser; infinite ends are pushed out until g' changes sign."""
        if not np.isfinite(ub):
            ub = 1.0
            while jac(np.array([ub]))[0] < 0:
                ub *= 2.0
        if not np.isfinite(lb):
            lb = -1.0
            while jac(np.array([lb]))[0] > 0:
                lb *= 2.0
        if ub - lb <= 0:
            return np.array([lb])
        res = minimize_scalar(lambda v: fun(np.array([v])), bounds=(lb, ub), method="bounded",
                              options={"xatol": 1e-10})
        return np.array([float(res.x)])

    def _kkt_residual(self, grad: np.ndarray, u: np.ndarray) -> float:
        """Distance of the gradient from the cone spanned by the active constraint normals."""
        spec = self.spec
        A, c = linear_constraints(spec)
        normals = [A[i] for i in np.flatnonzero(A @ u - c <= _ACTIVE_SLACK)]
        eye = np.eye(spec.n)
        normals += [eye[k] for k in np.flatnonzero(u <= spec.constraint.lower + _ACTIVE_SLACK)]
        normals += [-eye[k] for k in np.flatnonzero(u >= spec.constraint.upper - _ACTIVE_SLACK)]
        if not normals:
            return float(np.linalg.norm(grad))
        _, residual = nnls(np.column_stack(normals), grad)
        return float(residual)

    def _nonbox_active(self, u: np.ndarray) -> bool:
        A, c = linear_constraints(self.spec)
        return bool(A.size) and bool(np.any(A @ u - c <= _ACTIVE_SLACK))

    def _slsqp(self, fun, jac, x0: np.ndarray) -> OptimizeResult:
        spec = self.spec
        A, c = linear_constraints(spec)
        bounds = [(None if not np.isfinite(lo) else lo, None if not np.isfinite(hi) else hi)
                  for lo, hi in zip(spec.constraint.lower, spec.constraint.upper)]
        res = scipy_minimize(
            fun, x0, jac=jac, method="SLSQP", bounds=bounds,
            constraints=[{"type": "ineq", "fun": lambda u: A @ u - c, "jac": lambda u: A}],
            options={"ftol": 1e-15, "maxiter": NEWTON_MAX_ITER},
        )
        if res.success and not membership(spec.constraint, res.x, spec.eta_bounds):
            res.x = self._pull_inside(res.x)
            res.fun = fun(res.x)
        res.pg_norm = self._kkt_residual(jac(res.x), res.x)
        if res.success and not membership(spec.constraint, res.x, spec.eta_bounds):
            res.success = False
            res.message = "SLSQP returned an inadmissible point."
        return res

    def _pull_inside(self, u: np.ndarray) -> np.ndarray:
        """Largest admissible point on the segment from the origin to u (U is convex and holds 0)."""
        spec = self.spec
        lo, hi = 0.0, 1.0
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            if membership(spec.constraint, mid * u, spec.eta_bounds):
                lo = mid
            else:
                hi = mid
        return lo * np.asarray(u, dtype=np.float64)


# ---------------------------------------------------------------------------
# Functional entry points
# ---------------------------------------------------------------------------

def minimize(spec: MarketSpec, t: float, x: Sequence[int]) -> HamiltonianResult:
    """h_theta(t, x) and u*(t, x) for a one-off query; repeated queries should share a Hamiltonian."""
    return Hamiltonian(spec).minimize(t, x)


def big_h(spec: MarketSpec, t1: float, t2: float, x: Sequence[int], quadrature_steps: int = TIME_SIMPSON_PANELS) -> float:
    return Hamiltonian(spec).big_h(t1, t2, x, quadrature_steps)
