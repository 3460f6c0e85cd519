"""Volterra equation of the second kind for psi(t, x, y).

With S^c(y, r) = exp(-(Lambda^c(y + r) - Lambda^c(y))) the survival of component ``c`` over
the next ``r`` time units and H(t, s, x) the integral of h_theta over [t, s],

    psi(t, x, y) = prod_c S^c(y^c, T - t) e^{H(t, T, x)}
                 + int_0^{T-t} sum_l [prod_{c != l} S^c(y^c, r)] lambda^l(y^l + r) S^l(y^l, r)
                   e^{H(t, t+r, x)} sum_j p^l_{x^l j}(y^l + r) psi(t + r, R^l_j x, R^l_0(y + r)) dr

where R^l_j x sets component l to j and R^l_0 resets its age. Both solvers use the
trapezoid rule in r on the time grid t_m = T - m dt.
"""
from __future__ import annotations

import itertools
import logging
from typing import Sequence

import numpy as np
import pandas as pd

from config import DENOM_FLOOR, DIAG_DOMINANCE_MARGIN, PICARD_MAX_SWEEPS, PICARD_TOL
from src.control.hamiltonian import Hamiltonian
from src.errors import ConvergenceError, SingularSystemError
from src.market.market import MarketSpec
from src.regimes.semi_markov import RegimeChain
from .psi_grid import PsiGrid

log = logging.getLogger(__name__)

_DESK_COMPONENTS = 3
_DESK_STATES = 4


def step_count(horizon: float, dt: float) -> int:
    """M = floor(T / dt)."""
    if not dt > 0:
        raise ValueError(f"Time step must be positive. Got: {dt}")
    if horizon < 0:
        raise ValueError(f"Horizon must be nonnegative. Got: {horizon}")
    return int(np.floor(horizon / dt + 1e-9))


def _full_regime(spec: MarketSpec, driver: int, i: int) -> tuple[int, ...]:
    x = [0] * spec.n_components
    x[driver] = i
    return tuple(x)


def _cumulative_h(ham: Hamiltonian, horizon: float, dt: float, M: int, x: Sequence[int]) -> np.ndarray:
    """C[m] = H(T - m dt, T, x), one Simpson panel per step."""
    if ham.spec.time_homogeneous:
        return ham.h(horizon, x) * dt * np.arange(M + 1)
    steps = [ham.big_h(horizon - m * dt, horizon - (m - 1) * dt, x, quadrature_steps=1) for m in range(1, M + 1)]
    return np.concatenate([[0.0], np.cumsum(steps)])


def _component_tables(chain: RegimeChain, y_grid: np.ndarray, dt: float, M: int):
    """S[i, a, q], D[i, a, q] = lambda_i(y_a + q dt) S[i, a, q] and P[i, a, q, j] = p_ij(y_a + q dt)."""
    k = chain.k
    ages = y_grid[:, None] + dt * np.arange(M + 1)[None, :]
    S = np.empty((k, y_grid.size, M + 1))
    D = np.empty_like(S)
    P = np.empty((k, y_grid.size, M + 1, k))
    for i in range(k):
        base = chain.rates.cumulative(i, y_grid)
        if np.any(np.exp(-base) < DENOM_FLOOR):
            log.warning(
                "Survival of state %d in chain '%s' underflows below %.0e on the age grid; those ages are effectively unreachable.",
                i, chain.name, DENOM_FLOOR,
            )
        S[i] = np.exp(-np.clip(chain.rates.cumulative(i, ages) - base[:, None], 0.0, None))
        D[i] = chain.rates.total(i, ages) * S[i]
        P[i] = chain.rates.jump_probs(i, ages)
    return S, D, P


def _trapezoid_weights(m: int) -> np.ndarray:
    w = np.ones(m + 1)
    w[0] = w[-1] = 0.5
    return w


# ---------------------------------------------------------------------------
# Single-driver scheme
# ---------------------------------------------------------------------------

def solve_reduced(
    spec: MarketSpec,
    chain: RegimeChain,
    dt: float,
    y_grid: Sequence[float] | None = None,
    hamiltonian: Hamiltonian | None = None,
) -> PsiGrid:
    """Implicit step-by-step quadrature when one component drives every coefficient.

    psi^m(i, 0) is marched for m = 1..M; the l = 0 term of the quadrature couples the k unknowns,
    which are found from a k x k linear system. Ages y > 0 are then filled from the stored
    y = 0 history.
    """
    if not spec.single_driver:
        raise ValueError(f"The reduced scheme needs a single driving component. Drivers: {sorted(spec.drivers)}")
    driver = next(iter(spec.drivers))
    if chain.k != spec.regime_counts[driver]:
        raise ValueError(f"Chain has {chain.k} states; component {driver} of the market has {spec.regime_counts[driver]}.")
    y_grid = np.array([0.0] if y_grid is None else y_grid, dtype=np.float64)
    if y_grid.ndim != 1 or y_grid[0] != 0.0 or np.any(np.diff(y_grid) <= 0):
        raise ValueError(f"The age grid must start at 0 and increase. Got: {y_grid}")

    ham = hamiltonian or Hamiltonian(spec)
    M = step_count(spec.horizon, dt)
    k = chain.k
    log.info("Reduced solve: k=%d, M=%d, dt=%g, %d ages", k, M, dt, y_grid.size)

    C = np.vstack([_cumulative_h(ham, spec.horizon, dt, M, _full_regime(spec, driver, i)) for i in range(k)])
    S, D, P = _component_tables(chain, y_grid, dt, M)

    values = np.empty((M + 1, k, y_grid.size))
    values[0] = 1.0
    Z = np.empty((M + 1, k))
    Z[0] = 1.0
    eye = np.eye(k)
    for m in range(1, M + 1):
        w = _trapezoid_weights(m)
        E = np.exp(C[:, m][:, None] - C[:, m::-1])        # E[i, l] = e^{C[m] - C[m - l]}
        hist = Z[m::-1].copy()                             # hist[l] = psi^{m-l}(., 0)
        hist[0] = 0.0
        G = np.einsum("iylj,lj->iyl", P[:, :, : m + 1, :], hist)
        explicit = S[:, :, m] * np.exp(C[:, m])[:, None] + dt * np.einsum("l,iyl,il,iyl->iy", w, D[:, :, : m + 1], E, G)

        coupling = dt * w[0] * D[:, 0, 0][:, None] * P[:, 0, 0, :]
        A = eye - coupling
        off = np.abs(A).sum(axis=1) - np.abs(np.diag(A))
        if np.any(np.abs(np.diag(A)) - off <= DIAG_DOMINANCE_MARGIN):
            raise SingularSystemError(f"Step {m}: implicit system lost diagonal dominance; reduce dt (now {dt}).")
        Z[m] = np.linalg.solve(A, explicit[:, 0])

        implicit = dt * w[0] * D[:, :, 0] * np.einsum("iyj,j->iy", P[:, :, 0, :], Z[m])
        values[m] = explicit + implicit
        values[m, :, 0] = Z[m]

    log.info("Reduced solve finished: psi^M range [%.6g, %.6g]", values[M].min(), values[M].max())
    return PsiGrid(dt, spec.horizon, spec.theta, "reduced", values, y_grid, (k,),
                   meta={"mode": "reduced", "driver": driver})


# ---------------------------------------------------------------------------
# General multi-component Picard iteration
# ---------------------------------------------------------------------------

def _general_age_grid(y_grid, dt: float, horizon: float) -> np.ndarray:
    if y_grid is None:
        y_grid = horizon
    if np.ndim(y_grid) == 0:
        n = int(np.ceil(float(y_grid) / dt - 1e-9))
        return dt * np.arange(n + 1)
    grid = np.asarray(y_grid, dtype=np.float64)
    if grid[0] != 0.0 or grid.size < 2 or not np.allclose(np.diff(grid), dt, rtol=1e-9, atol=1e-12):
        raise ValueError(f"The general solver needs an age grid from 0 with step dt={dt}.")
    return grid


def solve_general(
    spec: MarketSpec,
    chains: Sequence[RegimeChain],
    dt: float,
    y_grid=None,
    tol: float = PICARD_TOL,
    max_sweeps: int = PICARD_MAX_SWEEPS,
    hamiltonian: Hamiltonian | None = None,
) -> PsiGrid:
    """Picard iteration psi <- F + A psi on the (time, regime vector, age vector) grid.

    ``y_grid`` is the age grid shared by all components: either its upper end (a float) or an
    explicit array with step ``dt``, so shifted ages y + r land on grid nodes. Reads beyond the
    last node are clamped to it.
    """
    chains = list(chains)
    n_comp = len(chains)
    if n_comp != spec.n_components:
        raise ValueError(f"Market has {spec.n_components} regime components; {n_comp} chains given.")
    counts = tuple(c.k for c in chains)
    if counts != spec.regime_counts:
        raise ValueError(f"Chain state counts {counts} differ from the market's {spec.regime_counts}.")
    if n_comp > _DESK_COMPONENTS or max(counts) > _DESK_STATES:
        log.warning("Tensor grid beyond %d components / %d states; memory grows as k^n * Ny^n.", _DESK_COMPONENTS, _DESK_STATES)

    ham = hamiltonian or Hamiltonian(spec)
    M = step_count(spec.horizon, dt)
    ages = _general_age_grid(y_grid, dt, spec.horizon)
    ny = ages.size
    regimes = np.array(list(itertools.product(*(range(k) for k in counts))), dtype=np.int64).reshape(-1, n_comp)
    age_idx = np.array(list(itertools.product(range(ny), repeat=n_comp)), dtype=np.int64).reshape(-1, n_comp)
    n_x, n_a = regimes.shape[0], age_idx.shape[0]
    log.info("General solve: components=%s, M=%d, ages=%d per component, grid %d x %d x %d", counts, M, ny, M + 1, n_x, n_a)

    tables = [_component_tables(chain, ages, dt, M) for chain in chains]
    surv = [S[regimes[:, c][:, None], age_idx[:, c][None, :], :].transpose(2, 0, 1) for c, (S, _, _) in enumerate(tables)]
    joint = np.prod(surv, axis=0)                                              # (M+1, nX, nA)

    # weights[l][q, x, a, j] = prod_{c != l} S^c * D^l * p^l_{x^l j}
    weights = []
    for l, (_, D, P) in enumerate(tables):
        kern = D[regimes[:, l][:, None], age_idx[:, l][None, :], :].transpose(2, 0, 1)
        for c in range(n_comp):
            if c != l:
                kern = kern * surv[c]
        probs = P[regimes[:, l][:, None], age_idx[:, l][None, :], :, :].transpose(2, 0, 1, 3)
        weights.append(kern[..., None] * probs)

    resets = []
    for l in range(n_comp):
        per_j = []
        for j in range(counts[l]):
            moved = regimes.copy()
            moved[:, l] = j
            per_j.append(np.ravel_multi_index(moved.T, counts))
        resets.append(per_j)

    clamped = np.zeros((M + 1, n_a), dtype=bool)
    shifts = []
    for q in range(M + 1):
        per_l = []
        for l in range(n_comp):
            shifted = age_idx + q
            shifted[:, l] = 0
            clamped[q:] |= (shifted > ny - 1).any(axis=1)[None, :]
            per_l.append(np.ravel_multi_index(np.minimum(shifted, ny - 1).T, (ny,) * n_comp))
        shifts.append(per_l)
    if clamped.any():
        log.warning(
            "Age grid [0, %g] clamps kernel reads at %.1f%% of nodes; extend the grid to refine them.",
            ages[-1], 100.0 * clamped.mean(),
        )

    C = np.vstack([_cumulative_h(ham, spec.horizon, dt, M, tuple(int(v) for v in x)) for x in regimes])  # (nX, M+1)
    forcing = joint * np.exp(C.T)[:, :, None]

    psi = forcing.copy()
    prev_change = None
    ratios: list[float] = []
    stalls = 0
    for sweep in range(1, max_sweeps + 1):
        new = forcing.copy()
        for q in range(M + 1):
            ms = np.arange(q, M + 1)
            w = np.where((q == 0) | (ms == q), 0.5, 1.0)
            w[ms == 0] = 0.0
            E = np.exp(C[:, ms] - C[:, ms - q]).T                               # (count, nX)
            src = psi[: M + 1 - q]                                              # psi^{m-q}
            acc = np.zeros((ms.size, n_x, n_a))
            for l in range(n_comp):
                sidx = shifts[q][l]
                for j in range(counts[l]):
                    acc += weights[l][q, :, :, j][None] * src[:, resets[l][j]][:, :, sidx]
            new[ms] += dt * (w[:, None] * E)[:, :, None] * acc
        change = float(np.max(np.abs(new - psi)))
        psi = new
        if prev_change is not None and prev_change > 0:
            ratios.append(change / prev_change)
        log.info("Picard sweep %d: sup change %.3e%s", sweep, change,
                 f", ratio {ratios[-1]:.4f}" if ratios else "")
        if change <= tol:
            break
        if ratios and ratios[-1] >= 1.0:
            stalls += 1
            if stalls >= 2:
                raise ConvergenceError(
                    f"Picard iteration stalled after {sweep} sweeps: contraction factor {ratios[-1]:.4f} >= 1.",
                    diagnostics={"sweeps": sweep, "change": change, "contraction": ratios[-1], "ratios": ratios},
                )
        else:
            stalls = 0
        prev_change = change
    else:
        raise ConvergenceError(
            f"Picard iteration did not reach {tol:g} in {max_sweeps} sweeps (last change {change:.3e}).",
            diagnostics={"sweeps": max_sweeps, "change": change, "contraction": ratios[-1] if ratios else None,
                         "ratios": ratios},
        )

    values = psi.reshape((M + 1, n_x) + (ny,) * n_comp)
    return PsiGrid(dt, spec.horizon, spec.theta, "general", values, ages, counts,
                   meta={"mode": "general", "sweeps": sweep, "final_change": change,
                         "contraction": ratios[-1] if ratios else 0.0, "ratios": ratios})


def solve(spec: MarketSpec, chains: Sequence[RegimeChain], dt: float, mode: str = "reduced",
          y_grid=None, hamiltonian: Hamiltonian | None = None) -> PsiGrid:
    if mode == "reduced":
        driver = next(iter(spec.drivers)) if spec.single_driver else None
        if driver is None:
            raise ValueError("Reduced mode needs a single driving component; use --mode general.")
        return solve_reduced(spec, chains[driver], dt, y_grid, hamiltonian)
    if mode == "general":
        return solve_general(spec, chains, dt, y_grid, hamiltonian=hamiltonian)
    raise ValueError(f"Unknown solver mode '{mode}'. Expected reduced or general.")


# ---------------------------------------------------------------------------
# Diagnostics
# ---------------------------------------------------------------------------

def pde_residual(
    psi: PsiGrid,
    spec: MarketSpec,
    chains: RegimeChain | Sequence[RegimeChain],
    t: float,
    x,
    y,
    eps: float,
    hamiltonian: Hamiltonian | None = None,
) -> float:
    """Forward-difference residual of D_{t,y} psi + sum_j lambda_xj(y)(psi(j, 0) - psi) + h psi.

    For a reduced grid pass the driving chain and scalar ``x``/``y``; for a general grid pass all
    chains and full regime/age vectors.
    """
    if isinstance(chains, RegimeChain):
        chains = [chains]
    ham = hamiltonian or Hamiltonian(spec)
    xs = [int(x)] if np.ndim(x) == 0 else [int(v) for v in x]
    ys = np.atleast_1d(np.asarray(y, dtype=np.float64))
    if ys.size == 1 and len(xs) > 1:
        ys = np.full(len(xs), float(ys[0]))
    if len(chains) != len(xs):
        raise ValueError(f"{len(chains)} chains for a regime vector of length {len(xs)}.")
    if t + eps > psi.horizon + 1e-12 or t < psi.times[-1] - 1e-12 or np.any(ys + eps > psi.y_grid[-1] + 1e-12):
        raise ValueError(f"Point (t={t}, y={ys.tolist()}) is too close to the grid boundary for step {eps}.")

    key = lambda v: v[0] if len(v) == 1 else tuple(v)
    base = psi.at_time(t, key(xs), ys)
    forward = psi.at_time(t + eps, key(xs), ys + eps)
    residual = (forward - base) / eps

    for c, chain in enumerate(chains):
        i, age = xs[c], float(ys[c])
        total = float(chain.rates.total(i, age))
        if total == 0.0:
            continue
        probs = chain.rates.jump_probs(i, age)
        for j in range(chain.k):
            if j == i or probs[j] == 0.0:
                continue
            moved_x, moved_y = list(xs), ys.copy()
            moved_x[c], moved_y[c] = j, 0.0
            residual += total * probs[j] * (psi.at_time(t, key(moved_x), moved_y) - base)

    if psi.mode == "reduced":
        regime = _full_regime(spec, next(iter(spec.drivers)), xs[0])
    else:
        regime = tuple(xs)
    return float(residual + ham.h(t, regime) * base)


def optimal_control_curve(
    spec: MarketSpec,
    t_grid: Sequence[float],
    x: Sequence[int],
    hamiltonian: Hamiltonian | None = None,
) -> pd.DataFrame:
    """u*(t, x) and h_theta(t, x) over ``t_grid``; the chains never enter."""
    ham = hamiltonian or Hamiltonian(spec)
    rows = []
    for t in t_grid:
        res = ham.minimize(float(t), x)
        row = {"t": float(t), "h": res.value}
        row.update({f"u{l}": float(res.minimizer[l]) for l in range(spec.n)})
        rows.append(row)
    return pd.DataFrame(rows)
