"""Age-dependent semi-Markov regime components.

A :class:`RegimeChain` is immutable once built and can be shared across threads; every
sampler takes a caller-owned ``numpy.random.Generator``.

Multi-component quantities follow the conditional holding-time identities: with
S^m(s) = (1 - F^m(s + y^m | x^m)) / (1 - F^m(y^m | x^m)) the survival of component ``m``
over the next ``s`` time units, the unnormalised jump weight of component ``l`` is

    J_l(r) = int_0^r prod_{m != l} S^m(s) * lambda_l(y^l + s) S^l(s) ds,

P(next jump in l) = J_l(inf), F_{tau^l | l}(r) = J_l(r) / J_l(inf) and the conditional
density is the integrand over J_l(inf). The infinite upper limit is truncated where the
joint survival prod_m S^m drops below ``TRUNCATION_SURVIVAL``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.integrate import quad
from scipy.sparse.csgraph import connected_components

from config import (
    HAZARD_MIN_LAMBDA,
    HAZARD_Y_MAX,
    QUAD_RTOL,
    SAMPLER_REL_TOL,
    TRUNCATION_SURVIVAL,
)
from src.errors import QuadratureError, RegimeError
from .hazards import (
    ConstantRates,
    ErlangRates,
    FrozenRates,
    LogExcessRates,
    PolynomialRates,
    RateModel,
    TabulatedRates,
)

log = logging.getLogger(__name__)

# Rows of the embedded jump matrix of the three-regime numeric example
THREE_REGIME_JUMP_MATRIX = np.array([
    [0.0, 2.0 / 3.0, 1.0 / 3.0],
    [0.5, 0.0, 0.5],
    [1.0 / 3.0, 2.0 / 3.0, 0.0],
])

_LOG_TRUNCATION = -np.log(TRUNCATION_SURVIVAL)
_SAMPLER_Y_BUDGET = 1e6


# ---------------------------------------------------------------------------
# Types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RegimeChain:
    """One age-dependent semi-Markov component.

    Args:
        rates: Rate model providing lambda_ij(y), Lambda_i(y) and p_ij(y).
        name: Label used in logs and reports.
        y_max: Age at which the unbounded-hazard condition is checked.
    """
    rates: RateModel
    name: str = "chain"
    y_max: float = HAZARD_Y_MAX

    def __post_init__(self) -> None:
        k = self.rates.k
        if k < 1:
            raise RegimeError(f"A regime chain needs at least one state. Got k={k}.")
        if self.frozen:
            return
        if k < 2:
            raise RegimeError("Only the frozen family may have a single state.")
        probe = np.linspace(self.y_max / 4096, self.y_max, 4096)
        for i in range(k):
            if np.any(self.rates.total(i, probe) <= 0):
                raise RegimeError(f"State {i} of chain '{self.name}' has a vanishing holding hazard on (0, {self.y_max}].")
            top = float(self.rates.cumulative(i, self.y_max))
            if top <= HAZARD_MIN_LAMBDA:
                raise RegimeError(
                    f"Lambda_{i}({self.y_max}) = {top:.4g} <= {HAZARD_MIN_LAMBDA}: "
                    f"the cumulative hazard of chain '{self.name}' does not diverge."
                )

    @property
    def k(self) -> int:
        return self.rates.k

    @property
    def frozen(self) -> bool:
        return isinstance(self.rates, FrozenRates)

    def check_state(self, i: int) -> int:
        if not (0 <= int(i) < self.k) or int(i) != i:
            raise RegimeError(f"State index {i} outside 0..{self.k - 1} of chain '{self.name}'.")
        return int(i)

    def hazard(self, i: int, y) -> np.ndarray:
        """Holding hazard sum_{j != i} lambda_ij(y)."""
        return self.rates.total(self.check_state(i), _check_age(y))

    def transition_probs(self, i: int, y) -> np.ndarray:
        """p_ij(y), shape ``y.shape + (k,)``."""
        return self.rates.jump_probs(self.check_state(i), _check_age(y))

    def survival(self, i: int, y) -> np.ndarray:
        """1 - F(y | i) = exp(-Lambda_i(y))."""
        return np.exp(-cumulative_hazard(self, i, y))


@dataclass(frozen=True)
class ChainState:
    """Joint regime ``x`` and ages ``y`` over all components."""
    x: tuple[int, ...]
    y: tuple[float, ...]

    def __post_init__(self) -> None:
        if len(self.x) != len(self.y):
            raise RegimeError(f"State and age vectors differ in length: {len(self.x)} != {len(self.y)}.")
        if any(a < 0 for a in self.y):
            raise RegimeError(f"Ages must be nonnegative. Got: {self.y}")

    @property
    def n_components(self) -> int:
        return len(self.x)


@dataclass(frozen=True)
class PathSegment:
    """Piece of a regime path on which states are constant.

    ``state`` holds the regimes and the ages at ``t_start``; ``jumped_component`` and
    ``jumped_to`` describe the jump that ends the segment (None at the horizon).
    t_start < t_end, except for the one zero-length segment of a path simulated on an empty
    interval.
    """
    t_start: float
    t_end: float
    state: ChainState
    jumped_component: int | None = None
    jumped_to: int | None = None

    def __post_init__(self) -> None:
        if self.t_end < self.t_start:
            raise RegimeError(f"Segment ends before it starts: [{self.t_start}, {self.t_end}].")


# ---------------------------------------------------------------------------
# Chain constructors
# ---------------------------------------------------------------------------

def constant_chain(p, rate: float | Sequence[float] = 1.0, name: str = "constant") -> RegimeChain:
    p = np.asarray(p, dtype=np.float64)
    scales = np.broadcast_to(np.asarray(rate, dtype=np.float64), (p.shape[0],))
    return RegimeChain(ConstantRates(p, scales), name=name)


def erlang_chain(p=THREE_REGIME_JUMP_MATRIX, name: str = "erlang-2") -> RegimeChain:
    """Chain with holding density y e^{-y}; hazard y/(1+y) times p_ij."""
    return RegimeChain(ErlangRates(np.asarray(p, dtype=np.float64)), name=name)


def log_excess_chain(p=THREE_REGIME_JUMP_MATRIX, name: str = "log-excess") -> RegimeChain:
    """Chain with lambda_ij(y) = (y - ln(1+y)) p_ij."""
    return RegimeChain(LogExcessRates(np.asarray(p, dtype=np.float64)), name=name)


def polynomial_chain(p, coeffs: Sequence[float], scales=None, name: str = "polynomial") -> RegimeChain:
    return RegimeChain(PolynomialRates(np.asarray(p, dtype=np.float64), coeffs, scales), name=name)


def tabulated_chain(grid, table, name: str = "tabulated") -> RegimeChain:
    return RegimeChain(TabulatedRates(grid, table), name=name)


def frozen_chain(name: str = "frozen") -> RegimeChain:
    return RegimeChain(FrozenRates(), name=name)


# ---------------------------------------------------------------------------
# Single-component holding-time quantities
# ---------------------------------------------------------------------------

def _check_age(y) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if np.any(y < 0) or np.any(np.isnan(y)):
        raise RegimeError(f"Ages must be nonnegative. Got: {y}")
    return y


def _out(value: np.ndarray):
    return float(value) if np.ndim(value) == 0 else value


def cumulative_hazard(chain: RegimeChain, i: int, y):
    """Lambda_i(y) = int_0^y sum_{j != i} lambda_ij(v) dv."""
    return _out(chain.rates.cumulative(chain.check_state(i), _check_age(y)))


def holding_cdf(chain: RegimeChain, i: int, y):
    """F(y | i) = 1 - exp(-Lambda_i(y))."""
    return _out(-np.expm1(-chain.rates.cumulative(chain.check_state(i), _check_age(y))))


def holding_pdf(chain: RegimeChain, i: int, y):
    """f(y | i) = lambda_i(y) exp(-Lambda_i(y))."""
    i = chain.check_state(i)
    y = _check_age(y)
    return _out(chain.rates.total(i, y) * np.exp(-chain.rates.cumulative(i, y)))


def conditional_residual_cdf(chain: RegimeChain, i: int, y_elapsed: float, s):
    """Residual-life c.d.f. (F(s + y | i) - F(y | i)) / (1 - F(y | i))."""
    i = chain.check_state(i)
    y_elapsed = float(_check_age(y_elapsed))
    s = _check_age(s)
    gap = chain.rates.cumulative(i, y_elapsed + s) - chain.rates.cumulative(i, y_elapsed)
    return _out(-np.expm1(-np.clip(gap, 0.0, None)))


def residual_survival(chain: RegimeChain, i: int, y_elapsed, s) -> np.ndarray:
    """S(s) = (1 - F(y + s | i)) / (1 - F(y | i)), vectorised over ``s``."""
    gap = chain.rates.cumulative(i, y_elapsed + s) - chain.rates.cumulative(i, y_elapsed)
    return np.exp(-np.clip(gap, 0.0, None))


def sample_residuals(chain: RegimeChain, states, ages, uniforms) -> np.ndarray:
    """Vectorised inverse-transform sampler of residual lives.

    Solves Lambda_i(y + s) = Lambda_i(y) - ln(1 - U) for each (i, y, U) by bracket doubling
    followed by bisection to ``SAMPLER_REL_TOL * (1 + s)``.
    """
    states = np.asarray(states, dtype=np.int64).reshape(-1)
    ages = np.asarray(ages, dtype=np.float64).reshape(-1)
    uniforms = np.asarray(uniforms, dtype=np.float64).reshape(-1)
    out = np.empty(states.size)
    if chain.frozen:
        out.fill(np.inf)
        return out

    for i in np.unique(states):
        sel = np.flatnonzero(states == i)
        y0 = ages[sel]
        base = chain.rates.cumulative(int(i), y0)
        target = base - np.log1p(-uniforms[sel])

        lo = np.zeros(sel.size)
        hi = np.ones(sel.size)
        short = chain.rates.cumulative(int(i), y0 + hi) < target
        while np.any(short):
            hi = np.where(short, 2.0 * hi, hi)
            if np.any(hi > _SAMPLER_Y_BUDGET):
                raise RegimeError(
                    f"Residual-life bracket of state {i} in chain '{chain.name}' exceeds {_SAMPLER_Y_BUDGET:g}: "
                    "unbounded-hazard condition violated."
                )
            short = chain.rates.cumulative(int(i), y0 + hi) < target
        lo = np.where(hi > 1.0, 0.5 * hi, 0.0)

        open_ = (hi - lo) > SAMPLER_REL_TOL * (1.0 + lo)
        while np.any(open_):
            mid = 0.5 * (lo + hi)
            below = chain.rates.cumulative(int(i), y0 + mid) < target
            lo = np.where(open_ & below, mid, lo)
            hi = np.where(open_ & ~below, mid, hi)
            open_ = (hi - lo) > SAMPLER_REL_TOL * (1.0 + lo)
        out[sel] = 0.5 * (lo + hi)
    return out


def sample_residual(chain: RegimeChain, i: int, y_elapsed: float, rng: np.random.Generator) -> float:
    """Draw one residual life from F_tau(. | i, y_elapsed)."""
    i = chain.check_state(i)
    y_elapsed = float(_check_age(y_elapsed))
    return float(sample_residuals(chain, [i], [y_elapsed], [rng.random()])[0])


def sample_next_states(chain: RegimeChain, i: int, ages, uniforms) -> np.ndarray:
    """Target states j ~ p_ij(age) for a batch of jumps out of state ``i``."""
    probs = np.atleast_2d(chain.rates.jump_probs(i, np.asarray(ages, dtype=np.float64)))
    cdf = np.cumsum(probs, axis=-1)
    cdf[:, -1] = 1.0
    return np.argmax(np.asarray(uniforms).reshape(-1, 1) < cdf, axis=1)


def holding_time_mean(chain: RegimeChain, i: int) -> float:
    """E[holding time | i] = int_0^inf (1 - F(y | i)) dy."""
    i = chain.check_state(i)
    if chain.frozen:
        return np.inf
    end = _truncation_horizon([chain], [i], [0.0])
    value, _ = quad(lambda s: float(np.exp(-chain.rates.cumulative(i, s))), 0.0, end,
                    epsabs=1e-13, epsrel=QUAD_RTOL, limit=200)
    return value


def embedded_matrix_irreducible(chain: RegimeChain) -> tuple[bool, np.ndarray]:
    """Unconditional jump matrix p_hat_ij = int p_ij(y) dF(y | i) and its irreducibility."""
    k = chain.k
    if chain.frozen:
        return True, np.ones((1, 1))
    p_hat = np.zeros((k, k))
    for i in range(k):
        end = _truncation_horizon([chain], [i], [0.0])
        for j in range(k):
            if j == i:
                continue
            integrand = lambda s, i=i, j=j: float(
                chain.rates.jump_probs(i, s)[j] * chain.rates.total(i, s) * np.exp(-chain.rates.cumulative(i, s))
            )
            p_hat[i, j] = _integrate(integrand, 0.0, end)
    n_comp, _ = connected_components((p_hat > 1e-14).astype(np.float64), directed=True, connection="strong")
    return bool(n_comp == 1), p_hat


# ---------------------------------------------------------------------------
# Multi-component quantities
# ---------------------------------------------------------------------------

def _state_arrays(chains: Sequence[RegimeChain], state: ChainState) -> tuple[list[int], list[float]]:
    if state.n_components != len(chains):
        raise RegimeError(f"ChainState has {state.n_components} components; {len(chains)} chains given.")
    xs = [c.check_state(i) for c, i in zip(chains, state.x)]
    return xs, [float(a) for a in state.y]


def _joint_log_survival(chains, xs, ys, s) -> np.ndarray:
    total = np.zeros_like(np.asarray(s, dtype=np.float64))
    for c, i, y in zip(chains, xs, ys):
        total = total + (c.rates.cumulative(i, y + s) - c.rates.cumulative(i, y))
    return total


def _truncation_horizon(chains, xs, ys) -> float:
    """Smallest s (to bisection accuracy) with prod_m S^m(s) below TRUNCATION_SURVIVAL."""
    hi = 1.0
    while _joint_log_survival(chains, xs, ys, hi) < _LOG_TRUNCATION:
        hi *= 2.0
        if hi > _SAMPLER_Y_BUDGET:
            raise RegimeError("Joint survival does not decay: unbounded-hazard condition violated.")
    lo = 0.0
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if _joint_log_survival(chains, xs, ys, mid) < _LOG_TRUNCATION:
            lo = mid
        else:
            hi = mid
    return hi


def _integrate(func, a: float, b: float) -> float:
    if b <= a:
        return 0.0
    res = quad(func, a, b, epsabs=1e-13, epsrel=QUAD_RTOL, limit=400, full_output=1)
    value, abserr = res[0], res[1]
    if len(res) > 3 and abserr > 1e-7 * max(1.0, abs(value)):
        raise QuadratureError(f"Quadrature on [{a:.4g}, {b:.4g}] did not converge: {res[3]}")
    return value


def _jump_weight_density(chains, xs, ys, l: int, s) -> np.ndarray:
    """prod_{m != l} S^m(s) * lambda_l(y^l + s) S^l(s)."""
    s = np.asarray(s, dtype=np.float64)
    return chains[l].rates.total(xs[l], ys[l] + s) * np.exp(-_joint_log_survival(chains, xs, ys, s))


def _jump_weight(chains, xs, ys, l: int, r: float | None = None) -> float:
    if chains[l].frozen:
        return 0.0
    end = _truncation_horizon(chains, xs, ys)
    upper = end if r is None else min(float(r), end)
    return _integrate(lambda s: float(_jump_weight_density(chains, xs, ys, l, s)), 0.0, upper)


def next_component_prob(chains: Sequence[RegimeChain], state: ChainState) -> np.ndarray:
    """P_{t,x,y}(next jump happens in component l) for every l."""
    xs, ys = _state_arrays(chains, state)
    if len(chains) == 1:
        if chains[0].frozen:
            raise RegimeError("A frozen single component never jumps.")
        return np.ones(1)
    if all(c.frozen for c in chains):
        raise RegimeError("No component can jump: every chain is frozen.")
    probs = np.array([_jump_weight(chains, xs, ys, l) for l in range(len(chains))])
    total = probs.sum()
    if abs(total - 1.0) > 1e-6:
        raise QuadratureError(f"Next-component probabilities sum to {total:.10f}.")
    if abs(total - 1.0) > 1e-8:
        log.warning("Next-component probabilities sum to %.12f; renormalising.", total)
    return probs / total


def conditional_jump_cdf(chains: Sequence[RegimeChain], state: ChainState, l: int, r: float) -> float:
    """F_{tau^l | l}(r | x, y): c.d.f. of the residual life of ``l`` given that it jumps first."""
    xs, ys = _state_arrays(chains, state)
    if r < 0:
        raise RegimeError(f"Residual life must be nonnegative. Got: {r}")
    if r == 0:
        return 0.0
    total = _jump_weight(chains, xs, ys, l)
    if total <= 0:
        raise RegimeError(f"Component {l} cannot jump first from {state}.")
    return min(1.0, _jump_weight(chains, xs, ys, l, r) / total)


def conditional_jump_pdf(chains: Sequence[RegimeChain], state: ChainState, l: int, r):
    """f_{tau^l | l}(r | x, y), vectorised over ``r``."""
    xs, ys = _state_arrays(chains, state)
    r = _check_age(r)
    total = _jump_weight(chains, xs, ys, l)
    if total <= 0:
        raise RegimeError(f"Component {l} cannot jump first from {state}.")
    return _out(_jump_weight_density(chains, xs, ys, l, r) / total)


def residual_density_at_zero(chain: RegimeChain, i: int, y: float) -> float:
    """f_tau(0 | i, y) = f(y | i) / (1 - F(y | i)) = lambda_i(y)."""
    return float(chain.rates.total(chain.check_state(i), float(_check_age(y))))


# ---------------------------------------------------------------------------
# Path simulation
# ---------------------------------------------------------------------------

def simulate_chain(
    chains: Sequence[RegimeChain],
    state0: ChainState,
    t0: float,
    horizon: float,
    rng: np.random.Generator,
) -> list[PathSegment]:
    """Piecewise-constant path of (X_t, Y_t) on [t0, horizon].

    Each component carries its own next-jump epoch drawn from its residual-life law; the
    earliest epoch wins (lowest component index on ties), the winner jumps to j with
    probability p_ij(age at the jump) and restarts at age 0.
    """
    if horizon < t0:
        raise RegimeError(f"Horizon {horizon} precedes start time {t0}.")
    xs, ys = _state_arrays(chains, state0)
    xs = list(xs)
    ages = np.array(ys, dtype=np.float64)
    epochs = np.array([
        t0 + sample_residual(c, i, a, rng) for c, i, a in zip(chains, xs, ages)
    ])

    segments: list[PathSegment] = []
    t = float(t0)
    while True:
        l = int(np.argmin(epochs))
        t_next = float(epochs[l])
        snapshot = ChainState(tuple(xs), tuple(float(a) for a in ages))
        if t_next >= horizon:
            segments.append(PathSegment(t, float(horizon), snapshot))
            return segments
        elapsed = t_next - t
        ages += elapsed
        j = int(sample_next_states(chains[l], xs[l], [ages[l]], [rng.random()])[0])
        segments.append(PathSegment(t, t_next, snapshot, jumped_component=l, jumped_to=j))
        xs[l] = j
        ages[l] = 0.0
        epochs[l] = t_next + sample_residual(chains[l], j, 0.0, rng)
        t = t_next
