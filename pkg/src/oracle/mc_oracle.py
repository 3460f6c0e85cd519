"""Monte-Carlo checks of the solver: Feynman-Kac estimates of psi and wealth simulation.

Regime paths and wealth are simulated segment by segment from the explicit solution of the
wealth equation, so the estimators carry no time-discretisation bias for time-homogeneous
coefficients. Paths are split into blocks of ``BLOCK_SIZE``; block ``b`` draws from the
Philox stream keyed by (seed, b), so results do not depend on how blocks are scheduled.
"""
from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import pandas as pd
from scipy.integrate import cumulative_simpson

from config import LOW_PRECISION_SE, THREADS_ENV, TIME_SIMPSON_PANELS
from src.control.hamiltonian import Hamiltonian
from src.errors import AdmissibilityError
from src.market.market import MarketSpec, diffusion_matrix, excess_drift, membership
from src.regimes.semi_markov import ChainState, RegimeChain, simulate_chain
from .paths import ReplayUniforms, block_generator, block_sizes, iterate_segments

log = logging.getLogger(__name__)

_MIN_PATHS = 100
_H_TABLE_PANELS = 64 * TIME_SIMPSON_PANELS


def resolve_threads(threads: int | None = None) -> int:
    """Explicit value, else the RISKSWITCH_THREADS environment variable, else 1."""
    if threads is None:
        raw = os.environ.get(THREADS_ENV)
        if raw is None:
            return 1
        try:
            threads = int(raw)
        except ValueError:
            raise ValueError(f"{THREADS_ENV} must be an integer. Got: {raw!r}") from None
    if threads < 1:
        raise ValueError(f"Thread count must be at least 1. Got: {threads}")
    return threads


@dataclass(frozen=True)
class McEstimate:
    mean: float
    std_error: float
    n_paths: int
    seed: int

    @property
    def low_precision(self) -> bool:
        return self.std_error > LOW_PRECISION_SE

    def z_score(self, reference: float) -> float:
        diff = abs(reference - self.mean)
        if self.std_error == 0.0:
            return 0.0 if diff <= 1e-12 * max(1.0, abs(reference)) else np.inf
        return diff / self.std_error

    def to_record(self) -> dict:
        return {"mean": self.mean, "se": self.std_error, "n": self.n_paths, "seed": self.seed}

    def to_json(self) -> str:
        return json.dumps(self.to_record())


@dataclass
class WealthPath:
    """One simulated wealth trajectory; ``times`` include grid nodes, regime jumps and asset jumps."""
    times: np.ndarray
    values: np.ndarray
    segments: list = field(default_factory=list)

    def __post_init__(self) -> None:
        if np.any(self.values <= 0):
            raise RuntimeError("Simulated wealth left the positive half-line.")
        if np.any(np.diff(self.times) < 0):
            raise RuntimeError("Wealth path times are not increasing.")

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"t": self.times, "v": self.values})


def _summarise(samples: np.ndarray, seed: int) -> McEstimate:
    mean = float(np.mean(samples))
    if np.all(samples == samples[0]):
        se = 0.0
    else:
        se = float(np.std(samples, ddof=1) / np.sqrt(samples.size))
    return McEstimate(mean, se, int(samples.size), int(seed))


def _run_blocks(task: Callable[[int, int], np.ndarray], n_paths: int, threads: int | None) -> np.ndarray:
    sizes = block_sizes(n_paths)
    workers = min(resolve_threads(threads), len(sizes))
    if workers <= 1:
        parts = [task(b, size) for b, size in enumerate(sizes)]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(task, range(len(sizes)), sizes))
    return np.concatenate(parts)


# ---------------------------------------------------------------------------
# Integral of h_theta along regime paths
# ---------------------------------------------------------------------------

class HamiltonianIntegral:
    """int_a^b h_theta(s, x) ds for piecewise-constant regime paths.

    Exact for time-homogeneous coefficients; otherwise read off a cumulative Simpson table.
    """

    def __init__(self, ham: Hamiltonian, t0: float, horizon: float) -> None:
        self.ham = ham
        self.spec = ham.spec
        self.regimes = list(self.spec.regimes())
        counts = self.spec.regime_counts
        self._strides = np.array([int(np.prod(counts[c + 1:])) for c in range(len(counts))], dtype=np.int64)
        if self.spec.time_homogeneous:
            self.rates = np.array([ham.h(t0, x) for x in self.regimes])
            self.nodes = None
        else:
            self.nodes = np.linspace(t0, horizon, _H_TABLE_PANELS + 1)
            self.cumulative = np.vstack([
                cumulative_simpson(np.array([ham.h(s, x) for s in self.nodes]), x=self.nodes, initial=0.0)
                for x in self.regimes
            ])

    def flat_index(self, states: np.ndarray) -> np.ndarray:
        return states @ self._strides

    def __call__(self, a: np.ndarray, b: np.ndarray, states: np.ndarray) -> np.ndarray:
        flat = self.flat_index(states)
        if self.nodes is None:
            return self.rates[flat] * (b - a)
        out = np.empty(a.size)
        for n in np.unique(flat):
            sel = flat == n
            out[sel] = np.interp(b[sel], self.nodes, self.cumulative[n]) - np.interp(a[sel], self.nodes, self.cumulative[n])
        return out


def estimate_psi(
    spec: MarketSpec,
    chains: Sequence[RegimeChain],
    t: float,
    x: Sequence[int],
    y: Sequence[float],
    n_paths: int,
    seed: int,
    antithetic: bool = False,
    threads: int | None = None,
    hamiltonian: Hamiltonian | None = None,
) -> McEstimate:
    """Feynman-Kac estimate of psi(t, x, y) = E[exp int_t^T h_theta(s, X_s) ds]."""
    if n_paths < _MIN_PATHS:
        raise ValueError(f"Need at least {_MIN_PATHS} paths. Got: {n_paths}")
    if not 0.0 <= t <= spec.horizon:
        raise ValueError(f"Start time {t} outside [0, {spec.horizon}].")
    ham = hamiltonian or Hamiltonian(spec)
    integral = HamiltonianIntegral(ham, t, spec.horizon)
    x, y = tuple(int(v) for v in x), tuple(float(v) for v in y)

    def exponent(size: int, rng) -> np.ndarray:
        acc = np.zeros(size)
        for live, start, end, states in iterate_segments(chains, x, y, t, spec.horizon, size, rng):
            acc[live] += integral(start, end, states)
        return np.exp(acc)

    def task(block: int, size: int) -> np.ndarray:
        rng = block_generator(seed, block)
        if not antithetic:
            return exponent(size, rng)
        half = (size + 1) // 2
        recorder = ReplayUniforms(rng)
        first = exponent(half, recorder)
        second = exponent(half, recorder.mirror())
        return 0.5 * (first + second)

    samples = _run_blocks(task, n_paths, threads)
    est = _summarise(samples, seed)
    if est.low_precision:
        log.warning("Low-precision psi estimate: SE %.3e > %.0e with %d paths.", est.std_error, LOW_PRECISION_SE, n_paths)
    log.info("psi(t=%g, x=%s, y=%s) ~ %.6f +- %.2e (%d %s)", t, x, y, est.mean, est.std_error, est.n_paths,
             "antithetic pairs" if antithetic else "paths")
    return est


# ---------------------------------------------------------------------------
# Feedback controls and wealth
# ---------------------------------------------------------------------------

class FeedbackControl:
    """Piecewise-constant feedback u(t, x): the value at the last node t_k <= t.

    Args:
        spec: Market the control acts in; every tabulated value must lie in A ∩ U_delta.
        times: Increasing node times.
        table: Mapping regime vector -> array (len(times), n).
    """

    def __init__(self, spec: MarketSpec, times: Sequence[float], table: dict[tuple[int, ...], np.ndarray]) -> None:
        self.spec = spec
        self.times = np.asarray(times, dtype=np.float64)
        if self.times.ndim != 1 or self.times.size == 0 or np.any(np.diff(self.times) <= 0):
            raise ValueError(f"Control nodes must be a nonempty increasing sequence. Got: {self.times}")
        self.table = {}
        for x in spec.regimes():
            if x not in table:
                raise ValueError(f"Control has no entry for regime {x}.")
            values = np.asarray(table[x], dtype=np.float64).reshape(self.times.size, spec.n)
            for row in values:
                if not membership(spec.constraint, row, spec.eta_bounds):
                    raise AdmissibilityError(f"Control value {row.tolist()} at regime {x} is outside the admissible set.")
            self.table[x] = values
        self._stack = np.stack([self.table[x] for x in spec.regimes()])  # (nX, nT, n)

    @classmethod
    def constant(cls, spec: MarketSpec, u) -> "FeedbackControl":
        u = np.atleast_1d(np.asarray(u, dtype=np.float64))
        return cls(spec, [0.0], {x: u[None, :] for x in spec.regimes()})

    @classmethod
    def optimal(cls, spec: MarketSpec, times: Sequence[float], hamiltonian: Hamiltonian | None = None) -> "FeedbackControl":
        ham = hamiltonian or Hamiltonian(spec)
        times = np.asarray(times, dtype=np.float64)
        return cls(spec, times, {x: np.vstack([ham.u_star(t, x) for t in times]) for x in spec.regimes()})

    def map(self, func: Callable[[np.ndarray], np.ndarray]) -> "FeedbackControl":
        """New control with ``func`` applied to every value and pulled back into A ∩ U_delta."""
        return FeedbackControl(self.spec, self.times, {
            x: np.vstack([project_admissible(self.spec, func(row)) for row in values])
            for x, values in self.table.items()
        })

    def node_index(self, t) -> np.ndarray:
        return np.clip(np.searchsorted(self.times, t, side="right") - 1, 0, self.times.size - 1)

    def __call__(self, t: float, x: Sequence[int]) -> np.ndarray:
        return self.table[tuple(int(v) for v in x)][int(self.node_index(t))]

    def lookup(self, t: np.ndarray, flat_states: np.ndarray) -> np.ndarray:
        """Vectorised values for arrays of times and flat regime indices, shape (len(t), n)."""
        return self._stack[flat_states, self.node_index(t)]


def project_admissible(spec: MarketSpec, u) -> np.ndarray:
    """Clip to the box, then shrink toward the origin until the sum cap and jump floor hold."""
    u = np.clip(np.atleast_1d(np.asarray(u, dtype=np.float64)), spec.constraint.lower, spec.constraint.upper)
    if membership(spec.constraint, u, spec.eta_bounds):
        return u
    lo, hi = 0.0, 1.0
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if membership(spec.constraint, mid * u, spec.eta_bounds):
            lo = mid
        else:
            hi = mid
    return lo * u


class _WealthModel:
    """Per-regime, per-cell log-wealth drift and variance on the simulation grid."""

    def __init__(self, spec: MarketSpec, control: FeedbackControl, t0: float, horizon: float, n_steps: int) -> None:
        if n_steps < 1:
            raise ValueError(f"n_steps must be positive. Got: {n_steps}")
        self.spec = spec
        self.control = control
        self.grid = np.linspace(t0, horizon, n_steps + 1)
        regimes = list(spec.regimes())
        drift = np.empty((len(regimes), n_steps))
        var = np.empty_like(drift)
        for n, x in enumerate(regimes):
            for k, s in enumerate(self.grid[:-1]):
                u = control(s, x)
                a = diffusion_matrix(spec, s, x)
                drift[n, k] = spec.r(s, x) + excess_drift(spec, s, x) @ u - 0.5 * u @ a @ u
                var[n, k] = u @ a @ u
        dt = np.diff(self.grid)
        self.drift, self.var = drift, var
        self.cum_drift = np.hstack([np.zeros((len(regimes), 1)), np.cumsum(drift * dt, axis=1)])
        self.cum_var = np.hstack([np.zeros((len(regimes), 1)), np.cumsum(var * dt, axis=1)])
        counts = spec.regime_counts
        self._strides = np.array([int(np.prod(counts[c + 1:])) for c in range(len(counts))], dtype=np.int64)

    def flat_index(self, states: np.ndarray) -> np.ndarray:
        return states @ self._strides

    def cell(self, t: np.ndarray) -> np.ndarray:
        return np.clip(np.searchsorted(self.grid, t, side="right") - 1, 0, self.grid.size - 2)

    def integrate(self, a: np.ndarray, b: np.ndarray, flat: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Integrated log-drift and variance over [a, b] for paths in regimes ``flat``."""
        mean = np.empty(a.size)
        var = np.empty(a.size)
        for n in np.unique(flat):
            sel = flat == n
            mean[sel] = np.interp(b[sel], self.grid, self.cum_drift[n]) - np.interp(a[sel], self.grid, self.cum_drift[n])
            var[sel] = np.interp(b[sel], self.grid, self.cum_var[n]) - np.interp(a[sel], self.grid, self.cum_var[n])
        return mean, np.maximum(var, 0.0)

    def jump_log_factors(self, rng, live, start, end, flat, acc: np.ndarray) -> None:
        """Add ln(1 + u . eta_j(z)) of every asset jump in [start, end) to ``acc[live]``."""
        spec = self.spec
        for j, measure in enumerate(spec.nu):
            if measure.mass <= 0:
                continue
            counts = rng.poisson(measure.mass * (end - start))
            total = int(counts.sum())
            if total == 0:
                continue
            owner = np.repeat(np.arange(live.size), counts)
            times = start[owner] + (end - start)[owner] * rng.random(total)
            marks = measure.sample(rng, total)
            eta = np.vstack([spec.eta[j][l](marks) for l in range(spec.n)]).T   # (total, n)
            u = self.control.lookup(times, flat[owner])
            factor = 1.0 + np.sum(u * eta, axis=1)
            if np.any(factor <= 0):
                raise RuntimeError("Asset jump drove wealth nonpositive; the control left U_delta.")
            np.add.at(acc, live[owner], np.log(factor))


def _check_control(spec: MarketSpec, control) -> FeedbackControl:
    if isinstance(control, FeedbackControl):
        return control
    return FeedbackControl.constant(spec, control)


def terminal_log_wealth(
    spec: MarketSpec,
    chains: Sequence[RegimeChain],
    v0: float,
    control,
    horizon: float,
    n_steps: int,
    size: int,
    rng,
    x0: Sequence[int],
    y0: Sequence[float],
    t0: float = 0.0,
) -> np.ndarray:
    """ln V_T for a batch of paths."""
    control = _check_control(spec, control)
    model = _WealthModel(spec, control, t0, horizon, n_steps)
    acc = np.full(size, np.log(v0))
    for live, start, end, states in iterate_segments(chains, x0, y0, t0, horizon, size, rng):
        flat = model.flat_index(states)
        mean, var = model.integrate(start, end, flat)
        acc[live] += mean + np.sqrt(var) * rng.standard_normal(live.size)
        model.jump_log_factors(rng, live, start, end, flat, acc)
    return acc


def simulate_wealth(
    spec: MarketSpec,
    chains: Sequence[RegimeChain],
    v0: float,
    control,
    T: float,
    n_steps: int,
    seed: int,
    x0: Sequence[int] | None = None,
    y0: Sequence[float] | None = None,
) -> WealthPath:
    """One wealth path on [0, T] recorded at grid nodes, regime jumps and asset jumps."""
    if not v0 > 0:
        raise ValueError(f"Initial wealth must be positive. Got: {v0}")
    control = _check_control(spec, control)
    x0 = tuple(x0) if x0 is not None else (0,) * spec.n_components
    y0 = tuple(y0) if y0 is not None else (0.0,) * spec.n_components
    rng = block_generator(seed, 0)
    model = _WealthModel(spec, control, 0.0, T, n_steps)
    segments = simulate_chain(chains, ChainState(x0, y0), 0.0, T, rng)

    times, values = [0.0], [float(v0)]
    log_v = np.log(v0)
    for seg in segments:
        flat = int(model.flat_index(np.asarray(seg.state.x)))
        jumps = []
        for j, measure in enumerate(spec.nu):
            if measure.mass <= 0:
                continue
            count = int(rng.poisson(measure.mass * (seg.t_end - seg.t_start)))
            when = seg.t_start + (seg.t_end - seg.t_start) * rng.random(count)
            marks = measure.sample(rng, count)
            jumps += [(float(s), j, float(z)) for s, z in zip(when, marks)]
        inner = model.grid[(model.grid > seg.t_start) & (model.grid < seg.t_end)]
        events = sorted({*inner.tolist(), *(s for s, _, _ in jumps), seg.t_end})
        jump_at = {}
        for s, j, z in jumps:
            jump_at.setdefault(s, []).append((j, z))
        t = seg.t_start
        for s in events:
            mean, var = model.integrate(np.array([t]), np.array([s]), np.array([flat]))
            log_v += float(mean[0] + np.sqrt(var[0]) * rng.standard_normal())
            for j, z in jump_at.get(s, []):
                u = control(s, seg.state.x)
                factor = 1.0 + sum(u[l] * float(spec.eta[j][l](z)) for l in range(spec.n))
                if factor <= 0:
                    raise RuntimeError("Asset jump drove wealth nonpositive; the control left U_delta.")
                log_v += np.log(factor)
            times.append(s)
            values.append(float(np.exp(log_v)))
            t = s
    return WealthPath(np.array(times), np.array(values), segments)


def estimate_cost(
    spec: MarketSpec,
    chains: Sequence[RegimeChain],
    v0: float,
    control,
    T: float,
    n_paths: int,
    seed: int,
    n_steps: int = 100,
    x0: Sequence[int] | None = None,
    y0: Sequence[float] | None = None,
    threads: int | None = None,
) -> McEstimate:
    """Mean and SE of V_T^(-theta/2) under a feedback control."""
    if not v0 > 0:
        raise ValueError(f"Initial wealth must be positive. Got: {v0}")
    if n_paths < _MIN_PATHS:
        raise ValueError(f"Need at least {_MIN_PATHS} paths. Got: {n_paths}")
    control = _check_control(spec, control)
    x0 = tuple(x0) if x0 is not None else (0,) * spec.n_components
    y0 = tuple(y0) if y0 is not None else (0.0,) * spec.n_components
    half = spec.theta / 2.0

    def task(block: int, size: int) -> np.ndarray:
        rng = block_generator(seed, block)
        return np.exp(-half * terminal_log_wealth(spec, chains, v0, control, T, n_steps, size, rng, x0, y0))

    return _summarise(_run_blocks(task, n_paths, threads), seed)


@dataclass
class SuboptimalityReport:
    optimum: McEstimate
    rows: list[dict] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r["passed"] for r in self.rows)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows, columns=["label", "cost", "se", "gap_se", "passed"])


def verify_suboptimality(
    spec: MarketSpec,
    chains: Sequence[RegimeChain],
    v0: float,
    perturbations: dict[str, FeedbackControl] | Sequence[FeedbackControl],
    n_paths: int,
    seed: int,
    optimal: FeedbackControl | None = None,
    n_steps: int = 100,
    x0: Sequence[int] | None = None,
    y0: Sequence[float] | None = None,
    threads: int | None = None,
) -> SuboptimalityReport:
    """Costs of perturbed admissible controls against the optimum (common random numbers).

    A perturbation fails when its cost undercuts the optimal cost by more than two combined SEs.
    """
    if optimal is None:
        optimal = FeedbackControl.optimal(spec, np.linspace(0.0, spec.horizon, n_steps + 1)[:-1])
    if not isinstance(perturbations, dict):
        perturbations = {f"perturbation-{n}": c for n, c in enumerate(perturbations)}
    best = estimate_cost(spec, chains, v0, optimal, spec.horizon, n_paths, seed, n_steps, x0, y0, threads)
    report = SuboptimalityReport(best)
    for label, control in perturbations.items():
        est = estimate_cost(spec, chains, v0, control, spec.horizon, n_paths, seed, n_steps, x0, y0, threads)
        combined = float(np.hypot(best.std_error, est.std_error))
        gap = (est.mean - best.mean) / combined if combined > 0 else 0.0
        passed = est.mean >= best.mean - 2.0 * combined
        if not passed:
            log.warning("Control '%s' beats the optimum: cost %.6f < %.6f (%.2f SE).", label, est.mean, best.mean, gap)
        report.rows.append({"label": label, "cost": est.mean, "se": est.std_error, "gap_se": gap, "passed": passed})
    return report


def dump_paths(paths: Sequence[WealthPath], path: str) -> None:
    """Optional CSV dump of simulated wealth paths (columns path, t, v)."""
    frames = [p.to_frame().assign(path=n) for n, p in enumerate(paths)]
    pd.concat(frames, ignore_index=True)[["path", "t", "v"]].to_csv(path, index=False, float_format="%.17g")
