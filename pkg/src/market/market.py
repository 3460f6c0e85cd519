"""Market coefficients, portfolio constraints and assumption checks.

Coefficients depend on time and on the regime vector x = (x^0, ..., x^N): the rate and every
asset's drift and volatility row are selected by one driver component each.
"""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterator, Sequence

import numpy as np
import pandas as pd

from config import DEFAULT_DELTA, ELLIPTICITY_MIN, VALIDATION_TIME_POINTS
from src.errors import AdmissibilityError, MarketError
from src.regimes.semi_markov import RegimeChain, embedded_matrix_irreducible
from .jumps import JumpMeasure, JumpSize
from .profiles import DrivenCoefficient

log = logging.getLogger(__name__)

_MEMBERSHIP_TOL = 1e-12


@dataclass(frozen=True)
class PortfolioSet:
    """Box of fraction bounds, optional cap on the total risky fraction, and the jump floor delta.

    ``lower`` holds the short-selling floors -c_l and ``sum_max`` is 1 - c_0.
    """
    lower: np.ndarray
    upper: np.ndarray
    sum_max: float | None = None
    delta: float = DEFAULT_DELTA

    def __post_init__(self) -> None:
        lower = np.atleast_1d(np.asarray(self.lower, dtype=np.float64))
        upper = np.atleast_1d(np.asarray(self.upper, dtype=np.float64))
        if lower.shape != upper.shape:
            raise MarketError(f"Bound shapes differ: lower {lower.shape}, upper {upper.shape}.")
        if np.any(lower > upper):
            raise MarketError(f"Lower bounds exceed upper bounds: {lower} > {upper}")
        if not 0.0 < self.delta <= 1.0:
            raise MarketError(f"delta must lie in (0, 1]. Got: {self.delta}")
        if np.any(lower > 0) or np.any(upper < 0) or (self.sum_max is not None and self.sum_max < 0):
            raise MarketError("The portfolio set must contain the origin (all wealth in the bank account).")
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)

    @classmethod
    def box(cls, n: int, lower: float, upper: float, delta: float = DEFAULT_DELTA) -> "PortfolioSet":
        return cls(np.full(n, float(lower)), np.full(n, float(upper)), None, delta)

    @classmethod
    def no_short_selling(cls, n: int, c0: float = 0.0, delta: float = DEFAULT_DELTA) -> "PortfolioSet":
        """Fractions in [0, 1 - c0] with total at most 1 - c0."""
        cap = 1.0 - c0
        return cls(np.zeros(n), np.full(n, cap), cap, delta)

    @classmethod
    def from_dict(cls, n: int, spec: dict) -> "PortfolioSet":
        delta = float(spec.get("delta", DEFAULT_DELTA))
        if spec.get("preset") == "no-short-selling":
            return cls.no_short_selling(n, float(spec.get("c0", 0.0)), delta)
        lower = np.broadcast_to(np.asarray(spec.get("lower", -np.inf), dtype=np.float64), (n,)).copy()
        upper = np.broadcast_to(np.asarray(spec.get("upper", np.inf), dtype=np.float64), (n,)).copy()
        sum_max = spec.get("sum_max")
        return cls(lower, upper, None if sum_max is None else float(sum_max), delta)

    @property
    def n(self) -> int:
        return self.lower.shape[0]

    def describe(self) -> dict:
        return {
            "lower": self.lower.tolist(),
            "upper": self.upper.tolist(),
            "sum_max": self.sum_max,
            "delta": self.delta,
        }


@dataclass(eq=False)
class MarketSpec:
    """Regime-switching jump-diffusion market.

    Args:
        theta: Risk-sensitivity parameter, > 0.
        rate: Driven scalar coefficient r(t, x).
        drift: One driven scalar coefficient mu_l(t, x) per asset.
        volatility: One driven row sigma_l.(t, x) of length m1 per asset.
        eta: ``eta[j][l]`` is the jump size of asset l at a mark of source j.
        nu: One finite jump measure per source.
        constraint: Portfolio set A with its delta.
        regime_counts: State count k of every regime component.
        horizon: Investment horizon T.
    """
    theta: float
    rate: DrivenCoefficient
    drift: list[DrivenCoefficient]
    volatility: list[DrivenCoefficient]
    eta: list[list[JumpSize]]
    nu: list[JumpMeasure]
    constraint: PortfolioSet
    regime_counts: tuple[int, ...]
    horizon: float = 1.0
    name: str = "market"
    _m1: int = field(init=False, default=0)

    def __post_init__(self) -> None:
        if not self.theta > 0:
            raise MarketError(f"theta must be positive. Got: {self.theta}")
        if self.horizon < 0:
            raise MarketError(f"Horizon must be nonnegative. Got: {self.horizon}")
        n = len(self.drift)
        if n == 0 or len(self.volatility) != n:
            raise MarketError(f"Need one drift and one volatility row per asset. Got {n} drifts, {len(self.volatility)} rows.")
        if self.rate.shape != ():
            raise MarketError(f"The rate must be scalar per state. Got shape {self.rate.shape}.")
        rows = {v.shape for v in self.volatility}
        if len(rows) != 1 or len(next(iter(rows))) != 1:
            raise MarketError(f"Volatility rows must share one length. Got shapes {sorted(rows)}.")
        self._m1 = next(iter(rows))[0]
        if len(self.eta) != len(self.nu) or any(len(row) != n for row in self.eta):
            raise MarketError(f"eta must be a {len(self.nu)} x {n} table (source x asset).")
        if self.constraint.n != n:
            raise MarketError(f"Constraint has {self.constraint.n} assets, market has {n}.")
        self.regime_counts = tuple(int(k) for k in self.regime_counts)
        for coeff in [self.rate, *self.drift, *self.volatility]:
            if coeff.driver >= len(self.regime_counts):
                raise MarketError(f"Driver component {coeff.driver} does not exist; there are {len(self.regime_counts)} components.")
            if coeff.n_states != self.regime_counts[coeff.driver]:
                raise MarketError(
                    f"Component {coeff.driver} has {self.regime_counts[coeff.driver]} states but a coefficient lists {coeff.n_states}."
                )

    # -- dimensions ---------------------------------------------------------------------------

    @property
    def n(self) -> int:
        return len(self.drift)

    @property
    def m1(self) -> int:
        return self._m1

    @property
    def m2(self) -> int:
        return len(self.nu)

    @property
    def n_components(self) -> int:
        return len(self.regime_counts)

    @property
    def delta(self) -> float:
        return self.constraint.delta

    @property
    def drivers(self) -> set[int]:
        return {c.driver for c in [self.rate, *self.drift, *self.volatility]}

    @property
    def single_driver(self) -> bool:
        return len(self.drivers) == 1

    @cached_property
    def time_homogeneous(self) -> bool:
        return all(c.is_time_homogeneous for c in [self.rate, *self.drift, *self.volatility])

    # -- coefficients -------------------------------------------------------------------------

    def r(self, t: float, x: Sequence[int]) -> float:
        return float(self.rate(t, x))

    def mu(self, t: float, x: Sequence[int]) -> np.ndarray:
        return np.array([float(c(t, x)) for c in self.drift])

    def sigma(self, t: float, x: Sequence[int]) -> np.ndarray:
        return np.vstack([c(t, x) for c in self.volatility])

    def regimes(self) -> Iterator[tuple[int, ...]]:
        """All regime vectors of the component product space, in lexicographic order."""
        return itertools.product(*(range(k) for k in self.regime_counts))

    # -- jumps --------------------------------------------------------------------------------

    @cached_property
    def eta_bounds(self) -> np.ndarray:
        """(n, m2, 2) array of min/max of eta_lj over the support of nu_j."""
        out = np.zeros((self.n, self.m2, 2))
        for j, measure in enumerate(self.nu):
            for l in range(self.n):
                out[l, j] = self.eta[j][l].bounds(measure.points, measure.support)
        return out

    @cached_property
    def jump_quadrature(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """Per source: weights (q,) and eta values (n, q) at the quadrature nodes of nu_j."""
        out = []
        for j, measure in enumerate(self.nu):
            z, w = measure.quadrature()
            etas = np.vstack([self.eta[j][l](z) for l in range(self.n)]) if z.size else np.zeros((self.n, 0))
            out.append((w, etas))
        return out

    @property
    def uniform_identity_jumps(self) -> bool:
        """True when every source is a pure uniform density and every eta is the identity."""
        return self.m2 > 0 and all(
            m.uniform and m.atoms.size == 0 and all(e.is_identity for e in row)
            for m, row in zip(self.nu, self.eta)
        )

    # -- serialisation ------------------------------------------------------------------------

    @classmethod
    def from_dict(cls, spec: dict, regime_counts: Sequence[int], horizon: float = 1.0) -> "MarketSpec":
        """Build from the ``market`` block of a run configuration."""
        n = int(spec["n_assets"])
        assets = spec["assets"]
        if len(assets) != n:
            raise MarketError(f"n_assets is {n} but {len(assets)} asset entries were given.")
        rate = DrivenCoefficient(int(spec["rate"].get("driver", 0)), spec["rate"]["values"])
        drift = [DrivenCoefficient(int(a.get("driver", 0)), a["mu"]) for a in assets]
        vol = [DrivenCoefficient(int(a.get("driver", 0)), [np.atleast_1d(np.asarray(s, dtype=object)).tolist() for s in a["sigma"]])
               for a in assets]
        nu, eta = [], []
        for source in spec.get("jumps", []):
            nu.append(JumpMeasure.from_spec(source["measure"]))
            sizes = source.get("eta", [{"kind": "identity"}] * n)
            if len(sizes) != n:
                raise MarketError(f"Each jump source needs one eta per asset. Got {len(sizes)} for {n} assets.")
            eta.append([JumpSize.from_spec(s) for s in sizes])
        constraint = PortfolioSet.from_dict(n, spec.get("constraint", {}))
        return cls(
            theta=float(spec["theta"]),
            rate=rate,
            drift=drift,
            volatility=vol,
            eta=eta,
            nu=nu,
            constraint=constraint,
            regime_counts=tuple(regime_counts),
            horizon=float(horizon),
            name=spec.get("name", "market"),
        )

    def describe(self) -> dict:
        return {
            "name": self.name,
            "n_assets": self.n,
            "theta": self.theta,
            "rate": self.rate.describe(),
            "assets": [
                {"driver": d.driver, "mu": d.describe()["values"], "sigma": v.describe()["values"]}
                for d, v in zip(self.drift, self.volatility)
            ],
            "jumps": [
                {"measure": m.describe(), "eta": [e.describe() for e in row]} for m, row in zip(self.nu, self.eta)
            ],
            "constraint": self.constraint.describe(),
        }


def three_regime_market(
    theta: float = 1.0,
    delta: float = DEFAULT_DELTA,
    lower: float = -5.0,
    upper: float = 5.0,
    horizon: float = 1.0,
    jump_support: tuple[float, float] = (-0.4, 0.4),
    jump_mass: float = 1.0,
) -> MarketSpec:
    """One asset, three regimes of a single driving chain, identity jumps with uniform marks."""
    return MarketSpec(
        theta=theta,
        rate=DrivenCoefficient(0, [0.2, 0.5, 0.7]),
        drift=[DrivenCoefficient(0, [0.3, 0.6, 0.8])],
        volatility=[DrivenCoefficient(0, [[0.2], [0.4], [0.3]])],
        eta=[[JumpSize.identity()]],
        nu=[JumpMeasure.uniform_on(*jump_support, mass=jump_mass)],
        constraint=PortfolioSet.box(1, lower, upper, delta),
        regime_counts=(3,),
        horizon=horizon,
        name="three-regime",
    )


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------

def excess_drift(spec: MarketSpec, t: float, x: Sequence[int]) -> np.ndarray:
    """b(t, x) = mu(t, x) - r(t, x) 1."""
    return spec.mu(t, x) - spec.r(t, x)


def diffusion_matrix(spec: MarketSpec, t: float, x: Sequence[int], check: bool = True) -> np.ndarray:
    """a(t, x) = sigma sigma^T, checked for uniform ellipticity unless ``check`` is False."""
    sigma = spec.sigma(t, x)
    a = sigma @ sigma.T
    a = 0.5 * (a + a.T)
    if check:
        min_eig = float(np.linalg.eigvalsh(a)[0])
        if min_eig < ELLIPTICITY_MIN:
            raise MarketError(f"Diffusion matrix is not uniformly elliptic at t={t}, x={tuple(x)}: min eigenvalue {min_eig:.3e}.")
    return a


def membership(constraint: PortfolioSet, u, eta_bounds: np.ndarray | None) -> bool:
    """u in A ∩ U_delta, with the jump condition checked by interval arithmetic on eta."""
    u = np.atleast_1d(np.asarray(u, dtype=np.float64))
    if u.shape != constraint.lower.shape or not np.all(np.isfinite(u)):
        return False
    if np.any(u < constraint.lower - _MEMBERSHIP_TOL) or np.any(u > constraint.upper + _MEMBERSHIP_TOL):
        return False
    if constraint.sum_max is not None and u.sum() > constraint.sum_max + _MEMBERSHIP_TOL:
        return False
    return jump_floor(u, eta_bounds) >= constraint.delta - _MEMBERSHIP_TOL


def jump_floor(u: np.ndarray, eta_bounds: np.ndarray | None) -> float:
    """min over sources j and marks z of 1 + sum_l u_l eta_lj(z)."""
    if eta_bounds is None or eta_bounds.size == 0:
        return 1.0
    u = np.asarray(u, dtype=np.float64)[:, None, None]
    per_source = np.min(u * eta_bounds, axis=2).sum(axis=0)
    return float(1.0 + per_source.min())


def require_admissible(spec: MarketSpec, u) -> np.ndarray:
    u = np.atleast_1d(np.asarray(u, dtype=np.float64))
    if not membership(spec.constraint, u, spec.eta_bounds):
        raise AdmissibilityError(
            f"Fraction {u.tolist()} is outside the admissible set (jump floor {jump_floor(u, spec.eta_bounds):.3e}, delta {spec.delta})."
        )
    return u


def admissible_interval(spec: MarketSpec) -> tuple[float, float]:
    """For one asset, A ∩ U_delta as a closed interval."""
    if spec.n != 1:
        raise ValueError(f"admissible_interval needs a single asset. Got n={spec.n}")
    lo, hi = float(spec.constraint.lower[0]), float(spec.constraint.upper[0])
    if spec.constraint.sum_max is not None:
        hi = min(hi, spec.constraint.sum_max)
    room = 1.0 - spec.delta
    for eta_lo, eta_hi in spec.eta_bounds[0]:
        if eta_lo < 0:
            hi = min(hi, room / -eta_lo)
        if eta_hi > 0:
            lo = max(lo, -room / eta_hi)
    return lo, hi


def linear_constraints(spec: MarketSpec) -> tuple[np.ndarray, np.ndarray]:
    """(A, c) with A u >= c describing the sum cap and U_delta beyond the box.

    The jump condition of source j is the intersection over the 2^n corner choices of eta bounds.
    """
    rows, rhs = [], []
    if spec.constraint.sum_max is not None:
        rows.append(-np.ones(spec.n))
        rhs.append(-spec.constraint.sum_max)
    for j in range(spec.m2):
        for corner in itertools.product((0, 1), repeat=spec.n):
            rows.append(spec.eta_bounds[np.arange(spec.n), j, list(corner)])
            rhs.append(spec.delta - 1.0)
    if not rows:
        return np.zeros((0, spec.n)), np.zeros(0)
    return np.vstack(rows), np.asarray(rhs)


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Check:
    name: str
    passed: bool
    detail: str
    severity: str = "error"


@dataclass
class ValidationReport:
    checks: list[Check] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks if c.severity == "error")

    @property
    def failures(self) -> list[Check]:
        return [c for c in self.checks if not c.passed and c.severity == "error"]

    def add(self, name: str, passed: bool, detail: str, severity: str = "error") -> None:
        self.checks.append(Check(name, bool(passed), detail, severity))

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([c.__dict__ for c in self.checks], columns=["name", "passed", "detail", "severity"])

    def lines(self) -> list[str]:
        out = []
        for c in self.checks:
            status = "PASS" if c.passed else ("FAIL" if c.severity == "error" else "WARN")
            out.append(f"{status} {c.name}: {c.detail}")
        return out


def validation_grid(spec: MarketSpec, points: int = VALIDATION_TIME_POINTS) -> Iterator[tuple[float, tuple[int, ...]]]:
    times = np.linspace(0.0, spec.horizon, points)
    for x in spec.regimes():
        for t in times:
            yield float(t), x


def validate(spec: MarketSpec, chains: Sequence[RegimeChain] = ()) -> ValidationReport:
    """Run the market and chain assumption checks; failures are reported, never raised."""
    report = ValidationReport()

    report.add("dimensions", spec.m1 >= spec.n, f"m1={spec.m1}, n={spec.n}")

    masses = [m.mass for m in spec.nu]
    report.add("finite_measure", all(np.isfinite(masses)), f"masses={masses}")

    l2, log_l2, floor = [], [], []
    for j, measure in enumerate(spec.nu):
        for l in range(spec.n):
            eta = spec.eta[j][l]
            lo, _ = spec.eta_bounds[l, j]
            floor.append(lo)
            l2.append(measure.integrate(lambda z: eta(z) ** 2))
            if lo > -1.0:
                log_l2.append(measure.integrate(lambda z: np.log1p(eta(z)) ** 2))
            else:
                log_l2.append(np.inf)
    report.add("A1_eta_square_integrable", all(np.isfinite(l2)), f"int eta^2 dnu = {l2}")
    min_floor = min(floor) if floor else np.inf
    report.add("A2_eta_above_minus_one", min_floor > -1.0, f"min eta over supports = {min_floor}")
    report.add("A2_log_square_integrable", all(np.isfinite(log_l2)), f"int log(1+eta)^2 dnu = {log_l2}")

    min_eig, worst, asym, min_rate = np.inf, None, 0.0, np.inf
    for t, x in validation_grid(spec):
        a = spec.sigma(t, x) @ spec.sigma(t, x).T
        asym = max(asym, float(np.abs(a - a.T).max()))
        eig = float(np.linalg.eigvalsh(0.5 * (a + a.T))[0])
        if eig < min_eig:
            min_eig, worst = eig, (t, x)
        min_rate = min(min_rate, spec.r(t, x))
    report.add(
        "A3_uniform_ellipticity",
        min_eig >= ELLIPTICITY_MIN and asym <= 1e-12,
        f"min eigenvalue {min_eig:.3e} at t={worst[0]}, x={worst[1]}",
    )
    report.add("rate_nonnegative", min_rate >= 0.0, f"min r = {min_rate}")
    report.add("rate_positive", min_rate > 0.0, f"min r = {min_rate}", severity="warning")

    c = spec.constraint
    report.add("constraint", bool(np.all(c.lower <= 0) and np.all(c.upper >= 0)) and 0 < c.delta <= 1,
               f"delta={c.delta}, origin admissible")

    for idx, chain in enumerate(chains):
        if chain.frozen:
            report.add(f"A4_irreducible[{idx}:{chain.name}]", True, "single frozen regime")
            continue
        ok, p_hat = embedded_matrix_irreducible(chain)
        report.add(f"A4_irreducible[{idx}:{chain.name}]", ok, f"embedded matrix {np.round(p_hat, 6).tolist()}")
    for failure in report.failures:
        log.warning(f"Validation failed: {failure.name}: {failure.detail}")
    return report
