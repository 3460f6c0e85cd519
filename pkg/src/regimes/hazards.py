"""Transition-rate families for age-dependent semi-Markov regimes.

A rate model answers three questions for a state ``i`` and ages ``y`` (scalars or arrays):

- ``total(i, y)``: the holding hazard sum_{j != i} lambda_ij(y)
- ``cumulative(i, y)``: Lambda_i(y), the integral of ``total`` over [0, y]
- ``jump_probs(i, y)``: p_ij(y) = lambda_ij(y) / sum_j' lambda_ij'(y), shape ``y.shape + (k,)``

Scaled families write lambda_ij(y) = c_i * g(y) * p_ij with a fixed row-stochastic ``p``;
their cumulative hazards are exact. Tabulated rates interpolate each lambda_ij with a
monotone cubic and integrate with a cumulative Simpson table.
"""
from __future__ import annotations

from abc import ABC, abstractmethod
from typing import Sequence

import numpy as np
from scipy.integrate import cumulative_simpson
from scipy.interpolate import PchipInterpolator

from config import TABLE_SIMPSON_STEP


def _as_array(y) -> np.ndarray:
    return np.asarray(y, dtype=np.float64)


def check_jump_matrix(p: np.ndarray, atol: float = 1e-12) -> np.ndarray:
    """Validate a k x k embedded jump matrix: zero diagonal, nonnegative, rows summing to 1."""
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] != p.shape[1]:
        raise ValueError(f"Jump matrix must be square. Got shape: {p.shape}")
    if p.shape[0] == 1:
        return p
    if np.any(p < 0):
        raise ValueError("Jump matrix entries must be nonnegative.")
    if np.any(np.abs(np.diag(p)) > atol):
        raise ValueError("Jump matrix must have a zero diagonal (p_ii = 0).")
    row_sums = p.sum(axis=1)
    if np.any(np.abs(row_sums - 1.0) > 1e-9):
        raise ValueError(f"Jump matrix rows must sum to 1. Got row sums: {row_sums}")
    return p


class RateModel(ABC):
    """Rate table lambda_ij(y) of one semi-Markov component with ``k`` states."""

    family: str = "abstract"

    def __init__(self, k: int) -> None:
        self.k = int(k)

    @abstractmethod
    def total(self, i: int, y) -> np.ndarray:
        """Holding hazard sum_{j != i} lambda_ij(y)."""

    @abstractmethod
    def cumulative(self, i: int, y) -> np.ndarray:
        """Cumulative hazard Lambda_i(y)."""

    @abstractmethod
    def jump_probs(self, i: int, y) -> np.ndarray:
        """Conditional jump probabilities p_ij(y), shape ``y.shape + (k,)``."""

    def rate(self, i: int, j: int, y) -> np.ndarray:
        """Single rate lambda_ij(y); zero on the diagonal."""
        if i == j:
            return np.zeros_like(_as_array(y))
        return self.total(i, y) * self.jump_probs(i, y)[..., j]

    @property
    def is_constant_in_age(self) -> bool:
        """True when p_ij(y) does not depend on the age."""
        return False

    def describe(self) -> dict:
        return {"family": self.family, "k": self.k}


# ---------------------------------------------------------------------------
# Scaled families: lambda_ij(y) = c_i * g(y) * p_ij
# ---------------------------------------------------------------------------

class ScaledRates(RateModel):
    """Rates sharing one hazard shape ``g`` across states, scaled per state."""

    family = "scaled"

    def __init__(self, p: np.ndarray, scales: Sequence[float] | None = None) -> None:
        p = check_jump_matrix(p)
        super().__init__(p.shape[0])
        self.p = p
        if scales is None:
            scales = np.ones(self.k)
        self.scales = np.asarray(scales, dtype=np.float64).reshape(-1)
        if self.scales.shape != (self.k,):
            raise ValueError(f"Expected {self.k} state scales. Got: {self.scales.shape}")
        if np.any(self.scales <= 0):
            raise ValueError("State scales must be positive.")

    @abstractmethod
    def shape(self, y: np.ndarray) -> np.ndarray:
        """Hazard shape g(y)."""

    @abstractmethod
    def shape_integral(self, y: np.ndarray) -> np.ndarray:
        """Integral of g over [0, y]."""

    def total(self, i: int, y) -> np.ndarray:
        return self.scales[i] * self.shape(_as_array(y))

    def cumulative(self, i: int, y) -> np.ndarray:
        return self.scales[i] * self.shape_integral(_as_array(y))

    def jump_probs(self, i: int, y) -> np.ndarray:
        y = _as_array(y)
        return np.broadcast_to(self.p[i], y.shape + (self.k,)).copy()

    @property
    def is_constant_in_age(self) -> bool:
        return True

    def describe(self) -> dict:
        out = super().describe()
        out.update({"p": self.p.tolist(), "scales": self.scales.tolist()})
        return out


class ConstantRates(ScaledRates):
    """Exponential holding times: g(y) = 1, so Lambda_i(y) = c_i y."""

    family = "constant"

    def shape(self, y: np.ndarray) -> np.ndarray:
        return np.ones_like(y)

    def shape_integral(self, y: np.ndarray) -> np.ndarray:
        return y.copy()


class ErlangRates(ScaledRates):
    """g(y) = y / (1 + y): holding density y e^{-y}, c.d.f. 1 - (1 + y) e^{-y}."""

    family = "erlang-2"

    def shape(self, y: np.ndarray) -> np.ndarray:
        return y / (1.0 + y)

    def shape_integral(self, y: np.ndarray) -> np.ndarray:
        return y - np.log1p(y)


class LogExcessRates(ScaledRates):
    """g(y) = y - ln(1 + y), the rate as printed next to the density above."""

    family = "log-excess"

    def shape(self, y: np.ndarray) -> np.ndarray:
        return y - np.log1p(y)

    def shape_integral(self, y: np.ndarray) -> np.ndarray:
        # int_0^y (v - ln(1+v)) dv = y^2/2 + y - (1+y) ln(1+y)
        return 0.5 * y**2 + y - (1.0 + y) * np.log1p(y)


class PolynomialRates(ScaledRates):
    """g(y) = sum_n a_n y^n with nonnegative coefficients and a_0 + ... > 0."""

    family = "polynomial"

    def __init__(self, p: np.ndarray, coeffs: Sequence[float], scales: Sequence[float] | None = None) -> None:
        super().__init__(p, scales)
        coeffs = np.asarray(coeffs, dtype=np.float64).reshape(-1)
        if coeffs.size == 0 or np.any(coeffs < 0) or not np.any(coeffs > 0):
            raise ValueError(f"Polynomial hazard coefficients must be nonnegative and not all zero. Got: {coeffs}")
        self.poly = np.polynomial.Polynomial(coeffs)
        self.poly_integral = self.poly.integ(lbnd=0.0)

    def shape(self, y: np.ndarray) -> np.ndarray:
        return self.poly(y)

    def shape_integral(self, y: np.ndarray) -> np.ndarray:
        return self.poly_integral(y)

    def describe(self) -> dict:
        out = super().describe()
        out["coeffs"] = self.poly.coef.tolist()
        return out


# ---------------------------------------------------------------------------
# Tabulated rates
# ---------------------------------------------------------------------------

class TabulatedRates(RateModel):
    """Rates sampled on a uniform age grid.

    ``table[i, j, n]`` holds lambda_ij at ``grid[n]``. Between nodes each rate follows a
    monotone cubic (PCHIP); past the last node it is held constant so that Lambda_i keeps
    growing linearly.
    """

    family = "tabulated"

    def __init__(self, grid: Sequence[float], table: np.ndarray, simpson_step: float = TABLE_SIMPSON_STEP) -> None:
        grid = np.asarray(grid, dtype=np.float64)
        table = np.asarray(table, dtype=np.float64)
        if grid.ndim != 1 or grid.size < 3:
            raise ValueError("Tabulated rates need a 1-D age grid with at least 3 nodes.")
        if grid[0] != 0.0:
            raise ValueError(f"Tabulated age grid must start at 0. Got: {grid[0]}")
        steps = np.diff(grid)
        if np.any(steps <= 0) or np.ptp(steps) > 1e-9 * max(1.0, grid[-1]):
            raise ValueError("Tabulated age grid must be uniform and increasing.")
        if table.ndim != 3 or table.shape[0] != table.shape[1] or table.shape[2] != grid.size:
            raise ValueError(f"Rate table must have shape (k, k, {grid.size}). Got: {table.shape}")
        if np.any(table < 0):
            raise ValueError("Tabulated rates must be nonnegative.")
        super().__init__(table.shape[0])
        self.grid = grid
        self.table = table.copy()
        for i in range(self.k):
            self.table[i, i, :] = 0.0
        self.y_end = float(grid[-1])

        # One PCHIP per off-diagonal pair; shape preserving, so no negative overshoot
        self._interp = PchipInterpolator(grid, self.table, axis=2, extrapolate=False)
        self._last = self.table[:, :, -1]

        # Fallback jump probabilities at ages where every rate vanishes
        self._fallback = np.zeros((self.k, self.k))
        for i in range(self.k):
            totals = self.table[i].sum(axis=0)
            nonzero = np.flatnonzero(totals > 0)
            if nonzero.size:
                n = nonzero[0]
                self._fallback[i] = self.table[i, :, n] / totals[n]

        # Cumulative Simpson table of the holding hazard on a fine sub-grid
        n_fine = max(2, int(np.ceil(self.y_end / simpson_step)))
        if n_fine % 2:
            n_fine += 1
        self._fine = np.linspace(0.0, self.y_end, n_fine + 1)
        self._fine_step = self._fine[1] - self._fine[0]
        totals = np.stack([self.total(i, self._fine) for i in range(self.k)])
        self._cum = cumulative_simpson(totals, x=self._fine, axis=1, initial=0.0)

    def _rates(self, y: np.ndarray) -> np.ndarray:
        """All rates at ages ``y``; shape (k, k) + y.shape."""
        inside = np.clip(y, 0.0, self.y_end)
        vals = self._interp(inside)  # (k, k) + y.shape
        beyond = y > self.y_end
        if np.any(beyond):
            vals = np.where(beyond, self._last.reshape(self.k, self.k, *([1] * y.ndim)), vals)
        return np.clip(np.nan_to_num(vals), 0.0, None)

    def total(self, i: int, y) -> np.ndarray:
        y = _as_array(y)
        return self._rates(y)[i].sum(axis=0)

    def cumulative(self, i: int, y) -> np.ndarray:
        y = _as_array(y)
        inside = np.clip(y, 0.0, self.y_end)
        idx = np.minimum((inside / self._fine_step).astype(np.int64), self._fine.size - 1)
        left = self._fine[idx]
        # Single Simpson panel on the remainder [left, y]
        mid = 0.5 * (left + inside)
        width = inside - left
        panel = width / 6.0 * (self.total(i, left) + 4.0 * self.total(i, mid) + self.total(i, inside))
        out = self._cum[i][idx] + panel
        extra = np.clip(y - self.y_end, 0.0, None)
        return out + extra * self._last[i].sum()

    def jump_probs(self, i: int, y) -> np.ndarray:
        y = _as_array(y)
        row = np.moveaxis(self._rates(y)[i], 0, -1)  # y.shape + (k,)
        totals = row.sum(axis=-1, keepdims=True)
        with np.errstate(invalid="ignore", divide="ignore"):
            probs = np.where(totals > 0, row / np.where(totals > 0, totals, 1.0), self._fallback[i])
        return probs

    def describe(self) -> dict:
        out = super().describe()
        out.update({"grid": self.grid.tolist(), "table": self.table.tolist()})
        return out


class FrozenRates(RateModel):
    """Single-state component that never leaves its regime."""

    family = "frozen"

    def __init__(self) -> None:
        super().__init__(1)

    def total(self, i: int, y) -> np.ndarray:
        return np.zeros_like(_as_array(y))

    def cumulative(self, i: int, y) -> np.ndarray:
        return np.zeros_like(_as_array(y))

    def jump_probs(self, i: int, y) -> np.ndarray:
        y = _as_array(y)
        return np.zeros(y.shape + (1,))

    @property
    def is_constant_in_age(self) -> bool:
        return True


FAMILIES = {
    "constant": ConstantRates,
    "erlang-2": ErlangRates,
    "log-excess": LogExcessRates,
    "polynomial": PolynomialRates,
    "tabulated": TabulatedRates,
    "frozen": FrozenRates,
}
