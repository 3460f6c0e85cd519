"""Time profiles of market coefficients.

Each scalar coefficient is a piecewise polynomial in t; a regime-driven coefficient picks
its profile from the state of one designated regime component.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class TimeProfile:
    """Piecewise polynomial c(t).

    ``breaks[n]`` is the left end of piece ``n``; the first piece also covers t < breaks[0]
    and the last one extends to +inf. ``coeffs[n]`` are increasing-power coefficients.
    """
    breaks: tuple[float, ...]
    coeffs: tuple[tuple[float, ...], ...]

    def __post_init__(self) -> None:
        if len(self.breaks) != len(self.coeffs) or not self.breaks:
            raise ValueError(f"Need one coefficient list per break. Got {len(self.breaks)} breaks, {len(self.coeffs)} pieces.")
        if any(b1 <= b0 for b0, b1 in zip(self.breaks, self.breaks[1:])):
            raise ValueError(f"Profile breaks must increase. Got: {self.breaks}")
        if any(len(c) == 0 for c in self.coeffs):
            raise ValueError("Every profile piece needs at least one coefficient.")

    @classmethod
    def constant(cls, value: float) -> "TimeProfile":
        return cls((0.0,), ((float(value),),))

    @classmethod
    def from_spec(cls, spec) -> "TimeProfile":
        """Scalar -> constant profile; ``{"breaks": [...], "coeffs": [[...], ...]}`` -> piecewise."""
        if isinstance(spec, TimeProfile):
            return spec
        if isinstance(spec, dict):
            breaks = tuple(float(b) for b in spec.get("breaks", [0.0]))
            coeffs = tuple(tuple(float(c) for c in piece) for piece in spec["coeffs"])
            return cls(breaks, coeffs)
        return cls.constant(float(spec))

    @property
    def is_constant(self) -> bool:
        return len(self.coeffs) == 1 and all(c == 0.0 for c in self.coeffs[0][1:])

    def __call__(self, t: float) -> float:
        piece = max(0, int(np.searchsorted(self.breaks, t, side="right")) - 1)
        return float(np.polynomial.polynomial.polyval(t, self.coeffs[piece]))

    def describe(self):
        if self.is_constant:
            return self.coeffs[0][0]
        return {"breaks": list(self.breaks), "coeffs": [list(c) for c in self.coeffs]}


class DrivenCoefficient:
    """Regime-dependent coefficient c(t, x) = profile[x[driver]](t).

    Args:
        driver: Index of the regime component that selects the profile.
        table: Per-state entries; each entry is a scalar, a profile spec, or a nested list
            of them with a common shape (e.g. a row of sigma).
    """

    def __init__(self, driver: int, table: Sequence) -> None:
        if driver < 0:
            raise ValueError(f"Driver component must be nonnegative. Got: {driver}")
        self.driver = int(driver)
        self.shape: tuple[int, ...] | None = None
        self.profiles: list[np.ndarray] = []
        for entry in table:
            arr = np.asarray(entry, dtype=object)
            if self.shape is None:
                self.shape = arr.shape
            elif arr.shape != self.shape:
                raise ValueError(f"Inconsistent coefficient shapes across states: {arr.shape} != {self.shape}")
            flat = np.array([TimeProfile.from_spec(e) for e in arr.reshape(-1)], dtype=object)
            self.profiles.append(flat.reshape(arr.shape))
        if not self.profiles:
            raise ValueError("A driven coefficient needs at least one state entry.")

    @property
    def n_states(self) -> int:
        return len(self.profiles)

    @property
    def is_time_homogeneous(self) -> bool:
        return all(p.is_constant for arr in self.profiles for p in arr.reshape(-1))

    def __call__(self, t: float, x: Sequence[int]) -> np.ndarray:
        state = int(x[self.driver])
        if not 0 <= state < self.n_states:
            raise ValueError(f"Regime {state} of component {self.driver} has no coefficient entry.")
        arr = self.profiles[state]
        return np.array([p(t) for p in arr.reshape(-1)], dtype=np.float64).reshape(arr.shape)

    def describe(self) -> dict:
        return {
            "driver": self.driver,
            "values": [np.vectorize(lambda p: p.describe(), otypes=[object])(arr).tolist() for arr in self.profiles],
        }
