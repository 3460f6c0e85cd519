"""Discrete solution psi^m(x, y) of the Volterra equation and its file formats.

``m`` counts time-to-go: slice ``m`` approximates psi(T - m dt, x, y), so slice 0 is the
terminal condition and slice M the time-zero value.

Binary checkpoint layout (little-endian):

    b"PSIG" | version u32 | ndim u32 | dims u32 * ndim | dt f64 | horizon f64 | theta f64
    | mode u32 (0 reduced, 1 general) | n_components u32 | regime_counts u32 * n_components
    | n_y u32 | y_grid f64 * n_y | values f64, row-major
"""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import pandas as pd
from scipy.interpolate import RegularGridInterpolator

log = logging.getLogger(__name__)

MAGIC = b"PSIG"
VERSION = 1
_MODES = ("reduced", "general")


@dataclass
class PsiGrid:
    """psi on a (time-to-go, regime, age...) tensor grid.

    ``values`` has shape (M + 1, n_regimes) + (n_y,) * n_age_dims. In reduced mode there is a
    single age axis and ``regimes`` lists the driver states; in general mode every component
    has an age axis and ``regimes`` enumerates the product of component states.
    """
    dt: float
    horizon: float
    theta: float
    mode: str
    values: np.ndarray
    y_grid: np.ndarray
    regime_counts: tuple[int, ...]
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.mode not in _MODES:
            raise ValueError(f"Unknown PsiGrid mode '{self.mode}'. Expected one of {_MODES}.")
        self.y_grid = np.asarray(self.y_grid, dtype=np.float64)
        self.regime_counts = tuple(int(k) for k in self.regime_counts)
        expected = (len(self.regimes),) + (self.y_grid.size,) * self.n_age_dims
        if self.values.shape[1:] != expected:
            raise ValueError(f"PsiGrid values have shape {self.values.shape[1:]} per slice, expected {expected}.")

    @property
    def M(self) -> int:
        return self.values.shape[0] - 1

    @property
    def n_age_dims(self) -> int:
        return 1 if self.mode == "reduced" else len(self.regime_counts)

    @property
    def regimes(self) -> list[tuple[int, ...]]:
        return list(itertools.product(*(range(k) for k in self.regime_counts)))

    @property
    def times(self) -> np.ndarray:
        return self.horizon - self.dt * np.arange(self.M + 1)

    def regime_index(self, x) -> int:
        x = (int(x),) if np.ndim(x) == 0 else tuple(int(v) for v in x)
        try:
            return self.regimes.index(x)
        except ValueError:
            raise ValueError(f"Regime {x} is not on this grid; regimes are {self.regimes}.") from None

    def _ages(self, y) -> np.ndarray:
        y = np.atleast_1d(np.asarray(y, dtype=np.float64))
        if y.size == 1 and self.n_age_dims > 1:
            y = np.full(self.n_age_dims, float(y[0]))
        if y.size != self.n_age_dims:
            raise ValueError(f"Expected {self.n_age_dims} age values. Got: {y}")
        if np.any(y < self.y_grid[0] - 1e-12) or np.any(y > self.y_grid[-1] + 1e-12):
            raise ValueError(f"Ages {y} fall outside the grid [{self.y_grid[0]}, {self.y_grid[-1]}].")
        return np.clip(y, self.y_grid[0], self.y_grid[-1])

    def at(self, m: int, x, y) -> float:
        """psi^m(x, y), multilinear in the ages."""
        if not 0 <= m <= self.M:
            raise ValueError(f"Slice {m} outside 0..{self.M}.")
        xi = self.regime_index(x)
        y = self._ages(y)
        block = self.values[m, xi]
        if self.n_age_dims == 1:
            return float(np.interp(y[0], self.y_grid, block))
        interp = RegularGridInterpolator((self.y_grid,) * self.n_age_dims, block, method="linear")
        return float(interp(y[None, :])[0])

    def at_time(self, t: float, x, y) -> float:
        """psi(t, x, y), linear between neighbouring time slices."""
        pos = (self.horizon - t) / self.dt if self.dt > 0 else 0.0
        if pos < -1e-9 or pos > self.M + 1e-9:
            raise ValueError(f"Time {t} outside the solved range [{self.times[-1]}, {self.horizon}].")
        pos = float(np.clip(pos, 0.0, self.M))
        lo = int(np.floor(pos + 1e-9))
        lo = min(lo, self.M)
        frac = pos - lo
        if frac <= 1e-9 or lo == self.M:
            return self.at(lo, x, y)
        return (1.0 - frac) * self.at(lo, x, y) + frac * self.at(lo + 1, x, y)

    def initial(self, x, y) -> float:
        """Time-zero value psi^M(x, y)."""
        return self.at(self.M, x, y)

    # -- tables ---------------------------------------------------------------------------------

    def to_frame(self) -> pd.DataFrame:
        """Long table with columns m, t, state, y, psi.

        Multi-component states and ages are joined with '-' and ';' respectively.
        """
        times = self.times
        regimes = self.regimes
        ages = list(itertools.product(range(self.y_grid.size), repeat=self.n_age_dims))
        m_idx, x_idx, a_idx = np.meshgrid(np.arange(self.M + 1), np.arange(len(regimes)), np.arange(len(ages)),
                                          indexing="ij")
        flat = self.values.reshape(self.M + 1, len(regimes), -1)
        state_labels = np.array(["-".join(map(str, x)) if len(x) > 1 else str(x[0]) for x in regimes])
        age_labels = np.array([";".join(f"{self.y_grid[a]:.12g}" for a in idx) for idx in ages])
        return pd.DataFrame({
            "m": m_idx.reshape(-1),
            "t": times[m_idx.reshape(-1)],
            "state": state_labels[x_idx.reshape(-1)],
            "y": age_labels[a_idx.reshape(-1)],
            "psi": flat.reshape(-1),
        })

    def to_csv(self, path: str, header: dict | None = None) -> None:
        """CSV with '#'-prefixed key=value lines (config hash, seed, version) before the column header."""
        lines = [f"# {k}={v}" for k, v in {**self.meta, **(header or {})}.items()]
        with open(path, "w", newline="") as fh:
            for line in lines:
                fh.write(line + "\n")
            self.to_frame().to_csv(fh, index=False, float_format="%.17g")
        log.info("Wrote psi grid (%d slices) to %s", self.M + 1, path)

    # -- binary checkpoint ----------------------------------------------------------------------

    def write_binary(self, path: str) -> None:
        values = np.ascontiguousarray(self.values, dtype="<f8")
        parts = [
            MAGIC,
            np.array([VERSION, values.ndim, *values.shape], dtype="<u4").tobytes(),
            np.array([self.dt, self.horizon, self.theta], dtype="<f8").tobytes(),
            np.array([_MODES.index(self.mode), len(self.regime_counts), *self.regime_counts], dtype="<u4").tobytes(),
            np.array([self.y_grid.size], dtype="<u4").tobytes(),
            self.y_grid.astype("<f8").tobytes(),
            values.tobytes(order="C"),
        ]
        with open(path, "wb") as fh:
            for part in parts:
                fh.write(part)

    @classmethod
    def read_binary(cls, path: str) -> "PsiGrid":
        with open(path, "rb") as fh:
            raw = fh.read()
        if raw[:4] != MAGIC:
            raise ValueError(f"{path} is not a psi checkpoint (magic {raw[:4]!r}).")
        pos = 4

        def take(dtype: str, count: int) -> np.ndarray:
            nonlocal pos
            size = np.dtype(dtype).itemsize * count
            if pos + size > len(raw):
                raise ValueError(f"Truncated psi checkpoint {path}.")
            out = np.frombuffer(raw, dtype=dtype, count=count, offset=pos)
            pos += size
            return out

        version, ndim = (int(v) for v in take("<u4", 2))
        if version != VERSION:
            raise ValueError(f"Unsupported psi checkpoint version {version}; this build reads {VERSION}.")
        shape = tuple(int(v) for v in take("<u4", ndim))
        dt, horizon, theta = (float(v) for v in take("<f8", 3))
        mode, n_comp = (int(v) for v in take("<u4", 2))
        counts = tuple(int(v) for v in take("<u4", n_comp))
        n_y = int(take("<u4", 1)[0])
        y_grid = take("<f8", n_y).copy()
        values = take("<f8", int(np.prod(shape))).reshape(shape).astype(np.float64)
        return cls(dt, horizon, theta, _MODES[mode], values, y_grid, counts)


def optimal_wealth(psi: PsiGrid, v: float, x, y) -> float:
    """phi(0, x, y, v) = ln v - (2 / theta) ln psi(0, x, y)."""
    if not v > 0:
        raise ValueError(f"Initial wealth must be positive. Got: {v}")
    return float(np.log(v) - (2.0 / psi.theta) * np.log(psi.initial(x, y)))


def phi_table(psi: PsiGrid, v_values: Sequence[float]) -> pd.DataFrame:
    """phi over every (v, state, y) node of the time-zero slice."""
    rows = []
    ages = list(itertools.product(range(psi.y_grid.size), repeat=psi.n_age_dims))
    for v in v_values:
        for x in psi.regimes:
            for idx in ages:
                y = psi.y_grid[list(idx)]
                rows.append({
                    "v": float(v),
                    "state": "-".join(map(str, x)),
                    "y": ";".join(f"{a:.12g}" for a in y),
                    "phi": optimal_wealth(psi, v, x if len(x) > 1 else x[0], y),
                })
    return pd.DataFrame(rows)
