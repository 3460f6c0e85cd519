"""Jump sizes eta_lj and finite jump measures nu_j."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import roots_legendre

from config import CDF_TABLE_SIZE, GL_NODES


@dataclass(frozen=True)
class JumpSize:
    """Affine jump map eta(z) = scale * z + shift.

    ``identity`` is scale 1, shift 0; ``constant`` is scale 0. A ``func`` overrides the
    affine form for library use; its bounds are then found on a dense grid.
    """
    scale: float = 1.0
    shift: float = 0.0
    func: Callable[[np.ndarray], np.ndarray] | None = field(default=None, compare=False)

    @classmethod
    def identity(cls) -> "JumpSize":
        return cls(1.0, 0.0)

    @classmethod
    def constant(cls, value: float) -> "JumpSize":
        return cls(0.0, float(value))

    @classmethod
    def from_spec(cls, spec) -> "JumpSize":
        if isinstance(spec, JumpSize):
            return spec
        kind = spec.get("kind", "linear")
        if kind == "identity":
            return cls.identity()
        if kind == "constant":
            return cls.constant(spec["value"])
        if kind == "linear":
            return cls(float(spec.get("scale", 1.0)), float(spec.get("shift", 0.0)))
        raise ValueError(f"Unknown jump-size kind '{kind}'. Expected identity, constant or linear.")

    @property
    def is_identity(self) -> bool:
        return self.func is None and self.scale == 1.0 and self.shift == 0.0

    def __call__(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        if self.func is not None:
            return np.asarray(self.func(z), dtype=np.float64)
        return self.scale * z + self.shift

    def bounds(self, points: np.ndarray, interval: tuple[float, float] | None) -> tuple[float, float]:
        """Min and max of eta over an interval plus isolated points."""
        probes = [np.asarray(points, dtype=np.float64).reshape(-1)]
        if interval is not None:
            lo, hi = interval
            probes.append(np.array([lo, hi]) if self.func is None else np.linspace(lo, hi, 2049))
        values = self(np.concatenate(probes))
        return float(values.min()), float(values.max())

    def describe(self) -> dict:
        if self.is_identity:
            return {"kind": "identity"}
        return {"kind": "linear", "scale": self.scale, "shift": self.shift}


class JumpMeasure:
    """Finite measure: a density on a compact support plus optional atoms.

    Args:
        support: (a, b) interval carrying the density part, or None.
        density: callable density on the support; ``None`` with a support means uniform
            with total mass ``density_mass``.
        density_mass: mass of the uniform density part.
        atoms: sequence of (location, weight) pairs.
    """

    def __init__(
        self,
        support: tuple[float, float] | None = None,
        density: Callable[[np.ndarray], np.ndarray] | None = None,
        density_mass: float = 1.0,
        atoms: Sequence[tuple[float, float]] = (),
        nodes: int = GL_NODES,
    ) -> None:
        if support is not None:
            a, b = float(support[0]), float(support[1])
            if not np.isfinite(a) or not np.isfinite(b) or b <= a:
                raise ValueError(f"Jump-measure support must be a finite interval with a < b. Got: {support}")
            support = (a, b)
        self.support = support
        self._density = density
        self.uniform = support is not None and density is None
        self.atoms = np.array([[float(z), float(w)] for z, w in atoms], dtype=np.float64).reshape(-1, 2)
        if np.any(self.atoms[:, 1] < 0):
            raise ValueError("Atom weights must be nonnegative.")
        if self.uniform and density_mass < 0:
            raise ValueError(f"Density mass must be nonnegative. Got: {density_mass}")
        self._uniform_mass = float(density_mass) if self.uniform else 0.0

        self.nodes = int(nodes)
        self._z, self._w = self._build_quadrature(self.nodes)
        self.density_mass = float(self._w.sum())
        self.mass = self.density_mass + float(self.atoms[:, 1].sum())
        self._cdf_z: np.ndarray | None = None
        self._cdf_p: np.ndarray | None = None

    @classmethod
    def uniform_on(cls, a: float, b: float, mass: float = 1.0) -> "JumpMeasure":
        return cls(support=(a, b), density_mass=mass)

    @classmethod
    def from_spec(cls, spec: dict) -> "JumpMeasure":
        kind = spec.get("kind", "uniform")
        atoms = [tuple(a) for a in spec.get("atoms", [])]
        if kind == "uniform":
            return cls(support=tuple(spec["support"]), density_mass=float(spec.get("mass", 1.0)), atoms=atoms)
        if kind == "atoms":
            return cls(atoms=atoms)
        if kind == "none":
            return cls()
        raise ValueError(f"Unknown jump-measure kind '{kind}'. Expected uniform, atoms or none.")

    def density(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        if self.support is None:
            return np.zeros_like(z)
        a, b = self.support
        inside = (z >= a) & (z <= b)
        if self.uniform:
            return np.where(inside, self._uniform_mass / (b - a), 0.0)
        return np.where(inside, np.asarray(self._density(z), dtype=np.float64), 0.0)

    def _build_quadrature(self, nodes: int) -> tuple[np.ndarray, np.ndarray]:
        if self.support is None:
            return np.zeros(0), np.zeros(0)
        a, b = self.support
        x, w = roots_legendre(nodes)
        z = 0.5 * (b - a) * x + 0.5 * (a + b)
        return z, 0.5 * (b - a) * w * self.density(z)

    def quadrature(self, nodes: int | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Nodes and weights integrating against nu: density part by Gauss-Legendre, atoms exactly."""
        if nodes is None or nodes == self.nodes:
            z, w = self._z, self._w
        else:
            z, w = self._build_quadrature(nodes)
        return np.concatenate([z, self.atoms[:, 0]]), np.concatenate([w, self.atoms[:, 1]])

    def integrate(self, func: Callable[[np.ndarray], np.ndarray], nodes: int | None = None) -> float:
        z, w = self.quadrature(nodes)
        return float(np.dot(w, func(z))) if z.size else 0.0

    @property
    def points(self) -> np.ndarray:
        return self.atoms[:, 0]

    def _inverse_table(self) -> tuple[np.ndarray, np.ndarray]:
        if self._cdf_z is None:
            a, b = self.support
            z = np.linspace(a, b, CDF_TABLE_SIZE)
            dens = self.density(z)
            cdf = np.concatenate([[0.0], np.cumsum(0.5 * (dens[1:] + dens[:-1]) * np.diff(z))])
            self._cdf_p = cdf / cdf[-1]
            self._cdf_z = z
        return self._cdf_z, self._cdf_p

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        """Marks from the normalised measure nu / nu(R)."""
        if size == 0:
            return np.zeros(0)
        if self.mass <= 0:
            raise ValueError("Cannot sample marks from a zero measure.")
        out = np.empty(size)
        from_atoms = rng.random(size) < (self.mass - self.density_mass) / self.mass
        n_atoms = int(from_atoms.sum())
        if n_atoms:
            probs = self.atoms[:, 1] / self.atoms[:, 1].sum()
            out[from_atoms] = self.atoms[rng.choice(len(probs), size=n_atoms, p=probs), 0]
        n_dens = size - n_atoms
        if n_dens:
            z, p = self._inverse_table()
            out[~from_atoms] = np.interp(rng.random(n_dens), p, z)
        return out

    def describe(self) -> dict:
        out: dict = {"atoms": self.atoms.tolist()}
        if self.support is None:
            out["kind"] = "atoms" if self.atoms.size else "none"
        else:
            out.update({"kind": "uniform", "support": list(self.support), "mass": self.density_mass})
        return out
