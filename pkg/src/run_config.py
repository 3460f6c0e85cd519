"""Run configuration: one JSON file with market, chains, numerics, sweep and output blocks.

Parsing only checks the schema; assumption checks on the built objects are left to
:func:`src.market.market.validate`.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from config import DEFAULT_DELTA
from src.errors import ConfigError
from src.market.market import MarketSpec
from src.regimes.hazards import FAMILIES
from src.regimes.semi_markov import (
    RegimeChain,
    constant_chain,
    erlang_chain,
    frozen_chain,
    log_excess_chain,
    polynomial_chain,
    tabulated_chain,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ChainConfig:
    family: str
    states: int
    p: tuple[tuple[float, ...], ...] | None = None
    params: dict = field(default_factory=dict)
    initial_state: int = 0
    initial_age: float = 0.0
    name: str = ""

    def build(self) -> RegimeChain:
        name = self.name or self.family
        if self.family == "frozen":
            return frozen_chain(name)
        if self.family == "tabulated":
            return tabulated_chain(self.params["grid"], self.params["table"], name)
        if self.p is None:
            raise ConfigError(f"Chain '{name}' of family {self.family} needs a jump matrix 'p'.")
        p = np.asarray(self.p, dtype=np.float64)
        if p.shape != (self.states, self.states):
            raise ConfigError(f"Chain '{name}' declares {self.states} states but p has shape {p.shape}.")
        if self.family == "constant":
            return constant_chain(p, self.params.get("rate", 1.0), name)
        if self.family == "erlang-2":
            return erlang_chain(p, name)
        if self.family == "log-excess":
            return log_excess_chain(p, name)
        return polynomial_chain(p, self.params["coeffs"], self.params.get("scales"), name)


@dataclass(frozen=True)
class NumericsConfig:
    horizon: float = 1.0
    dt: float = 0.002
    y_max: float = 0.0
    y_step: float | None = None
    n_paths: int = 100_000
    seed: int = 0
    v: float = 1.0
    eps: float | None = None
    probes: tuple[tuple[tuple[int, ...], tuple[float, ...]], ...] = ()
    residual_times: tuple[float, ...] = ()

    def age_grid(self, mode: str) -> np.ndarray | float:
        """Reduced mode takes any increasing grid; the general solver only takes its upper end."""
        if mode == "general":
            return max(self.y_max, self.horizon)
        if self.y_max <= 0.0:
            return np.array([0.0])
        step = self.y_step or self.dt
        n = int(np.ceil(self.y_max / step - 1e-9))
        return step * np.arange(n + 1)

    @property
    def residual_eps(self) -> float:
        return self.eps if self.eps is not None else 10.0 * self.dt


@dataclass(frozen=True)
class SweepConfig:
    v: tuple[float, ...] = (0.5, 1.0, 2.0, 4.0)
    T: tuple[float, ...] = (0.25, 0.5, 0.75, 1.0)
    theta: tuple[float, ...] = (0.5, 1.0, 2.0, 4.0)

    def values(self, axis: str) -> tuple[float, ...]:
        try:
            return tuple(sorted(getattr(self, axis)))
        except AttributeError:
            raise ConfigError(f"Unknown sweep axis '{axis}'. Expected v, T or theta.") from None


@dataclass(frozen=True)
class OutputConfig:
    psi: str = "psi.csv"
    sweep: str = "sweep.csv"
    oracle: str = "oracle.csv"
    residual: str = "residual.csv"
    checkpoint: str | None = None


@dataclass(frozen=True)
class RunConfig:
    market: dict
    chains: tuple[ChainConfig, ...]
    numerics: NumericsConfig = NumericsConfig()
    sweep: SweepConfig = SweepConfig()
    output: OutputConfig = OutputConfig()
    source: str = "<memory>"

    @property
    def regime_counts(self) -> tuple[int, ...]:
        return tuple(c.states for c in self.chains)

    @property
    def x0(self) -> tuple[int, ...]:
        return tuple(c.initial_state for c in self.chains)

    @property
    def y0(self) -> tuple[float, ...]:
        return tuple(c.initial_age for c in self.chains)

    @property
    def probes(self) -> tuple[tuple[tuple[int, ...], tuple[float, ...]], ...]:
        return self.numerics.probes or ((self.x0, self.y0),)

    def build_market(self, theta: float | None = None, horizon: float | None = None) -> MarketSpec:
        block = dict(self.market)
        if theta is not None:
            block["theta"] = theta
        try:
            return MarketSpec.from_dict(block, self.regime_counts,
                                        self.numerics.horizon if horizon is None else horizon)
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"Malformed market block in {self.source}: {exc!r}") from exc

    def build_chains(self) -> list[RegimeChain]:
        chains = []
        for c in self.chains:
            try:
                chains.append(c.build())
            except (KeyError, TypeError) as exc:
                raise ConfigError(f"Malformed chain '{c.name or c.family}' in {self.source}: {exc!r}") from exc
        return chains

    def with_overrides(self, **numerics: Any) -> "RunConfig":
        """Copy with numerics fields replaced; ``None`` values are ignored."""
        updates = {k: v for k, v in numerics.items() if v is not None}
        if not updates:
            return self
        return dataclasses.replace(self, numerics=dataclasses.replace(self.numerics, **updates))

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out.pop("source")
        return out


def config_hash(cfg: RunConfig) -> str:
    """SHA-256 of the canonical JSON of the resolved configuration."""
    canonical = json.dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":"), default=_jsonable)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _jsonable(value):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    raise TypeError(f"Cannot serialise {type(value).__name__}")


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------

def _floats(values, what: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in np.atleast_1d(values))
    except (TypeError, ValueError):
        raise ConfigError(f"{what} must be a list of numbers. Got: {values!r}") from None


def _parse_chain(n: int, raw: dict) -> ChainConfig:
    if not isinstance(raw, dict):
        raise ConfigError(f"Chain {n} must be an object. Got: {raw!r}")
    family = raw.get("family", "constant")
    if family not in FAMILIES:
        raise ConfigError(f"Chain {n} has unknown family '{family}'. Expected one of {sorted(FAMILIES)}.")
    p = raw.get("p")
    if family == "frozen":
        states = 1
    elif family == "tabulated":
        states = int(np.asarray(raw.get("params", {}).get("table", [[[]]])).shape[0])
    elif p is None:
        raise ConfigError(f"Chain {n} ({family}) needs a jump matrix 'p'.")
    else:
        states = len(p)
    states = int(raw.get("states", states))
    initial_state = int(raw.get("initial_state", 0))
    if not 0 <= initial_state < states:
        raise ConfigError(f"Chain {n}: initial_state {initial_state} outside 0..{states - 1}.")
    initial_age = float(raw.get("initial_age", 0.0))
    if initial_age < 0:
        raise ConfigError(f"Chain {n}: initial_age must be nonnegative. Got: {initial_age}")
    return ChainConfig(
        family=family,
        states=states,
        p=None if p is None else tuple(tuple(float(v) for v in row) for row in p),
        params=dict(raw.get("params", {})),
        initial_state=initial_state,
        initial_age=initial_age,
        name=str(raw.get("name", "")),
    )


def _parse_probes(raw, n_comp: int) -> tuple:
    probes = []
    for n, probe in enumerate(raw or []):
        x = tuple(int(v) for v in np.atleast_1d(probe["x"]))
        y = _floats(probe.get("y", 0.0), f"probes[{n}].y")
        if len(y) == 1 and n_comp > 1:
            y = y * n_comp
        if len(x) != n_comp or len(y) != n_comp:
            raise ConfigError(f"probes[{n}] needs {n_comp} states and ages. Got x={x}, y={y}.")
        probes.append((x, y))
    return tuple(probes)


def parse_config(data: dict, source: str = "<memory>") -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError(f"{source}: top level must be a JSON object.")
    for key in ("market", "chains"):
        if key not in data:
            raise ConfigError(f"{source}: missing required block '{key}'.")
    raw_chains = data["chains"]
    if isinstance(raw_chains, dict):
        raw_chains = [raw_chains]
    if not raw_chains:
        raise ConfigError(f"{source}: at least one chain is required.")
    chains = tuple(_parse_chain(n, c) for n, c in enumerate(raw_chains))

    market = dict(data["market"])
    market.setdefault("constraint", {}).setdefault("delta", DEFAULT_DELTA)
    for key in ("n_assets", "theta", "rate", "assets"):
        if key not in market:
            raise ConfigError(f"{source}: market block is missing '{key}'.")

    num = dict(data.get("numerics", {}))
    known = {f.name for f in dataclasses.fields(NumericsConfig)}
    unknown = sorted(set(num) - known)
    if unknown:
        raise ConfigError(f"{source}: unknown numerics keys {unknown}.")
    try:
        numerics = NumericsConfig(
            horizon=float(num.get("horizon", 1.0)),
            dt=float(num.get("dt", 0.002)),
            y_max=float(num.get("y_max", 0.0)),
            y_step=None if num.get("y_step") is None else float(num["y_step"]),
            n_paths=int(num.get("n_paths", 100_000)),
            seed=int(num.get("seed", 0)),
            v=float(num.get("v", 1.0)),
            eps=None if num.get("eps") is None else float(num["eps"]),
            probes=_parse_probes(num.get("probes"), len(chains)),
            residual_times=_floats(num.get("residual_times", []), "residual_times"),
        )
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{source}: malformed numerics block: {exc!r}") from exc
    if numerics.horizon < 0 or numerics.dt <= 0:
        raise ConfigError(f"{source}: need horizon >= 0 and dt > 0. Got T={numerics.horizon}, dt={numerics.dt}.")

    sw = data.get("sweep", {})
    default_sweep = SweepConfig()
    sweep = SweepConfig(
        v=_floats(sw.get("v", default_sweep.v), "sweep.v"),
        T=_floats(sw.get("T", default_sweep.T), "sweep.T"),
        theta=_floats(sw.get("theta", default_sweep.theta), "sweep.theta"),
    )
    out = data.get("output", {})
    output = OutputConfig(**{k: out[k] for k in (f.name for f in dataclasses.fields(OutputConfig)) if k in out})
    return RunConfig(market, chains, numerics, sweep, output, source)


def loads(text: str, source: str = "<memory>") -> RunConfig:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{source}: invalid JSON: {exc.msg}", exc.lineno, exc.colno) from exc
    return parse_config(data, source)


def load_config(path: str) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"Cannot read config {path}: {exc.strerror}") from exc
    cfg = loads(text, path)
    log.info("Loaded %s: %d chain(s), %d asset(s)", path, len(cfg.chains), int(cfg.market["n_assets"]))
    return cfg


def sweep_markets(cfg: RunConfig, axis: str, values: Sequence[float]) -> list[MarketSpec]:
    """One market per swept theta or T value."""
    if axis == "theta":
        return [cfg.build_market(theta=v) for v in values]
    if axis == "T":
        return [cfg.build_market(horizon=v) for v in values]
    raise ConfigError(f"Axis '{axis}' does not re-build the market.")
