"""Vectorised regime-path simulation for blocks of Monte-Carlo paths."""
from __future__ import annotations

from typing import Iterator, Sequence

import numpy as np

from config import BLOCK_SIZE
from src.errors import RegimeError
from src.regimes.semi_markov import RegimeChain, sample_next_states, sample_residuals


def block_generator(seed: int, block: int) -> np.random.Generator:
    """Counter-based stream of one block of paths, independent of the thread that runs it."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(block,))))


def block_sizes(n_paths: int, block_size: int = BLOCK_SIZE) -> list[int]:
    full, rest = divmod(int(n_paths), block_size)
    return [block_size] * full + ([rest] if rest else [])


class ReplayUniforms:
    """Generator stand-in that replays 1 - U of a recorded stream, then draws fresh uniforms.

    Used for antithetic pairs: the mirrored run consumes the recorded uniforms in order.
    """

    def __init__(self, rng: np.random.Generator) -> None:
        self._rng = rng
        self.recorded: list[np.ndarray] = []
        self._replay: np.ndarray | None = None
        self._pos = 0

    def mirror(self) -> "ReplayUniforms":
        out = ReplayUniforms(self._rng)
        out._replay = 1.0 - np.concatenate(self.recorded) if self.recorded else np.zeros(0)
        return out

    def random(self, size=None):
        n = 1 if size is None else int(np.prod(size))
        if self._replay is None:
            draw = self._rng.random(n)
            self.recorded.append(draw)
        else:
            take = self._replay[self._pos:self._pos + n]
            self._pos += take.size
            draw = take if take.size == n else np.concatenate([take, self._rng.random(n - take.size)])
        return float(draw[0]) if size is None else draw.reshape(size)


def iterate_segments(
    chains: Sequence[RegimeChain],
    x0: Sequence[int],
    y0: Sequence[float],
    t0: float,
    horizon: float,
    n_paths: int,
    rng,
) -> Iterator[tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]]:
    """Yield ``(paths, t_start, t_end, states)`` for the next segment of every live path.

    Each component keeps its own next-jump epoch; the earliest one jumps (lowest index on ties),
    moves to j ~ p_ij(age) and restarts at age 0. Paths leave the batch at the horizon.
    """
    n_comp = len(chains)
    if len(x0) != n_comp or len(y0) != n_comp:
        raise RegimeError(f"Initial state needs {n_comp} regimes and ages. Got x={x0}, y={y0}.")
    xs = np.tile(np.asarray([c.check_state(i) for c, i in zip(chains, x0)], dtype=np.int64), (n_paths, 1))
    ages = np.tile(np.asarray(y0, dtype=np.float64), (n_paths, 1))
    t = np.full(n_paths, float(t0))
    epochs = np.empty((n_paths, n_comp))
    for c, chain in enumerate(chains):
        epochs[:, c] = t0 + sample_residuals(chain, xs[:, c], ages[:, c], rng.random(n_paths))

    live = np.arange(n_paths)
    while live.size:
        ep = epochs[live]
        first = np.argmin(ep, axis=1)
        t_next = ep[np.arange(live.size), first]
        end = np.minimum(t_next, horizon)
        yield live, t[live].copy(), end, xs[live].copy()

        ages[live] += (end - t[live])[:, None]
        t[live] = end
        jumped = t_next < horizon
        live, first = live[jumped], first[jumped]
        for c, chain in enumerate(chains):
            movers = live[first == c]
            if movers.size == 0:
                continue
            current = xs[movers, c].copy()
            for i in np.unique(current):
                sel = movers[current == i]
                xs[sel, c] = sample_next_states(chain, int(i), ages[sel, c], rng.random(sel.size))
            ages[movers, c] = 0.0
            epochs[movers, c] = t[movers] + sample_residuals(chain, xs[movers, c], ages[movers, c], rng.random(movers.size))
