from pathlib import Path

import numpy as np
import pytest

from src.market.market import MarketSpec, three_regime_market
from src.regimes.semi_markov import THREE_REGIME_JUMP_MATRIX, constant_chain, erlang_chain, frozen_chain

CONFIG_PATH = Path(__file__).resolve().parents[1] / "src" / "configs" / "three_regime.json"


def market_block(rates, mus, sigmas, theta=1.0, jump=True, lower=-5.0, upper=5.0, driver=0):
    """Market block of a one-asset run configuration."""
    block = {
        "n_assets": 1,
        "theta": theta,
        "rate": {"driver": driver, "values": list(rates)},
        "assets": [{"driver": driver, "mu": list(mus), "sigma": list(sigmas)}],
        "jumps": [],
        "constraint": {"lower": lower, "upper": upper, "delta": 1e-3},
    }
    if jump:
        block["jumps"] = [{"measure": {"kind": "uniform", "support": [-0.4, 0.4], "mass": 1.0},
                           "eta": [{"kind": "identity"}]}]
    return block


@pytest.fixture
def make_market():
    def factory(rates, mus, sigmas, regime_counts=None, horizon=1.0, **kwargs):
        counts = regime_counts or (len(rates),)
        return MarketSpec.from_dict(market_block(rates, mus, sigmas, **kwargs), counts, horizon)
    return factory


@pytest.fixture
def three_regime():
    return three_regime_market()


@pytest.fixture
def erlang():
    return erlang_chain()


@pytest.fixture
def two_state():
    return constant_chain([[0.0, 1.0], [1.0, 0.0]], rate=[1.5, 0.8], name="two-state")


@pytest.fixture
def frozen():
    return frozen_chain()


@pytest.fixture
def frozen_market(make_market):
    return make_market([0.05], [0.12], [0.25])


@pytest.fixture
def jump_matrix():
    return THREE_REGIME_JUMP_MATRIX.copy()


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


@pytest.fixture
def config_path():
    return str(CONFIG_PATH)


@pytest.fixture
def make_market_block():
    return market_block
