import json

import numpy as np
import pandas as pd
import pytest
from numpy.testing import assert_allclose
from scipy.linalg import expm

from config import THREADS_ENV
from src.control.hamiltonian import Hamiltonian
from src.errors import AdmissibilityError
from src.market.market import membership, three_regime_market
from src.oracle.mc_oracle import (
    FeedbackControl,
    McEstimate,
    dump_paths,
    estimate_cost,
    estimate_psi,
    project_admissible,
    resolve_threads,
    simulate_wealth,
    terminal_log_wealth,
    verify_suboptimality,
)
from src.oracle.paths import block_generator, block_sizes, iterate_segments
from src.regimes.semi_markov import constant_chain
from src.run_config import load_config
from src.solver.volterra import solve_reduced


@pytest.fixture
def switching_market(make_market):
    return make_market([0.05, 0.02], [0.12, 0.1], [0.25, 0.3], horizon=0.5)


class TestThreads:

    def test_explicit_value_wins(self, monkeypatch):
        monkeypatch.setenv(THREADS_ENV, "3")
        assert resolve_threads(2) == 2
        assert resolve_threads() == 3

    def test_default_is_one(self, monkeypatch):
        monkeypatch.delenv(THREADS_ENV, raising=False)
        assert resolve_threads() == 1

    def test_bad_values(self, monkeypatch):
        monkeypatch.setenv(THREADS_ENV, "many")
        with pytest.raises(ValueError):
            resolve_threads()
        with pytest.raises(ValueError):
            resolve_threads(0)

    def test_thread_count_does_not_change_the_estimate(self, switching_market, two_state):
        args = (switching_market, [two_state], 0.0, (0,), (0.0,), 10_000, 5)
        one = estimate_psi(*args, threads=1)
        three = estimate_psi(*args, threads=3)
        assert one == three


def test_block_streams():
    assert block_sizes(10_000) == [4096, 4096, 1808]
    a = block_generator(3, 1).random(4)
    assert_allclose(a, block_generator(3, 1).random(4))
    assert not np.allclose(a, block_generator(3, 2).random(4))


def test_z_score():
    est = McEstimate(1.0, 0.01, 1000, 0)
    assert est.z_score(1.02) == pytest.approx(2.0)
    assert not est.low_precision
    exact = McEstimate(1.0, 0.0, 1000, 0)
    assert exact.z_score(1.0) == 0.0
    assert exact.z_score(1.1) == np.inf


class TestFeynmanKac:

    def test_frozen_chain_is_deterministic(self, frozen_market, frozen):
        psi = solve_reduced(frozen_market, frozen, 0.01)
        est = estimate_psi(frozen_market, [frozen], 0.0, (0,), (0.0,), 1000, seed=1)
        assert est.std_error == 0.0
        assert est.z_score(psi.initial(0, 0.0)) == 0.0

    @pytest.fixture
    def constant_rates(self, jump_matrix):
        spec = three_regime_market(horizon=1.0)
        rate = np.array([1.2, 0.7, 2.0])
        chain = constant_chain(jump_matrix, rate=rate)
        ham = Hamiltonian(spec)
        h = np.array([ham.h(0.0, (i,)) for i in range(3)])
        generator = np.diag(h) + np.diag(rate) @ (np.asarray(jump_matrix) - np.eye(3))
        return spec, chain, ham, expm(generator * spec.horizon) @ np.ones(3)

    def test_solver_matches_matrix_exponential(self, constant_rates):
        spec, chain, ham, exact = constant_rates
        psi = solve_reduced(spec, chain, 0.005, hamiltonian=ham)
        assert_allclose([psi.initial(i, 0.0) for i in range(3)], exact, rtol=1e-3)

    @pytest.mark.parametrize("antithetic", [False, True])
    def test_estimates_match_matrix_exponential(self, constant_rates, antithetic):
        spec, chain, ham, exact = constant_rates
        for i in range(3):
            est = estimate_psi(spec, [chain], 0.0, (i,), (0.0,), 20_000, seed=11 + i,
                               antithetic=antithetic, hamiltonian=ham)
            assert est.z_score(exact[i]) <= 3.0

    def test_rejects_few_paths(self, switching_market, two_state):
        with pytest.raises(ValueError):
            estimate_psi(switching_market, [two_state], 0.0, (0,), (0.0,), 10, seed=0)


class TestFeedbackControl:

    def test_right_continuous_lookup(self, switching_market):
        table = {(0,): [[0.1], [0.2]], (1,): [[0.3], [0.4]]}
        control = FeedbackControl(switching_market, [0.0, 0.25], table)
        assert_allclose(control(0.24, (0,)), [0.1])
        assert_allclose(control(0.25, (0,)), [0.2])
        assert_allclose(control(0.9, (1,)), [0.4])
        assert_allclose(control.lookup(np.array([0.1, 0.3]), np.array([1, 0])), [[0.3], [0.2]])

    def test_inadmissible_values_rejected(self, three_regime):
        with pytest.raises(AdmissibilityError):
            FeedbackControl.constant(three_regime, [3.0])

    def test_missing_regime(self, switching_market):
        with pytest.raises(ValueError, match="no entry"):
            FeedbackControl(switching_market, [0.0], {(0,): [[0.1]]})

    def test_map_projects_back(self, three_regime):
        control = FeedbackControl.constant(three_regime, [2.0]).map(lambda u: 2.0 * u)
        assert membership(three_regime.constraint, control(0.5, (1,)), three_regime.eta_bounds)
        assert control(0.5, (1,))[0] == pytest.approx(2.4975, abs=1e-6)
        assert_allclose(project_admissible(three_regime, [-9.0]), [-0.999 / 0.4], atol=1e-9)


class TestWealth:

    def test_simulated_wealth_stays_positive(self, three_regime, erlang, tmp_path):
        control = FeedbackControl.optimal(three_regime, [0.0])
        paths = [simulate_wealth(three_regime, [erlang], 2.0, control, 1.0, 50, seed=s) for s in range(3)]
        for p in paths:
            assert p.values[0] == 2.0 and p.times[0] == 0.0
            assert p.times[-1] == pytest.approx(1.0)
            assert np.all(p.values > 0.0)
            assert np.all(np.diff(p.times) >= 0.0)
        out = tmp_path / "paths.csv"
        dump_paths(paths, str(out))
        frame = pd.read_csv(out)
        assert list(frame.columns) == ["path", "t", "v"]
        assert set(frame["path"]) == {0, 1, 2}

    def test_cost_of_optimal_control_matches_psi(self, switching_market, two_state):
        ham = Hamiltonian(switching_market)
        psi = solve_reduced(switching_market, two_state, 0.005, hamiltonian=ham)
        control = FeedbackControl.optimal(switching_market, [0.0], ham)
        v0 = 1.5
        est = estimate_cost(switching_market, [two_state], v0, control, 0.5, 20_000, seed=9, n_steps=10)
        assert est.z_score(v0 ** -0.5 * psi.initial(0, 0.0)) <= 4.0

    def test_cost_rejects_bad_wealth(self, switching_market, two_state):
        with pytest.raises(ValueError):
            estimate_cost(switching_market, [two_state], 0.0, [0.1], 0.5, 1000, seed=0)


@pytest.mark.slow
def test_three_regime_oracle(config_path):
    cfg = load_config(config_path)
    spec, chains = cfg.build_market(), cfg.build_chains()
    ham = Hamiltonian(spec)
    psi = solve_reduced(spec, chains[0], cfg.numerics.dt, cfg.numerics.age_grid("reduced"), ham)
    for x in (0, 1, 2):
        for y in (0.0, 0.5):
            est = estimate_psi(spec, chains, 0.0, (x,), (y,), 100_000, cfg.numerics.seed, hamiltonian=ham)
            assert est.z_score(psi.initial(x, y)) <= 3.0, (x, y, est)


@pytest.mark.slow
def test_optimal_control_is_not_beaten(config_path):
    cfg = load_config(config_path)
    spec, chains = cfg.build_market(), cfg.build_chains()
    ham = Hamiltonian(spec)
    psi = solve_reduced(spec, chains[0], cfg.numerics.dt, hamiltonian=ham)
    optimal = FeedbackControl.optimal(spec, [0.0], ham)
    best = estimate_cost(spec, chains, 1.0, optimal, spec.horizon, 100_000, seed=3, n_steps=20)
    assert best.z_score(psi.initial(0, 0.0)) <= 3.0

    perturbations = {
        "shift-up": optimal.map(lambda u: u + 0.3),
        "shift-down": optimal.map(lambda u: u - 0.3),
        "half": optimal.map(lambda u: 0.5 * u),
        "scaled-up": optimal.map(lambda u: 1.5 * u),
        "cash": FeedbackControl.constant(spec, [0.0]),
    }
    report = verify_suboptimality(spec, chains, 1.0, perturbations, 20_000, seed=4, optimal=optimal, n_steps=20)
    assert report.passed, report.to_frame()
    assert len(report.to_frame()) == 5


class TestClosedForms:

    def test_cash_only_wealth_is_deterministic(self, frozen_market, frozen):
        est = estimate_cost(frozen_market, [frozen], 4.0, FeedbackControl.constant(frozen_market, [0.0]), 1.0, 500, seed=6)
        assert est.std_error == 0.0
        assert est.mean == pytest.approx(4.0**-0.5 * np.exp(-0.5 * 0.05), rel=1e-12)
        path = simulate_wealth(frozen_market, [frozen], 4.0, [0.0], 1.0, 10, seed=6)
        assert path.values[-1] == pytest.approx(4.0 * np.exp(0.05), rel=1e-12)

    def test_log_wealth_is_gaussian_without_jumps(self, make_market, frozen):
        spec = make_market([0.05], [0.12], [0.25], jump=False)
        u, n = 0.8, 20_000
        logs = terminal_log_wealth(spec, [frozen], 1.0, [u], 1.0, 5, n, block_generator(8, 0), (0,), (0.0,))
        mean = 0.05 + 0.07 * u - 0.5 * (u * 0.25) ** 2
        var = (u * 0.25) ** 2
        assert abs(logs.mean() - mean) <= 3.0 * np.sqrt(var / n)
        assert logs.var(ddof=1) == pytest.approx(var, rel=0.05)

    def test_standard_error_scales_with_paths(self, switching_market, two_state):
        small = estimate_psi(switching_market, [two_state], 0.0, (0,), (0.0,), 1_000, seed=12)
        large = estimate_psi(switching_market, [two_state], 0.0, (0,), (0.0,), 10_000, seed=12)
        assert small.std_error / large.std_error == pytest.approx(np.sqrt(10.0), rel=0.2)
        assert 0.0 < large.mean <= 1.0 + large.std_error

    def test_estimate_record(self):
        est = McEstimate(0.93, 0.002, 1000, 7)
        assert json.loads(est.to_json()) == {"mean": 0.93, "se": 0.002, "n": 1000, "seed": 7}


def test_empty_perturbation_set_passes(frozen_market, frozen):
    report = verify_suboptimality(frozen_market, [frozen], 1.0, {}, 500, seed=1, n_steps=5)
    assert report.passed
    assert report.to_frame().empty


def test_segment_transitions_follow_the_jump_matrix(jump_matrix):
    chain = constant_chain(jump_matrix, rate=1.0)
    n = 20_000
    last = np.full(n, -1)
    counts = np.zeros((3, 3))
    for live, _, _, states in iterate_segments([chain], (1,), (0.0,), 0.0, 3.0, n, block_generator(5, 0)):
        moved = last[live] >= 0
        np.add.at(counts, (last[live][moved], states[moved, 0]), 1.0)
        last[live] = states[:, 0]
    assert np.all(np.diag(counts) == 0.0)
    freq = counts / counts.sum(axis=1, keepdims=True)
    assert_allclose(freq, jump_matrix, atol=0.02)
