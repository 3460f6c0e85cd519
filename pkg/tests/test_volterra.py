import numpy as np
import pytest
from numpy.testing import assert_allclose

from src.control.hamiltonian import Hamiltonian
from src.errors import ConvergenceError, SingularSystemError
from src.market.market import MarketSpec, three_regime_market
from src.oracle.mc_oracle import estimate_psi
from src.regimes.semi_markov import constant_chain, erlang_chain
from src.solver.psi_grid import PsiGrid, optimal_wealth, phi_table
from src.solver.volterra import (
    optimal_control_curve,
    pde_residual,
    solve,
    solve_general,
    solve_reduced,
    step_count,
)


def test_step_count():
    assert step_count(1.0, 0.002) == 500
    assert step_count(0.0, 0.1) == 0
    with pytest.raises(ValueError):
        step_count(1.0, 0.0)


class TestReduced:

    def test_terminal_slice_is_one(self, erlang):
        psi = solve_reduced(three_regime_market(horizon=0.1), erlang, 0.01, y_grid=[0.0, 0.5])
        assert psi.M == 10
        assert np.all(psi.values[0] == 1.0)
        assert psi.values.shape == (11, 3, 2)

    def test_frozen_chain_closed_form(self, frozen_market, frozen):
        dt = 0.01
        psi = solve_reduced(frozen_market, frozen, dt)
        h = Hamiltonian(frozen_market).h(0.0, (0,))
        assert psi.initial(0, 0.0) == pytest.approx(np.exp(frozen_market.horizon * h), rel=1e-12)
        assert optimal_wealth(psi, 1.7, 0, 0.0) == pytest.approx(np.log(1.7) - 2.0 * h, rel=1e-10)

    def test_zero_horizon(self, make_market, two_state):
        spec = make_market([0.05, 0.02], [0.12, 0.1], [0.25, 0.3], horizon=0.0)
        psi = solve_reduced(spec, two_state, 0.01)
        assert psi.M == 0
        assert_allclose(psi.values, np.ones((1, 2, 1)))
        assert optimal_wealth(psi, 2.0, 1, 0.0) == pytest.approx(np.log(2.0))

    def test_values_are_positive_and_ages_matter(self, erlang):
        spec = three_regime_market(horizon=0.5)
        psi = solve_reduced(spec, erlang, 0.01, y_grid=np.linspace(0.0, 1.0, 11))
        assert np.all(psi.values > 0.0) and np.all(psi.values <= 1.0)
        assert psi.initial(0, 0.0) != pytest.approx(psi.initial(0, 1.0), rel=1e-8)
        h_min = min(Hamiltonian(spec).h(0.0, x) for x in spec.regimes())
        floor = np.exp(h_min * psi.dt * np.arange(psi.M + 1))
        assert np.all(psi.values >= floor[:, None, None] * (1.0 - 1e-6))

    def test_frozen_residual_is_first_order(self, frozen_market, frozen):
        psi = solve_reduced(frozen_market, frozen, 0.01, y_grid=[0.0, 0.5])
        h = Hamiltonian(frozen_market).h(0.0, (0,))
        for eps in (0.02, 0.01):
            residual = pde_residual(psi, frozen_market, frozen, 0.3, 0, 0.1, eps)
            assert abs(residual) <= h**2 * eps
        with pytest.raises(ValueError):
            pde_residual(psi, frozen_market, frozen, 0.995, 0, 0.1, 0.01)

    def test_stiff_step_raises(self, make_market):
        spec = make_market([0.05, 0.02], [0.12, 0.1], [0.25, 0.3], horizon=0.2)
        fast = constant_chain([[0.0, 1.0], [1.0, 0.0]], rate=50.0)
        with pytest.raises(SingularSystemError):
            solve_reduced(spec, fast, 0.1)

    def test_rejects_bad_age_grid(self, three_regime, erlang):
        with pytest.raises(ValueError):
            solve_reduced(three_regime, erlang, 0.01, y_grid=[0.1, 0.2])


class TestGeneral:

    def test_agrees_with_reduced_for_one_component(self, erlang):
        spec = three_regime_market(horizon=0.5)
        dt = 0.01
        general = solve_general(spec, [erlang], dt, y_grid=1.0)
        reduced = solve_reduced(spec, erlang, dt, y_grid=general.y_grid)
        for i in range(3):
            assert general.initial((i,), 0.0) == pytest.approx(reduced.initial(i, 0.0), abs=1e-4)

    def test_picard_contracts_on_two_components(self, make_market, erlang, two_state):
        spec = make_market([0.05, 0.02], [0.12, 0.1], [0.25, 0.3], regime_counts=(2, 2), horizon=0.2)
        first = erlang_chain([[0.0, 1.0], [1.0, 0.0]], name="first")
        psi = solve_general(spec, [first, two_state], 0.02)
        ratios = psi.meta["ratios"]
        assert ratios and max(ratios) < 1.0
        assert psi.meta["final_change"] <= 1e-10
        assert psi.values.shape == (11, 4, 11, 11)
        assert np.all(psi.values[0] == 1.0)

    def test_sweep_limit_raises_with_diagnostics(self, make_market, two_state):
        spec = make_market([0.05, 0.02], [0.12, 0.1], [0.25, 0.3], horizon=0.2)
        with pytest.raises(ConvergenceError) as info:
            solve_general(spec, [two_state], 0.02, max_sweeps=1)
        assert info.value.diagnostics["sweeps"] == 1

    def test_general_age_grid_needs_step_dt(self, three_regime, erlang):
        with pytest.raises(ValueError):
            solve_general(three_regime, [erlang], 0.01, y_grid=[0.0, 0.5, 1.0])

    def test_solve_dispatch(self, three_regime, erlang):
        with pytest.raises(ValueError, match="Unknown solver mode"):
            solve(three_regime, [erlang], 0.01, mode="fast")


class TestPsiGrid:

    def test_binary_checkpoint(self, tmp_path, erlang):
        psi = solve_reduced(three_regime_market(horizon=0.1), erlang, 0.01, y_grid=[0.0, 0.25, 0.5])
        path = tmp_path / "psi.bin"
        psi.write_binary(str(path))
        back = PsiGrid.read_binary(str(path))
        assert back.mode == "reduced" and back.regime_counts == (3,)
        assert back.dt == psi.dt and back.theta == psi.theta
        assert_allclose(back.y_grid, psi.y_grid)
        assert np.array_equal(back.values, psi.values)

    def test_bad_checkpoint_magic(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"NOPE" + bytes(16))
        with pytest.raises(ValueError, match="not a psi checkpoint"):
            PsiGrid.read_binary(str(path))

    def test_csv_header_and_columns(self, tmp_path, two_state, make_market):
        spec = make_market([0.05, 0.02], [0.12, 0.1], [0.25, 0.3], horizon=0.05)
        psi = solve_reduced(spec, two_state, 0.01)
        path = tmp_path / "psi.csv"
        psi.to_csv(str(path), header={"config_hash": "abc123", "seed": 7, "version": "0.1.0"})
        lines = path.read_text().splitlines()
        comments = [line for line in lines if line.startswith("#")]
        assert "# config_hash=abc123" in comments and "# seed=7" in comments
        assert lines[len(comments)] == "m,t,state,y,psi"
        assert len(lines) == len(comments) + 1 + 6 * 2

    def test_interpolation_between_slices(self, two_state, make_market):
        spec = make_market([0.05, 0.02], [0.12, 0.1], [0.25, 0.3], horizon=0.1)
        psi = solve_reduced(spec, two_state, 0.01)
        mid = psi.at_time(0.055, 1, 0.0)
        assert mid == pytest.approx(0.5 * (psi.at(4, 1, 0.0) + psi.at(5, 1, 0.0)))
        with pytest.raises(ValueError):
            psi.at_time(0.2, 1, 0.0)

    def test_phi_table(self, frozen_market, frozen):
        psi = solve_reduced(frozen_market, frozen, 0.05)
        table = phi_table(psi, [1.0, 2.0])
        assert list(table.columns) == ["v", "state", "y", "phi"]
        diff = table["phi"].iloc[1] - table["phi"].iloc[0]
        assert diff == pytest.approx(np.log(2.0))


def test_control_ignores_regime_chain(make_market):
    """u* depends on the market alone; scaling every holding rate changes psi but not u*."""
    spec = make_market([0.05, 0.02], [0.12, 0.1], [0.25, 0.3], horizon=0.2)
    slow = constant_chain([[0.0, 1.0], [1.0, 0.0]], rate=1.0)
    fast = constant_chain([[0.0, 1.0], [1.0, 0.0]], rate=10.0)
    ham = Hamiltonian(spec)
    t_grid = np.linspace(0.0, 0.2, 5)
    curve = optimal_control_curve(spec, t_grid, (0,), ham)
    assert list(curve.columns) == ["t", "h", "u0"]
    assert curve.equals(optimal_control_curve(spec, t_grid, (0,)))
    psi_slow = solve_reduced(spec, slow, 0.01, hamiltonian=ham)
    psi_fast = solve_reduced(spec, fast, 0.01, hamiltonian=ham)
    assert abs(psi_slow.initial(0, 0.0) - psi_fast.initial(0, 0.0)) > 1e-6


@pytest.mark.slow
def test_pde_residual_shrinks_with_the_grid(erlang):
    spec = three_regime_market()
    ham = Hamiltonian(spec)
    gen = np.random.default_rng(7)
    points = list(zip(gen.uniform(0.1, 0.8, 10), gen.integers(0, 3, 10), gen.uniform(0.05, 0.4, 10)))
    totals = []
    for dt in (0.01, 0.005):
        eps = 2.0 * dt
        psi = solve_reduced(spec, erlang, dt, y_grid=dt * np.arange(int(round(0.6 / dt)) + 1), hamiltonian=ham)
        totals.append(sum(abs(pde_residual(psi, spec, erlang, t, int(i), y, eps, ham)) for t, i, y in points))
    assert totals[0] / totals[1] >= 1.7


@pytest.mark.slow
def test_halving_the_step_is_second_order(erlang):
    spec = three_regime_market()
    ham = Hamiltonian(spec)
    values = np.array([[solve_reduced(spec, erlang, dt, hamiltonian=ham).initial(i, 0.0) for i in range(3)]
                       for dt in (0.02, 0.01, 0.005)])
    ratio = np.abs(values[1] - values[0]) / np.abs(values[2] - values[1])
    assert np.all((ratio >= 3.0) & (ratio <= 5.0))


@pytest.mark.slow
def test_general_solver_matches_monte_carlo_on_two_components():
    block = {
        "n_assets": 2,
        "theta": 1.0,
        "rate": {"driver": 0, "values": [0.04, 0.02]},
        "assets": [
            {"driver": 0, "mu": [0.12, 0.06], "sigma": [[0.25, 0.0], [0.35, 0.0]]},
            {"driver": 1, "mu": [0.09, 0.15], "sigma": [[0.05, 0.2], [0.1, 0.3]]},
        ],
        "jumps": [{"measure": {"kind": "uniform", "support": [-0.4, 0.4], "mass": 1.0},
                   "eta": [{"kind": "identity"}, {"kind": "identity"}]}],
        "constraint": {"lower": -5.0, "upper": 5.0, "delta": 1e-3},
    }
    spec = MarketSpec.from_dict(block, (2, 2), horizon=0.5)
    flip = [[0.0, 1.0], [1.0, 0.0]]
    chains = [erlang_chain(flip, name="first"), constant_chain(flip, rate=[1.5, 0.8], name="second")]
    ham = Hamiltonian(spec)
    psi = solve_general(spec, chains, 0.025, y_grid=1.0, hamiltonian=ham)
    points = [((0, 0), (0.0, 0.0)), ((1, 0), (0.2, 0.4)), ((0, 1), (0.5, 0.1)),
              ((1, 1), (0.3, 0.3)), ((0, 1), (0.0, 0.25))]
    for seed, (x, y) in enumerate(points):
        est = estimate_psi(spec, chains, 0.0, x, y, 100_000, seed=seed, hamiltonian=ham)
        assert est.z_score(psi.initial(x, y)) <= 3.0
