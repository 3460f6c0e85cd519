import numpy as np
import pytest
from numpy.testing import assert_allclose

from src.errors import AdmissibilityError, MarketError
from src.market.jumps import JumpMeasure, JumpSize
from src.market.market import (
    MarketSpec,
    PortfolioSet,
    admissible_interval,
    diffusion_matrix,
    excess_drift,
    jump_floor,
    linear_constraints,
    membership,
    require_admissible,
    validate,
)
from src.market.profiles import DrivenCoefficient, TimeProfile
from src.regimes.semi_markov import erlang_chain


def test_three_regime_coefficients(three_regime):
    assert three_regime.n == 1 and three_regime.m1 == 1 and three_regime.m2 == 1
    assert three_regime.regime_counts == (3,)
    assert three_regime.time_homogeneous
    assert three_regime.uniform_identity_jumps
    assert three_regime.r(0.3, (1,)) == pytest.approx(0.5)
    assert_allclose(excess_drift(three_regime, 0.0, (2,)), [0.1])
    assert_allclose(diffusion_matrix(three_regime, 0.0, (1,)), [[0.16]])
    assert_allclose(three_regime.eta_bounds, [[[-0.4, 0.4]]])


def test_three_regime_passes_validation(three_regime, erlang):
    report = validate(three_regime, [erlang])
    assert report.passed, report.lines()
    names = set(report.to_frame()["name"])
    assert {"A1_eta_square_integrable", "A2_eta_above_minus_one", "A3_uniform_ellipticity"} <= names
    assert "A4_irreducible[0:erlang-2]" in names


def test_admissible_interval_and_membership(three_regime):
    lo, hi = admissible_interval(three_regime)
    assert lo == pytest.approx(-0.999 / 0.4)
    assert hi == pytest.approx(0.999 / 0.4)
    assert membership(three_regime.constraint, [2.49], three_regime.eta_bounds)
    assert not membership(three_regime.constraint, [2.5], three_regime.eta_bounds)
    assert jump_floor(np.array([2.0]), three_regime.eta_bounds) == pytest.approx(0.2)
    with pytest.raises(AdmissibilityError):
        require_admissible(three_regime, [-2.6])


class TestPortfolioSet:

    def test_rejects_bad_delta(self):
        with pytest.raises(MarketError):
            PortfolioSet.box(1, -1.0, 1.0, delta=0.0)

    def test_must_contain_origin(self):
        with pytest.raises(MarketError):
            PortfolioSet(np.array([0.1]), np.array([1.0]))

    def test_no_short_selling_preset(self):
        c = PortfolioSet.from_dict(2, {"preset": "no-short-selling", "c0": 0.2})
        assert_allclose(c.lower, [0.0, 0.0])
        assert_allclose(c.upper, [0.8, 0.8])
        assert c.sum_max == pytest.approx(0.8)
        assert not membership(c, [0.5, 0.5], None)
        assert membership(c, [0.4, 0.4], None)


def test_linear_constraints_sum_cap_and_jump_corners():
    spec = MarketSpec(
        theta=1.0,
        rate=DrivenCoefficient(0, [0.05]),
        drift=[DrivenCoefficient(0, [0.1]), DrivenCoefficient(0, [0.1])],
        volatility=[DrivenCoefficient(0, [[0.2, 0.0]]), DrivenCoefficient(0, [[0.0, 0.2]])],
        eta=[[JumpSize.identity(), JumpSize.constant(-0.5)]],
        nu=[JumpMeasure.uniform_on(-0.2, 0.3)],
        constraint=PortfolioSet.no_short_selling(2),
        regime_counts=(1,),
    )
    A, c = linear_constraints(spec)
    assert A.shape == (1 + 4, 2)
    assert_allclose(A[0], [-1.0, -1.0])
    assert_allclose(c, [-1.0] + [spec.delta - 1.0] * 4)
    # worst corner: eta_0 = -0.2, eta_1 = -0.5
    assert any(np.allclose(row, [-0.2, -0.5]) for row in A[1:])


def test_time_profiles():
    prof = TimeProfile.from_spec({"breaks": [0.0, 0.5], "coeffs": [[0.1], [0.2, 0.1]]})
    assert prof(0.25) == pytest.approx(0.1)
    assert prof(0.75) == pytest.approx(0.275)
    assert not prof.is_constant
    coeff = DrivenCoefficient(1, [0.3, {"breaks": [0.0], "coeffs": [[0.1, 1.0]]}])
    assert coeff(0.5, (0, 1)) == pytest.approx(0.6)
    assert coeff(0.5, (1, 0)) == pytest.approx(0.3)
    assert not coeff.is_time_homogeneous


def test_from_dict_rejects_mismatched_states(make_market):
    with pytest.raises(MarketError, match="states"):
        make_market([0.1, 0.2], [0.2, 0.3], [0.2, 0.3], regime_counts=(3,))


def test_validation_reports_failures(make_market):
    flat = make_market([0.1, 0.2], [0.2, 0.3], [0.2, 0.0])
    report = validate(flat, [erlang_chain([[0.0, 1.0], [1.0, 0.0]])])
    assert not report.passed
    assert [c.name for c in report.failures] == ["A3_uniform_ellipticity"]


def test_large_negative_jumps_fail_a2():
    spec = MarketSpec(
        theta=1.0,
        rate=DrivenCoefficient(0, [0.05]),
        drift=[DrivenCoefficient(0, [0.1])],
        volatility=[DrivenCoefficient(0, [[0.2]])],
        eta=[[JumpSize.identity()]],
        nu=[JumpMeasure.uniform_on(-1.5, 0.4)],
        constraint=PortfolioSet.box(1, -1.0, 1.0),
        regime_counts=(1,),
    )
    failed = {c.name for c in validate(spec).failures}
    assert {"A2_eta_above_minus_one", "A2_log_square_integrable"} <= failed


def test_frozen_chain_is_irreducible(frozen_market, frozen):
    report = validate(frozen_market, [frozen])
    assert report.passed


class TestJumpMeasure:

    def test_uniform_moments(self):
        nu = JumpMeasure.uniform_on(-0.4, 0.4, mass=2.0)
        assert nu.mass == pytest.approx(2.0)
        assert nu.integrate(lambda z: z**2) == pytest.approx(2.0 * 0.16 / 3.0, rel=1e-12)

    def test_atoms_and_density(self):
        nu = JumpMeasure.from_spec({"kind": "uniform", "support": [0.0, 1.0], "mass": 0.5, "atoms": [[-0.3, 0.25]]})
        assert nu.mass == pytest.approx(0.75)
        assert nu.integrate(lambda z: z) == pytest.approx(0.25 - 0.075)
        assert_allclose(nu.points, [-0.3])

    def test_samples_follow_the_measure(self, rng):
        nu = JumpMeasure.from_spec({"kind": "uniform", "support": [0.0, 1.0], "mass": 0.5, "atoms": [[-0.3, 0.5]]})
        marks = nu.sample(rng, 20000)
        atom_share = np.mean(marks == -0.3)
        assert atom_share == pytest.approx(0.5, abs=0.02)
        dens = marks[marks != -0.3]
        assert dens.min() >= 0.0 and dens.max() <= 1.0
        assert dens.mean() == pytest.approx(0.5, abs=0.02)

    def test_bad_support(self):
        with pytest.raises(ValueError):
            JumpMeasure.uniform_on(0.4, -0.4)


def test_diffusion_matrix_of_a_wide_sigma(rng):
    sigma = rng.normal(size=(2, 3))
    spec = MarketSpec.from_dict({
        "n_assets": 2,
        "theta": 0.5,
        "rate": {"values": [0.02]},
        "assets": [{"mu": [0.05], "sigma": [sigma[0].tolist()]}, {"mu": [0.07], "sigma": [sigma[1].tolist()]}],
        "constraint": {"lower": -1.0, "upper": 1.0},
    }, regime_counts=(1,))
    a = diffusion_matrix(spec, 0.0, (0,))
    assert_allclose(a, sigma @ sigma.T, atol=1e-14)
    assert np.abs(a - a.T).max() <= 1e-12
    xi = rng.normal(size=(100, 2))
    quad = np.einsum("ki,ij,kj->k", xi, a, xi)
    assert np.all(quad >= np.linalg.eigvalsh(a)[0] * (xi**2).sum(axis=1) - 1e-12)


def test_membership_is_monotone_in_delta(three_regime):
    bounds = three_regime.eta_bounds
    for u in (-2.0, 0.0, 1.0, 2.0, 2.45):
        strict = PortfolioSet.box(1, -5.0, 5.0, delta=0.1)
        loose = PortfolioSet.box(1, -5.0, 5.0, delta=0.01)
        if membership(strict, [u], bounds):
            assert membership(loose, [u], bounds)
    example = PortfolioSet.box(1, -5.0, 5.0, delta=0.05)
    assert membership(example, [2.0], bounds)
    assert not membership(example, [3.0], bounds)
    assert membership(example, [0.0], bounds)
