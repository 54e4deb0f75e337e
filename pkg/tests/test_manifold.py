import numpy as np
import pytest

from slowfastreduce.benchmark import build_system, closed_forms, toy_system
from slowfastreduce.manifold import (
    HistoryGrid,
    ManifoldMap,
    attraction_test,
    default_burn_in,
    exponential_trapezoid,
    h0_eval,
    invariance_check,
    lp_config_for,
    lp_iterate,
    manifold_gap,
    manifold_slice,
    pullback_batch,
    reduced_rhs,
)
from slowfastreduce.paths import NoiseStream, replica_streams


@pytest.fixture
def linear():
    return build_system("linear_test", 0.1, 0.01)


@pytest.fixture
def forced():
    return build_system("fast_forced", 0.1, 0.01)


class TestHistoryGrid:
    def test_short_horizon_is_uniform(self):
        grid = HistoryGrid.build(2.0, 0.1, n_grid=64)
        np.testing.assert_array_equal(grid.steps, np.arange(-20, 1))
        assert grid.t_trunc == pytest.approx(2.0)

    def test_long_horizon_is_coarsened(self):
        grid = HistoryGrid.build(1000.0, 0.1, n_grid=64)
        assert grid.n_nodes == 64
        assert grid.steps[0] == -10000
        assert grid.steps[-1] == 0
        assert np.all(grid.cells >= 1)
        assert np.all(grid.cells[-10:] == 1)

    def test_trapezoid_weights_without_decay(self):
        weights = exponential_trapezoid(np.zeros((1, 1)), 0.4)
        np.testing.assert_allclose(weights.phi, [[1.0]])
        np.testing.assert_allclose(weights.w0, [[0.2]])
        np.testing.assert_allclose(weights.w1, [[0.2]])


class TestLyapunovPerron:
    def test_no_fast_forcing_gives_zero_manifold(self, linear):
        config = lp_config_for(linear)
        history, h = lp_iterate(linear, [0.3], NoiseStream(0, 0, 1), config)
        np.testing.assert_array_equal(h, [0.0])
        np.testing.assert_allclose(history.X, 0.3)

    def test_constant_forcing_is_followed(self, forced):
        config = lp_config_for(forced)
        _, h = lp_iterate(forced, [0.2], NoiseStream(0, 1, 1), config)
        assert h[0] == pytest.approx(0.2, abs=1e-8)

    def test_frozen_limit_matches_forcing(self, forced):
        assert h0_eval(forced, [0.2], NoiseStream(0, 1, 1), 30.0)[0] == pytest.approx(0.2, abs=1e-8)

    def test_manifold_map_modes(self, forced):
        stream = NoiseStream(3, 0, 1)
        full = ManifoldMap.build(forced)
        frozen = ManifoldMap.build(forced, mode="frozen_limit")
        assert full([0.1], stream)[0] == pytest.approx(frozen([0.1], stream)[0], abs=1e-8)
        with pytest.raises(ValueError):
            ManifoldMap(system=forced, config=full.config, mode="sideways")([0.1], stream)


class TestPullback:
    def test_longer_burn_in_does_not_move_the_sample(self):
        system = toy_system()
        streams = replica_streams(8, 5, 1)
        short, eta_short = pullback_batch(system, [0.05], streams, 40.0)
        long, eta_long = pullback_batch(system, [0.05], streams, 80.0)
        np.testing.assert_allclose(short, long, atol=1e-8)
        np.testing.assert_allclose(eta_short, eta_long, atol=1e-8)

    def test_default_burn_in(self, linear):
        assert default_burn_in(linear) == pytest.approx(np.log(1e10))
        assert default_burn_in(toy_system()) == pytest.approx(50.0)

    def test_reduced_field_without_slow_coupling(self):
        system = build_system("linear_test", 0.1, 0.01, A=[[-2.0]])
        rhs = reduced_rhs(system, [0.3], NoiseStream(1, 0, 1), 30.0)
        assert rhs[0] == pytest.approx(-0.6)


def test_gap_is_exactly_zero_without_fast_forcing(linear):
    result = manifold_gap(linear, [0.1], [0.1, 0.05, 0.01], 4)
    assert result.report.exact_zero
    assert result.report.slope is None
    np.testing.assert_array_equal(result.gaps, 0.0)


def test_gap_rejects_increasing_eps(linear):
    with pytest.raises(ValueError):
        manifold_gap(linear, [0.1], [0.01, 0.1, 0.05], 2)


class TestAttraction:
    def test_linear_fast_decay_rate(self, linear):
        report = attraction_test(linear, [0.1], [0.05], 3, eps_values=[0.02, 0.01])
        assert report.rates[0] == pytest.approx(50.0, rel=0.05)
        assert report.rates[1] == pytest.approx(100.0, rel=0.05)
        assert report.ratio_ok
        assert report.gamma_ok

    def test_zero_offset_is_identical(self, linear):
        report = attraction_test(linear, [0.1], [0.0], 3)
        assert report.identical
        assert np.isnan(report.rates[0])

    def test_horizon_given_as_time(self, linear):
        report = attraction_test(linear, [0.1], [0.05], 3, eps_values=[0.01], T=0.1)
        assert report.rates[0] == pytest.approx(100.0, rel=0.05)
        assert report.n_fit[0] <= 8


def test_manifold_is_invariant_along_the_flow(linear):
    report = invariance_check(linear, [0.1], NoiseStream(4, 0, 1), n_points=5)
    assert report.times.shape == (5,)
    assert np.max(report.discrepancy) < 1e-8


def test_slice_has_one_row_per_grid_point(forced):
    result = manifold_slice(ManifoldMap.build(forced, mode="frozen_limit"), [-0.1, 0.0, 0.1], 4)
    np.testing.assert_allclose(result.mean[:, 0], [-0.1, 0.0, 0.1], atol=1e-8)
    assert result.to_csv().splitlines()[0] == "X,mean_h_1,std_h_1,n_realizations"


@pytest.mark.slow
def test_toy_stationary_fast_mean():
    system = toy_system()
    streams = replica_streams(21, 1000, 1)
    h0, eta0 = pullback_batch(system, [0.05], streams, default_burn_in(system))
    samples = (h0 + eta0)[:, 0]
    target = float(closed_forms(0.05, 0.1).ybar_mean)
    stderr = samples.std(ddof=1) / np.sqrt(samples.size)
    assert abs(samples.mean() - target) <= 3.0 * stderr + 1e-3


TOY_EPS_LIST = [1e-1, 10 ** -1.5, 1e-2, 10 ** -2.5]


@pytest.mark.slow
def test_toy_manifold_gap_is_first_order():
    result = manifold_gap(toy_system(0.1, 1e-1), [0.05], TOY_EPS_LIST, 256, master_seed=3)
    assert not result.report.exact_zero
    assert result.report.slope_within(0.8, 1.2)


@pytest.mark.slow
def test_toy_attraction_rate_scales_with_inverse_eps():
    report = attraction_test(toy_system(0.1, 1e-2), [0.05], [0.05], 8, eps_values=[1e-2, 1e-3], master_seed=4)
    assert 5.0 <= report.ratio <= 20.0
    assert report.ratio_expected == pytest.approx(10.0)
    assert report.initial_condition.startswith("manifold-projected")
