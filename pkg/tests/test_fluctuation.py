import numpy as np
import pytest

from slowfastreduce.benchmark import build_system, closed_form_fbar, closed_form_sigma_bar, toy_system
from slowfastreduce.fluctuation import (
    FluctuationKernel,
    HbarCache,
    IntermediateSweep,
    MartingaleReport,
    NotNearlyPSD,
    ResidualRow,
    hbar_estimate,
    integrate_intermediate,
    integrate_intermediate_ensemble,
    intermediate_error_sweep,
    martingale_residual,
    sigma_estimate,
    sigma_sqrt,
    tabulate_sigma,
    weak_statistics,
)
from slowfastreduce.averaging import integrate_averaged
from slowfastreduce.paths import NoiseStream, replica_streams
from slowfastreduce.reports import ConvergenceReport


class TestSigmaSqrt:
    def test_identity(self):
        np.testing.assert_allclose(sigma_sqrt(np.eye(2)), np.eye(2), atol=1e-14)

    def test_singular_diagonal(self):
        np.testing.assert_allclose(sigma_sqrt(np.diag([4.0, 0.0])), np.diag([2.0, 0.0]), atol=1e-14)

    def test_square_of_root(self):
        Sigma = np.array([[2.0, 1.0], [1.0, 2.0]])
        root = sigma_sqrt(Sigma)
        np.testing.assert_allclose(root @ root.T, Sigma, atol=1e-12)
        np.testing.assert_allclose(root, root.T)

    def test_clearly_negative(self):
        with pytest.raises(NotNearlyPSD):
            sigma_sqrt(np.diag([1.0, -1.0]))

    def test_not_symmetric(self):
        with pytest.raises(ValueError):
            sigma_sqrt(np.array([[1.0, 2.0], [0.0, 1.0]]))


class TestSigmaEstimate:
    def test_readout_of_unit_noise(self):
        system = build_system("ou_readout", 1.0, 0.01)
        estimate = sigma_estimate(system, [0.0], np.zeros(1), 20.0, 5000.0, NoiseStream(12, 0, 1))
        assert estimate.Sigma.shape == (1, 1)
        assert abs(estimate.Sigma[0, 0] - 1.0) <= 4.0 * estimate.stderr[0, 0] + 0.05

    def test_toy_at_origin_has_no_fluctuation(self):
        estimate = sigma_estimate(toy_system(), [0.0], np.zeros(1), 20.0, 1000.0, NoiseStream(0, 0, 1))
        np.testing.assert_array_equal(estimate.Sigma, 0.0)
        assert estimate.plateau

    def test_short_chain_is_rejected(self):
        with pytest.raises(ValueError):
            sigma_estimate(toy_system(), [0.05], None, 20.0, 500.0, NoiseStream(0, 0, 1))


class TestHbar:
    def test_readout_from_a_displaced_start(self):
        system = build_system("ou_readout", 0.1, 0.01)
        value, stderr = hbar_estimate(system, [0.0], [1.0], np.zeros(1), stream=NoiseStream(4, 0, 1))
        assert abs(value[0] - 1.0) <= 4.0 * stderr[0] + 0.01

    def test_no_slow_coupling(self):
        system = build_system("linear_test", 0.1, 0.01)
        value, _ = hbar_estimate(system, [0.1], [0.3], None)
        np.testing.assert_array_equal(value, 0.0)

    def test_cache_derivative_vanishes_without_x_dependence(self):
        system = build_system("ou_readout", 0.1, 0.01)
        cache = HbarCache.build(system, np.zeros(1), [-0.1, 0.0, 0.1], np.linspace(-1.0, 1.0, 5), n_inner=20, T_inner=10.0)
        hbar, dhbar = cache(np.array([[0.0]]), np.array([[0.5]]))
        np.testing.assert_array_equal(dhbar, 0.0)
        assert hbar[0, 0] == pytest.approx(0.5, abs=0.3)

    def test_cache_needs_scalar_variables(self):
        system = build_system("linear_test", 0.1, 0.01, A=np.zeros((2, 2)))
        with pytest.raises(ValueError):
            HbarCache.build(system, None, [0.0, 0.1])


def test_kernel_centering():
    system = build_system("ou_readout", 0.1, 0.01)
    kernel = FluctuationKernel(system, fbar=np.array([0.5]))
    assert kernel([0.0], [0.2])[0] == pytest.approx(-0.3)
    mean, stderr = kernel.centering([0.0], 200, master_seed=1)
    assert abs(mean[0] + 0.5) <= 4.0 * stderr[0]


class TestMartingale:
    def test_uncoupled_slow_variable_has_zero_martingale(self):
        system = build_system("linear_test", 0.1, 0.01)
        cache = HbarCache.build(system, np.zeros(1), [0.0, 0.05, 0.1], [-1.0, 0.0, 1.0], n_inner=10, T_inner=5.0)
        report = martingale_residual(system, [0.05], 0.1, 20, fbar=np.zeros(1), cache=cache)
        np.testing.assert_array_equal(report.M, 0.0)
        assert len(report.rows) == 9
        assert report.passed
        assert report.to_dict()["passed"] is True

    def test_readout_quadratic_variation(self):
        sigma, T = 0.1, 1.0
        system = build_system("ou_readout", sigma, 0.01)

        def cache(x, y):
            return y.copy(), np.zeros_like(y)

        def diffusion(x):
            return np.full(np.shape(x) + (1,), sigma * sigma)

        report = martingale_residual(system, [0.0], T, 500, fbar=np.zeros(1), cache=cache, dt_slow=0.01, diffusion=diffusion, master_seed=5)
        assert abs(report.qv_ratio - 1.0) <= 4.0 * report.qv_stderr + 0.05
        assert report.qv_ratio_sigma == pytest.approx(report.qv_ratio, rel=0.1)
        assert report.eps == 0.01
        assert report.passed == (abs(report.qv_ratio_sigma - 1.0) <= 0.2 and report.residuals_passed)

    def test_quadratic_variation_is_gated(self):
        rows = [ResidualRow("x_s", 0.0, 1.0, 0.0, 1.0)]
        assert not MartingaleReport(rows, qv_ratio=1.5, qv_stderr=0.01).passed
        assert MartingaleReport(rows, qv_ratio=1.1, qv_stderr=0.01).passed

    def test_sigma_ratio_takes_precedence(self):
        rows = [ResidualRow("x_s", 0.0, 1.0, 0.0, 1.0)]
        report = MartingaleReport(rows, qv_ratio=1.0, qv_stderr=0.01, qv_ratio_sigma=0.7)
        assert report.residuals_passed
        assert not report.qv_passed
        assert report.to_dict()["qv_passed"] is False

    def test_undefined_ratio_is_not_gated(self):
        rows = [ResidualRow("x_s", 0.0, 1.0, 0.0, 1.0)]
        assert MartingaleReport(rows, qv_ratio=float("nan"), qv_stderr=float("nan")).passed

    def test_failing_residual_fails_the_report(self):
        rows = [ResidualRow("x_s", 0.0, 1.0, 5.0, 1.0)]
        assert not MartingaleReport(rows, qv_ratio=1.0, qv_stderr=0.01).passed


class TestIntermediateModel:
    def test_zero_diffusion_follows_the_averaged_path(self):
        fbar = closed_form_fbar(0.1)

        def diffusion(x):
            return np.zeros(x.shape + (1,))

        path = integrate_intermediate([[0.0]], fbar, diffusion, 0.01, [0.05], 1.0, 1e-3, NoiseStream(0, 0, 1))
        averaged = integrate_averaged([[0.0]], fbar, [0.05], 1.0, 1e-3)
        np.testing.assert_allclose(path.slow, averaged.slow, atol=1e-5)

    def test_noise_scales_with_sqrt_eps(self):
        def diffusion(x):
            return np.ones(x.shape + (1,))

        streams = replica_streams(3, 500, 1)
        large = integrate_intermediate_ensemble([[0.0]], None, diffusion, 1e-2, [0.0], 1.0, 1e-2, streams)
        small = integrate_intermediate_ensemble([[0.0]], None, diffusion, 1e-3, [0.0], 1.0, 1e-2, streams)
        ratio = np.var(large.slow[:, -1]) / np.var(small.slow[:, -1])
        assert ratio == pytest.approx(10.0, rel=1e-6)
        assert np.var(large.slow[:, -1]) == pytest.approx(1e-2, rel=0.25)

    def test_weak_statistics_shape(self):
        mean, stderr = weak_statistics(np.array([[0.1], [0.3]]))
        assert mean.shape == (3, 1)
        assert mean[1, 0] == pytest.approx(0.05)


def test_sigma_table_on_common_noise():
    system = build_system("ou_readout", 1.0, 0.01)
    table = tabulate_sigma(system, [-0.1, 0.1], None, 20.0, 2000.0, master_seed=2)
    values = table.Sigma.values
    assert values.shape == (2, 1, 1)
    assert values[0, 0, 0] == values[1, 0, 0]
    assert abs(values[0, 0, 0] - 1.0) <= 4.0 * table.Sigma.stderr[0, 0, 0] + 0.1
    assert table([0.0]).shape == (1, 1)
    assert table.to_csv().splitlines()[0] == "x_1,Sigma_11,stderr_11,window,plateau"


def _sweep(eps, intermediate, averaged_weak, averaged_strong):
    se = [1e-4] * len(eps)
    return IntermediateSweep(
        intermediate=ConvergenceReport.from_rows("i", zip(eps, intermediate, se)),
        averaged=ConvergenceReport.from_rows("a", zip(eps, averaged_strong, se)),
        averaged_weak=ConvergenceReport.from_rows("w", zip(eps, averaged_weak, se)),
    )


class TestIntermediateSweepVerdict:
    eps = [1e-1, 10 ** -1.5, 1e-2, 10 ** -2.5]

    def test_ordering_is_judged_against_the_averaged_weak_error(self):
        sweep = _sweep(self.eps, [0.02] * 4, [0.01] * 4, [0.05] * 4)
        assert sweep.ordering == [False] * 4
        assert not sweep.passed

    def test_flat_intermediate_error_fails_the_rate_window(self):
        sweep = _sweep(self.eps, [0.001] * 4, [0.01] * 4, [0.05] * 4)
        assert all(sweep.ordering)
        assert not sweep.rate_ok
        assert not sweep.passed

    def test_first_order_error_below_the_averaged_model_passes(self):
        sweep = _sweep(self.eps, [0.1 * e for e in self.eps], [0.1 * np.sqrt(e) for e in self.eps], [1.0] * 4)
        assert sweep.intermediate.slope == pytest.approx(1.0)
        assert sweep.passed
        summary = sweep.summary()
        assert summary["passed"] and summary["rate_ok"]
        assert [row[0] for row in summary["averaged_weak_rows"]] == pytest.approx(self.eps)
        assert summary["averaged_rows"][0][1] == 1.0

    def test_ties_are_strict_only_for_small_eps(self):
        sweep = _sweep([0.1, 0.01], [0.02, 0.002], [0.02, 0.002], [1.0, 1.0])
        assert sweep.ordering == [True, False]

    def test_exact_zero_errors_pass(self):
        sweep = _sweep([0.1, 0.01, 0.001], [0.0] * 3, [0.0] * 3, [0.0] * 3)
        assert sweep.intermediate.exact_zero
        assert sweep.ordering == [True] * 3
        assert sweep.passed


def test_sigma_does_not_depend_on_eps():
    system = build_system("ou_readout", 1.0, 1e-2)
    first = sigma_estimate(system, [0.0], np.zeros(1), 20.0, 2000.0, NoiseStream(9, 0, 1))
    second = sigma_estimate(system.with_eps(1e-3), [0.0], np.zeros(1), 20.0, 2000.0, NoiseStream(9, 0, 1))
    combined = np.hypot(first.stderr[0, 0], second.stderr[0, 0])
    assert abs(first.Sigma[0, 0] - second.Sigma[0, 0]) <= 3.0 * combined + 1e-15


def test_euler_maruyama_weak_order():
    def diffusion(x):
        return np.asarray(x)[..., None]

    x0, T = 1.0, 1.0
    streams = replica_streams(12, 1000, 1)
    rows = []
    for dt in [0.1, 0.05, 0.025, 0.0125]:
        finals = integrate_intermediate_ensemble([[-1.0]], None, diffusion, 1e-6, [x0], T, dt, streams).slow[:, -1, 0]
        rows.append((dt, abs(finals.mean() - x0 * np.exp(-T)), finals.std(ddof=1) / np.sqrt(finals.size)))
    order = np.polyfit(np.log([r[0] for r in rows]), np.log([r[1] for r in rows]), 1)[0]
    assert order >= 0.8


TOY_EPS_LIST = [1e-1, 10 ** -1.5, 1e-2, 10 ** -2.5]


@pytest.mark.slow
def test_toy_intermediate_model_is_first_order_and_beats_averaging():
    sweep = intermediate_error_sweep(
        toy_system(0.1, 1e-1),
        [0.05],
        1.0,
        TOY_EPS_LIST,
        10000,
        fbar=closed_form_fbar(0.1),
        diffusion=closed_form_sigma_bar(0.1),
        master_seed=8,
    )
    assert sweep.intermediate.slope_within(0.7, 1.3)
    assert all(sweep.ordering)
    assert sweep.passed


def _toy_diffusion(x):
    root = closed_form_sigma_bar(0.1)(x)
    return root @ np.swapaxes(root, -1, -2)


@pytest.mark.slow
def test_toy_martingale_residuals_vanish():
    report = martingale_residual(toy_system(0.1, 1e-2), [0.05], 1.0, 2000, fbar=closed_form_fbar(0.1), master_seed=13)
    assert report.residuals_passed


@pytest.mark.slow
def test_toy_quadratic_variation_matches_sigma():
    report = martingale_residual(
        toy_system(0.1, 1e-3), [0.2], 1.0, 400, fbar=closed_form_fbar(0.1), diffusion=_toy_diffusion, master_seed=14
    )
    assert report.qv_ratio_sigma == pytest.approx(1.0, abs=0.2)
    assert report.qv_passed
