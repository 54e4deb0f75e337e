import numpy as np
import pytest

from slowfastreduce.averaging import (
    EmpiricalFunction,
    TableRangeExceeded,
    averaging_error_sweep,
    fbar_ensemble,
    fbar_time_average,
    integrate_averaged,
    mixing_rate,
    mixing_time,
    sweep_seed,
    tabulate_fbar,
)
from slowfastreduce.benchmark import build_system, closed_form_fbar, toy_system
from slowfastreduce.manifold import default_burn_in
from slowfastreduce.paths import NoiseStream
from slowfastreduce.systems import AssumptionReport


class TestEmpiricalFunction:
    def test_linear_interpolation(self):
        table = EmpiricalFunction.from_callable(lambda p: 2.0 * p, [[0.0, 1.0, 2.0]])
        value, stderr = table.evaluate([0.5])
        assert value[0] == pytest.approx(1.0)
        assert stderr[0] == 0.0
        np.testing.assert_allclose(table(np.array([[0.25], [1.5]])), [[0.5], [3.0]])

    def test_outside_the_grid(self):
        table = EmpiricalFunction.from_callable(lambda p: p, [[0.0, 1.0]], label="fbar")
        with pytest.raises(TableRangeExceeded):
            table([1.5])

    def test_single_node(self):
        table = EmpiricalFunction.from_callable(lambda p: np.array([7.0]), [[0.3]])
        assert table([0.3])[0] == 7.0

    def test_bilinear_grid(self):
        table = EmpiricalFunction.from_callable(lambda p: np.array([p[0] + 2.0 * p[1]]), ([0.0, 1.0], [0.0, 1.0]))
        assert table([0.5, 0.5])[0] == pytest.approx(1.5)
        assert table.points().shape == (4, 2)

    def test_stderr_is_the_largest_neighbor(self):
        table = EmpiricalFunction(
            values=[[0.0], [1.0], [2.0]], stderr=[[0.1], [0.3], [0.2]], axes=([0.0, 1.0, 2.0],)
        )
        assert table.evaluate([0.5])[1][0] == pytest.approx(0.3)
        assert table.evaluate([1.7])[1][0] == pytest.approx(0.3)

    def test_scattered_nodes_use_nearest(self):
        table = EmpiricalFunction(
            values=[[1.0], [2.0]], stderr=[[0.0], [0.0]], nodes=np.array([[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]])
        )
        assert table([0.9, 0.9, 0.9])[0] == 2.0

    def test_lipschitz_and_csv(self):
        table = EmpiricalFunction.from_callable(lambda p: 2.0 * p, [[0.0, 0.5, 1.0]])
        assert table.lipschitz_estimate() == pytest.approx(2.0)
        assert table.to_csv().splitlines()[0] == "x_1,value_1,stderr_1"

    def test_unsorted_axes_are_rejected(self):
        with pytest.raises(ValueError):
            EmpiricalFunction(values=[[0.0], [1.0]], stderr=[[0.0], [0.0]], axes=([1.0, 0.0],))


class TestIntegrateAveraged:
    def test_zero_drift_is_constant(self):
        path = integrate_averaged([[0.0]], lambda x: np.zeros_like(x), [0.2], 1.0, 0.1)
        np.testing.assert_array_equal(path.slow, 0.2)
        assert path.fast.shape == (11, 0)

    def test_toy_drift_moves_toward_equilibrium(self):
        path = integrate_averaged([[0.0]], closed_form_fbar(0.1), [0.05], 10.0, 0.1)
        assert np.all(np.diff(path.slow[:, 0]) > 0)
        assert path.slow[-1, 0] < 0.1

    def test_fourth_order(self):
        def exact(t):
            return 1.0 / np.sqrt(2.0 * np.exp(2.0 * t) - 1.0)

        errors = []
        for dt in (0.2, 0.1, 0.05):
            path = integrate_averaged([[-1.0]], lambda x: -x ** 3, [1.0], 1.0, dt)
            errors.append(abs(path.slow[-1, 0] - exact(1.0)))
        assert np.log2(errors[1] / errors[2]) >= 3.5
        assert errors[0] > errors[1] > errors[2]

    def test_leaving_the_table_reports_the_time(self):
        table = EmpiricalFunction.from_callable(lambda p: np.array([1.0]), [np.linspace(0.0, 0.5, 6)])
        with pytest.raises(TableRangeExceeded) as caught:
            integrate_averaged([[0.0]], table, [0.0], 1.0, 0.1)
        assert 0.4 <= caught.value.t_exit <= 0.6


class TestFbarEstimators:
    def test_ensemble_mean_of_centered_readout(self):
        system = build_system("ou_readout", 0.1, 0.01)
        value, stderr = fbar_ensemble(system, [0.05], 400, master_seed=2)
        assert stderr[0] > 0
        assert abs(value[0]) <= 4.0 * stderr[0]

    def test_toy_drift_vanishes_at_origin(self):
        value, stderr = fbar_ensemble(toy_system(), [0.0], 50)
        np.testing.assert_array_equal(value, 0.0)
        np.testing.assert_array_equal(stderr, 0.0)

    def test_time_average_of_centered_readout(self):
        system = build_system("ou_readout", 0.1, 0.01)
        value, stderr = fbar_time_average(system, [0.05], 10.0, NoiseStream(6, 0, 1))
        assert abs(value[0]) <= 4.0 * stderr[0]

    def test_too_few_replicas(self):
        with pytest.raises(ValueError):
            fbar_ensemble(toy_system(), [0.05], 1)

    def test_single_node_table_matches_ensemble(self):
        system = toy_system()
        table = tabulate_fbar(system, [0.05], "ensemble", 200, master_seed=3)
        value, stderr = fbar_ensemble(system, [0.05], 200, 3, default_burn_in(system))
        np.testing.assert_array_equal(table.values[0], value)
        np.testing.assert_array_equal(table.stderr[0], stderr)

    def test_unknown_estimator(self):
        with pytest.raises(ValueError):
            tabulate_fbar(toy_system(), [0.05], "guess", 10)


def test_linear_system_has_no_averaging_error():
    system = build_system("linear_test", 0.1, 0.1, A=[[-1.0]])
    table = EmpiricalFunction.from_callable(lambda p: np.zeros(1), [np.linspace(-1.0, 1.0, 5)])
    report = averaging_error_sweep(system, [0.5], 0.5, [0.1, 0.05, 0.02], 4, dt_slow=1e-2, fbar_table=table)
    assert list(report.eps) == [0.1, 0.05, 0.02]
    assert np.all(report.errors < 1e-5)


def test_mixing_rate_of_linear_fast_part():
    system = build_system("linear_test", 0.1, 0.01)
    report = mixing_rate(system, [0.0], [0.5], 10)
    assert report.rate_fast == pytest.approx(2.0, rel=1e-3)
    assert report.rate == pytest.approx(200.0, rel=1e-3)


def test_mixing_time():
    assert mixing_time(AssumptionReport(alpha=0.0, beta=-1.0, lip_g=0.5)) == pytest.approx(2.0)
    assert mixing_time(AssumptionReport(alpha=0.0, beta=-1.0, lip_g=2.0)) == pytest.approx(1.0)


def test_sweep_seeds_are_distinct():
    seeds = [sweep_seed(7, i) for i in range(10)]
    assert len(set(seeds)) == 10
    assert all(0 <= s < 2 ** 63 for s in seeds)


def test_averaged_drift_does_not_depend_on_eps():
    system = toy_system(0.1, 1e-2)
    first, se_first = fbar_ensemble(system, [0.05], 400, master_seed=6)
    second, se_second = fbar_ensemble(system.with_eps(1e-3), [0.05], 400, master_seed=6)
    assert abs(first[0] - second[0]) <= 3.0 * np.hypot(se_first[0], se_second[0]) + 1e-15


@pytest.mark.slow
def test_toy_averaging_rate_is_one_half():
    table = EmpiricalFunction.from_callable(closed_form_fbar(0.1), [np.linspace(-0.15, 0.15, 61)], label="fbar")
    report = averaging_error_sweep(
        toy_system(0.1, 1e-1), [0.05], 1.0, [1e-1, 10 ** -1.5, 1e-2, 10 ** -2.5], 10000, 1e-3, table, master_seed=7
    )
    assert report.slope_within(0.35, 0.65)
