import numpy as np
import pytest

from slowfastreduce.benchmark import build_system, toy_system
from slowfastreduce.models import OutsidePathRange, SamplePath
from slowfastreduce.paths import (
    STATIONARY,
    NoiseStream,
    NonGridShift,
    NonGridStep,
    fast_substep,
    integrate_ensemble,
    integrate_slowfast,
    moment_sanity,
    ou_exact_step,
    replica_streams,
    sample_stationary_ou,
    shift,
    simulate_frozen_fast,
    stationary_covariance,
)


@pytest.fixture
def stream():
    return NoiseStream(master_seed=11, replica_index=3, dim=2, dt=0.1)


class TestNoiseStream:
    def test_same_key_same_values(self, stream):
        again = NoiseStream(master_seed=11, replica_index=3, dim=2, dt=0.1)
        np.testing.assert_array_equal(stream.normals(0, 50), again.normals(0, 50))

    def test_replicas_are_distinct(self, stream):
        other = NoiseStream(master_seed=11, replica_index=4, dim=2, dt=0.1)
        assert not np.allclose(stream.normals(0, 50), other.normals(0, 50))

    def test_branches_are_distinct(self, stream):
        assert not np.allclose(stream.normals(0, 10), stream.normals(0, 10, STATIONARY))

    def test_shift_reads_later_steps(self, stream):
        np.testing.assert_array_equal(shift(stream, 0.3).normals(0, 5), stream.normals(3, 8))

    def test_shifts_compose(self, stream):
        np.testing.assert_array_equal(
            shift(shift(stream, 0.2), -0.5).normals(0, 8), shift(stream, -0.3).normals(0, 8)
        )

    def test_off_grid_shift(self, stream):
        with pytest.raises(NonGridShift):
            shift(stream, 0.05)

    def test_two_sided_reads_agree(self, stream):
        whole = stream.normals(-5, 5)
        np.testing.assert_array_equal(whole[:5], stream.normals(-5, 0))
        np.testing.assert_array_equal(whole[5:], stream.normals(0, 5))
        np.testing.assert_array_equal(stream.shifted(-5).normals(0, 10), whole)

    def test_block_boundary(self, stream):
        whole = stream.normals(1000, 1050)
        np.testing.assert_array_equal(whole[30:], stream.normals(1030, 1050))

    def test_increments_scale(self, stream):
        np.testing.assert_allclose(stream.increments(0, 4), np.sqrt(0.1) * stream.normals(0, 4))


class TestOrnsteinUhlenbeck:
    def test_zero_noise_is_exponential_decay(self):
        state = np.array([2.0])
        new = ou_exact_step([[-1.0]], 0.0, 0.1, state, np.array([0.7]), 0.05)
        np.testing.assert_allclose(new, 2.0 * np.exp(-0.5))

    def test_long_steps_reach_stationary_variance(self):
        rng = np.random.default_rng(0)
        state = np.zeros((20000, 1))
        for _ in range(10):
            state = ou_exact_step([[-1.0]], 1.0, 1.0, state, np.sqrt(5.0) * rng.standard_normal(state.shape), 5.0)
        assert np.var(state) == pytest.approx(0.5, abs=0.03)

    def test_stationary_covariance(self):
        np.testing.assert_allclose(stationary_covariance(-np.eye(2), 1.0), 0.5 * np.eye(2), atol=1e-12)

    def test_stationary_draws(self):
        draws = np.array(
            [sample_stationary_ou([[-1.0]], 1.0, 0.01, s) for s in replica_streams(5, 5000, 1)]
        )
        assert np.var(draws) == pytest.approx(0.5, abs=0.05)


@pytest.mark.parametrize(
    "dt_slow, eps, expected",
    [(1e-3, 1e-2, (1, 0.1)), (1e-2, 1e-3, (100, 0.1)), (1e-3, 1.0, (1, 1e-3))],
)
def test_fast_substep(dt_slow, eps, expected):
    n_sub, dtau = fast_substep(dt_slow, eps)
    assert n_sub == expected[0]
    assert dtau == pytest.approx(expected[1])


class TestIntegration:
    def test_linear_slow_part_decays_exactly(self):
        system = build_system("linear_test", 0.1, 0.01, A=[[-1.0]])
        path = integrate_slowfast(system, [1.0], [0.0], 1.0, 1e-3, NoiseStream(0, 0, 1, 0.1))
        assert len(path) == 1001
        assert path.slow[-1, 0] == pytest.approx(np.exp(-1.0), rel=1e-4)

    def test_toy_ensemble_stays_bounded(self):
        system = toy_system()
        streams = replica_streams(2, 20, 1, 0.1)
        ensemble = integrate_ensemble(system, [0.05], None, 0.1, 1e-3, streams)
        assert ensemble.slow.shape == (20, 101, 1)
        assert not ensemble.blown_up.any()
        assert np.max(np.abs(ensemble.slow)) <= 0.5

    def test_horizon_off_grid(self):
        system = build_system("linear_test", 0.1, 0.01)
        with pytest.raises(NonGridStep):
            integrate_ensemble(system, [0.0], [0.0], 1.0, 0.3, replica_streams(0, 2, 1, 0.1))

    def test_substep_off_noise_grid(self):
        system = build_system("linear_test", 0.1, 0.01)
        with pytest.raises(NonGridStep):
            integrate_ensemble(system, [0.0], [0.0], 0.1, 1e-3, replica_streams(0, 2, 1, 0.3))

    def test_blowup_truncates_path(self):
        system = build_system("linear_test", 0.1, 0.1, A=[[50.0]])
        path = integrate_slowfast(system, [1.0], [0.0], 1.0, 1e-3, NoiseStream(0, 0, 1, 0.01))
        assert path.blown_up
        assert 1 < len(path) < 1001
        assert np.all(np.isfinite(path.slow))
        assert np.max(np.abs(path.slow)) <= 1e12

    def test_replicas_do_not_depend_on_chunking(self):
        from slowfastreduce.utils import ReplicaPool

        system = toy_system()
        streams = replica_streams(4, 9, 1, 0.1)
        serial = integrate_ensemble(system, [0.05], [0.0], 0.05, 1e-3, streams, ReplicaPool(n_workers=1, chunk_size=9))
        chunked = integrate_ensemble(system, [0.05], [0.0], 0.05, 1e-3, streams, ReplicaPool(n_workers=3, chunk_size=2))
        np.testing.assert_allclose(serial.slow, chunked.slow, rtol=1e-13, atol=0)


class TestFrozenFast:
    def test_restart_continues_the_chain(self):
        system = build_system("linear_test", 1.0, 0.1)
        streams = replica_streams(9, 4, 1, 0.1)
        full = simulate_frozen_fast(system, [0.0], [0.0], 10, streams)
        tail = simulate_frozen_fast(system, [0.0], full[:, 5], 5, streams, start=5)
        np.testing.assert_allclose(tail, full[:, 5:])

    def test_shape(self):
        system = build_system("fast_forced", 1.0, 0.1)
        out = simulate_frozen_fast(system, [0.2], [0.0], 7, replica_streams(1, 3, 1, 0.05), stride=2)
        assert out.shape == (3, 8, 1)


def test_interpolate_between_grid_points():
    path = SamplePath(t0=0.0, dt=0.5, slow=[[0.0], [1.0]], fast=[[2.0], [4.0]])
    slow, fast = path.interpolate(0.25)
    assert slow[0] == pytest.approx(0.5)
    assert fast[0] == pytest.approx(3.0)
    with pytest.raises(OutsidePathRange):
        path.interpolate(0.6)


def test_moment_sanity_near_origin():
    report = moment_sanity(toy_system(), [0.0, 0.0], 0.1, 100)
    assert report.n_blown == 0
    assert 0.0 < report.ratio < 1.0
    with pytest.raises(ValueError):
        moment_sanity(toy_system(), [0.0, 0.0], 0.1, 10)


@pytest.mark.slow
def test_exact_ou_keeps_the_stationary_covariance():
    B, sigma, eps, dt = np.array([[-1.0]]), 0.5, 0.01, 0.001
    target = stationary_covariance(B, sigma)[0, 0]
    rng = np.random.default_rng(21)
    state = rng.normal(scale=np.sqrt(target), size=(1000, 1))
    squares = np.zeros(1000)
    n_steps = 1000
    for _ in range(n_steps):
        state = ou_exact_step(B, sigma, eps, state, rng.normal(scale=np.sqrt(dt), size=(1000, 1)), dt)
        squares += state[:, 0] ** 2
    per_chain = squares / n_steps
    se = per_chain.std(ddof=1) / np.sqrt(per_chain.size)
    assert abs(per_chain.mean() - target) <= 3.0 * se


def test_exact_ou_step_depends_on_the_fast_clock_only():
    B = np.array([[-1.0, 0.5], [0.0, -2.0]])
    state = np.array([[0.3, -0.2]])
    normals = np.array([[0.7, -1.1]])
    coarse = ou_exact_step(B, 0.4, 0.1, state, normals * np.sqrt(0.01), 0.01)
    fine = ou_exact_step(B, 0.4, 0.001, state, normals * np.sqrt(1e-4), 1e-4)
    np.testing.assert_allclose(coarse, fine, rtol=1e-12)


@pytest.mark.slow
def test_strong_order_on_frozen_noise():
    system = toy_system(0.1, 0.1)
    streams = replica_streams(8, 200, 1, dt=0.0125)
    levels = [0.01, 0.005, 0.0025, 0.00125]
    finals = [integrate_ensemble(system, [0.05], [0.0], 1.0, dt, streams).slow[:, -1, 0] for dt in levels]
    rows = []
    for dt, coarse, fine in zip(levels, finals, finals[1:]):
        gap = np.abs(coarse - fine)
        rows.append((dt, gap.mean(), gap.std(ddof=1) / np.sqrt(gap.size)))
    order = np.polyfit(np.log([r[0] for r in rows]), np.log([r[1] for r in rows]), 1)[0]
    assert order >= 0.8
