import numpy as np
import pytest

from slowfastreduce.benchmark import build_system, toy_system
from slowfastreduce.models import InvalidSystemError, SlowFastSystem
from slowfastreduce.nonlinearities import toy_f, toy_g
from slowfastreduce.systems import (
    AssumptionReport,
    DegenerateInterval,
    FastNotDissipative,
    assess_assumptions,
    check_completeness_gap,
    check_h1,
    check_h2,
    estimate_lipschitz,
    manifold_lipschitz_bound,
)


class TestCheckH1:
    def test_scalar_bounds_are_the_entries(self):
        system = build_system("linear_test", 0.1, 0.1, A=[[0.0]], B=[[-1.0]])
        assert check_h1(system) == pytest.approx((0.0, -1.0))

    def test_growing_fast_part_is_rejected(self):
        system = build_system("linear_test", 0.1, 0.1, A=[[0.0]], B=[[1.0]])
        with pytest.raises(FastNotDissipative):
            check_h1(system)

    def test_rotation_has_zero_growth(self):
        system = build_system("linear_test", 0.1, 0.1, A=[[0.0, 1.0], [-1.0, 0.0]], B=[[-1.0, 0.0], [0.0, -2.0]])
        alpha, beta = check_h1(system)
        assert alpha == pytest.approx(0.0, abs=1e-12)
        assert beta == pytest.approx(-1.0)


class TestCheckH2:
    @pytest.mark.parametrize(
        "alpha, beta, lip_f, lip_g, eps, expected",
        [
            (0.0, -1.0, 0.0, 0.0, 0.1, True),
            (1.0, -1.0, 0.1, 0.1, 0.01, True),
            (0.1, -0.1, 10.0, 10.0, 1.0, False),
        ],
    )
    def test_examples(self, alpha, beta, lip_f, lip_g, eps, expected):
        report = AssumptionReport(alpha=alpha, beta=beta, lip_f=lip_f, lip_g=lip_g)
        holds, interval = check_h2(report, eps)
        assert holds is expected
        assert (interval is not None) is expected

    def test_interval_lies_in_admissible_range(self):
        report = AssumptionReport(alpha=1.0, beta=-1.0, lip_f=0.1, lip_g=0.1)
        _, (low, high) = check_h2(report, 0.01)
        assert -100.0 < low <= high < 1.0

    def test_empty_weight_range(self):
        report = AssumptionReport(alpha=0.0, beta=0.5)
        with pytest.raises(DegenerateInterval):
            check_h2(report, 1.0)


class TestCompletenessGap:
    def test_zero_lipschitz_constants(self):
        report = AssumptionReport(alpha=0.0, beta=-1.0)
        holds, _, gamma = check_completeness_gap(report, 0.1)
        assert holds
        assert gamma == pytest.approx(1.0)

    def test_small_lipschitz_constants(self):
        report = AssumptionReport(alpha=0.0, beta=-1.0, lip_f=0.1, lip_g=0.1)
        holds, delta, gamma = check_completeness_gap(report, 0.01)
        assert holds
        assert delta == pytest.approx(10.0)
        assert gamma == pytest.approx(1.0 - 0.1 - 0.01)

    def test_toy_constants_fail_the_gap(self):
        report = assess_assumptions(toy_system())
        assert report.beta + report.lip_g > 0
        assert report.gap_holds is False


class TestEstimateLipschitz:
    def test_linear_map(self):
        estimate = estimate_lipschitz(lambda p: 2.0 * p, [(-1.0, 1.0)], n_samples=512, seed=3)
        assert estimate == pytest.approx(2.0, abs=1e-6)

    def test_constant_map(self):
        assert estimate_lipschitz(lambda p: np.ones_like(p), [(-1.0, 1.0), (0.0, 2.0)]) == 0.0

    def test_toy_f_near_origin(self):
        estimate = estimate_lipschitz(lambda p: toy_f(p[..., :1], p[..., 1:]), [(-0.25, 0.25)] * 2)
        assert estimate >= 0.2

    def test_more_samples_never_lower_the_estimate(self):
        def fn(p):
            return np.sin(3.0 * p)

        small = estimate_lipschitz(fn, [(-1.0, 1.0)], n_samples=64, seed=1)
        large = estimate_lipschitz(fn, [(-1.0, 1.0)], n_samples=1024, seed=1)
        assert large >= small


class TestSystemDefinition:
    def test_toy_values(self):
        assert toy_f(np.array([0.1]), np.array([0.1]))[0] == pytest.approx(-0.01)
        assert toy_f(np.array([1.0]), np.array([1.0]))[0] == 0.0
        assert toy_g(np.array([0.1]), np.array([0.0]))[0] == pytest.approx(0.01)

    def test_eps_out_of_range(self):
        with pytest.raises(InvalidSystemError):
            build_system("linear_test", 0.1, 0.0)

    def test_nonlinearity_must_vanish_at_origin(self):
        with pytest.raises(InvalidSystemError):
            SlowFastSystem(
                A=[[0.0]],
                B=[[-1.0]],
                f=lambda x, y: np.ones(np.broadcast_shapes(x.shape, y.shape)),
                g=lambda x, y: np.zeros(np.broadcast_shapes(x.shape, y.shape)),
                sigma=1.0,
                eps=0.1,
            )

    def test_declared_constants_are_used(self):
        report = assess_assumptions(build_system("weak_coupling", 0.1, 0.01))
        assert report.lip_f == pytest.approx(0.1)
        assert not report.lipschitz_is_lower_bound
        assert report.h2_holds

    def test_manifold_lipschitz_bound_without_fast_coupling(self):
        report = AssumptionReport(alpha=0.0, beta=-1.0)
        assert manifold_lipschitz_bound(report, 0.1, -5.0) == 0.0


class TestCertifiedBounds:
    @pytest.mark.parametrize(
        "A, B",
        [
            ([[0.5, 1.0], [-1.0, 0.5]], [[-1.0, 0.5], [0.0, -2.0]]),
            ([[1.0, 0.5], [0.5, 2.0]], [[-3.0, 1.0], [-1.0, -3.0]]),
            ([[0.0]], [[-0.5]]),
        ],
    )
    def test_exponential_bounds_hold_on_a_time_grid(self, A, B):
        from scipy.linalg import expm

        system = build_system("linear_test", 0.1, 0.1, A=A, B=B)
        alpha, beta = check_h1(system)
        A, B = np.asarray(A, dtype=float), np.asarray(B, dtype=float)
        rng = np.random.default_rng(11)
        vectors_a = rng.normal(size=(16, A.shape[0]))
        vectors_a /= np.linalg.norm(vectors_a, axis=1, keepdims=True)
        vectors_b = rng.normal(size=(16, B.shape[0]))
        vectors_b /= np.linalg.norm(vectors_b, axis=1, keepdims=True)
        for t in np.linspace(0.0, 10.0, 41):
            backward = np.linalg.norm(vectors_a @ expm(-t * A).T, axis=1)
            forward = np.linalg.norm(vectors_b @ expm(t * B).T, axis=1)
            assert np.all(backward <= np.exp(-alpha * t) * (1.0 + 1e-8))
            assert np.all(forward <= np.exp(beta * t) * (1.0 + 1e-8))

    @pytest.mark.parametrize(
        "alpha, beta, lip_f, lip_g, eps",
        [
            (0.0, -1.0, 0.1, 0.1, 0.01),
            (0.5, -2.0, 1.0, 0.5, 0.05),
            (0.2, -1.0, 2.0, 0.2, 0.001),
        ],
    )
    def test_closed_form_delta_matches_grid_minimum(self, alpha, beta, lip_f, lip_g, eps):
        from slowfastreduce.systems import gap_objective

        report = AssumptionReport(alpha=alpha, beta=beta, lip_f=lip_f, lip_g=lip_g)
        holds, delta, _ = check_completeness_gap(report, eps)
        assert holds
        grid = np.logspace(-4, 4, 200001)
        brute = float(np.min(gap_objective(grid, report, eps)))
        assert float(gap_objective(delta, report, eps)) == pytest.approx(brute, abs=1e-6)
