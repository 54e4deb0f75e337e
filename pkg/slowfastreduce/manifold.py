"""Random slow manifold by truncated Lyapunov-Perron iteration.

All constructions run on the fast clock tau = t/eps, where the stationary OU
process eta is eps-free. In these units the fixed point of the history map is

    X(tau) = e^{eps tau A} X0 - eps * int_tau^0 e^{eps (tau - s) A} F(s) ds
    Y(tau) = int_{-T0}^tau e^{(tau - s) B} G(s) ds

with F = f(X, Y + eta), G = g(X, Y + eta), and h^eps(X0) = Y(0). At eps = 0 the
slow history is frozen at X0 and Y(0) is the pullback sample h^0(X0). Both use
the same grid and the same exponential-trapezoid quadrature, so their
difference isolates the eps effect on a shared noise path.
"""

from dataclasses import dataclass, field
from functools import lru_cache
from typing import List, Optional, Sequence, Tuple
import logging

import numpy as np
from scipy import linalg, optimize

from .models import EnsemblePath, SlowFastSystem
from .paths import (
    DEFAULT_NOISE_DT,
    STATIONARY,
    NonGridStep,
    covariance_factor,
    grid_steps,
    integrate_ensemble,
    ou_propagator,
    replica_streams,
    stacked_normals,
    stationary_covariance,
    BlowUp,
    NoiseStream,
)
from .reports import ConvergenceReport
from .systems import AssumptionReport, assess_assumptions, h2_expression, manifold_lipschitz_bound
from .utils import ReplicaPool, SlowFastError, apply_matrix, float_text, mean_and_stderr

logger = logging.getLogger(__name__)

# Configuration Constants
DEFAULT_TOL = 1e-10
DEFAULT_N_GRID = 2048
DEFAULT_MAX_ITER = 200
NO_CONTRACTION_STREAK = 3
IMPLICIT_MAX_ITER = 60
IMPLICIT_TOL = 1e-15
ATTRACTION_CUTOFF = 1e-3
ATTRACTION_FIT_STEPS = 8


class NoContraction(SlowFastError):
    """Raised when the history map stops contracting."""

    pass


class TruncationTooShort(SlowFastError):
    """Raised when the truncated history still feeds the fast integral above tolerance."""

    pass


class DistanceUnderflow(SlowFastError):
    """Raised when a decay fit has fewer than two usable points."""

    pass


@dataclass(frozen=True)
class HistoryGrid:
    """Nodes -T0 = s_0 < ... < s_K = 0 as integer multiples of the noise step.

    Uniform near 0, geometrically coarsened toward -T0 once the uniform grid
    would need more than ``n_grid`` nodes.
    """

    steps: np.ndarray
    dt: float

    @classmethod
    def build(cls, t_trunc: float, dt: float, n_grid: int = DEFAULT_N_GRID) -> "HistoryGrid":
        total = max(1, int(np.ceil(t_trunc / dt - 1e-9)))
        if total <= n_grid - 1:
            return cls(steps=np.arange(-total, 1), dt=dt)

        n_uniform = (n_grid - 1) // 2
        n_geometric = n_grid - 1 - n_uniform
        remaining = total - n_uniform

        def excess(ratio: float) -> float:
            return float(np.sum(ratio ** np.arange(1, n_geometric + 1)) - remaining)

        ratio = optimize.brentq(excess, 1.0 + 1e-12, 2.0) if excess(2.0) > 0 else 2.0
        cells = np.maximum(1, np.round(ratio ** np.arange(1, n_geometric + 1))).astype(int)
        cells[-1] = max(1, remaining - int(cells[:-1].sum()))
        lengths = np.concatenate([np.ones(n_uniform, dtype=int), cells])
        steps = -np.concatenate([[0], np.cumsum(lengths)])[::-1]
        return cls(steps=steps, dt=dt)

    @property
    def times(self) -> np.ndarray:
        return self.steps * self.dt

    @property
    def cells(self) -> np.ndarray:
        return np.diff(self.steps)

    @property
    def n_nodes(self) -> int:
        return self.steps.size

    @property
    def t_trunc(self) -> float:
        return -float(self.steps[0]) * self.dt


@dataclass(frozen=True)
class ExponentialTrapezoid:
    """Exact kernel e^{M(c-u)} against a linear integrand over one cell of length c.

    ``phi`` = e^{Mc}; the cell integral of e^{M(c-u)} G(u) is w0 G(0) + w1 G(c).
    """

    phi: np.ndarray
    w0: np.ndarray
    w1: np.ndarray


@lru_cache(maxsize=4096)
def _trapezoid(m_bytes: bytes, dim: int, length: float) -> ExponentialTrapezoid:
    M = np.frombuffer(m_bytes, dtype=float).reshape(dim, dim)
    identity, zeros = np.eye(dim), np.zeros((dim, dim))
    block = np.block(
        [
            [M, identity, zeros],
            [zeros, zeros, identity],
            [zeros, zeros, zeros],
        ]
    )
    expm = linalg.expm(block * length)
    first = expm[:dim, dim : 2 * dim]
    moment = expm[:dim, 2 * dim :]
    w1 = moment / length
    return ExponentialTrapezoid(phi=expm[:dim, :dim], w0=first - w1, w1=w1)


def exponential_trapezoid(M: np.ndarray, length: float) -> ExponentialTrapezoid:
    """Cached exponential-trapezoid weights for kernel matrix ``M`` and cell ``length``."""
    M = np.ascontiguousarray(np.atleast_2d(np.asarray(M, dtype=float)))
    return _trapezoid(M.tobytes(), M.shape[0], float(length))


@dataclass(frozen=True)
class LPConfig:
    """Lyapunov-Perron iteration settings.

    ``lam`` is the slow-time weight (beta < eps*lam < alpha); ``t_trunc`` is
    the history horizon on the fast clock.
    """

    lam: float
    t_trunc: float
    n_grid: int = DEFAULT_N_GRID
    tol: float = DEFAULT_TOL
    max_iter: int = DEFAULT_MAX_ITER
    kappa: float = float("nan")

    def weight_rate(self, eps: float) -> float:
        """Fast-clock exponent of the history weight e^{-eps lam tau}."""
        return eps * self.lam


def lp_config_for(
    system: SlowFastSystem,
    report: Optional[AssumptionReport] = None,
    tol: float = DEFAULT_TOL,
    n_grid: int = DEFAULT_N_GRID,
    max_iter: int = DEFAULT_MAX_ITER,
) -> LPConfig:
    """
    Default iteration settings from the structural constants of ``system``.

    The weight is the best spectral gap weight when H2 holds, otherwise
    beta/(2 eps). The horizon makes the tail e^{-decay T0} fall below tol/10,
    with decay = -(beta + L_g) when positive and -beta/2 otherwise.
    """
    report = report or assess_assumptions(system)
    eps = system.eps
    if report.h2_holds and report.lambda_best is not None:
        lam = report.lambda_best
    else:
        lam = report.beta / (2.0 * eps)

    decay = -(report.beta + report.lip_g)
    if decay <= 0:
        decay = -report.beta / 2.0
        logger.warning(
            f"beta + L_g = {report.beta + report.lip_g:.4g} >= 0; truncation horizon uses the "
            f"linear decay rate {decay:.4g}, tail bound not certified"
        )
    t_trunc = float(np.log(10.0 / tol) / decay)

    kappa = float(h2_expression(lam, report.alpha, report.beta, report.lip_f, report.lip_g, eps))
    if not kappa < 1.0:
        logger.warning(f"Analytic contraction factor {kappa:.4g} >= 1 at lambda={lam:.4g}")
    return LPConfig(lam=lam, t_trunc=t_trunc, n_grid=n_grid, tol=tol, max_iter=max_iter, kappa=kappa)


@dataclass
class HistoryPath:
    """Fixed-point history on the grid, with the eta realization used to build it."""

    times: np.ndarray
    X: np.ndarray
    Y: np.ndarray
    eta: np.ndarray

    def weighted_norm(self, weight_rate: float) -> float:
        """sup_k e^{-weight_rate s_k} |(X_k, Y_k)|."""
        values = np.sqrt(np.sum(self.X ** 2, axis=-1) + np.sum(self.Y ** 2, axis=-1))
        return float(np.max(np.exp(-weight_rate * self.times) * values))


@dataclass
class LPResult:
    """Batched Lyapunov-Perron output."""

    grid: HistoryGrid
    X: np.ndarray
    Y: np.ndarray
    eta: np.ndarray
    iterations: int
    changes: List[float] = field(default_factory=list)

    @property
    def h(self) -> np.ndarray:
        return self.Y[:, -1]

    @property
    def eta0(self) -> np.ndarray:
        return self.eta[:, -1]

    @property
    def contraction_ratios(self) -> np.ndarray:
        changes = np.asarray(self.changes)
        if changes.size < 2:
            return np.zeros(0)
        with np.errstate(divide="ignore", invalid="ignore"):
            return changes[1:] / changes[:-1]

    def history(self, index: int) -> HistoryPath:
        return HistoryPath(times=self.grid.times, X=self.X[index], Y=self.Y[index], eta=self.eta[index])


def eta_history(system: SlowFastSystem, streams: Sequence[NoiseStream], grid: HistoryGrid) -> np.ndarray:
    """
    Stationary OU realization on the grid nodes, shape (R, K+1, m).

    Starts from a stationary draw at -T0 and applies exact OU steps on every
    noise step up to 0.
    """
    dt = streams[0].dt
    total = int(-grid.steps[0])
    propagator = ou_propagator(system.B, system.sigma, dt)
    factor = covariance_factor(stationary_covariance(system.B, system.sigma))

    eta = np.empty((len(streams), total + 1, system.dim_fast))
    start = np.stack([s.shifted(-total).normals(0, 1, STATIONARY)[0] for s in streams])
    eta[:, 0] = apply_matrix(factor, start)
    z = stacked_normals(streams, -total, 0)
    for k in range(total):
        eta[:, k + 1] = propagator.step(eta[:, k], z[:, k])
    return eta[:, grid.steps + total]


def _broadcast(X0, n_rows: int, dim: int) -> np.ndarray:
    X0 = np.asarray(X0, dtype=float)
    if X0.ndim == 1:
        return np.broadcast_to(X0, (n_rows, dim)).copy()
    return X0.astype(float, copy=True)


def _weighted_change(dX, dY, times, weight_rate) -> np.ndarray:
    values = np.sqrt(np.sum(dX ** 2, axis=-1) + np.sum(dY ** 2, axis=-1))
    return np.max(np.exp(-weight_rate * times)[None, :] * values, axis=1)


def _check_truncation(system: SlowFastSystem, grid: HistoryGrid, G: np.ndarray, tol: float) -> None:
    beta = float(np.linalg.eigvalsh(0.5 * (system.B + system.B.T))[-1])
    weights = exponential_trapezoid(system.B, grid.cells[0] * grid.dt)
    first = apply_matrix(weights.w0, G[:, 0]) + apply_matrix(weights.w1, G[:, 1])
    contribution = float(np.max(np.linalg.norm(first, axis=-1))) * np.exp(beta * -grid.times[1])
    if contribution > tol:
        raise TruncationTooShort(
            f"First history cell contributes {contribution:.3e} > tol {tol:.1e}; increase t_trunc"
        )


def lp_iterate_batch(
    system: SlowFastSystem,
    X0,
    streams: Sequence[NoiseStream],
    config: LPConfig,
    grid: Optional[HistoryGrid] = None,
) -> LPResult:
    """
    Picard-iterate the discretized history map for several noise realizations.

    Args:
        system: Slow-fast system
        X0: Slow value at time 0, (n,) or per realization (R, n)
        streams: One noise stream per realization
        config: Iteration settings
        grid: History grid (built from ``config`` when omitted)

    Returns:
        LPResult whose ``h`` is h^eps(X0, omega) per realization

    Raises:
        NoContraction: If the change ratio exceeds 1 three times in a row
        TruncationTooShort: If the first history cell still matters at tolerance
    """
    eps = system.eps
    grid = grid or HistoryGrid.build(config.t_trunc, streams[0].dt, config.n_grid)
    n_real, n, m = len(streams), system.dim_slow, system.dim_fast
    X0 = _broadcast(X0, n_real, n)
    eta = eta_history(system, streams, grid)
    times = grid.times
    lengths = grid.cells * grid.dt
    weight_rate = config.weight_rate(eps)
    K = grid.n_nodes - 1

    slow_kernel = -eps * system.A
    X = np.repeat(X0[:, None, :], K + 1, axis=1)
    Y = np.zeros((n_real, K + 1, m))
    changes: List[float] = []
    streak = 0

    for iteration in range(1, config.max_iter + 1):
        F = system.f(X, Y + eta)
        G = system.g(X, Y + eta)

        X_new = np.empty_like(X)
        X_new[:, K] = X0
        for k in range(K - 1, -1, -1):
            w = exponential_trapezoid(slow_kernel, lengths[k])
            X_new[:, k] = apply_matrix(w.phi, X_new[:, k + 1]) - eps * (
                apply_matrix(w.w1, F[:, k]) + apply_matrix(w.w0, F[:, k + 1])
            )

        Y_new = np.empty_like(Y)
        Y_new[:, 0] = 0.0
        for k in range(K):
            w = exponential_trapezoid(system.B, lengths[k])
            Y_new[:, k + 1] = (
                apply_matrix(w.phi, Y_new[:, k]) + apply_matrix(w.w0, G[:, k]) + apply_matrix(w.w1, G[:, k + 1])
            )

        change = float(np.max(_weighted_change(X_new - X, Y_new - Y, times, weight_rate)))
        X, Y = X_new, Y_new
        if not np.all(np.isfinite(Y)):
            raise BlowUp("Lyapunov-Perron iterate diverged")
        changes.append(change)
        logger.debug(f"LP iteration {iteration}: weighted change {change:.3e}")

        if change <= config.tol:
            break
        if len(changes) > 1 and changes[-2] > 0 and change / changes[-2] > 1.0:
            streak += 1
            if streak >= NO_CONTRACTION_STREAK:
                raise NoContraction(
                    f"Weighted change grew {NO_CONTRACTION_STREAK} times in a row (last {change:.3e})"
                )
        else:
            streak = 0
    else:
        logger.warning(f"LP iteration hit max_iter={config.max_iter} with change {changes[-1]:.3e}")

    _check_truncation(system, grid, system.g(X, Y + eta), config.tol)
    return LPResult(grid=grid, X=X, Y=Y, eta=eta, iterations=len(changes), changes=changes)


def lp_iterate(system: SlowFastSystem, X0, stream: NoiseStream, lp_config: LPConfig) -> Tuple[HistoryPath, np.ndarray]:
    """
    Fixed point of the history map for one realization.

    Returns:
        Tuple of (history path, h^eps(X0, omega))
    """
    result = lp_iterate_batch(system, np.asarray(X0, dtype=float).reshape(1, -1), [stream], lp_config)
    return result.history(0), result.h[0].copy()


def pullback_batch(
    system: SlowFastSystem,
    X,
    streams: Sequence[NoiseStream],
    burn_in: float,
    n_grid: int = DEFAULT_N_GRID,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Frozen-X pullback of the fast random ODE from -burn_in to 0.

    Each cell is an implicit exponential-trapezoid step solved by fixed-point
    iteration, the eps = 0 limit of the history map on the same grid.

    Args:
        system: Slow-fast system
        X: Frozen slow value, (n,) or per realization (R, n)
        streams: One noise stream per realization
        burn_in: Horizon on the fast clock
        n_grid: Node cap of the history grid

    Returns:
        Tuple of (h0 values (R, m), eta(0) values (R, m))
    """
    grid = HistoryGrid.build(burn_in, streams[0].dt, n_grid)
    n_real = len(streams)
    X = _broadcast(X, n_real, system.dim_slow)
    eta = eta_history(system, streams, grid)
    lengths = grid.cells * grid.dt

    Y = np.zeros((n_real, system.dim_fast))
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(grid.n_nodes - 1):
            w = exponential_trapezoid(system.B, lengths[k])
            known = apply_matrix(w.phi, Y) + apply_matrix(w.w0, system.g(X, Y + eta[:, k]))
            guess = known + apply_matrix(w.w1, system.g(X, Y + eta[:, k]))
            for _ in range(IMPLICIT_MAX_ITER):
                update = known + apply_matrix(w.w1, system.g(X, guess + eta[:, k + 1]))
                done = np.max(np.abs(update - guess)) <= IMPLICIT_TOL * (1.0 + np.max(np.abs(update)))
                guess = update
                if done:
                    break
            Y = guess
    if not np.all(np.isfinite(Y)):
        raise BlowUp("Pullback diverged")
    return Y, eta[:, -1]


def default_burn_in(system: SlowFastSystem, report: Optional[AssumptionReport] = None, tol: float = DEFAULT_TOL) -> float:
    """Fast-clock pullback horizon from the contraction rate of the fast equation."""
    report = report or assess_assumptions(system)
    rate = -(report.beta + report.lip_g)
    if rate > 0:
        return float(np.log(1.0 / tol) / rate)
    return 50.0 / abs(report.beta)


def h0_eval(system: SlowFastSystem, X, stream: NoiseStream, burn_in: float) -> np.ndarray:
    """
    Pullback sample h^0(X, omega) of the frozen-X fast equation.

    ``burn_in`` is measured on the fast clock.
    """
    h0, _ = pullback_batch(system, np.asarray(X, dtype=float).reshape(1, -1), [stream], burn_in)
    return h0[0]


@dataclass
class ManifoldMap:
    """Evaluator of h^eps (mode ``full_eps``) or h^0 (mode ``frozen_limit``)."""

    system: SlowFastSystem
    config: LPConfig
    mode: str = "full_eps"
    lipschitz_bound: float = float("inf")

    @classmethod
    def build(cls, system: SlowFastSystem, mode: str = "full_eps", report: Optional[AssumptionReport] = None, **kwargs) -> "ManifoldMap":
        report = report or assess_assumptions(system)
        config = lp_config_for(system, report, **kwargs)
        bound = manifold_lipschitz_bound(report, system.eps, config.lam)
        return cls(system=system, config=config, mode=mode, lipschitz_bound=bound)

    def evaluate(self, X, streams: Sequence[NoiseStream]) -> np.ndarray:
        """h(X, omega) for each stream, shape (R, m)."""
        if self.mode == "full_eps":
            return lp_iterate_batch(self.system, X, streams, self.config).h
        if self.mode == "frozen_limit":
            return pullback_batch(self.system, X, streams, self.config.t_trunc, self.config.n_grid)[0]
        raise ValueError(f"Unknown manifold mode '{self.mode}'")

    def __call__(self, X, stream: NoiseStream) -> np.ndarray:
        return self.evaluate(np.asarray(X, dtype=float).reshape(1, -1), [stream])[0]


@dataclass
class ManifoldGapResult:
    """Gap sweep: the convergence report plus per-realization gaps (n_eps, R)."""

    report: ConvergenceReport
    gaps: np.ndarray

    def decrease_fraction(self, first: int = 0, second: int = -1) -> float:
        """Fraction of realizations whose gap at eps[second] is below the gap at eps[first]."""
        return float(np.mean(self.gaps[second] < self.gaps[first]))


def manifold_gap(
    system: SlowFastSystem,
    X,
    eps_list: Sequence[float],
    n_realizations: int,
    master_seed: int = 0,
    tol: float = DEFAULT_TOL,
    n_grid: int = DEFAULT_N_GRID,
    noise_dt: float = DEFAULT_NOISE_DT,
    pool: Optional[ReplicaPool] = None,
) -> ManifoldGapResult:
    """
    E|h^eps(X) - h^0(X)| per eps on shared noise, with the fitted log-log slope.

    The history horizon and weight come from the first eps and are kept for
    the whole sweep so every eps sees the same grid and noise.
    """
    eps_list = [float(e) for e in eps_list]
    if any(b >= a for a, b in zip(eps_list, eps_list[1:])):
        raise ValueError("eps_list must be strictly decreasing")
    pool = pool or ReplicaPool()
    streams = replica_streams(master_seed, n_realizations, system.dim_fast, noise_dt)
    base_report = assess_assumptions(system.with_eps(eps_list[0]))
    base = lp_config_for(system.with_eps(eps_list[0]), base_report, tol=tol, n_grid=n_grid)
    X = np.asarray(X, dtype=float)

    def frozen(start: int, stop: int) -> np.ndarray:
        return pullback_batch(system, X, streams[start:stop], base.t_trunc, n_grid)[0]

    h0 = pool.concat(frozen, n_realizations)
    gaps = np.empty((len(eps_list), n_realizations))
    rows = []
    for i, eps in enumerate(eps_list):
        scaled = system.with_eps(eps)
        # Same fast-clock weight exponent for every eps
        config = LPConfig(
            lam=base.weight_rate(eps_list[0]) / eps,
            t_trunc=base.t_trunc,
            n_grid=n_grid,
            tol=tol,
            max_iter=base.max_iter,
            kappa=base.kappa,
        )

        def full(start: int, stop: int) -> np.ndarray:
            return lp_iterate_batch(scaled, X, streams[start:stop], config).h

        h_eps = pool.concat(full, n_realizations)
        gaps[i] = np.linalg.norm(h_eps - h0, axis=-1)
        mean, stderr = mean_and_stderr(gaps[i])
        rows.append((eps, float(mean), float(stderr)))
        logger.info(f"Manifold gap at eps={eps:g}: {float(mean):.3e} +/- {float(stderr):.1e}")

    report = ConvergenceReport.from_rows(
        "manifold_gap",
        rows,
        metadata={"X": X.tolist(), "n_realizations": n_realizations, "master_seed": master_seed, "t_trunc": base.t_trunc},
    )
    return ManifoldGapResult(report=report, gaps=gaps)


@dataclass
class AttractionReport:
    """Empirical exponential attraction rates toward the manifold-projected orbit."""

    eps_values: List[float]
    rates: List[float]
    rate_stderr: List[float]
    n_fit: List[int]
    shortened: List[bool]
    ratio: Optional[float] = None
    ratio_expected: Optional[float] = None
    ratio_ok: Optional[bool] = None
    gamma: Optional[float] = None
    gamma_ok: Optional[bool] = None
    identical: bool = False
    initial_condition: str = "manifold-projected (same slow coordinate)"


def _decay_rate(distance: np.ndarray, dt: float, fit_steps: int, cutoff: float) -> Tuple[float, int, bool]:
    window = distance[: fit_steps + 1]
    above = window > cutoff * distance[0]
    # Length of the leading run above the cutoff
    run = int(np.argmin(np.append(above, False)))
    if run < 2:
        raise DistanceUnderflow(f"Only {run} points above {cutoff:g} of the initial distance")
    t = dt * np.arange(run)
    slope = np.polyfit(t, np.log(window[:run]), 1)[0]
    return float(-slope), run, run < fit_steps + 1


def attraction_test(
    system: SlowFastSystem,
    x0,
    fast_offset,
    n_realizations: int,
    eps_values: Optional[Sequence[float]] = None,
    horizon_steps: int = 20,
    fit_steps: int = ATTRACTION_FIT_STEPS,
    T: Optional[float] = None,
    on_manifold: bool = True,
    master_seed: int = 0,
    noise_dt: float = DEFAULT_NOISE_DT,
    tol: float = DEFAULT_TOL,
) -> AttractionReport:
    """
    Decay rate of the distance between an on-manifold and a perturbed solution.

    Both solutions share one noise path and run with slow step eps for
    ``horizon_steps`` steps (T = horizon_steps * eps), or up to ``T`` when it is
    given. The on-manifold start z0_on = (x0, h^eps(x0, omega) + eta(omega))
    depends on the noise path, so it is built here per realization rather than
    passed in; the off-manifold start is z0_off = z0_on + (0, fast_offset), a
    perturbation of the fast coordinate only. The rate is the negated slope of
    log distance over the leading points above ``ATTRACTION_CUTOFF`` of the
    initial distance.

    Raises:
        DistanceUnderflow: If fewer than two points remain for a fit
    """
    eps_values = [float(e) for e in (eps_values or [system.eps])]
    x0 = np.asarray(x0, dtype=float)
    offset = np.asarray(fast_offset, dtype=float)
    report = AttractionReport(eps_values=eps_values, rates=[], rate_stderr=[], n_fit=[], shortened=[])
    if np.all(offset == 0):
        report.identical = True
        report.rates = [float("nan")] * len(eps_values)
        report.rate_stderr = [0.0] * len(eps_values)
        return report

    streams = replica_streams(master_seed, n_realizations, system.dim_fast, noise_dt)
    for eps in eps_values:
        scaled = system.with_eps(eps)
        assumptions = assess_assumptions(scaled)
        if on_manifold:
            result = lp_iterate_batch(scaled, x0, streams, lp_config_for(scaled, assumptions, tol=tol))
            y_on = result.h + result.eta0
        else:
            y_on = pullback_batch(scaled, x0, streams, default_burn_in(scaled, assumptions))[1]
        y_off = y_on + offset

        steps = horizon_steps if T is None else max(int(round(T / eps)), 2)
        on = integrate_ensemble(scaled, x0, y_on, steps * eps, eps, streams)
        off = integrate_ensemble(scaled, x0, y_off, steps * eps, eps, streams)
        distance = np.sqrt(np.sum((on.slow - off.slow) ** 2, axis=2) + np.sum((on.fast - off.fast) ** 2, axis=2))

        fits = [_decay_rate(d, eps, fit_steps, ATTRACTION_CUTOFF) for d in distance]
        rates = np.array([f[0] for f in fits])
        mean, stderr = mean_and_stderr(rates)
        report.rates.append(float(mean))
        report.rate_stderr.append(float(stderr))
        report.n_fit.append(int(min(f[1] for f in fits)))
        report.shortened.append(any(f[2] for f in fits))
        logger.info(f"Attraction rate at eps={eps:g}: {float(mean):.4g} +/- {float(stderr):.2g}")

        if assumptions.gap_holds and report.gamma is None:
            report.gamma = assumptions.gamma
            report.gamma_ok = bool(mean >= assumptions.gamma / (2.0 * eps))

    if len(eps_values) >= 2:
        report.ratio = report.rates[1] / report.rates[0]
        report.ratio_expected = eps_values[0] / eps_values[1]
        report.ratio_ok = bool(0.5 * report.ratio_expected <= report.ratio <= 2.0 * report.ratio_expected)
    return report


def reduced_rhs_batch(
    system: SlowFastSystem, x, streams: Sequence[NoiseStream], burn_in: float, n_grid: int = DEFAULT_N_GRID
) -> Tuple[np.ndarray, np.ndarray]:
    """Reduced vector field Ax + f(x, h^0 + eta) per stream, plus the fast value used."""
    h0, eta0 = pullback_batch(system, x, streams, burn_in, n_grid)
    x = _broadcast(x, len(streams), system.dim_slow)
    fast = h0 + eta0
    return apply_matrix(system.A, x) + system.f(x, fast), fast


def reduced_rhs(system: SlowFastSystem, x, stream_at_t: NoiseStream, burn_in: float) -> np.ndarray:
    """
    Slow-manifold-reduced vector field at the noise shift carried by ``stream_at_t``.

    Args:
        system: Slow-fast system
        x: Slow state (n,)
        stream_at_t: Stream already shifted to the current fast time
        burn_in: Pullback horizon on the fast clock
    """
    rhs, _ = reduced_rhs_batch(system, np.asarray(x, dtype=float).reshape(1, -1), [stream_at_t], burn_in)
    return rhs[0]


def integrate_reduced(
    system: SlowFastSystem,
    x0,
    T: float,
    dt_slow: float,
    streams: Sequence[NoiseStream],
    burn_in: float,
    n_grid: int = DEFAULT_N_GRID,
):
    """
    Euler integration of the reduced random ODE x' = Ax + f(x, h^0(x, theta_t) + eta(theta_t)).

    The noise shift at slow time t is t/eps fast units, so ``dt_slow / eps``
    must be a whole number of noise steps.

    Returns:
        EnsemblePath whose fast component holds the manifold value used at each step
    """
    dt = streams[0].dt
    n_steps = grid_steps(T, dt_slow, NonGridStep, "Horizon")
    per_step = grid_steps(dt_slow / system.eps, dt, NonGridStep, "Reduced step")
    x = _broadcast(x0, len(streams), system.dim_slow)
    slow = np.empty((len(streams), n_steps + 1, system.dim_slow))
    fast = np.empty((len(streams), n_steps + 1, system.dim_fast))
    slow[:, 0] = x
    for k in range(n_steps):
        shifted = [s.shifted(k * per_step) for s in streams]
        rhs, value = reduced_rhs_batch(system, x, shifted, burn_in, n_grid)
        fast[:, k] = value
        x = x + dt_slow * rhs
        slow[:, k + 1] = x
    shifted = [s.shifted(n_steps * per_step) for s in streams]
    fast[:, n_steps] = reduced_rhs_batch(system, x, shifted, burn_in, n_grid)[1]
    return EnsemblePath(t0=0.0, dt=dt_slow, slow=slow, fast=fast)


@dataclass
class InvarianceReport:
    """Discrepancy between the full fast state and the manifold at shifted noise."""

    times: np.ndarray
    discrepancy: np.ndarray

    @property
    def growth(self) -> float:
        """Last discrepancy over the largest earlier one."""
        head = np.max(self.discrepancy[:-1]) if self.discrepancy.size > 1 else 0.0
        return float(self.discrepancy[-1] / head) if head > 0 else 0.0


def invariance_check(
    system: SlowFastSystem,
    x0,
    stream: NoiseStream,
    config: Optional[LPConfig] = None,
    n_points: int = 10,
) -> InvarianceReport:
    """
    Start on the manifold and compare y(t) with h^eps(x(t), theta_t) + eta(theta_t).

    Times are t = eps, 2 eps, ..., n_points eps; the shift at t is t/eps fast units.
    """
    config = config or lp_config_for(system)
    x0 = np.asarray(x0, dtype=float)
    start = lp_iterate_batch(system, x0, [stream], config)
    y0 = start.h[0] + start.eta0[0]
    path = integrate_ensemble(system, x0, y0, n_points * system.eps, system.eps, [stream], ReplicaPool(n_workers=1))
    per_unit = grid_steps(1.0, stream.dt, NonGridStep, "Unit fast time")

    discrepancy = np.empty(n_points)
    for j in range(1, n_points + 1):
        shifted = stream.shifted(j * per_unit)
        result = lp_iterate_batch(system, path.slow[0, j], [shifted], config)
        manifold = result.h[0] + result.eta0[0]
        discrepancy[j - 1] = float(np.linalg.norm(path.fast[0, j] - manifold))
    return InvarianceReport(times=system.eps * np.arange(1, n_points + 1), discrepancy=discrepancy)


@dataclass
class ManifoldSlice:
    """Mean and spread of h over realizations along a grid of slow values."""

    X: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    n_realizations: int

    def to_csv(self) -> str:
        m = self.mean.shape[1]
        header = ["X"] + [f"mean_h_{j + 1}" for j in range(m)] + [f"std_h_{j + 1}" for j in range(m)] + ["n_realizations"]
        lines = [",".join(header)]
        for x, mean, std in zip(self.X, self.mean, self.std):
            values = [float_text(x[0] if np.ndim(x) else x)] + [float_text(v) for v in (*mean, *std)]
            lines.append(",".join(values + [str(self.n_realizations)]))
        return "\n".join(lines) + "\n"


def manifold_slice(manifold: ManifoldMap, X_grid, n_realizations: int, master_seed: int = 0, noise_dt: float = DEFAULT_NOISE_DT) -> ManifoldSlice:
    """Evaluate the manifold on a grid of slow values with shared realizations."""
    X_grid = np.atleast_2d(np.asarray(X_grid, dtype=float).reshape(len(X_grid), -1))
    streams = replica_streams(master_seed, n_realizations, manifold.system.dim_fast, noise_dt)
    means, stds = [], []
    for X in X_grid:
        values = manifold.evaluate(X, streams)
        means.append(values.mean(axis=0))
        stds.append(values.std(axis=0, ddof=1) if n_realizations > 1 else np.zeros(values.shape[1]))
    return ManifoldSlice(X=X_grid, mean=np.array(means), std=np.array(stds), n_realizations=n_realizations)
