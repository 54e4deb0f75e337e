"""Fluctuation kernel, Green-Kubo diffusion, martingale residuals and the intermediate reduced model.

All correlation integrals run on the fast clock, so the diffusion estimate
does not depend on eps. The intermediate model is

    dx = [Ax + fbar(x)] dt + sqrt(eps) sigma_bar(x) dW

with W read from the ``aux`` branch of each replica's stream.
"""

from dataclasses import dataclass, field, replace
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple
import logging

import numpy as np
from scipy import linalg
from scipy.integrate import cumulative_trapezoid, trapezoid

from .averaging import (
    EmpiricalFunction,
    TableRangeExceeded,
    default_fbar_table,
    grid_axes,
    integrate_averaged,
    mixing_time,
    simulate_full_ensemble,
    stationary_fast_samples,
    sweep_seed,
)
from .models import EnsemblePath, SamplePath, SlowFastSystem
from .paths import AUX, DEFAULT_NOISE_DT, NoiseStream, replica_streams, sample_stationary_ou, simulate_frozen_fast, stationary_covariance
from .reports import ConvergenceReport
from .systems import assess_assumptions
from .utils import ReplicaPool, SlowFastError, float_text, mean_and_stderr

logger = logging.getLogger(__name__)

# Configuration Constants
PLATEAU_FRACTION = 0.2
MIN_WINDOW_MIXING = 5.0
SIGMA_BATCHES = 20
CLIP_RELATIVE = 1e-8
SYMMETRY_TOL = 1e-12
MIN_INNER = 100
FD_MIN_STEP = 1e-3
FD_RELATIVE_STEP = 1e-2
FD_NOISE_LIMIT = 0.5
CACHE_Y_SPAN = 6.0
WEAK_TANH_SCALE = 10.0
STRICT_ORDERING_EPS = 1e-2
INTERMEDIATE_SLOPE_WINDOW = (0.7, 1.3)
QV_RELATIVE_TOL = 0.2


class NoPlateau(SlowFastError):
    """Raised when the running autocovariance integral has not flattened."""

    pass


class NegativeDiagonal(SlowFastError):
    """Raised when an estimated diffusion diagonal is significantly negative."""

    pass


class NotNearlyPSD(SlowFastError):
    """Raised when a diffusion matrix has an eigenvalue below the clipping tolerance."""

    pass


class CacheResolutionTooCoarse(SlowFastError):
    """Raised when finite-difference noise dominates the cached x-derivative."""

    pass


Drift = Callable[[np.ndarray], np.ndarray]


def as_drift(fbar, dim: int) -> Drift:
    """Callable f-bar from a table, a callable, a constant, or None (zero)."""
    if fbar is None:
        return lambda x: np.zeros(np.shape(x)[:-1] + (dim,))
    if callable(fbar):
        return fbar
    value = np.asarray(fbar, dtype=float).reshape(dim)
    return lambda x: np.broadcast_to(value, np.shape(x)[:-1] + (dim,))


@dataclass
class FluctuationKernel:
    """Centered slow drift H(x, y) = f(x, y) - fbar(x)."""

    system: SlowFastSystem
    fbar: Any = None

    def __post_init__(self):
        self._drift = as_drift(self.fbar, self.system.dim_slow)

    def __call__(self, x, y) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        return self.system.f(x, y) - self._drift(x)

    def centering(self, x, n_replicas: int, master_seed: int = 0, noise_dt: float = DEFAULT_NOISE_DT) -> Tuple[np.ndarray, np.ndarray]:
        """Mean of H(x, .) over stationary fast samples with its standard error."""
        x = np.asarray(x, dtype=float)
        fast = stationary_fast_samples(self.system, x, n_replicas, master_seed, noise_dt=noise_dt)
        return mean_and_stderr(self(np.broadcast_to(x, (n_replicas, x.size)), fast))


def _symmetrize(matrix: np.ndarray) -> np.ndarray:
    return 0.5 * (matrix + np.swapaxes(matrix, -1, -2))


def _running_integral(H: np.ndarray, n_lags: int, dt: float) -> np.ndarray:
    """Symmetrized 2 * int_0^s C(u) du for s on the lag grid, C from lag sums."""
    count, n = H.shape
    C = np.empty((n_lags + 1, n, n))
    for lag in range(n_lags + 1):
        C[lag] = H[lag:].T @ H[: count - lag] / (count - lag)
    return _symmetrize(2.0 * cumulative_trapezoid(C, dx=dt, axis=0, initial=0.0))


def _plateau_index(running: np.ndarray, tol: np.ndarray) -> int:
    """First lag after which every entry stays within ``tol`` of its value there."""
    flat = running.reshape(running.shape[0], -1)
    tol = tol.reshape(-1)
    high = np.maximum.accumulate(flat[::-1], axis=0)[::-1]
    low = np.minimum.accumulate(flat[::-1], axis=0)[::-1]
    deviation = np.maximum(high - flat, flat - low)
    ok = np.all(deviation <= tol, axis=1)
    # The last lag is always flat; walk back to the start of the flat tail
    index = ok.size - 1
    while index > 0 and ok[index - 1]:
        index -= 1
    return index


@dataclass
class SigmaEstimate:
    """Green-Kubo diffusion estimate with its plateau diagnostics."""

    Sigma: np.ndarray
    stderr: np.ndarray
    window: float
    plateau: bool
    lags: np.ndarray = field(repr=False, default=None)
    running: np.ndarray = field(repr=False, default=None)

    @property
    def usable(self) -> bool:
        return self.plateau

    def require_plateau(self) -> "SigmaEstimate":
        if not self.plateau:
            raise NoPlateau(f"Running integral not flat by lag {self.lags[-1]:g}")
        return self


def sigma_estimate(
    system: SlowFastSystem,
    x,
    fbar,
    T_corr: float,
    T_total: float,
    stream: NoiseStream,
    burn_in: Optional[float] = None,
) -> SigmaEstimate:
    """
    Estimate Sigma(x) = 2 int_0^inf E[H(x, s) H(x, 0)^T] ds from one stationary chain.

    Args:
        system: Slow-fast system
        x: Frozen slow state
        fbar: f-bar at x (array, callable or table); None centers with the chain mean
        T_corr: Largest lag, fast clock
        T_total: Length of the stationary stretch, fast clock
        stream: Noise stream of the chain
        burn_in: Fast-clock burn-in; 20 mixing times when omitted

    Returns:
        SigmaEstimate; ``plateau`` is False when the running integral has not flattened

    Raises:
        NegativeDiagonal: If a diagonal entry is below -3 standard errors
    """
    if T_total < 50.0 * T_corr:
        raise ValueError(f"T_total={T_total:g} must be at least 50 * T_corr={50.0 * T_corr:g}")
    report = assess_assumptions(system)
    tau_mix = mixing_time(report)
    if T_corr < 20.0 * tau_mix:
        logger.warning(f"T_corr={T_corr:g} is below 20 mixing times ({20.0 * tau_mix:g})")
    burn_in = 20.0 * tau_mix if burn_in is None else burn_in

    dt = stream.dt
    n_lags = max(1, int(round(T_corr / dt)))
    n_burn = int(np.ceil(burn_in / dt))
    n_steps = int(round(T_total / dt))
    x = np.asarray(x, dtype=float)

    y0 = sample_stationary_ou(system.B, system.sigma, system.eps, stream)
    chain = simulate_frozen_fast(system, x, y0, n_burn + n_steps, [stream])[0, n_burn + 1 :]
    drift = system.f(np.broadcast_to(x, (chain.shape[0], x.size)), chain)
    center = drift.mean(axis=0) if fbar is None else as_drift(fbar, x.size)(x)
    H = drift - center

    running = _running_integral(H, n_lags, dt)
    size = H.shape[0] // SIGMA_BATCHES
    batches = np.stack([_running_integral(H[b * size : (b + 1) * size], n_lags, dt) for b in range(SIGMA_BATCHES)])
    spread = batches.std(axis=0, ddof=1) / np.sqrt(SIGMA_BATCHES)

    shortest = min(n_lags, int(np.ceil(MIN_WINDOW_MIXING * tau_mix / dt)))
    index = max(_plateau_index(running, spread[-1]), shortest)
    plateau = index <= int((1.0 - PLATEAU_FRACTION) * n_lags)
    lags = dt * np.arange(n_lags + 1)
    estimate = SigmaEstimate(
        Sigma=running[index], stderr=spread[index], window=float(lags[index]), plateau=plateau, lags=lags, running=running
    )
    logger.debug(f"Sigma at {x.tolist()}: window {estimate.window:g}, plateau {plateau}")
    if not plateau:
        logger.warning(f"No plateau for Sigma at x={x.tolist()} within T_corr={T_corr:g}; estimate flagged unusable")

    diagonal = np.diag(estimate.Sigma)
    if np.any(diagonal < -3.0 * np.diag(estimate.stderr)):
        raise NegativeDiagonal(f"Sigma diagonal {diagonal.tolist()} below -3 SE at x={x.tolist()}")
    return estimate


def sigma_sqrt(Sigma) -> np.ndarray:
    """
    Symmetric PSD square root of a diffusion matrix.

    Eigenvalues in [-1e-8 * trace, 0) are clipped to zero.

    Raises:
        NotNearlyPSD: If any eigenvalue is below the clipping tolerance
    """
    Sigma = np.atleast_2d(np.asarray(Sigma, dtype=float))
    if np.max(np.abs(Sigma - Sigma.T)) > SYMMETRY_TOL * (1.0 + np.max(np.abs(Sigma))):
        raise ValueError("Sigma must be symmetric")
    values, vectors = linalg.eigh(Sigma)
    clip_tol = CLIP_RELATIVE * max(float(np.trace(Sigma)), 0.0)
    if np.any(values < -clip_tol):
        raise NotNearlyPSD(f"Eigenvalue {values.min():.3e} below clipping tolerance {-clip_tol:.3e}")
    root = (vectors * np.sqrt(np.clip(values, 0.0, None))) @ vectors.T
    return _symmetrize(root)


def project_psd(Sigma: np.ndarray, slack: float) -> np.ndarray:
    """Zero eigenvalues in [-slack, 0) so an estimate within its noise passes sigma_sqrt."""
    values, vectors = linalg.eigh(_symmetrize(np.atleast_2d(Sigma)))
    values = np.where((values < 0) & (values >= -slack), 0.0, values)
    return _symmetrize((vectors * values) @ vectors.T)


def _inner_integrals(
    system: SlowFastSystem,
    x: np.ndarray,
    y_starts: np.ndarray,
    drift: Drift,
    streams: Sequence[NoiseStream],
    n_steps: int,
) -> np.ndarray:
    """int_0^T H(x, y_s) ds for every (start, inner stream) pair, shape (K, n_inner, n)."""
    n_start, n_inner = y_starts.shape[0], len(streams)
    y0 = np.repeat(y_starts, n_inner, axis=0)
    chains = simulate_frozen_fast(system, x, y0, n_steps, list(streams) * n_start)
    H = system.f(np.broadcast_to(x, chains.shape[:2] + (x.size,)), chains) - drift(x)
    return trapezoid(H, dx=streams[0].dt, axis=1).reshape(n_start, n_inner, -1)


def _inner_setup(system: SlowFastSystem, n_inner: int, T_inner: Optional[float], stream: Optional[NoiseStream]):
    if n_inner < 2:
        raise ValueError("hbar estimation needs at least 2 inner chains")
    if n_inner < MIN_INNER:
        logger.warning(f"hbar estimate with {n_inner} < {MIN_INNER} inner chains")
    tau_mix = mixing_time(assess_assumptions(system))
    T_inner = 20.0 * tau_mix if T_inner is None else T_inner
    if T_inner < 20.0 * tau_mix:
        logger.warning(f"T_inner={T_inner:g} is below 20 mixing times ({20.0 * tau_mix:g})")
    stream = stream or NoiseStream(0, 0, system.dim_fast)
    streams = [stream.spawn(i) for i in range(n_inner)]
    return streams, int(round(T_inner / stream.dt))


def hbar_estimate(
    system: SlowFastSystem,
    x,
    y_fast,
    fbar,
    n_inner: int = MIN_INNER,
    T_inner: Optional[float] = None,
    stream: Optional[NoiseStream] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Nested Monte Carlo estimate of Hbar(x, y) = int_0^inf E_y[H(x, y_s)] ds.

    The fast process is Markov, so conditioning on the past reduces to
    launching ``n_inner`` chains from ``y_fast``.

    Returns:
        Tuple of (value, standard error)
    """
    streams, n_steps = _inner_setup(system, n_inner, T_inner, stream)
    x = np.asarray(x, dtype=float)
    y_fast = np.asarray(y_fast, dtype=float).reshape(1, system.dim_fast)
    integrals = _inner_integrals(system, x, y_fast, as_drift(fbar, x.size), streams, n_steps)[0]
    return mean_and_stderr(integrals)


def sigma_from_hbar(
    system: SlowFastSystem,
    x,
    fbar,
    n_outer: int,
    n_inner: int = MIN_INNER,
    T_inner: Optional[float] = None,
    master_seed: int = 0,
    noise_dt: float = DEFAULT_NOISE_DT,
) -> Tuple[np.ndarray, np.ndarray]:
    """Martingale form 2 E[Hbar(x, y) H(x, y)^T] over stationary y, with its standard error."""
    x = np.asarray(x, dtype=float)
    drift = as_drift(fbar, x.size)
    outer = stationary_fast_samples(system, x, n_outer, master_seed, noise_dt=noise_dt)
    stream = NoiseStream(master_seed, n_outer, system.dim_fast, noise_dt)
    streams, n_steps = _inner_setup(system, n_inner, T_inner, stream)
    hbar = _inner_integrals(system, x, outer, drift, streams, n_steps).mean(axis=1)
    H = system.f(np.broadcast_to(x, (n_outer, x.size)), outer) - drift(x)
    products = 2.0 * np.einsum("ki,kj->kij", hbar, H)
    mean, stderr = mean_and_stderr(products)
    return _symmetrize(mean), _symmetrize(stderr)


@dataclass
class HbarCache:
    """Hbar and its x-derivative tabulated on an (x, y) grid for scalar slow and fast variables."""

    hbar: EmpiricalFunction
    dhbar: EmpiricalFunction
    steps: np.ndarray

    @classmethod
    def build(
        cls,
        system: SlowFastSystem,
        fbar,
        x_axis: Sequence[float],
        y_axis: Optional[Sequence[float]] = None,
        n_inner: int = MIN_INNER,
        T_inner: Optional[float] = None,
        master_seed: int = 0,
        noise_dt: float = DEFAULT_NOISE_DT,
    ) -> "HbarCache":
        """
        Tabulate Hbar and dHbar/dx with common random numbers at every node.

        The derivative uses central differences with step max(1e-3, 1e-2 |x|);
        ``fbar`` must be defined at x +/- step.

        Raises:
            CacheResolutionTooCoarse: If derivative standard errors exceed half its RMS value
        """
        if system.dim_slow != 1 or system.dim_fast != 1:
            raise ValueError("HbarCache supports scalar slow and fast variables only")
        x_axis = np.asarray(x_axis, dtype=float)
        if y_axis is None:
            spread = float(np.sqrt(stationary_covariance(system.B, system.sigma)[0, 0]))
            y_axis = np.linspace(-CACHE_Y_SPAN * spread, CACHE_Y_SPAN * spread, 41)
        y_axis = np.asarray(y_axis, dtype=float)
        drift = as_drift(fbar, 1)
        streams, n_steps = _inner_setup(system, n_inner, T_inner, NoiseStream(master_seed, 0, 1, noise_dt))
        starts = y_axis.reshape(-1, 1)

        values = np.empty((x_axis.size, y_axis.size, 1))
        errors = np.empty_like(values)
        slopes = np.empty_like(values)
        slope_errors = np.empty_like(values)
        steps = np.maximum(FD_MIN_STEP, FD_RELATIVE_STEP * np.abs(x_axis))
        for i, (x, h) in enumerate(zip(x_axis, steps)):
            center = _inner_integrals(system, np.array([x]), starts, drift, streams, n_steps)
            plus = _inner_integrals(system, np.array([x + h]), starts, drift, streams, n_steps)
            minus = _inner_integrals(system, np.array([x - h]), starts, drift, streams, n_steps)
            values[i], errors[i] = mean_and_stderr(np.swapaxes(center, 0, 1))
            paired = (plus - minus) / (2.0 * h)
            slopes[i], slope_errors[i] = mean_and_stderr(np.swapaxes(paired, 0, 1))

        rms_value = float(np.sqrt(np.mean(slopes ** 2)))
        rms_error = float(np.sqrt(np.mean(slope_errors ** 2)))
        if rms_error > FD_NOISE_LIMIT * rms_value:
            raise CacheResolutionTooCoarse(
                f"dHbar/dx standard error {rms_error:.3e} exceeds {FD_NOISE_LIMIT:g} of its RMS {rms_value:.3e}"
            )
        axes = (x_axis, y_axis)
        logger.info(f"Built Hbar cache on {x_axis.size}x{y_axis.size} nodes with {n_inner} inner chains")
        return cls(
            hbar=EmpiricalFunction(values=values, stderr=errors, axes=axes, label="hbar"),
            dhbar=EmpiricalFunction(values=slopes, stderr=slope_errors, axes=axes, label="dhbar_dx"),
            steps=steps,
        )

    def __call__(self, x, y) -> Tuple[np.ndarray, np.ndarray]:
        """Hbar and dHbar/dx at states x, y of shape (..., 1)."""
        points = np.concatenate([np.asarray(x, dtype=float), np.asarray(y, dtype=float)], axis=-1)
        return self.hbar(points), self.dhbar(points)


@dataclass
class ResidualRow:
    name: str
    s: float
    t: float
    mean: float
    stderr: float

    @property
    def passed(self) -> bool:
        return abs(self.mean) <= 3.0 * self.stderr


@dataclass
class MartingaleReport:
    """
    Orthogonality residuals E[(M_t - M_s) phi] and quadratic-variation ratios.

    The gated ratio is E[M_T^2] / E int Sigma ds when a diffusion was given,
    otherwise E[M_T^2] / E 2 int Hbar H ds. It must lie within QV_RELATIVE_TOL
    of 1; an undefined ratio (M identically zero) is not gated.
    """

    rows: List[ResidualRow]
    qv_ratio: float
    qv_stderr: float
    qv_ratio_sigma: Optional[float] = None
    eps: Optional[float] = None
    M: np.ndarray = field(repr=False, default=None)

    @property
    def qv_checked(self) -> Optional[float]:
        ratio = self.qv_ratio if self.qv_ratio_sigma is None else self.qv_ratio_sigma
        return None if ratio is None or not np.isfinite(ratio) else float(ratio)

    @property
    def residuals_passed(self) -> bool:
        return all(row.passed for row in self.rows)

    @property
    def qv_passed(self) -> bool:
        ratio = self.qv_checked
        return ratio is None or abs(ratio - 1.0) <= QV_RELATIVE_TOL

    @property
    def passed(self) -> bool:
        return self.residuals_passed and self.qv_passed

    def to_dict(self) -> Dict[str, Any]:
        return {
            "residuals": [
                {"name": r.name, "s": r.s, "t": r.t, "mean": r.mean, "stderr": r.stderr, "passed": r.passed}
                for r in self.rows
            ],
            "qv_ratio": self.qv_ratio,
            "qv_stderr": self.qv_stderr,
            "qv_ratio_sigma": self.qv_ratio_sigma,
            "eps": self.eps,
            "residuals_passed": self.residuals_passed,
            "qv_passed": self.qv_passed,
            "passed": self.passed,
        }


DEFAULT_TEST_FNS: Dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "one": lambda path: np.ones(path.shape[0]),
    "x_s": lambda path: path[:, -1, 0],
    "tanh_x_s": lambda path: np.tanh(WEAK_TANH_SCALE * path[:, -1, 0]),
}


def martingale_path(
    system: SlowFastSystem,
    ensemble: EnsemblePath,
    fbar,
    cache: Callable[[np.ndarray, np.ndarray], Tuple[np.ndarray, np.ndarray]],
) -> Tuple[np.ndarray, np.ndarray]:
    """
    M^eps on the slow grid of a full-system ensemble, and 2 int Hbar H ds.

    The H integral is read off the slow increment,
    int_0^t H ds = x(t) - x0 - int_0^t (Ax + fbar(x)) ds.

    Returns:
        Tuple of (M (R, K+1, n), pathwise 2 int_0^t Hbar H^T ds (R, K+1, n, n))
    """
    eps = system.eps
    x, y = ensemble.slow, ensemble.fast
    drift = as_drift(fbar, system.dim_slow)
    hbar, dhbar = cache(x, y)
    linear = np.einsum("ij,rkj->rki", system.A, x)
    averaged = cumulative_trapezoid(linear + drift(x), dx=ensemble.dt, axis=1, initial=0.0)
    velocity = linear + system.f(x, y)
    correction = cumulative_trapezoid(dhbar * velocity, dx=ensemble.dt, axis=1, initial=0.0)
    M = (
        np.sqrt(eps) * (hbar - hbar[:, :1])
        + (x - x[:, :1] - averaged) / np.sqrt(eps)
        - np.sqrt(eps) * correction
    )
    H = system.f(x, y) - drift(x)
    bracket = cumulative_trapezoid(2.0 * np.einsum("rki,rkj->rkij", hbar, H), dx=ensemble.dt, axis=1, initial=0.0)
    return M, bracket


def martingale_residual(
    system: SlowFastSystem,
    x0,
    T: float,
    n_replicas: int,
    test_fns: Optional[Dict[str, Callable[[np.ndarray], np.ndarray]]] = None,
    fbar=None,
    cache: Optional[HbarCache] = None,
    schedule: Optional[Sequence[Tuple[float, float]]] = None,
    dt_slow: Optional[float] = None,
    diffusion: Optional[Callable[[np.ndarray], np.ndarray]] = None,
    master_seed: int = 0,
    pool: Optional[ReplicaPool] = None,
) -> MartingaleReport:
    """
    Check that M^eps is a martingale along full-system replicas.

    Args:
        system: Slow-fast system with scalar slow and fast variables
        x0: Initial slow state
        T: Horizon
        n_replicas: Full-system replicas
        test_fns: Functionals phi of the slow path up to time s
        fbar: Averaged drift (callable or table)
        cache: HbarCache; built around x0 when omitted
        schedule: (s, t) pairs on the slow grid
        dt_slow: Slow step; the largest divisor step of T not above eps when omitted
        diffusion: Optional Sigma(x) for the <M>_T / int Sigma ds ratio

    Returns:
        MartingaleReport with a residual row per (phi, s, t)
    """
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    if dt_slow is None:
        dt_slow = T / int(np.ceil(T / system.eps - 1e-9))
    if fbar is None:
        fbar = default_fbar_table(system, x0, half_width=0.2, master_seed=master_seed, pool=pool)
    if cache is None:
        cache = HbarCache.build(system, fbar, np.linspace(x0[0] - 0.1, x0[0] + 0.1, 11), master_seed=master_seed)
    test_fns = test_fns or DEFAULT_TEST_FNS
    schedule = schedule or [(0.0, 0.5 * T), (0.5 * T, T), (0.0, T)]

    ensemble = simulate_full_ensemble(system, x0, T, dt_slow, n_replicas, master_seed, pool)
    M, bracket = martingale_path(system, ensemble, fbar, cache)

    rows = []
    for s, t in schedule:
        ks, kt = int(round(s / dt_slow)), int(round(t / dt_slow))
        increment = np.sum(M[:, kt] - M[:, ks], axis=-1)
        for name, phi in test_fns.items():
            mean, stderr = mean_and_stderr(increment * phi(ensemble.slow[:, : ks + 1]))
            rows.append(ResidualRow(name=name, s=float(s), t=float(t), mean=float(mean), stderr=float(stderr)))

    final_sq = np.sum(M[:, -1] ** 2, axis=-1)
    denominator = float(np.mean(np.trace(bracket[:, -1], axis1=-2, axis2=-1)))
    qv_ratio = float(np.mean(final_sq) / denominator) if denominator > 0 else float("nan")
    qv_stderr = float(mean_and_stderr(final_sq)[1] / denominator) if denominator > 0 else float("nan")

    qv_ratio_sigma = None
    if diffusion is not None:
        traces = np.trace(np.asarray(diffusion(ensemble.slow), dtype=float).reshape(ensemble.slow.shape[:2] + (x0.size, x0.size)), axis1=-2, axis2=-1)
        expected = float(np.mean(trapezoid(traces, dx=dt_slow, axis=1)))
        qv_ratio_sigma = float(np.mean(final_sq) / expected) if expected > 0 else float("nan")

    report = MartingaleReport(
        rows=rows, qv_ratio=qv_ratio, qv_stderr=qv_stderr, qv_ratio_sigma=qv_ratio_sigma, eps=system.eps, M=M
    )
    logger.info(
        f"Martingale check at eps={system.eps:g}: {sum(r.passed for r in rows)}/{len(rows)} residuals pass, "
        f"<M>_T ratio {qv_ratio:.3f}, against int Sigma ds {qv_ratio_sigma}"
    )
    return report


@dataclass
class DiffusionTable:
    """Sigma and sigma_bar on an x grid with per-node diagnostics."""

    Sigma: EmpiricalFunction
    sigma_bar: EmpiricalFunction
    windows: np.ndarray
    plateau: np.ndarray
    metadata: Dict[str, Any] = field(default_factory=dict)

    def __call__(self, x) -> np.ndarray:
        """sigma_bar at x, shape (..., n, n)."""
        return self.sigma_bar(x)

    def to_csv(self) -> str:
        """x nodes, Sigma row-major, standard errors and the integration window."""
        points = self.Sigma.points()
        n = points.shape[1]
        values = self.Sigma.values.reshape(points.shape[0], -1)
        errors = self.Sigma.stderr.reshape(points.shape[0], -1)
        entries = [f"{i + 1}{j + 1}" for i in range(n) for j in range(n)]
        header = [f"x_{i + 1}" for i in range(n)] + [f"Sigma_{e}" for e in entries] + [f"stderr_{e}" for e in entries]
        lines = [",".join(header + ["window", "plateau"])]
        for p, v, s, w, ok in zip(points, values, errors, self.windows.ravel(), self.plateau.ravel()):
            lines.append(",".join([float_text(a) for a in (*p, *v, *s, w)] + [str(bool(ok)).lower()]))
        return "\n".join(lines) + "\n"

    def to_dict(self) -> Dict[str, Any]:
        return {
            "plateau": self.plateau.ravel().tolist(),
            "windows": self.windows.ravel().tolist(),
            "max_stderr": self.Sigma.max_stderr,
            **self.metadata,
        }


def tabulate_sigma(
    system: SlowFastSystem,
    x_grid,
    fbar,
    T_corr: float,
    T_total: float,
    master_seed: int = 0,
    noise_dt: float = DEFAULT_NOISE_DT,
) -> DiffusionTable:
    """
    Estimate Sigma and sigma_bar at every grid node on common random numbers.

    Estimates within 3 standard errors of PSD are projected onto it before
    taking the square root.
    """
    axes = grid_axes(x_grid)
    n = system.dim_slow
    mesh = np.meshgrid(*axes, indexing="ij")
    points = np.stack([m.ravel() for m in mesh], axis=-1)
    stream = NoiseStream(master_seed, 0, system.dim_fast, noise_dt)
    drift = as_drift(fbar, n)

    sigmas, errors, roots, windows, plateau = [], [], [], [], []
    for point in points:
        estimate = sigma_estimate(system, point, drift(point), T_corr, T_total, stream)
        projected = project_psd(estimate.Sigma, 3.0 * float(np.linalg.norm(estimate.stderr)))
        sigmas.append(projected)
        errors.append(estimate.stderr)
        roots.append(sigma_sqrt(projected))
        windows.append(estimate.window)
        plateau.append(estimate.plateau)

    shape = tuple(ax.size for ax in axes)
    table = DiffusionTable(
        Sigma=EmpiricalFunction(np.reshape(sigmas, shape + (n, n)), np.reshape(errors, shape + (n, n)), axes=axes, label="Sigma"),
        sigma_bar=EmpiricalFunction(np.reshape(roots, shape + (n, n)), np.zeros(shape + (n, n)), axes=axes, label="sigma_bar"),
        windows=np.reshape(windows, shape),
        plateau=np.reshape(plateau, shape),
        metadata={"master_seed": master_seed, "T_corr": T_corr, "T_total": T_total, "noise_dt": noise_dt},
    )
    logger.info(f"Tabulated Sigma on {points.shape[0]} nodes, {int(np.sum(plateau))} with a plateau")
    return table


def integrate_intermediate_ensemble(
    A,
    fbar,
    diffusion,
    eps: float,
    x0,
    T: float,
    dt: float,
    streams: Sequence[NoiseStream],
) -> EnsemblePath:
    """
    Euler-Maruyama replicas of dx = [Ax + fbar(x)] dt + sqrt(eps) sigma_bar(x) dW.

    ``diffusion`` maps (R, n) states to (R, n, n) factors. The Wiener
    increments come from each stream's aux branch.

    Raises:
        TableRangeExceeded: With ``t_exit`` set when a replica leaves a table
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    n = A.shape[0]
    n_steps = int(round(T / dt))
    aux = [replace(stream, dim=n) for stream in streams]
    dW = np.sqrt(dt) * np.stack([s.normals(0, n_steps, AUX) for s in aux])
    drift = as_drift(fbar, n)
    x = np.broadcast_to(np.asarray(x0, dtype=float), (len(streams), n)).copy()
    out = np.empty((len(streams), n_steps + 1, n))
    out[:, 0] = x
    for k in range(n_steps):
        try:
            factor = np.asarray(diffusion(x), dtype=float).reshape(x.shape + (n,))
            x = x + dt * (np.einsum("ij,rj->ri", A, x) + drift(x)) + np.sqrt(eps) * np.einsum("rij,rj->ri", factor, dW[:, k])
        except TableRangeExceeded as e:
            raise TableRangeExceeded(f"Intermediate path left the table at t={k * dt:g}: {e}", t_exit=k * dt)
        out[:, k + 1] = x
    return EnsemblePath(t0=0.0, dt=dt, slow=out, fast=np.zeros((len(streams), n_steps + 1, 0)), blown_up=np.zeros(len(streams), dtype=bool))


def integrate_intermediate(A, fbar, diffusion, eps: float, x0, T: float, dt: float, stream: NoiseStream) -> SamplePath:
    """Single Euler-Maruyama path of the intermediate reduced model."""
    return integrate_intermediate_ensemble(A, fbar, diffusion, eps, x0, T, dt, [stream]).replica(0)


def weak_statistics(samples: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Means and standard errors of x, x^2 and tanh(10 x) per component, stacked (3, n)."""
    stats = np.stack([samples, samples ** 2, np.tanh(WEAK_TANH_SCALE * samples)], axis=1)
    return mean_and_stderr(stats)


@dataclass
class IntermediateSweep:
    """
    Weak errors of the intermediate model and strong/weak errors of the averaged model.

    The verdict needs the intermediate weak slope inside its window and the
    intermediate weak error at or below the averaged weak error at every eps,
    strictly once eps <= STRICT_ORDERING_EPS unless both errors are exactly
    zero. The averaged strong error is carried for the averaging-rate
    cross-check only.
    """

    intermediate: ConvergenceReport
    averaged: ConvergenceReport
    averaged_weak: ConvergenceReport

    @property
    def ordering(self) -> List[bool]:
        """Intermediate weak error against the averaged weak error, per eps of the intermediate rows."""
        averaged = {eps: error for eps, error, _ in self.averaged_weak.rows}
        ordered = []
        for eps, error, _ in self.intermediate.rows:
            reference = averaged.get(eps)
            if reference is None:
                ordered.append(False)
            elif eps <= STRICT_ORDERING_EPS and reference > 0.0:
                ordered.append(error < reference)
            else:
                ordered.append(error <= reference)
        return ordered

    @property
    def rate_ok(self) -> bool:
        return self.intermediate.exact_zero or self.intermediate.slope_within(*INTERMEDIATE_SLOPE_WINDOW)

    @property
    def passed(self) -> bool:
        return self.rate_ok and all(self.ordering)

    def summary(self) -> Dict[str, Any]:
        return {
            "intermediate": self.intermediate.summary(),
            "averaged": self.averaged.summary(),
            "averaged_weak": self.averaged_weak.summary(),
            "averaged_rows": [list(row) for row in self.averaged.rows],
            "averaged_weak_rows": [list(row) for row in self.averaged_weak.rows],
            "ordering": self.ordering,
            "rate_ok": self.rate_ok,
            "passed": self.passed,
        }


def _weak_gap(full: Tuple[np.ndarray, np.ndarray], model: Tuple[np.ndarray, np.ndarray]) -> Tuple[float, float]:
    gap = np.abs(full[0] - model[0])
    k = np.unravel_index(int(np.argmax(gap)), gap.shape)
    return float(gap[k]), float(np.hypot(full[1][k], model[1][k]))


def intermediate_error_sweep(
    system: SlowFastSystem,
    x0,
    T: float,
    eps_list: Sequence[float],
    n_replicas: int,
    fbar=None,
    diffusion=None,
    dt_slow: float = 1e-3,
    dt_intermediate: Optional[float] = None,
    master_seed: int = 0,
    pool: Optional[ReplicaPool] = None,
) -> IntermediateSweep:
    """
    Weak error of the intermediate model against the full system per eps.

    The weak error is the largest of |E_full s(x(T)) - E_model s(x(T))| over
    s in {x, x^2, tanh(10 x)}. The same full-system ensemble also gives the
    averaged model's strong error sup_t E|x^eps - x| and its weak error.

    Args:
        fbar: Averaged drift table or callable; tabulated around x0 when omitted
        diffusion: sigma_bar table or callable mapping (R, n) -> (R, n, n); tabulated when omitted
    """
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    dt_intermediate = dt_slow if dt_intermediate is None else dt_intermediate
    if fbar is None:
        fbar = default_fbar_table(system, x0, half_width=0.2, master_seed=master_seed, pool=pool)
    if diffusion is None:
        grid = np.linspace(x0[0] - 0.2, x0[0] + 0.2, 9) if x0.size == 1 else tuple(np.linspace(c - 0.2, c + 0.2, 9) for c in x0)
        tau_mix = mixing_time(assess_assumptions(system))
        diffusion = tabulate_sigma(system, grid, fbar, 20.0 * tau_mix, 2000.0 * tau_mix, master_seed)
    averaged_path = integrate_averaged(system.A, fbar, x0, T, dt_slow)
    averaged_final = weak_statistics(averaged_path.slow[-1][None])[0], np.zeros((3, x0.size))

    rows, strong_rows, weak_avg_rows = [], [], []
    for i, eps in enumerate(eps_list):
        logger.info(f"Intermediate sweep: eps={eps:g} with {n_replicas} replicas")
        seed = sweep_seed(master_seed, i)
        full = simulate_full_ensemble(system.with_eps(eps), x0, T, dt_slow, n_replicas, seed, pool)
        reduced = integrate_intermediate_ensemble(
            system.A, fbar, diffusion, eps, x0, T, dt_intermediate, replica_streams(seed, n_replicas, x0.size)
        )
        full_stats = weak_statistics(full.slow[:, -1])
        rows.append((eps, *_weak_gap(full_stats, weak_statistics(reduced.slow[:, -1]))))
        weak_avg_rows.append((eps, *_weak_gap(full_stats, averaged_final)))

        deviation = np.linalg.norm(full.slow - averaged_path.slow[None], axis=2)
        mean_abs, se_abs = mean_and_stderr(deviation)
        k = int(np.argmax(mean_abs))
        strong_rows.append((eps, float(mean_abs[k]), float(se_abs[k])))

    metadata = {"x0": x0.tolist(), "T": T, "dt_slow": dt_slow, "n_replicas": n_replicas, "master_seed": master_seed}
    return IntermediateSweep(
        intermediate=ConvergenceReport.from_rows("intermediate_weak_error", rows, metadata=metadata),
        averaged=ConvergenceReport.from_rows("averaging_error", strong_rows, metadata=metadata),
        averaged_weak=ConvergenceReport.from_rows("averaged_weak_error", weak_avg_rows, metadata=metadata),
    )
