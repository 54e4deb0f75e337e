"""Averaged drift estimation, tabulation and the averaging error sweep."""

from dataclasses import dataclass, field
from itertools import product
from typing import Callable, Optional, Sequence, Tuple, Union
import logging

import numpy as np
from scipy.interpolate import RegularGridInterpolator
from scipy.spatial import cKDTree

from .manifold import default_burn_in, pullback_batch
from .models import SamplePath, SlowFastSystem
from .paths import (
    DEFAULT_NOISE_DT,
    BlowUp,
    NoiseStream,
    fast_substep,
    integrate_ensemble,
    replica_streams,
    sample_stationary_ou,
    simulate_frozen_fast,
)
from .reports import ConvergenceReport
from .systems import AssumptionReport, assess_assumptions
from .utils import MASK64, ReplicaPool, SlowFastError, batch_means, float_text, mean_and_stderr, mix64

logger = logging.getLogger(__name__)

# Configuration Constants
MIN_BATCHES = 20
STATIONARITY_SE = 5.0
NODE_TOL = 1e-12
MIN_ENSEMBLE = 100


class MixingTooSlow(SlowFastError):
    """Raised when a time average has not reached stationarity."""

    pass


class TableRangeExceeded(SlowFastError):
    """Raised when a table is evaluated outside its grid hull."""

    def __init__(self, message: str, t_exit: Optional[float] = None):
        super().__init__(message)
        self.t_exit = t_exit


def mixing_time(report: AssumptionReport) -> float:
    """Fast-clock mixing time 1/|beta + L_g|, or 1/|beta| when beta + L_g >= 0."""
    rate = -(report.beta + report.lip_g)
    return 1.0 / rate if rate > 0 else 1.0 / abs(report.beta)


@dataclass
class EmpiricalFunction:
    """Grid-tabulated vector or matrix function with per-node standard errors.

    Tensor grids (``axes``) interpolate linearly per axis for n <= 2. Scattered
    ``nodes`` fall back to the nearest node with a warning.
    """

    values: np.ndarray
    stderr: np.ndarray
    axes: Optional[Tuple[np.ndarray, ...]] = None
    nodes: Optional[np.ndarray] = None
    label: str = ""
    _interpolators: dict = field(default_factory=dict, init=False, repr=False)
    _warned: bool = field(default=False, init=False, repr=False)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.stderr = np.asarray(self.stderr, dtype=float)
        if self.axes is not None:
            self.axes = tuple(np.asarray(ax, dtype=float) for ax in self.axes)
            for ax in self.axes:
                if ax.ndim != 1 or np.any(np.diff(ax) <= 0):
                    raise ValueError("Grid axes must be strictly increasing 1-D arrays")
        elif self.nodes is None:
            raise ValueError("Either axes or nodes is required")

    @property
    def dim(self) -> int:
        return len(self.axes) if self.axes is not None else self.nodes.shape[1]

    @property
    def grid_shape(self) -> Tuple[int, ...]:
        if self.axes is not None:
            return tuple(ax.size for ax in self.axes)
        return (self.nodes.shape[0],)

    @property
    def value_shape(self) -> Tuple[int, ...]:
        return self.values.shape[len(self.grid_shape) :]

    @property
    def max_stderr(self) -> float:
        return float(np.max(self.stderr)) if self.stderr.size else 0.0

    def points(self) -> np.ndarray:
        """Node coordinates as (N, n) in C order of the grid."""
        if self.axes is None:
            return self.nodes
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    @classmethod
    def from_callable(cls, fn: Callable[[np.ndarray], np.ndarray], axes: Sequence[Sequence[float]], label: str = "") -> "EmpiricalFunction":
        """Tabulate an exact function with zero standard errors."""
        axes = tuple(np.asarray(ax, dtype=float) for ax in axes)
        shape = tuple(ax.size for ax in axes)
        mesh = np.meshgrid(*axes, indexing="ij")
        points = np.stack([m.ravel() for m in mesh], axis=-1)
        values = np.asarray([np.asarray(fn(p), dtype=float) for p in points])
        values = values.reshape(shape + values.shape[1:])
        return cls(values=values, stderr=np.zeros_like(values), axes=axes, label=label)

    def _flat(self, array: np.ndarray) -> np.ndarray:
        return array.reshape(self.grid_shape + (-1,))

    def _check_range(self, x: np.ndarray) -> None:
        for i, ax in enumerate(self.axes):
            span = NODE_TOL * (1.0 + np.max(np.abs(ax)))
            if np.any(x[..., i] < ax[0] - span) or np.any(x[..., i] > ax[-1] + span):
                raise TableRangeExceeded(
                    f"{self.label or 'table'}: point outside axis {i} range [{ax[0]:g}, {ax[-1]:g}]"
                )

    def _active(self):
        return [i for i, ax in enumerate(self.axes) if ax.size > 1]

    def _interpolator(self, which: str) -> RegularGridInterpolator:
        if which not in self._interpolators:
            active = self._active()
            data = self._flat(self.values if which == "values" else self.stderr)
            squeeze = tuple(i for i, ax in enumerate(self.axes) if ax.size == 1)
            data = np.squeeze(data, axis=squeeze) if squeeze else data
            self._interpolators[which] = RegularGridInterpolator(
                tuple(self.axes[i] for i in active), data, method="linear", bounds_error=False, fill_value=None
            )
        return self._interpolators[which]

    def evaluate(self, x) -> Tuple[np.ndarray, np.ndarray]:
        """
        Interpolated value and conservative standard error at ``x``.

        Args:
            x: Point(s) of shape (..., n)

        Returns:
            Tuple of (value, stderr) with shapes (...,) + value_shape

        Raises:
            TableRangeExceeded: If any point lies outside the grid hull
        """
        x = np.asarray(x, dtype=float)
        lead = x.shape[:-1]
        if self.axes is None:
            return self._nearest(x)

        self._check_range(x)
        active = self._active()
        flat_x = x.reshape(-1, self.dim)
        if not active:
            value = np.repeat(self._flat(self.values).reshape(1, -1), flat_x.shape[0], axis=0)
            err = np.repeat(self._flat(self.stderr).reshape(1, -1), flat_x.shape[0], axis=0)
        else:
            coords = flat_x[:, active]
            value = self._interpolator("values")(coords).reshape(flat_x.shape[0], -1)
            err = self._corner_max(flat_x, active)
        return value.reshape(lead + self.value_shape), err.reshape(lead + self.value_shape)

    def _corner_max(self, flat_x: np.ndarray, active) -> np.ndarray:
        stderr = self._flat(self.stderr)
        lower = []
        for i in active:
            ax = self.axes[i]
            lower.append(np.clip(np.searchsorted(ax, flat_x[:, i], side="right") - 1, 0, ax.size - 2))
        result = np.zeros((flat_x.shape[0], stderr.shape[-1]))
        for corner in product((0, 1), repeat=len(active)):
            index = [np.zeros(flat_x.shape[0], dtype=int) for _ in self.axes]
            for axis_pos, (i, low) in enumerate(zip(active, lower)):
                index[i] = low + corner[axis_pos]
            result = np.maximum(result, stderr[tuple(index)])
        return result

    def _nearest(self, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        if not self._warned:
            logger.warning(f"{self.label or 'table'}: nearest-node lookup for dimension {self.dim} > 2")
            self._warned = True
        tree = self._interpolators.setdefault("tree", cKDTree(self.nodes))
        _, index = tree.query(x.reshape(-1, self.dim))
        lead = x.shape[:-1]
        return (
            self.values[index].reshape(lead + self.value_shape),
            self.stderr[index].reshape(lead + self.value_shape),
        )

    def __call__(self, x) -> np.ndarray:
        return self.evaluate(x)[0]

    def lipschitz_estimate(self) -> float:
        """Largest finite-difference slope between neighboring nodes along each axis."""
        if self.axes is None:
            raise ValueError("Lipschitz estimate needs a tensor grid")
        values = self._flat(self.values)
        best = 0.0
        for i, ax in enumerate(self.axes):
            if ax.size < 2:
                continue
            change = np.linalg.norm(np.diff(values, axis=i), axis=-1)
            spacing = np.diff(ax).reshape([-1 if j == i else 1 for j in range(len(self.axes))])
            best = max(best, float(np.max(change / spacing)))
        return best

    def to_csv(self) -> str:
        """Nodes, flattened values and standard errors, 17 significant digits."""
        points = self.points()
        values = self.values.reshape(points.shape[0], -1)
        stderr = self.stderr.reshape(points.shape[0], -1)
        k = values.shape[1]
        header = [f"x_{i + 1}" for i in range(points.shape[1])]
        header += [f"value_{j + 1}" for j in range(k)] + [f"stderr_{j + 1}" for j in range(k)]
        lines = [",".join(header)]
        for p, v, s in zip(points, values, stderr):
            lines.append(",".join(float_text(a) for a in (*p, *v, *s)))
        return "\n".join(lines) + "\n"


def fbar_time_average(
    system: SlowFastSystem,
    x,
    T_avg: float,
    stream: NoiseStream,
    n_batches: int = MIN_BATCHES,
    burn_in: Optional[float] = None,
    report: Optional[AssumptionReport] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Time average of f(x, y) along the frozen-x fast dynamics.

    Args:
        system: Slow-fast system
        x: Frozen slow state
        T_avg: Averaging window in slow time (T_avg/eps fast-clock units)
        stream: Noise stream of the chain
        n_batches: Batch count for the batch-means standard error
        burn_in: Fast-clock burn-in; 20 mixing times when omitted

    Returns:
        Tuple of (value, batch-means standard error)

    Raises:
        MixingTooSlow: If the first and second half of the batches disagree
    """
    if n_batches < MIN_BATCHES:
        raise ValueError(f"Need at least {MIN_BATCHES} batches, got {n_batches}")
    report = report or assess_assumptions(system)
    tau_mix = mixing_time(report)
    window = T_avg / system.eps
    if window < 100.0 * tau_mix:
        logger.warning(f"Averaging window {window:g} is below 100 mixing times ({100.0 * tau_mix:g})")
    burn_in = 20.0 * tau_mix if burn_in is None else burn_in

    n_burn = int(np.ceil(burn_in / stream.dt))
    n_steps = max(n_batches, int(round(window / stream.dt)))
    x = np.asarray(x, dtype=float)
    y0 = sample_stationary_ou(system.B, system.sigma, system.eps, stream)
    chain = simulate_frozen_fast(system, x, y0, n_burn + n_steps, [stream])[0, n_burn + 1 :]
    samples = system.f(np.broadcast_to(x, (chain.shape[0], x.size)), chain)

    mean, stderr, means = batch_means(samples, n_batches)
    half = n_batches // 2
    first, first_se = mean_and_stderr(means[:half])
    second, second_se = mean_and_stderr(means[half:])
    pooled = np.sqrt(first_se ** 2 + second_se ** 2)
    if np.any(np.abs(first - second) > STATIONARITY_SE * np.maximum(pooled, np.finfo(float).tiny)):
        raise MixingTooSlow(
            f"Batch means drift between halves: {np.ravel(first).tolist()} vs {np.ravel(second).tolist()}"
        )
    return mean, stderr


def stationary_fast_samples(
    system: SlowFastSystem,
    x,
    n_replicas: int,
    master_seed: int = 0,
    burn_in: Optional[float] = None,
    noise_dt: float = DEFAULT_NOISE_DT,
    pool: Optional[ReplicaPool] = None,
) -> np.ndarray:
    """Pullback samples h^0(x, omega) + eta(omega) of the frozen-x stationary fast law, (R, m)."""
    burn_in = default_burn_in(system) if burn_in is None else burn_in
    streams = replica_streams(master_seed, n_replicas, system.dim_fast, noise_dt)
    x = np.asarray(x, dtype=float)
    pool = pool or ReplicaPool()

    def run(start: int, stop: int) -> np.ndarray:
        h0, eta0 = pullback_batch(system, x, streams[start:stop], burn_in)
        return h0 + eta0

    return pool.concat(run, n_replicas)


def fbar_ensemble(
    system: SlowFastSystem,
    x,
    n_replicas: int,
    master_seed: int = 0,
    burn_in: Optional[float] = None,
    noise_dt: float = DEFAULT_NOISE_DT,
    pool: Optional[ReplicaPool] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Ensemble mean of f(x, y) over independent stationary fast samples.

    Returns:
        Tuple of (value, standard error)
    """
    if n_replicas < 2:
        raise ValueError("fbar_ensemble needs at least 2 replicas")
    if n_replicas < MIN_ENSEMBLE:
        logger.warning(f"fbar_ensemble with {n_replicas} < {MIN_ENSEMBLE} replicas")
    x = np.asarray(x, dtype=float)
    fast = stationary_fast_samples(system, x, n_replicas, master_seed, burn_in, noise_dt, pool)
    values = system.f(np.broadcast_to(x, (n_replicas, x.size)), fast)
    return mean_and_stderr(values)


def grid_axes(x_grid) -> Tuple[np.ndarray, ...]:
    """Tensor-grid axes from a 1-D node array or a tuple of axes."""
    if isinstance(x_grid, (tuple, list)) and len(x_grid) > 0 and np.ndim(x_grid[0]) == 1:
        return tuple(np.asarray(ax, dtype=float) for ax in x_grid)
    return (np.atleast_1d(np.asarray(x_grid, dtype=float)),)


def tabulate_fbar(
    system: SlowFastSystem,
    x_grid,
    estimator: str = "ensemble",
    budget: Union[int, float] = 1000,
    master_seed: int = 0,
    noise_dt: float = DEFAULT_NOISE_DT,
    pool: Optional[ReplicaPool] = None,
) -> EmpiricalFunction:
    """
    Tabulate the averaged drift on a tensor grid.

    Every node reuses the same noise realizations (common random numbers).

    Args:
        system: Slow-fast system
        x_grid: 1-D node array (n = 1) or a tuple of axes (n = 2)
        estimator: "ensemble" (budget = replicas) or "time_average" (budget = T_avg)
        budget: Sample budget per node
        master_seed: Seed shared by every node

    Returns:
        EmpiricalFunction of f-bar with per-node standard errors
    """
    axes = grid_axes(x_grid)
    if len(axes) != system.dim_slow:
        raise ValueError(f"Grid has {len(axes)} axes for a {system.dim_slow}-dimensional slow variable")
    if any(ax.size == 0 for ax in axes):
        raise ValueError("Grid must be nonempty")

    report = assess_assumptions(system)
    mesh = np.meshgrid(*axes, indexing="ij")
    points = np.stack([m.ravel() for m in mesh], axis=-1)
    values, errors = [], []
    for point in points:
        if estimator == "ensemble":
            value, stderr = fbar_ensemble(
                system, point, int(budget), master_seed, default_burn_in(system, report), noise_dt, pool
            )
        elif estimator == "time_average":
            stream = NoiseStream(master_seed, 0, system.dim_fast, noise_dt)
            value, stderr = fbar_time_average(system, point, float(budget), stream, report=report)
        else:
            raise ValueError(f"Unknown estimator '{estimator}'")
        values.append(value)
        errors.append(stderr)
        logger.debug(f"f-bar at {point.tolist()}: {np.ravel(value).tolist()} +/- {np.ravel(stderr).tolist()}")

    shape = tuple(ax.size for ax in axes)
    table = EmpiricalFunction(
        values=np.asarray(values).reshape(shape + (system.dim_slow,)),
        stderr=np.asarray(errors).reshape(shape + (system.dim_slow,)),
        axes=axes,
        label="fbar",
    )
    logger.info(f"Tabulated f-bar on {points.shape[0]} nodes, max SE {table.max_stderr:.3e}")
    return table


def integrate_averaged(A, fbar_table, x0, T: float, dt: float) -> SamplePath:
    """
    Classical RK4 on x' = Ax + f-bar(x).

    Returns:
        SamplePath with an empty fast component

    Raises:
        TableRangeExceeded: With ``t_exit`` set when the path leaves the table
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    x = np.asarray(x0, dtype=float).copy()
    n_steps = int(round(T / dt))
    out = np.empty((n_steps + 1, x.size))
    out[0] = x

    def rhs(state: np.ndarray, t: float) -> np.ndarray:
        try:
            return A @ state + np.asarray(fbar_table(state), dtype=float).reshape(state.shape)
        except TableRangeExceeded as e:
            raise TableRangeExceeded(f"Averaged path left the table at t={t:g}: {e}", t_exit=t)

    for k in range(n_steps):
        t = k * dt
        k1 = rhs(x, t)
        k2 = rhs(x + 0.5 * dt * k1, t + 0.5 * dt)
        k3 = rhs(x + 0.5 * dt * k2, t + 0.5 * dt)
        k4 = rhs(x + dt * k3, t + dt)
        x = x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        out[k + 1] = x
    return SamplePath(t0=0.0, dt=dt, slow=out, fast=np.zeros((n_steps + 1, 0)))


def default_fbar_table(
    system: SlowFastSystem,
    center,
    half_width: float = 0.1,
    n_nodes: int = 21,
    n_replicas: int = 1000,
    master_seed: int = 0,
    pool: Optional[ReplicaPool] = None,
) -> EmpiricalFunction:
    """Ensemble f-bar table on a box of ``half_width`` around ``center``."""
    center = np.atleast_1d(np.asarray(center, dtype=float))
    axes = tuple(np.linspace(c - half_width, c + half_width, n_nodes) for c in center)
    grid = axes if len(axes) > 1 else axes[0]
    return tabulate_fbar(system, grid, "ensemble", n_replicas, master_seed, pool=pool)


def sweep_seed(master_seed: int, index: int) -> int:
    """Independent master seed for cell ``index`` of a sweep."""
    return mix64(master_seed, index, 0x5EED) & (MASK64 >> 1)


def simulate_full_ensemble(
    system: SlowFastSystem,
    x0,
    T: float,
    dt_slow: float,
    n_replicas: int,
    master_seed: int,
    pool: Optional[ReplicaPool] = None,
):
    """Full-system replicas from stationary fast starts, noise step matched to the fast substep."""
    _, dtau = fast_substep(dt_slow, system.eps)
    streams = replica_streams(master_seed, n_replicas, system.dim_fast, dtau)
    ensemble = integrate_ensemble(system, x0, None, T, dt_slow, streams, pool)
    if np.any(ensemble.blown_up):
        raise BlowUp(f"{int(ensemble.blown_up.sum())} replicas diverged at eps={system.eps:g}")
    return ensemble


def averaging_error_sweep(
    system: SlowFastSystem,
    x0,
    T: float,
    eps_list: Sequence[float],
    n_replicas: int,
    dt_slow: float = 1e-3,
    fbar_table: Optional[EmpiricalFunction] = None,
    master_seed: int = 0,
    pool: Optional[ReplicaPool] = None,
) -> ConvergenceReport:
    """
    sup_t E|x^eps(t) - x(t)| per eps against the averaged path, with the fitted slope.

    The supremum is over the saved slow grid; the L2 error is kept in the
    report metadata.
    """
    eps_list = [float(e) for e in eps_list]
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    table = fbar_table if fbar_table is not None else default_fbar_table(system, x0, master_seed=master_seed, pool=pool)
    averaged = integrate_averaged(system.A, table, x0, T, dt_slow)

    rows, l2 = [], []
    for i, eps in enumerate(eps_list):
        logger.info(f"Averaging sweep: eps={eps:g} with {n_replicas} replicas")
        ensemble = simulate_full_ensemble(system.with_eps(eps), x0, T, dt_slow, n_replicas, sweep_seed(master_seed, i), pool)
        deviation = np.linalg.norm(ensemble.slow - averaged.slow[None], axis=2)
        mean_abs, se_abs = mean_and_stderr(deviation)
        k = int(np.argmax(mean_abs))
        rows.append((eps, float(mean_abs[k]), float(se_abs[k])))
        l2.append(float(np.max(np.sqrt(np.mean(deviation ** 2, axis=0)))))

    return ConvergenceReport.from_rows(
        "averaging_error",
        rows,
        metadata={
            "x0": x0.tolist(),
            "T": T,
            "dt_slow": dt_slow,
            "n_replicas": n_replicas,
            "master_seed": master_seed,
            "l2_error": dict(zip((float_text(e) for e in eps_list), l2)),
        },
    )


@dataclass
class MixingReport:
    """Decay of E|y - y'|^2 for two frozen-x fast chains on shared noise."""

    times: np.ndarray
    mean_square: np.ndarray
    rate_fast: float
    rate: float


def mixing_rate(
    system: SlowFastSystem,
    x,
    y_offset,
    n_replicas: int,
    horizon: float = 5.0,
    master_seed: int = 0,
    noise_dt: float = DEFAULT_NOISE_DT,
) -> MixingReport:
    """
    Exponential decay rate of E|y(t) - y'(t)|^2 from a displaced start.

    ``horizon`` is on the fast clock; ``rate`` is expressed in slow time (rate_fast / eps).
    """
    x = np.asarray(x, dtype=float)
    start = stationary_fast_samples(system, x, n_replicas, master_seed, noise_dt=noise_dt)
    streams = replica_streams(master_seed, n_replicas, system.dim_fast, noise_dt)
    n_steps = int(round(horizon / noise_dt))
    a = simulate_frozen_fast(system, x, start, n_steps, streams)
    b = simulate_frozen_fast(system, x, start + np.asarray(y_offset, dtype=float), n_steps, streams)
    mean_square = np.mean(np.sum((a - b) ** 2, axis=2), axis=0)
    times = noise_dt * np.arange(n_steps + 1)
    usable = mean_square > 1e-24 * mean_square[0]
    slope = np.polyfit(times[usable], np.log(mean_square[usable]), 1)[0]
    return MixingReport(times=times, mean_square=mean_square, rate_fast=float(-slope), rate=float(-slope / system.eps))
