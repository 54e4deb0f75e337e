"""Reproducible noise, exact Ornstein-Uhlenbeck updates and slow-fast integration.

Noise is indexed on the fast clock tau = t/eps. Step ``k`` of a stream covers
[k*dt, (k+1)*dt) in tau; negative steps come from an independent substream so
the stream is two-sided. Every block of normals is a pure function of
(master_seed, replica_index, branch, block), generated by a counter-based
Philox bit generator keyed by a 64-bit avalanche mix.
"""

from dataclasses import dataclass, replace
from functools import lru_cache
from typing import List, Optional, Sequence, Tuple
import logging

import numpy as np
from scipy import linalg

from .models import EnsemblePath, SamplePath, SlowFastSystem
from .utils import MASK64, ReplicaPool, SlowFastError, apply_matrix, mean_and_stderr, mix64, tag_word

logger = logging.getLogger(__name__)

# Configuration Constants
DEFAULT_NOISE_DT = 0.1
BLOCK_SIZE = 1024
BLOWUP_NORM = 1e12
GRID_TOL = 1e-9
SUBSTEPS_PER_EPS = 10
PSD_TOL = 1e-12
LYAPUNOV_TOL = 1e-8

FAST = "fast"
STATIONARY = "stationary"
AUX = "aux"


class NonGridShift(SlowFastError):
    """Raised when a shift is not an integer number of noise steps."""

    pass


class NonGridStep(SlowFastError):
    """Raised when an integration step does not align with the noise grid."""

    pass


class CovarianceNotPSD(SlowFastError):
    """Raised when a propagated noise covariance has a negative eigenvalue."""

    pass


class LyapunovSolveFailed(SlowFastError):
    """Raised when the stationary covariance solve leaves a large residual."""

    pass


class BlowUp(SlowFastError):
    """Raised when a trajectory needed downstream diverged."""

    pass


@lru_cache(maxsize=1024)
def _normal_block(key0: int, key1: int, block: int, dim: int) -> np.ndarray:
    bit_generator = np.random.Philox(
        key=np.array([key0, key1], dtype=np.uint64),
        counter=np.array([0, block, 0, 0], dtype=np.uint64),
    )
    values = np.random.Generator(bit_generator).standard_normal((BLOCK_SIZE, dim))
    values.flags.writeable = False
    return values


def grid_steps(value: float, dt: float, error: type, what: str) -> int:
    """Integer number of steps of length dt in value, or raise ``error``."""
    ratio = value / dt
    steps = int(round(ratio))
    if abs(ratio - steps) > GRID_TOL * max(1.0, abs(ratio)):
        raise error(f"{what} {value!r} is not a multiple of the noise step {dt!r}")
    return steps


@dataclass(frozen=True)
class NoiseStream:
    """Two-sided standard Wiener increments on the fast clock.

    ``offset`` is the shift applied to every index; ``shifted`` and ``shift``
    only ever change it, so a stream and all its shifts read the same blocks.
    """

    master_seed: int
    replica_index: int
    dim: int
    dt: float = DEFAULT_NOISE_DT
    offset: int = 0

    def _key(self, branch: str) -> Tuple[int, int]:
        word = tag_word(branch)
        return (
            mix64(self.master_seed, self.replica_index, word),
            mix64(self.master_seed, self.replica_index, word, 1),
        )

    def _gather(self, branch: str, start: int, stop: int) -> np.ndarray:
        key0, key1 = self._key(branch)
        first, last = start // BLOCK_SIZE, (stop - 1) // BLOCK_SIZE
        parts = [_normal_block(key0, key1, block, self.dim) for block in range(first, last + 1)]
        flat = parts[0] if len(parts) == 1 else np.concatenate(parts)
        return flat[start - first * BLOCK_SIZE : stop - first * BLOCK_SIZE]

    def normals(self, start: int, stop: int, branch: str = FAST) -> np.ndarray:
        """
        Standard normal vectors for steps ``start..stop-1`` (before the offset).

        Returns:
            Array of shape (stop - start, dim)
        """
        if stop <= start:
            return np.zeros((0, self.dim))
        a, b = start + self.offset, stop + self.offset
        pieces = []
        if a < 0:
            # Step j < 0 is step -j-1 of the independent negative branch
            neg_stop = min(b, 0)
            pieces.append(self._gather(branch + ":neg", -neg_stop, -a)[::-1])
        if b > 0:
            pieces.append(self._gather(branch, max(a, 0), b))
        return pieces[0].copy() if len(pieces) == 1 else np.concatenate(pieces)

    def increments(self, start: int, stop: int, branch: str = FAST) -> np.ndarray:
        """Wiener increments with covariance dt*I for steps ``start..stop-1``."""
        return np.sqrt(self.dt) * self.normals(start, stop, branch)

    def shifted(self, steps: int) -> "NoiseStream":
        """Stream whose step k reads this stream's step k + ``steps``."""
        return replace(self, offset=self.offset + int(steps))

    def spawn(self, child: int) -> "NoiseStream":
        """Independent stream derived from this one (used for auxiliary chains)."""
        seed = mix64(self.master_seed, self.replica_index, tag_word("spawn"), child) & (MASK64 >> 1)
        return NoiseStream(master_seed=seed, replica_index=0, dim=self.dim, dt=self.dt)


def replica_streams(master_seed: int, n_replicas: int, dim: int, dt: float = DEFAULT_NOISE_DT, first: int = 0) -> List[NoiseStream]:
    """One stream per replica index ``first..first+n_replicas-1``."""
    return [NoiseStream(master_seed, first + i, dim, dt) for i in range(n_replicas)]


def stacked_normals(streams: Sequence[NoiseStream], start: int, stop: int, branch: str = FAST) -> np.ndarray:
    """Normals of several streams stacked as (R, stop - start, dim)."""
    return np.stack([stream.normals(start, stop, branch) for stream in streams])


def shift(stream: NoiseStream, t_shift: float) -> NoiseStream:
    """
    Apply the noise shift by ``t_shift`` fast-clock time units.

    Raises:
        NonGridShift: If ``t_shift`` is not an integer multiple of ``stream.dt``
    """
    return stream.shifted(grid_steps(t_shift, stream.dt, NonGridShift, "Shift"))


@dataclass(frozen=True)
class OUPropagator:
    """Exact one-step law of d eta = B eta dtau + sigma dW over a fast step ``dtau``."""

    phi: np.ndarray
    cov: np.ndarray
    factor: np.ndarray
    psi: np.ndarray
    dtau: float

    def step(self, state: np.ndarray, z: np.ndarray) -> np.ndarray:
        """Advance ``state`` using standard normals ``z`` (same leading shape)."""
        return apply_matrix(self.phi, state) + apply_matrix(self.factor, z)


def covariance_factor(cov: np.ndarray) -> np.ndarray:
    """Symmetric PSD square root of a covariance, rejecting clearly negative eigenvalues."""
    cov = 0.5 * (cov + cov.T)
    eigenvalues, vectors = np.linalg.eigh(cov)
    scale = max(np.linalg.norm(cov, 2), np.finfo(float).tiny)
    if eigenvalues[0] < -PSD_TOL * scale:
        raise CovarianceNotPSD(f"Covariance has eigenvalue {eigenvalues[0]:.3e} (norm {scale:.3e})")
    return (vectors * np.sqrt(np.clip(eigenvalues, 0.0, None))) @ vectors.T


@lru_cache(maxsize=256)
def _propagator(b_bytes: bytes, dim: int, sigma: float, dtau: float) -> OUPropagator:
    B = np.frombuffer(b_bytes, dtype=float).reshape(dim, dim)
    identity = np.eye(dim)
    zeros = np.zeros((dim, dim))

    # Van Loan block exponential for the transition and covariance
    van_loan = linalg.expm(np.block([[-B, sigma * sigma * identity], [zeros, B.T]]) * dtau)
    phi = van_loan[dim:, dim:].T
    cov = phi @ van_loan[:dim, dim:]
    cov = 0.5 * (cov + cov.T)
    factor = covariance_factor(cov)

    # psi = integral of e^{Bu} over [0, dtau], the exponential Euler forcing weight
    psi = linalg.expm(np.block([[B, identity], [zeros, zeros]]) * dtau)[:dim, dim:]
    return OUPropagator(phi=phi, cov=cov, factor=factor, psi=psi, dtau=dtau)


def ou_propagator(B: np.ndarray, sigma: float, dtau: float) -> OUPropagator:
    """Cached exact OU propagator for a fast-clock step ``dtau``."""
    B = np.ascontiguousarray(np.atleast_2d(np.asarray(B, dtype=float)))
    return _propagator(B.tobytes(), B.shape[0], float(sigma), float(dtau))


def ou_exact_step(B, sigma: float, eps: float, state: np.ndarray, dW: np.ndarray, dt: float) -> np.ndarray:
    """
    Exact-in-distribution step of d eta = (1/eps) B eta dt + (sigma/sqrt(eps)) dW.

    Args:
        B: Fast linear part
        sigma: Noise amplitude
        eps: Scale parameter
        state: Current state(s), shape (..., m)
        dW: Wiener increment(s) over ``dt``, shape (..., m)
        dt: Slow-time step

    Returns:
        New state e^{B dt/eps} state + xi with xi ~ N(0, Q(dt)) driven by dW/sqrt(dt)
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    propagator = ou_propagator(B, sigma, dt / eps)
    return propagator.step(np.asarray(state, dtype=float), np.asarray(dW, dtype=float) / np.sqrt(dt))


def stationary_covariance(B, sigma: float) -> np.ndarray:
    """
    Stationary covariance of the fast OU process, solving B Q + Q B^T + sigma^2 I = 0.

    Raises:
        LyapunovSolveFailed: If the solve residual exceeds tolerance
    """
    B = np.atleast_2d(np.asarray(B, dtype=float))
    rhs = sigma * sigma * np.eye(B.shape[0])
    cov = linalg.solve_continuous_lyapunov(B, -rhs)
    cov = 0.5 * (cov + cov.T)
    residual = np.linalg.norm(B @ cov + cov @ B.T + rhs) / max(1.0, np.linalg.norm(rhs))
    if not np.isfinite(residual) or residual > LYAPUNOV_TOL:
        raise LyapunovSolveFailed(f"Lyapunov residual {residual:.3e} exceeds {LYAPUNOV_TOL:g}")
    return cov


def sample_stationary_ou(B, sigma: float, eps: float, stream: NoiseStream) -> np.ndarray:
    """
    Draw from the stationary law N(0, Q_inf) using the stream's stationary branch.

    The covariance does not depend on ``eps``; the argument is accepted so the
    call reads like the dynamics it initializes.
    """
    factor = covariance_factor(stationary_covariance(B, sigma))
    return factor @ stream.normals(0, 1, STATIONARY)[0]


def fast_substep(dt_slow: float, eps: float) -> Tuple[int, float]:
    """Number of fast substeps per slow step and their fast-clock length."""
    n_sub = max(1, int(np.ceil(SUBSTEPS_PER_EPS * dt_slow / eps - GRID_TOL)))
    return n_sub, dt_slow / (eps * n_sub)


def _broadcast_rows(value, n_rows: int, dim: int, start: int, stop: int) -> np.ndarray:
    value = np.asarray(value, dtype=float)
    if value.ndim == 1:
        return np.broadcast_to(value.reshape(1, dim), (stop - start, dim)).copy()
    if value.shape[0] != n_rows:
        raise ValueError(f"Expected {n_rows} initial states, got {value.shape[0]}")
    return value[start:stop].astype(float, copy=True)


def _diverged(*states: np.ndarray) -> np.ndarray:
    bad = np.zeros(states[0].shape[0], dtype=bool)
    for state in states:
        bad |= ~np.all(np.isfinite(state), axis=1)
        with np.errstate(invalid="ignore", over="ignore"):
            bad |= np.linalg.norm(np.nan_to_num(state, nan=np.inf), axis=1) > BLOWUP_NORM
    return bad


def integrate_ensemble(
    system: SlowFastSystem,
    x0,
    y0,
    T: float,
    dt_slow: float,
    streams: Sequence[NoiseStream],
    pool: Optional[ReplicaPool] = None,
) -> EnsemblePath:
    """
    Integrate replicas of the coupled system on a shared slow grid.

    Each slow step uses a midpoint predictor for x, then ``n_sub`` exponential
    Euler substeps of the fast variable with x frozen at the midpoint, then a
    slow corrector with the trapezoid average of f over the substeps. Replicas
    that exceed the blow-up norm are flagged and frozen.

    Args:
        system: Slow-fast system
        x0: Initial slow state (n,) or per replica (R, n)
        y0: Initial fast state (m,), per replica (R, m), or None for a stationary OU draw
        T: Final time
        dt_slow: Slow step
        streams: One noise stream per replica
        pool: Optional worker pool

    Returns:
        EnsemblePath with the recorded slow grid

    Raises:
        NonGridStep: If T/dt_slow or the fast substep does not align with the noise grid
    """
    n_steps = grid_steps(T, dt_slow, NonGridStep, "Horizon")
    n_sub, dtau = fast_substep(dt_slow, system.eps)
    n_replicas = len(streams)
    if n_replicas == 0:
        raise ValueError("At least one stream is required")
    stride = grid_steps(dtau, streams[0].dt, NonGridStep, "Fast substep")
    propagator = ou_propagator(system.B, system.sigma, dtau)
    n, m = system.dim_slow, system.dim_fast
    pool = pool or ReplicaPool()

    def run(start: int, stop: int):
        chunk = streams[start:stop]
        x = _broadcast_rows(x0, n_replicas, n, start, stop)
        if y0 is None:
            y = np.stack([sample_stationary_ou(system.B, system.sigma, system.eps, s) for s in chunk])
        else:
            y = _broadcast_rows(y0, n_replicas, m, start, stop)

        fine = stacked_normals(chunk, 0, n_steps * n_sub * stride)
        z = fine.reshape(len(chunk), n_steps * n_sub, stride, m).sum(axis=2) / np.sqrt(stride)

        slow = np.empty((len(chunk), n_steps + 1, n))
        fast = np.empty((len(chunk), n_steps + 1, m))
        slow[:, 0], fast[:, 0] = x, y
        blown = _diverged(x, y)

        with np.errstate(over="ignore", invalid="ignore"):
            for k in range(n_steps):
                x_mid = x + 0.5 * dt_slow * system.slow_drift(x, y)
                y_new = y
                f_avg = 0.5 * system.f(x_mid, y_new)
                for j in range(n_sub):
                    y_new = (
                        apply_matrix(propagator.phi, y_new)
                        + apply_matrix(propagator.psi, system.g(x_mid, y_new))
                        + apply_matrix(propagator.factor, z[:, k * n_sub + j])
                    )
                    weight = 0.5 if j == n_sub - 1 else 1.0
                    f_avg = f_avg + weight * system.f(x_mid, y_new)
                x_new = x + dt_slow * (apply_matrix(system.A, x_mid) + f_avg / n_sub)

                x = np.where(blown[:, None], x, x_new)
                y = np.where(blown[:, None], y, y_new)
                blown |= _diverged(x, y)
                slow[:, k + 1], fast[:, k + 1] = x, y

        return slow, fast, blown

    parts = pool.map(run, n_replicas)
    path = EnsemblePath(
        t0=0.0,
        dt=dt_slow,
        slow=np.concatenate([p[0] for p in parts]),
        fast=np.concatenate([p[1] for p in parts]),
        blown_up=np.concatenate([p[2] for p in parts]),
    )
    if np.any(path.blown_up):
        logger.warning(f"{int(path.blown_up.sum())} of {n_replicas} replicas exceeded norm {BLOWUP_NORM:g}")
    return path


def integrate_slowfast(system: SlowFastSystem, x0, y0, T: float, dt_slow: float, stream: NoiseStream) -> SamplePath:
    """
    Integrate one replica of the coupled system on [0, T].

    A diverging path is truncated before the first state above the blow-up
    norm and returned with ``blown_up`` set.
    """
    ensemble = integrate_ensemble(system, x0, y0, T, dt_slow, [stream], pool=ReplicaPool(n_workers=1))
    path = ensemble.replica(0)
    if path.blown_up:
        bad = _diverged(path.slow, path.fast)
        keep = max(1, int(np.argmax(bad)))
        logger.warning(f"Path blew up at t={path.t0 + keep * dt_slow:g}, truncating")
        path = SamplePath(t0=path.t0, dt=path.dt, slow=path.slow[:keep], fast=path.fast[:keep], blown_up=True)
    return path


def simulate_frozen_fast(
    system: SlowFastSystem,
    x,
    y0,
    n_steps: int,
    streams: Sequence[NoiseStream],
    stride: int = 1,
    start: int = 0,
    branch: str = FAST,
) -> np.ndarray:
    """
    Frozen-x fast dynamics dy = (By + g(x, y)) dtau + sigma dW on the fast clock.

    Args:
        system: Slow-fast system (eps is not used; the fast clock is eps-free)
        x: Frozen slow state, (n,) or per chain (R, n)
        y0: Initial fast state, (m,) or per chain (R, m)
        n_steps: Number of exponential Euler steps of length stride * dt
        streams: One stream per chain
        stride: Noise steps aggregated per fast step
        start: First fast step index, in units of the aggregated step
        branch: Stream branch to read

    Returns:
        Array (R, n_steps + 1, m) of fast states

    Raises:
        BlowUp: If any chain diverges
    """
    n_chains = len(streams)
    dtau = stride * streams[0].dt
    propagator = ou_propagator(system.B, system.sigma, dtau)
    m = system.dim_fast
    x = _broadcast_rows(x, n_chains, system.dim_slow, 0, n_chains)
    y = _broadcast_rows(y0, n_chains, m, 0, n_chains)

    fine = stacked_normals(streams, start * stride, (start + n_steps) * stride, branch)
    z = fine.reshape(n_chains, n_steps, stride, m).sum(axis=2) / np.sqrt(stride)

    out = np.empty((n_chains, n_steps + 1, m))
    out[:, 0] = y
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(n_steps):
            y = (
                apply_matrix(propagator.phi, y)
                + apply_matrix(propagator.psi, system.g(x, y))
                + apply_matrix(propagator.factor, z[:, k])
            )
            out[:, k + 1] = y
    if np.any(_diverged(out[:, -1])) or not np.all(np.isfinite(out)):
        raise BlowUp(f"Frozen fast chain diverged at x={x[0].tolist()}")
    return out


@dataclass
class MomentReport:
    """Ensemble estimate of E sup |(x, y)|^2 relative to |z0|^2 + 1."""

    z0_norm_sq: float
    sup_sq_mean: float
    stderr: float
    ratio: float
    n_replicas: int
    n_blown: int


def moment_sanity(
    system: SlowFastSystem,
    z0,
    T: float,
    n_replicas: int,
    dt_slow: float = 1e-3,
    master_seed: int = 0,
) -> MomentReport:
    """
    Estimate E sup_{t<=T} |(x, y)|^2 and its ratio to |z0|^2 + 1.

    The +1 absorbs the additive noise floor, which the bare |z0|^2 bound cannot
    cover at the origin.
    """
    if n_replicas < 100:
        raise ValueError("moment_sanity needs at least 100 replicas")
    z0 = np.asarray(z0, dtype=float)
    n = system.dim_slow
    _, dtau = fast_substep(dt_slow, system.eps)
    streams = replica_streams(master_seed, n_replicas, system.dim_fast, dtau)
    ensemble = integrate_ensemble(system, z0[:n], z0[n:], T, dt_slow, streams)
    norms = np.sum(ensemble.slow ** 2, axis=2) + np.sum(ensemble.fast ** 2, axis=2)
    sup_sq = np.max(norms, axis=1)
    mean, stderr = mean_and_stderr(sup_sq)
    z0_norm_sq = float(z0 @ z0)
    return MomentReport(
        z0_norm_sq=z0_norm_sq,
        sup_sq_mean=float(mean),
        stderr=float(stderr),
        ratio=float(mean) / (z0_norm_sq + 1.0),
        n_replicas=n_replicas,
        n_blown=int(ensemble.blown_up.sum()),
    )
