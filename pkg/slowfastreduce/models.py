"""Data models shared across the reduction toolkit."""

from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Tuple

import numpy as np

from .utils import SlowFastError, float_text

# Vectorized nonlinearity: (x[..., n], y[..., m]) -> [..., n] or [..., m]
Nonlinearity = Callable[[np.ndarray, np.ndarray], np.ndarray]

ORIGIN_TOL = 1e-12


class InvalidSystemError(SlowFastError):
    """Raised when a slow-fast system definition violates its invariants."""

    pass


class OutsidePathRange(SlowFastError):
    """Raised when a sample path is queried outside its time window."""

    pass


@dataclass(frozen=True)
class SlowFastSystem:
    """Slow-fast SDE  dx = (Ax + f) dt,  dy = (By + g)/eps dt + sigma/sqrt(eps) dW.

    ``f`` and ``g`` are vectorized over leading axes. ``lip_f``/``lip_g`` hold
    analytic Lipschitz constants when known.
    """

    A: np.ndarray
    B: np.ndarray
    f: Nonlinearity
    g: Nonlinearity
    sigma: float
    eps: float
    name: str = "custom"
    lip_f: Optional[float] = None
    lip_g: Optional[float] = None

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        B = np.atleast_2d(np.asarray(self.B, dtype=float))
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)

        if A.shape[0] != A.shape[1] or B.shape[0] != B.shape[1]:
            raise InvalidSystemError(f"A {A.shape} and B {B.shape} must be square")
        if not (np.all(np.isfinite(A)) and np.all(np.isfinite(B))):
            raise InvalidSystemError("A and B must be finite")
        if not 0.0 < self.eps <= 1.0:
            raise InvalidSystemError(f"eps must lie in (0, 1], got {self.eps}")
        if self.sigma == 0:
            raise InvalidSystemError("sigma must be nonzero")

        x0 = np.zeros(self.dim_slow)
        y0 = np.zeros(self.dim_fast)
        f0 = np.asarray(self.f(x0, y0), dtype=float)
        g0 = np.asarray(self.g(x0, y0), dtype=float)
        if f0.shape != (self.dim_slow,) or g0.shape != (self.dim_fast,):
            raise InvalidSystemError(
                f"f(0,0) has shape {f0.shape}, g(0,0) has shape {g0.shape}; "
                f"expected ({self.dim_slow},) and ({self.dim_fast},)"
            )
        if np.max(np.abs(f0), initial=0.0) > ORIGIN_TOL or np.max(np.abs(g0), initial=0.0) > ORIGIN_TOL:
            raise InvalidSystemError("f(0,0) and g(0,0) must vanish")

    @property
    def dim_slow(self) -> int:
        return self.A.shape[0]

    @property
    def dim_fast(self) -> int:
        return self.B.shape[0]

    def with_eps(self, eps: float) -> "SlowFastSystem":
        """Copy of the system at another scale parameter."""
        return replace(self, eps=eps)

    def slow_drift(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Ax + f(x, y), vectorized over leading axes."""
        return np.einsum("ij,...j->...i", self.A, x) + self.f(x, y)


@dataclass
class SamplePath:
    """Time grid plus slow and fast trajectories of one replica."""

    t0: float
    dt: float
    slow: np.ndarray
    fast: np.ndarray
    blown_up: bool = False

    def __post_init__(self):
        self.slow = np.asarray(self.slow, dtype=float)
        self.fast = np.asarray(self.fast, dtype=float)
        if self.slow.shape[0] != self.fast.shape[0]:
            raise ValueError("slow and fast trajectories must have equal length")

    def __len__(self) -> int:
        return self.slow.shape[0]

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(len(self))

    @property
    def t_end(self) -> float:
        return self.t0 + self.dt * (len(self) - 1)

    def interpolate(self, t: float) -> Tuple[np.ndarray, np.ndarray]:
        """
        Linear interpolation of (slow, fast) at time ``t``.

        Raises:
            OutsidePathRange: If ``t`` lies outside [t0, t_end]
        """
        span = 1e-12 * max(1.0, abs(self.t_end))
        if t < self.t0 - span or t > self.t_end + span:
            raise OutsidePathRange(f"t={t} outside [{self.t0}, {self.t_end}]")
        u = min(max((t - self.t0) / self.dt, 0.0), len(self) - 1.0)
        k = min(int(np.floor(u)), len(self) - 2) if len(self) > 1 else 0
        w = u - k
        if len(self) == 1:
            return self.slow[0].copy(), self.fast[0].copy()
        slow = (1.0 - w) * self.slow[k] + w * self.slow[k + 1]
        fast = (1.0 - w) * self.fast[k] + w * self.fast[k + 1]
        return slow, fast

    def csv_text(self) -> str:
        """Columns t, x_1..x_n, y_1..y_m with 17 significant digits."""
        n = self.slow.shape[1] if self.slow.ndim == 2 else 0
        m = self.fast.shape[1] if self.fast.ndim == 2 else 0
        header = ["t"] + [f"x_{i + 1}" for i in range(n)] + [f"y_{j + 1}" for j in range(m)]
        lines = [",".join(header)]
        for t, x, y in zip(self.times, self.slow, self.fast):
            row = [t, *np.atleast_1d(x)[:n], *np.atleast_1d(y)[:m]]
            lines.append(",".join(float_text(v) for v in row))
        return "\n".join(lines) + "\n"

    def to_csv(self, path: str) -> None:
        """Write ``csv_text`` to ``path``."""
        with open(path, "w", encoding="utf-8", newline="\n") as handle:
            handle.write(self.csv_text())


@dataclass
class EnsemblePath:
    """Replica-batched trajectories on a shared slow grid."""

    t0: float
    dt: float
    slow: np.ndarray  # (R, K+1, n)
    fast: np.ndarray  # (R, K+1, m)
    blown_up: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.blown_up is None:
            self.blown_up = np.zeros(self.slow.shape[0], dtype=bool)

    @property
    def n_replicas(self) -> int:
        return self.slow.shape[0]

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.slow.shape[1])

    def replica(self, index: int) -> SamplePath:
        """Single-replica view as a SamplePath."""
        return SamplePath(
            t0=self.t0,
            dt=self.dt,
            slow=self.slow[index],
            fast=self.fast[index],
            blown_up=bool(self.blown_up[index]),
        )
