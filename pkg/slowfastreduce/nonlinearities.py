"""Registry of named slow-fast nonlinearities.

Each factory takes ``(dim_slow, dim_fast)`` and returns a ``NonlinearPair``
whose ``f`` and ``g`` are vectorized over leading axes.
"""

from dataclasses import dataclass
from typing import Callable, Dict, Optional

import numpy as np

from .utils import SlowFastError

# Toy cutoff radii (squared): exact polynomials inside, zero outside
TOY_INNER_R2 = 1.0 / 16.0
TOY_OUTER_R2 = 1.0 / 8.0
WEAK_COUPLING = 0.1


class UnknownNonlinearity(SlowFastError):
    """Raised when a nonlinearity name is not registered."""

    pass


@dataclass(frozen=True)
class NonlinearPair:
    """Slow and fast nonlinearities with optional analytic Lipschitz constants."""

    f: Callable[[np.ndarray, np.ndarray], np.ndarray]
    g: Callable[[np.ndarray, np.ndarray], np.ndarray]
    lip_f: Optional[float] = None
    lip_g: Optional[float] = None


NONLINEARITIES: Dict[str, Callable[[int, int], NonlinearPair]] = {}


def register_nonlinearity(name: str):
    """Decorator adding a factory to the registry under ``name``."""

    def decorator(factory: Callable[[int, int], NonlinearPair]):
        NONLINEARITIES[name] = factory
        return factory

    return decorator


def get_nonlinearity(name: str, dim_slow: int, dim_fast: int) -> NonlinearPair:
    """
    Build a registered nonlinearity pair for the given dimensions.

    Raises:
        UnknownNonlinearity: If ``name`` is not registered
    """
    factory = NONLINEARITIES.get(name)
    if factory is None:
        raise UnknownNonlinearity(
            f"Unknown nonlinearity '{name}', registered: {sorted(NONLINEARITIES)}"
        )
    return factory(dim_slow, dim_fast)


def smoothstep_blend(r2: np.ndarray) -> np.ndarray:
    """Quintic smoothstep in r^2: 1 inside TOY_INNER_R2, 0 outside TOY_OUTER_R2, C^2 between."""
    s = np.clip((r2 - TOY_INNER_R2) / (TOY_OUTER_R2 - TOY_INNER_R2), 0.0, 1.0)
    return 1.0 - s * s * s * (10.0 - 15.0 * s + 6.0 * s * s)


def toy_f(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """-xy near the origin, blended to zero outside radius 1/sqrt(8)."""
    x1 = x[..., 0]
    y1 = y[..., 0]
    return (-x1 * y1 * smoothstep_blend(x1 * x1 + y1 * y1))[..., None]


def toy_g(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """x^2 - 2y^2 near the origin, blended to zero outside radius 1/sqrt(8)."""
    x1 = x[..., 0]
    y1 = y[..., 0]
    return ((x1 * x1 - 2.0 * y1 * y1) * smoothstep_blend(x1 * x1 + y1 * y1))[..., None]


def _zeros_like_slow(dim_slow: int):
    def f(x, y):
        return np.zeros(np.broadcast_shapes(x.shape[:-1], y.shape[:-1]) + (dim_slow,))

    return f


def _zeros_like_fast(dim_fast: int):
    def g(x, y):
        return np.zeros(np.broadcast_shapes(x.shape[:-1], y.shape[:-1]) + (dim_fast,))

    return g


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise UnknownNonlinearity(message)


@register_nonlinearity("toy")
def toy_pair(dim_slow: int, dim_fast: int) -> NonlinearPair:
    _require(dim_slow == 1 and dim_fast == 1, "toy nonlinearity is scalar (n = m = 1)")
    return NonlinearPair(f=toy_f, g=toy_g)


@register_nonlinearity("linear_test")
def linear_test_pair(dim_slow: int, dim_fast: int) -> NonlinearPair:
    return NonlinearPair(
        f=_zeros_like_slow(dim_slow), g=_zeros_like_fast(dim_fast), lip_f=0.0, lip_g=0.0
    )


@register_nonlinearity("weak_coupling")
def weak_coupling_pair(dim_slow: int, dim_fast: int) -> NonlinearPair:
    def f(x, y):
        shape = np.broadcast_shapes(x.shape[:-1], y.shape[:-1]) + (dim_slow,)
        return np.broadcast_to(WEAK_COUPLING * np.sin(y[..., :1]), shape).copy()

    def g(x, y):
        shape = np.broadcast_shapes(x.shape[:-1], y.shape[:-1]) + (dim_fast,)
        return np.broadcast_to(WEAK_COUPLING * np.sin(x[..., :1]), shape).copy()

    return NonlinearPair(
        f=f,
        g=g,
        lip_f=WEAK_COUPLING * np.sqrt(dim_slow),
        lip_g=WEAK_COUPLING * np.sqrt(dim_fast),
    )


@register_nonlinearity("fast_forced")
def fast_forced_pair(dim_slow: int, dim_fast: int) -> NonlinearPair:
    _require(dim_slow == dim_fast, "fast_forced needs n == m (g(x, y) = x)")

    def g(x, y):
        return np.broadcast_to(x, np.broadcast_shapes(x.shape, y.shape)).copy()

    return NonlinearPair(f=_zeros_like_slow(dim_slow), g=g, lip_f=0.0, lip_g=1.0)


@register_nonlinearity("ou_readout")
def ou_readout_pair(dim_slow: int, dim_fast: int) -> NonlinearPair:
    _require(dim_slow == dim_fast, "ou_readout needs n == m (f(x, y) = y)")

    def f(x, y):
        return np.broadcast_to(y, np.broadcast_shapes(x.shape, y.shape)).copy()

    return NonlinearPair(f=f, g=_zeros_like_fast(dim_fast), lip_f=1.0, lip_g=0.0)
