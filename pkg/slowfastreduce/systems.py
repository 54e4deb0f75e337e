"""Structural assumption checks for slow-fast systems.

The fast semigroup bound comes from the logarithmic norm of B and the
backward slow bound from the smallest eigenvalue of the symmetric part of A.
The spectral gap condition is scanned over the admissible weight range and the
asymptotic completeness gap is minimized in closed form.
"""

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Tuple
import logging

import numpy as np
from scipy import optimize, special
from scipy.stats import qmc

from .models import SlowFastSystem
from .utils import SlowFastError

logger = logging.getLogger(__name__)

# Configuration Constants
LAMBDA_GRID_POINTS = 1024
LOGIT_SPAN = 30.0
DELTA_MIN = 1e-12
DELTA_MAX = 1e12
DEFAULT_LIPSCHITZ_SAMPLES = 4096


class FastNotDissipative(SlowFastError):
    """Raised when the fast linear part has no decaying norm bound."""

    pass


class DegenerateInterval(SlowFastError):
    """Raised when the admissible weight interval is empty."""

    pass


class EmptyDomain(SlowFastError):
    """Raised when a sampling box has zero volume."""

    pass


@dataclass
class AssumptionReport:
    """Constants of the structural assumptions and the verdicts drawn from them."""

    alpha: float
    beta: float
    lip_f: float = 0.0
    lip_g: float = 0.0
    lambda_interval: Optional[Tuple[float, float]] = None
    lambda_best: Optional[float] = None
    h2_holds: bool = False
    gap_holds: bool = False
    delta: Optional[float] = None
    gamma: Optional[float] = None
    backward_certified: bool = True
    lipschitz_is_lower_bound: bool = False
    notes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "beta": self.beta,
            "lip_f": self.lip_f,
            "lip_g": self.lip_g,
            "lambda_interval": list(self.lambda_interval) if self.lambda_interval else None,
            "lambda_best": self.lambda_best,
            "h2_holds": self.h2_holds,
            "gap_holds": self.gap_holds,
            "delta": self.delta,
            "gamma": self.gamma,
            "backward_certified": self.backward_certified,
            "lipschitz_is_lower_bound": self.lipschitz_is_lower_bound,
            "notes": list(self.notes),
        }


def log_norm(matrix: np.ndarray) -> float:
    """Logarithmic 2-norm: largest eigenvalue of the symmetric part."""
    matrix = np.atleast_2d(np.asarray(matrix, dtype=float))
    return float(np.linalg.eigvalsh(0.5 * (matrix + matrix.T))[-1])


def check_h1(system: SlowFastSystem) -> Tuple[float, float]:
    """
    Growth bound of e^{tA} for t <= 0 and decay bound of e^{tB} for t >= 0.

    Args:
        system: Slow-fast system to check

    Returns:
        Tuple of (alpha, beta) with alpha >= 0 > beta

    Raises:
        FastNotDissipative: If the logarithmic norm of B is not negative
    """
    beta = log_norm(system.B)
    if beta >= 0:
        raise FastNotDissipative(
            f"Logarithmic norm of B is {beta:.6g} >= 0, the fast semigroup does not decay"
        )

    backward = -log_norm(-system.A)
    if backward < 0:
        logger.warning(
            f"Symmetric part of A has eigenvalue {backward:.6g} < 0; "
            "alpha = 0 does not certify the backward growth bound"
        )
    return max(0.0, backward), beta


def h2_expression(lam: np.ndarray, alpha: float, beta: float, lip_f: float, lip_g: float, eps: float):
    """Left side L_f/(alpha - lam) + L_g/(eps*lam - beta) of the spectral gap condition."""
    lam = np.asarray(lam, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        slow = np.where(lip_f > 0, lip_f / (alpha - lam), 0.0)
        fast = np.where(lip_g > 0, lip_g / (eps * lam - beta), 0.0)
    return slow + fast


def _lambda_grid(lo: float, hi: float) -> np.ndarray:
    # Logit spacing clusters points geometrically toward both open ends
    u = special.expit(np.linspace(-LOGIT_SPAN, LOGIT_SPAN, LAMBDA_GRID_POINTS))
    grid = lo + (hi - lo) * u
    return grid[(grid > lo) & (grid < hi)]


def scan_h2(report: AssumptionReport, eps: float) -> Tuple[bool, Optional[Tuple[float, float]], Optional[float]]:
    """
    Scan the admissible weights for the spectral gap condition.

    Returns:
        Tuple of (holds, feasible interval around the best weight, best weight)

    Raises:
        DegenerateInterval: If beta/eps >= alpha
    """
    lo, hi = report.beta / eps, report.alpha
    if not lo < hi:
        raise DegenerateInterval(f"Weight range ({lo:.6g}, {hi:.6g}) is empty")

    grid = _lambda_grid(lo, hi)
    if grid.size == 0:
        raise DegenerateInterval(f"Weight range ({lo:.6g}, {hi:.6g}) has no representable points")

    values = h2_expression(grid, report.alpha, report.beta, report.lip_f, report.lip_g, eps)
    k = int(np.argmin(values))
    holds = bool(values[k] < 1.0)

    best = float(grid[k])
    if 0 < k < grid.size - 1 and values[k] > 0:
        try:
            refined = optimize.minimize_scalar(
                lambda lam: float(h2_expression(lam, report.alpha, report.beta, report.lip_f, report.lip_g, eps)),
                bracket=(grid[k - 1], grid[k], grid[k + 1]),
                method="golden",
            )
            if refined.success and lo < refined.x < hi and refined.fun <= values[k]:
                best = float(refined.x)
        except ValueError as e:
            logger.debug(f"Golden refinement skipped: {e}")

    if not holds:
        logger.debug(f"H2 fails: minimum {values[k]:.6g} at lambda={grid[k]:.6g}")
        return False, None, None

    # Contiguous feasible run containing the minimum
    left = k
    while left > 0 and values[left - 1] < 1.0:
        left -= 1
    right = k
    while right < grid.size - 1 and values[right + 1] < 1.0:
        right += 1
    return True, (float(grid[left]), float(grid[right])), best


def check_h2(report: AssumptionReport, eps: float) -> Tuple[bool, Optional[Tuple[float, float]]]:
    """
    Decide the spectral gap condition at scale ``eps``.

    Returns:
        Tuple of (h2_holds, feasible lambda interval or None)
    """
    holds, interval, _ = scan_h2(report, eps)
    return holds, interval


def gap_objective(delta, report: AssumptionReport, eps: float):
    """eps*alpha + eps*L_f + eps*delta*L_f + beta + L_g + L_g/delta."""
    delta = np.asarray(delta, dtype=float)
    return (
        eps * report.alpha
        + eps * report.lip_f * (1.0 + delta)
        + report.beta
        + report.lip_g
        + report.lip_g / delta
    )


def check_completeness_gap(report: AssumptionReport, eps: float) -> Tuple[bool, Optional[float], Optional[float]]:
    """
    Minimize the asymptotic completeness gap over delta in closed form.

    Returns:
        Tuple of (gap_holds, delta, gamma); delta and gamma are None when the gap fails
    """
    lip_f, lip_g = report.lip_f, report.lip_g
    if lip_f > 0 and lip_g > 0:
        delta = float(np.clip(np.sqrt(lip_g / (eps * lip_f)), DELTA_MIN, DELTA_MAX))
        value = float(gap_objective(delta, report, eps))
        gamma = -report.beta - lip_g - lip_g / delta
    elif lip_f == 0:
        # Objective decreases in delta; take the delta -> infinity limit
        delta = float("inf")
        value = eps * report.alpha + report.beta + lip_g
        gamma = -report.beta - lip_g
    else:
        # lip_g == 0: delta -> 0 removes the eps*delta*L_f term
        delta = DELTA_MIN
        value = eps * report.alpha + eps * lip_f + report.beta
        gamma = -report.beta

    if value < 0:
        return True, delta, float(gamma)
    logger.debug(f"Completeness gap fails: minimum {value:.6g}")
    return False, None, None


def _as_box(domain_box) -> np.ndarray:
    box = np.atleast_2d(np.asarray(domain_box, dtype=float))
    if box.ndim != 2 or box.shape[1] != 2:
        raise EmptyDomain(f"Box must be a sequence of (low, high) pairs, got shape {box.shape}")
    return box


def estimate_lipschitz(
    fn: Callable[[np.ndarray], np.ndarray],
    domain_box: Sequence[Sequence[float]],
    n_samples: int = DEFAULT_LIPSCHITZ_SAMPLES,
    seed: int = 0,
) -> float:
    """
    Sampled lower bound on the Lipschitz constant of ``fn`` over a box.

    Point pairs come from a scrambled Halton sequence: a base point plus a
    nearby partner at a log-uniform distance in a quasi-random direction.
    Sequence prefixes are shared across ``n_samples`` for a fixed seed, so the
    estimate never decreases as the sample count grows.

    Args:
        fn: Map evaluated on points of shape (..., d)
        domain_box: Sequence of (low, high) per coordinate
        n_samples: Number of point pairs
        seed: Scrambling seed

    Returns:
        float: max |fn(p) - fn(q)| / |p - q| over the sampled pairs

    Raises:
        EmptyDomain: If any side of the box has nonpositive length
    """
    if n_samples < 2:
        raise ValueError("n_samples must be at least 2")
    box = _as_box(domain_box)
    low, high = box[:, 0], box[:, 1]
    width = high - low
    if np.any(width <= 0):
        raise EmptyDomain(f"Box {box.tolist()} has zero volume")

    dim = box.shape[0]
    u = qmc.Halton(d=2 * dim + 1, scramble=True, seed=seed).random(n_samples)
    p = low + width * u[:, :dim]
    direction = 2.0 * u[:, dim : 2 * dim] - 1.0
    norm = np.linalg.norm(direction, axis=1, keepdims=True)
    direction = np.where(norm > 0, direction / np.where(norm > 0, norm, 1.0), 1.0 / np.sqrt(dim))
    scale = np.min(width) * 10.0 ** (-1.0 - 3.0 * u[:, 2 * dim : 2 * dim + 1])
    q = np.clip(p + scale * direction, low, high)

    distance = np.linalg.norm(p - q, axis=1)
    values_p = np.asarray(fn(p), dtype=float).reshape(n_samples, -1)
    values_q = np.asarray(fn(q), dtype=float).reshape(n_samples, -1)
    change = np.linalg.norm(values_p - values_q, axis=1)
    usable = distance > 0
    if not np.any(usable):
        return 0.0
    return float(np.max(change[usable] / distance[usable]))


def _stacked(fn2: Callable[[np.ndarray, np.ndarray], np.ndarray], dim_slow: int):
    def fn(points: np.ndarray) -> np.ndarray:
        return fn2(points[..., :dim_slow], points[..., dim_slow:])

    return fn


def manifold_lipschitz_bound(report: AssumptionReport, eps: float, lam: float) -> float:
    """
    Lipschitz constant of the slow manifold graph map at weight ``lam``.

    Returns:
        float: L_g / ((alpha - lam) * (1 - L_g*(1/(alpha - lam) + 1/(eps*lam - beta)))),
        or inf when the denominator is not positive
    """
    slow_gap = report.alpha - lam
    fast_gap = eps * lam - report.beta
    if slow_gap <= 0 or fast_gap <= 0:
        return float("inf")
    denominator = slow_gap * (1.0 - report.lip_g * (1.0 / slow_gap + 1.0 / fast_gap))
    if denominator <= 0:
        return float("inf")
    return report.lip_g / denominator


def assess_assumptions(
    system: SlowFastSystem,
    box_radius: float = 1.0,
    n_samples: int = DEFAULT_LIPSCHITZ_SAMPLES,
    seed: int = 0,
) -> AssumptionReport:
    """
    Run every structural check for ``system`` into one report.

    Lipschitz constants declared on the system are used as given; missing ones
    are estimated on the box [-box_radius, box_radius]^(n+m) and the report is
    flagged as holding lower bounds.

    Raises:
        FastNotDissipative: If the fast linear part does not decay
    """
    alpha, beta = check_h1(system)
    report = AssumptionReport(alpha=alpha, beta=beta)
    report.backward_certified = -log_norm(-system.A) >= 0
    if not report.backward_certified:
        report.notes.append("alpha clipped to 0; backward growth bound not certified")

    box = [(-box_radius, box_radius)] * (system.dim_slow + system.dim_fast)
    if system.lip_f is not None:
        report.lip_f = float(system.lip_f)
    else:
        report.lip_f = estimate_lipschitz(_stacked(system.f, system.dim_slow), box, n_samples, seed)
        report.lipschitz_is_lower_bound = True
    if system.lip_g is not None:
        report.lip_g = float(system.lip_g)
    else:
        report.lip_g = estimate_lipschitz(_stacked(system.g, system.dim_slow), box, n_samples, seed)
        report.lipschitz_is_lower_bound = True

    report.h2_holds, report.lambda_interval, report.lambda_best = scan_h2(report, system.eps)
    report.gap_holds, report.delta, report.gamma = check_completeness_gap(report, system.eps)

    logger.info(
        f"Assumptions for '{system.name}' at eps={system.eps:g}: alpha={alpha:.4g}, beta={beta:.4g}, "
        f"L_f={report.lip_f:.4g}, L_g={report.lip_g:.4g}, H2={report.h2_holds}, gap={report.gap_holds}"
    )
    return report
