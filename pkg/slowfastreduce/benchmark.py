"""Toy benchmark: cutoff nonlinearities, closed-form reduced models and the validation checklist."""

from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union
import logging

import numpy as np

from .averaging import (
    EmpiricalFunction,
    averaging_error_sweep,
    fbar_ensemble,
    fbar_time_average,
    simulate_full_ensemble,
    stationary_fast_samples,
)
from .fluctuation import INTERMEDIATE_SLOPE_WINDOW, integrate_intermediate_ensemble, intermediate_error_sweep, sigma_estimate
from .manifold import manifold_gap
from .models import EnsemblePath, SamplePath, SlowFastSystem
from .nonlinearities import get_nonlinearity, toy_f, toy_g
from .paths import DEFAULT_NOISE_DT, NoiseStream, replica_streams
from .systems import estimate_lipschitz
from .utils import ReplicaPool, SlowFastError, mean_and_stderr

logger = logging.getLogger(__name__)

# Configuration Constants
ASYMPTOTIC_ZONE = 0.15
SUPPORT_HALF_WIDTH = 0.36
FBAR_SLACK = 1e-4
STATIONARY_MEAN_SLACK = 1e-3
SIGMA_RELATIVE_TOL = 0.2
CHECK_X = 0.05
TOY_SIGMA = 0.1
NORMAL_FORM_BRANCHES = ("normal_form_1", "normal_form_2", "normal_form_3")


class OutOfAsymptoticZone(SlowFastError):
    """Raised (or flagged) when closed forms are used beyond |x| = 0.15."""

    pass


@lru_cache(maxsize=None)
def toy_lipschitz() -> Tuple[float, float]:
    """Sampled Lipschitz constants of the toy f and g over their support box."""
    box = [(-SUPPORT_HALF_WIDTH, SUPPORT_HALF_WIDTH)] * 2
    lip_f = estimate_lipschitz(lambda p: toy_f(p[..., :1], p[..., 1:]), box)
    lip_g = estimate_lipschitz(lambda p: toy_g(p[..., :1], p[..., 1:]), box)
    return lip_f, lip_g


def toy_system(sigma: float = TOY_SIGMA, eps: float = 1e-2) -> SlowFastSystem:
    """
    Scalar toy system with A = 0, B = -1 and the cutoff nonlinearities.

    f = -xy and g = x^2 - 2y^2 inside r^2 < 1/16, both blended to zero by
    r^2 = 1/8 with a quintic smoothstep.
    """
    lip_f, lip_g = toy_lipschitz()
    return SlowFastSystem(
        A=np.zeros((1, 1)), B=-np.ones((1, 1)), f=toy_f, g=toy_g, sigma=sigma, eps=eps, name="toy", lip_f=lip_f, lip_g=lip_g
    )


def build_system(
    name: str,
    sigma: float,
    eps: float,
    A: Optional[Sequence[Sequence[float]]] = None,
    B: Optional[Sequence[Sequence[float]]] = None,
    nonlinearity: Optional[str] = None,
) -> SlowFastSystem:
    """
    System by builtin name, or from matrices plus a registered nonlinearity.

    Builtins other than ``toy`` default to A = 0 and B = -I in one dimension.
    """
    if name == "toy" and A is None and B is None:
        return toy_system(sigma, eps)
    A = np.zeros((1, 1)) if A is None else np.atleast_2d(np.asarray(A, dtype=float))
    B = -np.eye(A.shape[0]) if B is None else np.atleast_2d(np.asarray(B, dtype=float))
    pair = get_nonlinearity(nonlinearity or name, A.shape[0], B.shape[0])
    return SlowFastSystem(A=A, B=B, f=pair.f, g=pair.g, sigma=sigma, eps=eps, name=name, lip_f=pair.lip_f, lip_g=pair.lip_g)


@dataclass
class ClosedForms:
    """Asymptotic toy quantities near the origin."""

    fbar: np.ndarray
    Sigma: np.ndarray
    ybar_mean: np.ndarray
    in_zone: bool


def closed_forms(x, sigma: float, strict: bool = False) -> ClosedForms:
    """
    Closed-form f-bar, Sigma and stationary fast mean of the toy.

        fbar  = -x^3 + sigma^2 x
        Sigma = sigma^2 x^2 (1 - 12 x^2 + 20 sigma^2)
        ybar  = x^2 - sigma^2

    Raises:
        OutOfAsymptoticZone: Only with ``strict``; otherwise the result is flagged
    """
    x = np.asarray(x, dtype=float)
    in_zone = bool(np.all(np.abs(x) <= ASYMPTOTIC_ZONE))
    if not in_zone:
        message = f"Closed forms used at |x|={float(np.max(np.abs(x))):g} > {ASYMPTOTIC_ZONE}"
        if strict:
            raise OutOfAsymptoticZone(message)
        logger.warning(message)
    s2 = sigma * sigma
    return ClosedForms(
        fbar=-x ** 3 + s2 * x,
        Sigma=s2 * x ** 2 * (1.0 - 12.0 * x ** 2 + 20.0 * s2),
        ybar_mean=x ** 2 - s2,
        in_zone=in_zone,
    )


def closed_form_fbar(sigma: float) -> Callable[[np.ndarray], np.ndarray]:
    """Vectorized f-bar of the toy for states of shape (..., 1)."""
    return lambda x: -np.asarray(x) ** 3 + sigma * sigma * np.asarray(x)


def closed_form_sigma_bar(sigma: float) -> Callable[[np.ndarray], np.ndarray]:
    """Vectorized sqrt(Sigma) of the toy, shape (..., 1, 1); negative Sigma clips to 0."""

    def sigma_bar(x):
        x = np.asarray(x, dtype=float)
        s2 = sigma * sigma
        value = s2 * x ** 2 * (1.0 - 12.0 * x ** 2 + 20.0 * s2)
        return np.sqrt(np.clip(value, 0.0, None))[..., None]

    return sigma_bar


def normal_form_ensemble(sigma: float, eps: float, x0: float, T: float, dt: float, streams: Sequence[NoiseStream]) -> EnsemblePath:
    """
    Euler-Maruyama replicas of the three-noise normal form

        dx = (-x^3 + sigma^2 x) dt - sqrt(eps) sigma x dW1
             + sqrt(2 eps) sigma^2 x dW3 + 4 sqrt(eps) sigma x^3 dW2

    with each W read from its own stream branch.
    """
    if abs(x0) > ASYMPTOTIC_ZONE:
        logger.warning(f"Normal form started at |x0|={abs(x0):g} > {ASYMPTOTIC_ZONE}")
    n_steps = int(round(T / dt))
    scalar = [replace(stream, dim=1) for stream in streams]
    dW1, dW2, dW3 = (
        np.sqrt(dt) * np.stack([s.normals(0, n_steps, branch)[:, 0] for s in scalar]) for branch in NORMAL_FORM_BRANCHES
    )
    root = np.sqrt(eps)
    s2 = sigma * sigma
    x = np.full(len(streams), float(x0))
    out = np.empty((len(streams), n_steps + 1, 1))
    out[:, 0, 0] = x
    for k in range(n_steps):
        x = (
            x
            + (-x ** 3 + s2 * x) * dt
            - root * sigma * x * dW1[:, k]
            + np.sqrt(2.0) * root * s2 * x * dW3[:, k]
            + 4.0 * root * sigma * x ** 3 * dW2[:, k]
        )
        out[:, k + 1, 0] = x
    return EnsemblePath(t0=0.0, dt=dt, slow=out, fast=np.zeros(out.shape[:2] + (0,)), blown_up=np.zeros(len(streams), dtype=bool))


def normal_form_simulate(sigma: float, eps: float, x0: float, T: float, dt: float, stream: NoiseStream) -> SamplePath:
    """Single path of the three-noise normal form."""
    return normal_form_ensemble(sigma, eps, x0, T, dt, [stream]).replica(0)


def variance_and_stderr(samples: np.ndarray) -> Tuple[float, float]:
    """Sample variance and its large-sample standard error sqrt((m4 - var^2) / n)."""
    samples = np.asarray(samples, dtype=float).ravel()
    centered = samples - samples.mean()
    var = float(np.mean(centered ** 2))
    m4 = float(np.mean(centered ** 4))
    return var, float(np.sqrt(max(m4 - var * var, 0.0) / samples.size))


def compare_reduced_variances(
    sigma: float,
    eps: float,
    x0: float,
    T: float,
    n_replicas: int,
    dt_slow: float = 1e-3,
    master_seed: int = 0,
    pool: Optional[ReplicaPool] = None,
) -> Dict[str, Any]:
    """Var x(T) of the full toy, the single-noise intermediate model and the three-noise normal form."""
    system = toy_system(sigma, eps)
    full = simulate_full_ensemble(system, np.array([x0]), T, dt_slow, n_replicas, master_seed, pool)
    streams = replica_streams(master_seed, n_replicas, 1)
    intermediate = integrate_intermediate_ensemble(
        system.A, closed_form_fbar(sigma), closed_form_sigma_bar(sigma), eps, np.array([x0]), T, dt_slow, streams
    )
    normal_form = normal_form_ensemble(sigma, eps, x0, T, dt_slow, streams)
    result = {}
    for label, path in (("full", full), ("intermediate", intermediate), ("normal_form", normal_form)):
        var, stderr = variance_and_stderr(path.slow[:, -1, 0])
        result[label] = {"variance": var, "stderr": stderr}
    result["normal_form_over_intermediate"] = result["normal_form"]["variance"] / result["intermediate"]["variance"]
    logger.info(f"Reduced variances at eps={eps:g}: {result}")
    return result


@dataclass(frozen=True)
class Budget:
    """Sample sizes and run lengths of every validation check.

    ``T_avg``, ``T_corr`` and ``T_total`` are fast-clock lengths.
    """

    name: str
    n_stationary: int
    T_avg: float
    T_corr: float
    T_total: float
    n_gap: int
    n_sweep: int
    eps_list: Tuple[float, ...] = (1e-1, 10 ** -1.5, 1e-2, 10 ** -2.5)
    dt_slow: float = 1e-3
    T: float = 1.0

    @property
    def is_zero(self) -> bool:
        return self.n_stationary == 0 and self.n_gap == 0 and self.n_sweep == 0

    def scaled(self, factor: float) -> "Budget":
        """Budget with every sample size and chain length multiplied by ``factor``."""
        return replace(
            self,
            name=f"{self.name}x{factor:g}",
            n_stationary=int(self.n_stationary * factor),
            T_avg=self.T_avg * factor,
            T_total=self.T_total * factor,
            n_gap=int(self.n_gap * factor),
            n_sweep=int(self.n_sweep * factor),
        )


BUDGETS: Dict[str, Budget] = {
    "zero": Budget("zero", 0, 0.0, 0.0, 0.0, 0, 0),
    "small": Budget("small", 400, 20.0, 20.0, 1000.0, 32, 400, eps_list=(1e-1, 10 ** -1.5, 1e-2)),
    "default": Budget("default", 10000, 200.0, 20.0, 20000.0, 256, 10000),
    "large": Budget("large", 40000, 800.0, 20.0, 80000.0, 1024, 40000),
}


@dataclass
class ValidationItem:
    """One acceptance check: |estimate - target| <= tolerance."""

    name: str
    estimate: Optional[float] = None
    target: Optional[float] = None
    tolerance: Optional[float] = None
    status: str = "skipped"
    detail: str = ""

    @property
    def margin(self) -> Optional[float]:
        if self.estimate is None or self.target is None or not self.tolerance:
            return None
        return abs(self.estimate - self.target) / self.tolerance

    @property
    def passed(self) -> bool:
        return self.status == "passed"

    def to_dict(self) -> Dict[str, Any]:
        payload = asdict(self)
        payload["margin"] = self.margin
        payload["passed"] = self.passed
        return payload


@dataclass
class ValidationReport:
    """Outcome of the toy checklist; no wall-clock data so repeated runs are identical."""

    budget: str
    seed: int
    items: List[ValidationItem] = field(default_factory=list)
    extras: Dict[str, Any] = field(default_factory=dict)

    @property
    def failed(self) -> List[ValidationItem]:
        return [item for item in self.items if item.status in ("failed", "error")]

    @property
    def ok(self) -> bool:
        return not self.failed

    def to_dict(self) -> Dict[str, Any]:
        return {
            "budget": self.budget,
            "seed": self.seed,
            "ok": self.ok,
            "items": [item.to_dict() for item in self.items],
            "extras": self.extras,
        }


def _judge(item: ValidationItem, estimate: float, target: float, tolerance: float) -> ValidationItem:
    item.estimate, item.target, item.tolerance = float(estimate), float(target), float(tolerance)
    item.status = "passed" if abs(estimate - target) <= tolerance else "failed"
    return item


def _interval(item: ValidationItem, estimate: Optional[float], low: float, high: float) -> ValidationItem:
    if estimate is None:
        item.status, item.detail = "failed", "no rate fitted"
        return item
    return _judge(item, estimate, 0.5 * (low + high), 0.5 * (high - low))


class ToyValidator:
    """Runs the toy checklist item by item; a failing check never aborts the others."""

    def __init__(self, budget: Budget, seed: int = 0, pool: Optional[ReplicaPool] = None):
        self.budget = budget
        self.seed = seed
        self.pool = pool or ReplicaPool()
        self.logger = logging.getLogger(self.__class__.__name__)
        self.sigma = TOY_SIGMA
        self.system = toy_system(self.sigma, 1e-2)
        self.forms = closed_forms(CHECK_X, self.sigma)
        self.x = np.array([CHECK_X])
        self.extras: Dict[str, Any] = {}

    def checks(self) -> List[Tuple[str, Callable[[ValidationItem], ValidationItem]]]:
        return [
            ("stationary_fast_mean", self.check_stationary_mean),
            ("fbar_ensemble", self.check_fbar_ensemble),
            ("fbar_time_average", self.check_fbar_time_average),
            ("fbar_odd_symmetry", self.check_fbar_symmetry),
            ("sigma_green_kubo", self.check_sigma),
            ("manifold_gap_rate", self.check_manifold_gap),
            ("averaging_rate", self.check_averaging),
            ("intermediate_rate_and_ordering", self.check_intermediate),
            ("reduced_variance_ratio", self.check_reduced_variances),
        ]

    def run(self) -> ValidationReport:
        report = ValidationReport(budget=self.budget.name, seed=self.seed)
        for name, check in self.checks():
            item = ValidationItem(name=name)
            if self.budget.is_zero:
                report.items.append(item)
                continue
            try:
                self.logger.info(f"Running check {name}")
                check(item)
            except Exception as e:
                self.logger.error(f"Check {name} failed with an error: {e}", exc_info=True)
                item.status, item.detail = "error", f"{type(e).__name__}: {e}"
            self.logger.info(f"Check {name}: {item.status}")
            report.items.append(item)
        report.extras = self.extras
        return report

    def check_stationary_mean(self, item: ValidationItem) -> ValidationItem:
        samples = stationary_fast_samples(self.system, self.x, self.budget.n_stationary, self.seed, pool=self.pool)
        mean, stderr = mean_and_stderr(samples[:, 0])
        return _judge(item, mean, self.forms.ybar_mean, 3.0 * stderr + STATIONARY_MEAN_SLACK)

    def check_fbar_ensemble(self, item: ValidationItem) -> ValidationItem:
        value, stderr = fbar_ensemble(self.system, self.x, self.budget.n_stationary, self.seed, pool=self.pool)
        return _judge(item, value[0], self.forms.fbar, 3.0 * stderr[0] + FBAR_SLACK)

    def check_fbar_time_average(self, item: ValidationItem) -> ValidationItem:
        stream = NoiseStream(self.seed, 0, 1, DEFAULT_NOISE_DT)
        value, stderr = fbar_time_average(self.system, self.x, self.budget.T_avg * self.system.eps, stream)
        return _judge(item, value[0], self.forms.fbar, 3.0 * stderr[0] + FBAR_SLACK)

    def check_fbar_symmetry(self, item: ValidationItem) -> ValidationItem:
        plus, se_plus = fbar_ensemble(self.system, self.x, self.budget.n_stationary, self.seed, pool=self.pool)
        minus, se_minus = fbar_ensemble(self.system, -self.x, self.budget.n_stationary, self.seed, pool=self.pool)
        return _judge(item, plus[0] + minus[0], 0.0, 3.0 * float(np.hypot(se_plus[0], se_minus[0])) + 1e-15)

    def check_sigma(self, item: ValidationItem) -> ValidationItem:
        stream = NoiseStream(self.seed, 0, 1, DEFAULT_NOISE_DT)
        fbar = closed_form_fbar(self.sigma)
        estimate = sigma_estimate(self.system, self.x, fbar(self.x), self.budget.T_corr, self.budget.T_total, stream)
        self.extras["sigma_window"] = estimate.window
        self.extras["sigma_stderr"] = float(estimate.stderr[0, 0])
        item.detail = "" if estimate.plateau else "no plateau"
        target = float(self.forms.Sigma)
        return _judge(item, estimate.Sigma[0, 0], target, SIGMA_RELATIVE_TOL * target)

    def check_manifold_gap(self, item: ValidationItem) -> ValidationItem:
        result = manifold_gap(self.system, self.x, self.budget.eps_list, self.budget.n_gap, self.seed, pool=self.pool)
        self.extras["manifold_gap"] = result.report.summary()
        return _interval(item, result.report.slope, 0.8, 1.2)

    def check_averaging(self, item: ValidationItem) -> ValidationItem:
        table = EmpiricalFunction.from_callable(closed_form_fbar(self.sigma), [np.linspace(-0.15, 0.15, 61)], label="fbar")
        report = averaging_error_sweep(
            self.system, self.x, self.budget.T, self.budget.eps_list, self.budget.n_sweep, self.budget.dt_slow, table, self.seed, self.pool
        )
        self.extras["averaging"] = report.summary()
        return _interval(item, report.slope, 0.35, 0.65)

    def check_intermediate(self, item: ValidationItem) -> ValidationItem:
        sweep = intermediate_error_sweep(
            self.system,
            self.x,
            self.budget.T,
            self.budget.eps_list,
            self.budget.n_sweep,
            fbar=closed_form_fbar(self.sigma),
            diffusion=closed_form_sigma_bar(self.sigma),
            dt_slow=self.budget.dt_slow,
            master_seed=self.seed,
            pool=self.pool,
        )
        self.extras["intermediate"] = sweep.summary()
        ordered = sweep.ordering
        low, high = INTERMEDIATE_SLOPE_WINDOW
        item.estimate, item.target, item.tolerance = sweep.intermediate.slope, 0.5 * (low + high), 0.5 * (high - low)
        item.detail = f"ordering against averaged weak error per eps: {ordered}; weak slope {sweep.intermediate.slope}"
        item.status = "passed" if sweep.passed else "failed"
        return item

    def check_reduced_variances(self, item: ValidationItem) -> ValidationItem:
        # log2 of Var full / Var intermediate; the normal form is reported only
        variances = compare_reduced_variances(
            self.sigma, self.system.eps, CHECK_X, self.budget.T, self.budget.n_sweep, self.budget.dt_slow, self.seed, self.pool
        )
        self.extras["reduced_variances"] = variances
        ratio = variances["full"]["variance"] / variances["intermediate"]["variance"]
        return _judge(item, float(np.log2(ratio)), 0.0, 1.0)


def validate_toy(budget: Union[str, Budget] = "default", seed: int = 0, pool: Optional[ReplicaPool] = None) -> ValidationReport:
    """
    Run the toy checklist against the closed forms and the rate windows.

    Args:
        budget: Budget name (zero, small, default, large) or a Budget
        seed: Master seed of every check

    Returns:
        ValidationReport with one item per check; the zero budget skips all
    """
    if isinstance(budget, str):
        if budget not in BUDGETS:
            raise ValueError(f"Unknown budget '{budget}', choose from {sorted(BUDGETS)}")
        budget = BUDGETS[budget]
    report = ToyValidator(budget, seed, pool).run()
    logger.info(f"Toy validation ({budget.name}, seed {seed}): {len(report.failed)} of {len(report.items)} checks failed")
    return report
