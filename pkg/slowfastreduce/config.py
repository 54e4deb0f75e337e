"""Strict experiment configuration parsed from JSON."""

from dataclasses import MISSING, asdict, dataclass, field, fields
from typing import Any, Dict, List, Optional, Tuple, Union, get_args, get_origin, get_type_hints
import json

from .utils import SlowFastError

EXPERIMENT_KINDS = (
    "simulate",
    "manifold_gap",
    "average_sweep",
    "intermediate_sweep",
    "sigma_table",
    "validate_toy",
    "martingale_check",
)

BUDGET_NAMES = ("zero", "small", "default", "large")


class ConfigurationError(SlowFastError):
    """Raised for unreadable, malformed or inconsistent configuration."""

    pass


@dataclass(frozen=True)
class SystemConfig:
    name: str = "toy"
    sigma: float = 0.1
    eps: float = 1e-2
    A: Optional[List[List[float]]] = None
    B: Optional[List[List[float]]] = None
    nonlinearity: Optional[str] = None


@dataclass(frozen=True)
class PathsConfig:
    x0: List[float] = field(default_factory=lambda: [0.05])
    y0: Optional[List[float]] = None
    T: float = 1.0
    dt_slow: float = 1e-3
    n_replicas: int = 1
    noise_dt: float = 0.1


@dataclass(frozen=True)
class ManifoldConfig:
    X: List[float] = field(default_factory=lambda: [0.05])
    eps_list: Optional[List[float]] = None
    n_realizations: int = 64
    tol: float = 1e-10
    n_grid: int = 2048


@dataclass(frozen=True)
class AveragingConfig:
    eps_list: Optional[List[float]] = None
    n_replicas: int = 1000
    x_grid: Optional[List[float]] = None
    fbar_replicas: int = 1000
    estimator: str = "ensemble"
    closed_form: bool = False


@dataclass(frozen=True)
class FluctuationConfig:
    eps_list: Optional[List[float]] = None
    n_replicas: int = 1000
    x_grid: Optional[List[float]] = None
    T_corr: float = 20.0
    T_total: float = 1000.0
    n_inner: int = 100
    T_inner: Optional[float] = None
    dt_slow: Optional[float] = None
    schedule: Optional[List[List[float]]] = None
    closed_form: bool = False


@dataclass(frozen=True)
class BenchmarkConfig:
    budget: str = "default"


@dataclass(frozen=True)
class ExperimentConfig:
    """Top-level experiment description; one section per module."""

    experiment: str
    master_seed: int = 0
    output_dir: Optional[str] = None
    system: SystemConfig = field(default_factory=SystemConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)
    manifold: ManifoldConfig = field(default_factory=ManifoldConfig)
    averaging: AveragingConfig = field(default_factory=AveragingConfig)
    fluctuation: FluctuationConfig = field(default_factory=FluctuationConfig)
    benchmark: BenchmarkConfig = field(default_factory=BenchmarkConfig)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


# (section, key) pairs that must be set for each experiment kind
REQUIRED_KEYS: Dict[str, Tuple[Tuple[str, str], ...]] = {
    "simulate": (),
    "manifold_gap": (("manifold", "eps_list"),),
    "average_sweep": (("averaging", "eps_list"),),
    "intermediate_sweep": (("fluctuation", "eps_list"),),
    "sigma_table": (("fluctuation", "x_grid"),),
    "validate_toy": (),
    "martingale_check": (),
}


def _coerce(value: Any, annotation: Any, path: str) -> Any:
    origin = get_origin(annotation)
    if origin is Union:
        options = [a for a in get_args(annotation) if a is not type(None)]
        if value is None:
            return None
        return _coerce(value, options[0], path)
    if origin in (list, List):
        if not isinstance(value, list):
            raise ConfigurationError(f"'{path}' must be a list, got {type(value).__name__}")
        (item,) = get_args(annotation)
        return [_coerce(v, item, f"{path}[{i}]") for i, v in enumerate(value)]
    if annotation is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigurationError(f"'{path}' must be a number, got {value!r}")
        return float(value)
    if annotation is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigurationError(f"'{path}' must be an integer, got {value!r}")
        return value
    if annotation is bool:
        if not isinstance(value, bool):
            raise ConfigurationError(f"'{path}' must be true or false, got {value!r}")
        return value
    if annotation is str:
        if not isinstance(value, str):
            raise ConfigurationError(f"'{path}' must be a string, got {value!r}")
        return value
    if hasattr(annotation, "__dataclass_fields__"):
        return _build(annotation, value, path)
    raise ConfigurationError(f"'{path}' has an unsupported type")


def _build(cls, data: Any, path: str):
    if not isinstance(data, dict):
        raise ConfigurationError(f"'{path or 'config'}' must be an object")
    hints = get_type_hints(cls)
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        where = f"{path}." if path else ""
        raise ConfigurationError(f"Unknown key '{where}{unknown[0]}'")
    kwargs = {}
    for f in fields(cls):
        key = f"{path}.{f.name}" if path else f.name
        if f.name in data:
            kwargs[f.name] = _coerce(data[f.name], hints[f.name], key)
        elif f.default is MISSING and f.default_factory is MISSING:
            raise ConfigurationError(f"Missing required key '{key}'")
    return cls(**kwargs)


def _validate(config: ExperimentConfig) -> None:
    if config.experiment not in EXPERIMENT_KINDS:
        raise ConfigurationError(f"'experiment' must be one of {list(EXPERIMENT_KINDS)}, got '{config.experiment}'")
    for section, key in REQUIRED_KEYS[config.experiment]:
        if getattr(getattr(config, section), key) is None:
            raise ConfigurationError(f"Missing required key '{section}.{key}' for experiment '{config.experiment}'")
    for section in ("manifold", "averaging", "fluctuation"):
        eps_list = getattr(config, section).eps_list
        if eps_list is None:
            continue
        if any(e <= 0 or e > 1 for e in eps_list):
            raise ConfigurationError(f"'{section}.eps_list' entries must lie in (0, 1]")
        if any(b >= a for a, b in zip(eps_list, eps_list[1:])):
            raise ConfigurationError(f"'{section}.eps_list' must be strictly decreasing")
    if not 0.0 < config.system.eps <= 1.0:
        raise ConfigurationError("'system.eps' must lie in (0, 1]")
    if config.system.sigma == 0:
        raise ConfigurationError("'system.sigma' must be nonzero")
    if config.benchmark.budget not in BUDGET_NAMES:
        raise ConfigurationError(f"'benchmark.budget' must be one of {list(BUDGET_NAMES)}, got '{config.benchmark.budget}'")


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    """
    Parse and validate configuration text.

    Raises:
        ConfigurationError: With line and column for JSON syntax errors, or the dotted key path
    """
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"Invalid JSON in {source} at line {e.lineno}, column {e.colno}: {e.msg}")
    config = _build(ExperimentConfig, data, "")
    _validate(config)
    return config


def load_config(path: str) -> ExperimentConfig:
    """Read and parse a configuration file."""
    try:
        with open(path, "r", encoding="utf-8") as f:
            text = f.read()
    except FileNotFoundError:
        raise ConfigurationError(f"Configuration file not found: {path}")
    except OSError as e:
        raise ConfigurationError(f"Error reading configuration {path}: {e}")
    return parse_config(text, path)
