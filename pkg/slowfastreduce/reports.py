"""Convergence reports, log-log rate fitting and plot-data files."""

from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple
import csv
import logging

import numpy as np
from scipy import stats

from .utils import DirectoryError, SlowFastError, float_text

logger = logging.getLogger(__name__)

CONFIDENCE = 0.95
Row = Tuple[float, float, float]


class FitError(SlowFastError):
    """Raised when rows cannot support a rate fit."""

    pass


class DegenerateFit(FitError):
    """Raised when every row has the same eps."""

    pass


@dataclass
class LineFit:
    """Least-squares line log10(error) = intercept + slope * log10(eps)."""

    slope: float
    intercept: float
    slope_stderr: float
    slope_ci: Tuple[float, float]
    dof: int
    weighted: bool


def _validate(rows: Sequence[Row]) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    data = np.asarray(rows, dtype=float).reshape(-1, 3)
    if data.shape[0] < 3:
        raise FitError(f"Need at least 3 rows for a rate fit, got {data.shape[0]}")
    eps, error, stderr = data[:, 0], data[:, 1], data[:, 2]
    if np.any(eps <= 0) or np.any(error <= 0):
        raise FitError("Rate fit needs positive eps and positive errors")
    if np.all(eps == eps[0]):
        raise DegenerateFit(f"All rows share eps={eps[0]!r}")
    return eps, error, stderr


def fit_line(rows: Sequence[Row]) -> LineFit:
    """
    Fit the log-log line through (eps, error) rows.

    Weighted least squares in log10 with sigma_i = stderr_i / (error_i ln 10);
    the parameter covariance is inflated by max(1, chi^2/dof). Rows with a zero
    standard error switch the fit to ordinary least squares.

    Raises:
        FitError: Fewer than 3 rows or nonpositive values
        DegenerateFit: All eps equal
    """
    eps, error, stderr = _validate(rows)
    x = np.log10(eps)
    y = np.log10(error)
    dof = x.size - 2
    t_quantile = float(stats.t.ppf(0.5 + CONFIDENCE / 2.0, dof))

    if np.all(stderr > 0):
        sigma = stderr / (error * np.log(10.0))
        w = 1.0 / sigma ** 2
        design = np.column_stack([np.ones_like(x), x])
        normal = design.T @ (w[:, None] * design)
        cov = np.linalg.inv(normal)
        intercept, slope = cov @ (design.T @ (w * y))
        residual = y - (intercept + slope * x)
        chi2 = float(np.sum(w * residual ** 2))
        cov = cov * max(1.0, chi2 / dof)
        slope_stderr = float(np.sqrt(cov[1, 1]))
        weighted = True
    else:
        fit = stats.linregress(x, y)
        slope, intercept = fit.slope, fit.intercept
        slope_stderr = float(fit.stderr)
        weighted = False

    half = t_quantile * slope_stderr
    return LineFit(
        slope=float(slope),
        intercept=float(intercept),
        slope_stderr=slope_stderr,
        slope_ci=(float(slope - half), float(slope + half)),
        dof=dof,
        weighted=weighted,
    )


def fit_rate(rows: Sequence[Row]) -> Tuple[float, Tuple[float, float]]:
    """
    Fitted log-log rate exponent and its 95% confidence interval.

    Args:
        rows: Sequence of (eps, error, stderr)

    Returns:
        Tuple of (slope, (low, high))
    """
    fit = fit_line(rows)
    return fit.slope, fit.slope_ci


@dataclass
class ConvergenceReport:
    """Rows of (eps, error, stderr) sorted by eps descending, with the fitted rate."""

    label: str
    rows: List[Row] = field(default_factory=list)
    slope: Optional[float] = None
    slope_ci: Optional[Tuple[float, float]] = None
    intercept: Optional[float] = None
    exact_zero: bool = False
    metadata: Dict[str, Any] = field(default_factory=dict)

    @classmethod
    def from_rows(cls, label: str, rows: Iterable[Row], metadata: Optional[Dict[str, Any]] = None) -> "ConvergenceReport":
        """Sort rows, flag the all-zero case and fit the rate when possible."""
        ordered = sorted(((float(e), float(v), float(s)) for e, v, s in rows), key=lambda r: -r[0])
        report = cls(label=label, rows=ordered, metadata=dict(metadata or {}))
        if ordered and all(v == 0.0 for _, v, _ in ordered):
            report.exact_zero = True
            logger.info(f"{label}: every error is exactly zero, no rate fitted")
            return report
        try:
            fit = fit_line(ordered)
        except FitError as e:
            logger.warning(f"{label}: rate not fitted ({e})")
            return report
        report.slope, report.slope_ci, report.intercept = fit.slope, fit.slope_ci, fit.intercept
        logger.info(f"{label}: slope {fit.slope:.3f} [{fit.slope_ci[0]:.3f}, {fit.slope_ci[1]:.3f}]")
        return report

    @property
    def eps(self) -> np.ndarray:
        return np.array([r[0] for r in self.rows])

    @property
    def errors(self) -> np.ndarray:
        return np.array([r[1] for r in self.rows])

    @property
    def stderrs(self) -> np.ndarray:
        return np.array([r[2] for r in self.rows])

    def fitted(self) -> np.ndarray:
        """Fitted line 10^(intercept + slope log10 eps) on the row grid."""
        if self.slope is None:
            return np.full(len(self.rows), np.nan)
        return 10.0 ** (self.intercept + self.slope * np.log10(self.eps))

    def slope_within(self, low: float, high: float) -> bool:
        return self.slope is not None and low <= self.slope <= high

    def summary(self) -> Dict[str, Any]:
        return {
            "label": self.label,
            "slope": self.slope,
            "slope_ci": list(self.slope_ci) if self.slope_ci else None,
            "intercept": self.intercept,
            "exact_zero": self.exact_zero,
            "n_rows": len(self.rows),
            "metadata": self.metadata,
        }

    def to_csv(self) -> str:
        """CSV text with header eps,error,stderr and 17 significant digits."""
        lines = ["eps,error,stderr"]
        lines += [",".join(float_text(v) for v in row) for row in self.rows]
        return "\n".join(lines) + "\n"


def read_csv(path: str) -> List[Row]:
    """
    Read (eps, error, stderr) rows from a report CSV.

    Raises:
        DirectoryError: If the file cannot be read
        FitError: If a row is malformed
    """
    try:
        with open(path, "r", encoding="utf-8", newline="") as handle:
            reader = csv.DictReader(handle)
            rows = []
            for line_no, record in enumerate(reader, start=2):
                try:
                    rows.append((float(record["eps"]), float(record["error"]), float(record.get("stderr") or 0.0)))
                except (KeyError, TypeError, ValueError) as e:
                    raise FitError(f"{path}:{line_no}: malformed row {record!r} ({e})")
            return rows
    except OSError as e:
        raise DirectoryError(f"Failed to read {path}: {e}")


def plotdata_text(report: ConvergenceReport) -> str:
    """Gnuplot-compatible columns eps, error, stderr, fitted with a comment header."""
    lines = [
        f"# {report.label}",
        "# columns: eps error stderr fitted",
    ]
    if report.slope is not None:
        lines.append(
            f"# slope {float_text(report.slope)} ci {float_text(report.slope_ci[0])} "
            f"{float_text(report.slope_ci[1])} intercept {float_text(report.intercept)}"
        )
    for (eps, error, stderr), fitted in zip(report.rows, report.fitted()):
        lines.append(" ".join(float_text(v) for v in (eps, error, stderr, fitted)))
    return "\n".join(lines) + "\n"


def emit_plotdata(report: ConvergenceReport, path: str) -> None:
    """
    Write the plot-data file of ``report`` to ``path``.

    Raises:
        DirectoryError: If the file cannot be written
    """
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as handle:
            handle.write(plotdata_text(report))
    except OSError as e:
        raise DirectoryError(f"Failed to write plot data {path}: {e}")


def read_plotdata(path: str) -> List[Row]:
    """Rows (eps, error, stderr) of a file written by ``emit_plotdata``."""
    try:
        with open(path, "r", encoding="utf-8") as handle:
            content = handle.read()
    except OSError as e:
        raise DirectoryError(f"Failed to read plot data {path}: {e}")
    rows = []
    for line in content.splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        eps, error, stderr = (float(v) for v in line.split()[:3])
        rows.append((eps, error, stderr))
    return rows
