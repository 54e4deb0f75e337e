"""Base abstract class for all experiment kinds."""

import logging
from abc import ABC, abstractmethod
from typing import Any, Dict, Optional

import numpy as np

from ..averaging import default_fbar_table, tabulate_fbar
from ..benchmark import build_system, closed_form_fbar, closed_form_sigma_bar
from ..config import ConfigurationError, ExperimentConfig
from ..reports import ConvergenceReport, plotdata_text
from ..utils import OutputDirectory, ReplicaPool, SlowFastError

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_VALIDATION_FAILED = 2


class Experiment(ABC):
    """Base abstract class for all experiment kinds."""

    def __init__(self, config: ExperimentConfig, output: OutputDirectory, pool: Optional[ReplicaPool] = None):
        self.config = config
        self.output = output
        self.pool = pool or ReplicaPool()
        self.seed = config.master_seed
        self.system = build_system(
            config.system.name,
            config.system.sigma,
            config.system.eps,
            config.system.A,
            config.system.B,
            config.system.nonlinearity,
        )
        self.summary: Dict[str, Any] = {}
        self.logger = logging.getLogger(self.__class__.__name__)

    @abstractmethod
    def execute(self) -> bool:
        """Run the experiment and write its outputs; True when every acceptance check passed."""
        pass

    def start(self) -> int:
        """Run the experiment and map the outcome to an exit code."""
        self.logger.info(f"Starting experiment '{self.config.experiment}' on system '{self.system.name}'")
        try:
            passed = self.execute()
        except SlowFastError as e:
            self.logger.error(f"Error in experiment {self.config.experiment}: {e}", exc_info=True)
            self.summary["error"] = f"{type(e).__name__}: {e}"
            return EXIT_ERROR
        except Exception as e:
            self.logger.error(f"Unexpected error in experiment {self.config.experiment}: {e}", exc_info=True)
            self.summary["error"] = f"{type(e).__name__}: {e}"
            return EXIT_ERROR
        self.summary["passed"] = passed
        self.logger.info(f"Experiment '{self.config.experiment}' {'passed' if passed else 'failed acceptance'}")
        return EXIT_OK if passed else EXIT_VALIDATION_FAILED

    def write_convergence(self, report: ConvergenceReport, stem: str) -> None:
        """Write ``stem``.csv, ``stem``.dat and ``stem``.json for a convergence report."""
        self.output.write_text(f"{stem}.csv", report.to_csv())
        self.output.write_text(f"{stem}.dat", plotdata_text(report))
        self.output.write_json(f"{stem}.json", report.summary())
        self.summary[stem] = report.summary()

    def _require_toy(self, section: str) -> None:
        if self.system.name != "toy":
            raise ConfigurationError(f"'{section}.closed_form' needs the toy system, got '{self.system.name}'")

    def fbar_source(
        self, section: str, closed_form: bool, x_grid, budget: int, estimator: str = "ensemble", half_width: float = 0.1
    ):
        """Closed-form, tabulated or default f-bar for the configured system."""
        if closed_form:
            self._require_toy(section)
            return closed_form_fbar(self.system.sigma)
        x0 = np.asarray(self.config.paths.x0, dtype=float)
        if x_grid is None:
            table = default_fbar_table(
                self.system, x0, half_width=half_width, n_replicas=budget, master_seed=self.seed, pool=self.pool
            )
        else:
            table = tabulate_fbar(self.system, np.asarray(x_grid), estimator, budget, self.seed, pool=self.pool)
        self.output.write_text("fbar_table.csv", table.to_csv())
        return table

    def diffusion_source(self, section: str, closed_form: bool):
        """Closed-form sigma_bar for the toy, otherwise None to let the sweep tabulate it."""
        if closed_form:
            self._require_toy(section)
            return closed_form_sigma_bar(self.system.sigma)
        return None
