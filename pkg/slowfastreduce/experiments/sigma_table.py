"""Diffusion matrix tabulation."""

import numpy as np

from ..fluctuation import tabulate_sigma
from .base import Experiment


class SigmaTableExperiment(Experiment):
    """Green-Kubo Sigma and sigma_bar on the configured x grid."""

    def execute(self) -> bool:
        cfg = self.config.fluctuation
        fbar = self.fbar_source("fluctuation", cfg.closed_form, cfg.x_grid, self.config.averaging.fbar_replicas)
        table = tabulate_sigma(
            self.system, np.asarray(cfg.x_grid), fbar, cfg.T_corr, cfg.T_total, self.seed, self.config.paths.noise_dt
        )
        self.output.write_text("sigma_table.csv", table.to_csv())
        self.output.write_json("sigma_table.json", table.to_dict())
        self.summary["sigma_table"] = table.to_dict()
        return bool(np.all(table.plateau))
