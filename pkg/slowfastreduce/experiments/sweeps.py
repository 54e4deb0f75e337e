"""Averaging and intermediate-model error sweeps."""

import numpy as np

from ..averaging import averaging_error_sweep
from ..fluctuation import intermediate_error_sweep
from .base import Experiment

AVERAGING_WINDOW = (0.35, 0.65)


class AverageSweepExperiment(Experiment):
    """sup_t E|x^eps - x| against the averaged flow, fitted over eps."""

    def execute(self) -> bool:
        cfg = self.config.averaging
        paths = self.config.paths
        fbar = self.fbar_source("averaging", cfg.closed_form, cfg.x_grid, cfg.fbar_replicas, cfg.estimator)
        report = averaging_error_sweep(
            self.system, np.asarray(paths.x0), paths.T, cfg.eps_list, cfg.n_replicas, paths.dt_slow, fbar, self.seed, self.pool
        )
        self.write_convergence(report, "averaging_error")
        return report.exact_zero or report.slope_within(*AVERAGING_WINDOW)


class IntermediateSweepExperiment(Experiment):
    """Weak error of the intermediate model next to the averaged model on the same ensembles."""

    def execute(self) -> bool:
        cfg = self.config.fluctuation
        paths = self.config.paths
        fbar = self.fbar_source("fluctuation", cfg.closed_form, cfg.x_grid, self.config.averaging.fbar_replicas)
        sweep = intermediate_error_sweep(
            self.system,
            np.asarray(paths.x0),
            paths.T,
            cfg.eps_list,
            cfg.n_replicas,
            fbar=fbar,
            diffusion=self.diffusion_source("fluctuation", cfg.closed_form),
            dt_slow=paths.dt_slow,
            master_seed=self.seed,
            pool=self.pool,
        )
        self.write_convergence(sweep.intermediate, "intermediate_error")
        self.write_convergence(sweep.averaged, "averaging_error")
        self.write_convergence(sweep.averaged_weak, "averaged_weak_error")
        self.summary["ordering"] = sweep.ordering
        self.summary["intermediate_rate_ok"] = sweep.rate_ok
        return sweep.passed
