"""Manifold gap sweep |h^eps - h^0| over eps."""

import numpy as np

from ..manifold import manifold_gap
from .base import Experiment

RATE_WINDOW = (0.8, 1.2)


class ManifoldGapExperiment(Experiment):
    """Pathwise gap between the eps-manifold and its eps = 0 limit."""

    def execute(self) -> bool:
        cfg = self.config.manifold
        result = manifold_gap(
            self.system,
            np.asarray(cfg.X),
            cfg.eps_list,
            cfg.n_realizations,
            self.seed,
            tol=cfg.tol,
            n_grid=cfg.n_grid,
            noise_dt=self.config.paths.noise_dt,
            pool=self.pool,
        )
        self.write_convergence(result.report, "manifold_gap")
        return result.report.exact_zero or result.report.slope_within(*RATE_WINDOW)
