"""Full-system path simulation."""

import numpy as np

from ..paths import fast_substep, integrate_ensemble, replica_streams
from ..utils import float_text
from .base import Experiment

# Replica counts up to this write one CSV per path
MAX_PATH_FILES = 10


class SimulateExperiment(Experiment):
    """Integrates replicas of the coupled system and writes paths or ensemble moments."""

    def execute(self) -> bool:
        cfg = self.config.paths
        _, dtau = fast_substep(cfg.dt_slow, self.system.eps)
        streams = replica_streams(self.seed, cfg.n_replicas, self.system.dim_fast, dtau)
        y0 = None if cfg.y0 is None else np.asarray(cfg.y0, dtype=float)
        ensemble = integrate_ensemble(self.system, np.asarray(cfg.x0, dtype=float), y0, cfg.T, cfg.dt_slow, streams, self.pool)

        if ensemble.n_replicas <= MAX_PATH_FILES:
            for i in range(ensemble.n_replicas):
                self.output.write_text(f"path_{i:03d}.csv", ensemble.replica(i).csv_text())
        else:
            self.output.write_text("ensemble_moments.csv", self._moments_csv(ensemble))

        blown = int(np.sum(ensemble.blown_up))
        self.summary["simulate"] = {"n_replicas": ensemble.n_replicas, "blown_up": blown, "fast_substep": dtau}
        self.output.write_json("simulate.json", self.summary["simulate"])
        return blown == 0

    def _moments_csv(self, ensemble) -> str:
        mean = ensemble.slow.mean(axis=0)
        std = ensemble.slow.std(axis=0, ddof=1)
        n = mean.shape[1]
        header = ["t"] + [f"mean_x_{i + 1}" for i in range(n)] + [f"std_x_{i + 1}" for i in range(n)]
        lines = [",".join(header)]
        for t, m, s in zip(ensemble.times, mean, std):
            lines.append(",".join(float_text(v) for v in (t, *m, *s)))
        return "\n".join(lines) + "\n"
