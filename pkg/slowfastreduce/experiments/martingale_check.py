"""Martingale residual and quadratic-variation check."""

import numpy as np

from ..fluctuation import HbarCache, martingale_residual, tabulate_sigma
from ..utils import float_text
from .base import Experiment

# Half-width of the x window covered by the f-bar table and the Hbar cache
FBAR_HALF_WIDTH = 0.2
CACHE_HALF_WIDTH = 0.1
CACHE_NODES = 11


class MartingaleCheckExperiment(Experiment):
    """Orthogonality residuals and <M>_T / int Sigma ds of M^eps, one report per eps."""

    def closed_form_diffusion(self):
        root = self.diffusion_source("fluctuation", True)

        def diffusion(x):
            factor = root(x)
            return factor @ np.swapaxes(factor, -1, -2)

        return diffusion

    def estimated_diffusion(self, fbar, x_axis):
        cfg = self.config.fluctuation
        table = tabulate_sigma(self.system, x_axis, fbar, cfg.T_corr, cfg.T_total, self.seed, self.config.paths.noise_dt)
        self.output.write_text("sigma_table.csv", table.to_csv())
        return table.Sigma

    def execute(self) -> bool:
        cfg = self.config.fluctuation
        paths = self.config.paths
        x0 = np.asarray(paths.x0, dtype=float)
        fbar = self.fbar_source(
            "fluctuation", cfg.closed_form, cfg.x_grid, self.config.averaging.fbar_replicas, half_width=FBAR_HALF_WIDTH
        )
        x_axis = np.linspace(x0[0] - CACHE_HALF_WIDTH, x0[0] + CACHE_HALF_WIDTH, CACHE_NODES)
        cache = HbarCache.build(
            self.system,
            fbar,
            x_axis,
            n_inner=cfg.n_inner,
            T_inner=cfg.T_inner,
            master_seed=self.seed,
            noise_dt=paths.noise_dt,
        )
        self.output.write_text("hbar_cache.csv", cache.hbar.to_csv())
        diffusion = self.closed_form_diffusion() if cfg.closed_form else self.estimated_diffusion(fbar, x_axis)

        reports = []
        for eps in cfg.eps_list or [self.system.eps]:
            self.logger.info(f"Martingale check at eps={eps:g}")
            reports.append(
                martingale_residual(
                    self.system.with_eps(eps),
                    x0,
                    paths.T,
                    cfg.n_replicas,
                    fbar=fbar,
                    cache=cache,
                    schedule=[tuple(pair) for pair in cfg.schedule] if cfg.schedule else None,
                    dt_slow=cfg.dt_slow,
                    diffusion=diffusion,
                    master_seed=self.seed,
                    pool=self.pool,
                )
            )

        lines = ["eps,qv_ratio,qv_stderr,qv_ratio_sigma,residuals_passed,qv_passed"]
        for report in reports:
            sigma_ratio = "" if report.qv_ratio_sigma is None else float_text(report.qv_ratio_sigma)
            lines.append(
                f"{float_text(report.eps)},{float_text(report.qv_ratio)},{float_text(report.qv_stderr)},{sigma_ratio},"
                f"{str(report.residuals_passed).lower()},{str(report.qv_passed).lower()}"
            )
        self.output.write_text("martingale_qv.csv", "\n".join(lines) + "\n")
        self.output.write_json("martingale_check.json", {"reports": [report.to_dict() for report in reports]})
        self.summary["martingale"] = [report.to_dict() for report in reports]
        return all(report.passed for report in reports)
