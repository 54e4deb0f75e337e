"""Toy validation checklist."""

from ..benchmark import validate_toy
from .base import Experiment


class ValidateToyExperiment(Experiment):
    """Runs every toy check and writes the pass/fail report."""

    def execute(self) -> bool:
        report = validate_toy(self.config.benchmark.budget, self.seed, self.pool)
        self.output.write_json("validation_report.json", report.to_dict())
        self.summary["validation"] = {"ok": report.ok, "failed": [item.name for item in report.failed]}
        return report.ok
