"""Entry point for the slow-fast reduction experiment runner."""

from typing import List, Optional
import argparse
import logging
import os
import subprocess
import sys
import time

from slowfastreduce import __version__
from slowfastreduce.benchmark import BUDGETS
from slowfastreduce.config import BenchmarkConfig, ConfigurationError, ExperimentConfig, load_config
from slowfastreduce.experiments import EXIT_ERROR, EXIT_OK, EXPERIMENT_TYPES, Experiment
from slowfastreduce.reports import FitError, fit_rate, read_csv
from slowfastreduce.utils import OutputDirectory, ReplicaPool, SlowFastError

# Configuration Constants
DEFAULT_CONFIG_PATH = "experiment.json"
DEFAULT_DATA_DIR = "data"
DEFAULT_LOG_LEVEL = "INFO"
LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
LOG_FILE = "run.log"
MANIFEST_FILE = "manifest.json"


def version_string() -> str:
    """``git describe`` of the working tree, or the package version outside a checkout."""
    try:
        result = subprocess.run(
            ["git", "describe", "--tags", "--always", "--dirty"],
            cwd=os.path.dirname(os.path.abspath(__file__)),
            capture_output=True,
            text=True,
            timeout=5,
        )
    except (OSError, subprocess.SubprocessError):
        return __version__
    described = result.stdout.strip()
    return described if result.returncode == 0 and described else __version__


class ConfigManager:
    """Manages logging setup, configuration loading and output locations."""

    def __init__(self):
        self.config_path = os.environ.get("CONFIG_PATH", DEFAULT_CONFIG_PATH)
        self.data_dir = os.environ.get("DATA_DIR", DEFAULT_DATA_DIR)
        self.logger = logging.getLogger("SlowFastReduce")

    def setup_logging(self, log_level: str = DEFAULT_LOG_LEVEL) -> None:
        """Configure console logging; the file handler is attached per run."""
        numeric_level = getattr(logging, log_level.upper(), logging.INFO)
        logging.basicConfig(level=numeric_level, format=LOG_FORMAT, handlers=[logging.StreamHandler()])
        logging.getLogger().setLevel(numeric_level)

    def attach_log_file(self, output_dir: str) -> Optional[logging.Handler]:
        """Add a FileHandler inside the output directory; only warns when that fails."""
        try:
            handler = logging.FileHandler(os.path.join(output_dir, LOG_FILE), encoding="utf-8")
        except Exception as e:
            self.logger.warning(f"Failed to setup file logging: {e}")
            return None
        handler.setFormatter(logging.Formatter(LOG_FORMAT))
        logging.getLogger().addHandler(handler)
        return handler

    def load(self, path: Optional[str] = None) -> ExperimentConfig:
        """Load the experiment configuration from ``path`` or CONFIG_PATH."""
        path = path or self.config_path
        self.logger.info(f"Loading configuration from: {path}")
        return load_config(path)

    def output_dir_for(self, config: ExperimentConfig) -> str:
        """Configured output directory, or DATA_DIR/<experiment>."""
        return config.output_dir or os.path.join(self.data_dir, config.experiment)


class ExperimentManager:
    """Creates and runs one experiment, then writes its manifest."""

    def __init__(self, config_manager: ConfigManager, pool: Optional[ReplicaPool] = None):
        self.config_manager = config_manager
        self.pool = pool or ReplicaPool()
        self.logger = logging.getLogger(self.__class__.__name__)

    def create_experiment(self, config: ExperimentConfig, output: OutputDirectory) -> Experiment:
        """Create an experiment instance from configuration."""
        factory = EXPERIMENT_TYPES.get(config.experiment)
        if not factory:
            raise ConfigurationError(f"Unsupported experiment kind: {config.experiment}")
        return factory(config, output, self.pool)

    def run(self, config: ExperimentConfig) -> int:
        """Execute the experiment and return its exit code."""
        output = OutputDirectory(self.config_manager.output_dir_for(config))
        handler = self.config_manager.attach_log_file(output.path)
        started = time.perf_counter()
        try:
            self.logger.info(f"Output directory: {output.path}")
            try:
                experiment = self.create_experiment(config, output)
            except SlowFastError as e:
                self.logger.error(f"Could not set up experiment '{config.experiment}': {e}", exc_info=True)
                return EXIT_ERROR
            exit_code = experiment.start()
            self.write_manifest(config, output, experiment, exit_code, time.perf_counter() - started)
            return exit_code
        finally:
            if handler is not None:
                logging.getLogger().removeHandler(handler)
                handler.close()

    def write_manifest(
        self, config: ExperimentConfig, output: OutputDirectory, experiment: Experiment, exit_code: int, wall_time: float
    ) -> None:
        """Config echo, seed, version, wall time and the files written before the manifest."""
        manifest = {
            "experiment": config.experiment,
            "master_seed": config.master_seed,
            "version": version_string(),
            "config": config.to_dict(),
            "exit_code": exit_code,
            "wall_time_seconds": round(wall_time, 3),
            "files": list(output.written),
            "summary": experiment.summary,
        }
        output.write_json(MANIFEST_FILE, manifest)


def run(config_path: str, config_manager: Optional[ConfigManager] = None) -> int:
    """Run the experiment described by ``config_path``; returns 0, 2 or 1."""
    config_manager = config_manager or ConfigManager()
    logger = logging.getLogger("SlowFastReduce")
    try:
        config = config_manager.load(config_path)
        return ExperimentManager(config_manager).run(config)
    except ConfigurationError as e:
        logger.error(f"Configuration error: {e}")
    except SlowFastError as e:
        logger.error(f"Error: {e}", exc_info=True)
    except Exception as e:
        logger.error(f"Unexpected error: {e}", exc_info=True)
    return EXIT_ERROR


def validate_toy_command(budget: str, seed: int, out: Optional[str], config_manager: Optional[ConfigManager] = None) -> int:
    """Run the toy validation checklist without a configuration file."""
    config = ExperimentConfig(
        experiment="validate_toy",
        master_seed=seed,
        output_dir=out,
        benchmark=BenchmarkConfig(budget=budget),
    )
    try:
        return ExperimentManager(config_manager or ConfigManager()).run(config)
    except SlowFastError as e:
        logging.getLogger("SlowFastReduce").error(f"Error: {e}", exc_info=True)
        return EXIT_ERROR


def fit_rate_command(csv_path: str) -> int:
    """Print the fitted slope and 95% interval of a convergence CSV."""
    logger = logging.getLogger("SlowFastReduce")
    try:
        slope, (low, high) = fit_rate(read_csv(csv_path))
    except FitError as e:
        logger.error(f"Fit failed for {csv_path}: {e}")
        return EXIT_ERROR
    except SlowFastError as e:
        logger.error(f"Could not read {csv_path}: {e}")
        return EXIT_ERROR
    print(f"slope {slope:.6f} ci [{low:.6f}, {high:.6f}]")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="slowfast-reduce", description="Stochastic slow-fast model reduction experiments")
    parser.add_argument("--log-level", default=os.environ.get("LOG_LEVEL", DEFAULT_LOG_LEVEL))
    commands = parser.add_subparsers(dest="command", required=True)

    run_parser = commands.add_parser("run", help="Run the experiment described by a JSON configuration")
    run_parser.add_argument("config", nargs="?", default=None)

    validate = commands.add_parser("validate-toy", help="Run the toy validation checklist")
    validate.add_argument("--budget", choices=sorted(BUDGETS), default="default")
    validate.add_argument("--seed", type=int, default=0)
    validate.add_argument("--out", default=None)

    fit = commands.add_parser("fit-rate", help="Fit the log-log slope of a convergence CSV")
    fit.add_argument("csv")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Main entry point for the application."""
    args = build_parser().parse_args(argv)
    config_manager = ConfigManager()
    config_manager.setup_logging(args.log_level)

    if args.command == "run":
        return run(args.config or config_manager.config_path, config_manager)
    if args.command == "validate-toy":
        return validate_toy_command(args.budget, args.seed, args.out, config_manager)
    return fit_rate_command(args.csv)


if __name__ == "__main__":
    sys.exit(main())
