"""Configuration, metrics, file formats, experiments and invariant suites."""

from .config import ConfigError, ExperimentConfig, load_config, parse_config, to_text
from .experiments import ExperimentError, run_experiment
from .metrics import MetricReport, MetricRow, image_psnr, psnr, sliced_wasserstein
from .priors import BUILTIN_PRIORS, builtin_prior
from .report import report
from .verify import format_results, verify

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "ExperimentError",
    "MetricReport",
    "MetricRow",
    "BUILTIN_PRIORS",
    "builtin_prior",
    "format_results",
    "image_psnr",
    "load_config",
    "parse_config",
    "psnr",
    "report",
    "run_experiment",
    "sliced_wasserstein",
    "to_text",
    "verify",
]
