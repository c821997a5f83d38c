"""Multi-agent construction, expansion and scoring of image datasets."""

from .pipeline import Run, RunConfig, load_config, open_run
from .report import MetricReport, build_report, load_dataset
from .spec_intake import ClarificationRequest, DatasetSpec, parse_demand

__version__ = "0.1.0"

__all__ = [
    "ClarificationRequest",
    "DatasetSpec",
    "MetricReport",
    "Run",
    "RunConfig",
    "build_report",
    "load_config",
    "load_dataset",
    "open_run",
    "parse_demand",
]
