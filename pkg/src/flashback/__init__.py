"""Flashback learning: two-phase bidirectionally regularized continual learning."""

from .hosts import HostConfig, make_host
from .metrics import AccuracyMatrix, MetricReport, linear_cka, paired_t_test, report
from .protocol import FLConfig, RunRecord, budget_audit, run_stream, train_task_cl, train_task_fl
from .tasks import SyntheticSpec, TaskStream, generate_synthetic, load_csv

__version__ = "0.1.0"

__all__ = [
    "AccuracyMatrix",
    "FLConfig",
    "HostConfig",
    "MetricReport",
    "RunRecord",
    "SyntheticSpec",
    "TaskStream",
    "budget_audit",
    "generate_synthetic",
    "linear_cka",
    "load_csv",
    "make_host",
    "paired_t_test",
    "report",
    "run_stream",
    "train_task_cl",
    "train_task_fl",
]
