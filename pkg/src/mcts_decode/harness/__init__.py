from .dataset import DatasetError, Instance, load_dataset
from .experiment import AlgorithmSpec, MetricSpec, ModelSpec, RunConfig, run_experiment
from .report import Report, emit_report, load_report, plot_scaling
from .tree import export_tree

__all__ = [
    "DatasetError", "Instance", "load_dataset",
    "AlgorithmSpec", "MetricSpec", "ModelSpec", "RunConfig", "run_experiment",
    "Report", "emit_report", "load_report", "plot_scaling",
    "export_tree",
]
