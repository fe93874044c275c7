"""Low-rank activation decomposition with an analytical accelerator model."""
from .decomp import CostReport, Scheme, cost_report
from .dcomsim import BaselineConfig, HardwareConfig, LatencyReport, baseline_model, simulate_lanczos
from .errors import DcomError
from .harness import DecompPlan, ModelPlan, estimate_plan, sweep
from .lanczos import DecomposedMatrix, lanczos_svd, reconstruction_error
from .outlier import ThresholdTable, calibrate_thresholds, multitrack_decompose

__all__ = [
    "BaselineConfig", "CostReport", "DcomError", "DecompPlan", "DecomposedMatrix", "HardwareConfig",
    "LatencyReport", "ModelPlan", "Scheme", "ThresholdTable", "baseline_model", "calibrate_thresholds",
    "cost_report", "estimate_plan", "lanczos_svd", "multitrack_decompose", "reconstruction_error", "simulate_lanczos", "sweep",
]
__version__ = "0.1.0"
