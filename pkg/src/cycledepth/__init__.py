"""Self-supervised monocular depth from stereo cycle consistency with
inconsistency-aware self-distillation, on a small numpy autodiff engine."""
from ._kernels import backend
from .autodiff import Parameter, Tensor, backward, no_grad
from .data import CameraParams, StereoSample, make_dataset
from .metrics import EvalReport, compute_metrics
from .networks import NetworkBundle, NetworkConfig
from .pipeline import STAGE_ORDER, cycle_forward, evaluate, run_full_schedule, run_stage, stage_preset

__version__ = "0.1.0"

__all__ = [
    "backend", "Parameter", "Tensor", "backward", "no_grad", "CameraParams", "StereoSample", "make_dataset",
    "EvalReport", "compute_metrics", "NetworkBundle", "NetworkConfig", "STAGE_ORDER", "cycle_forward",
    "evaluate", "run_full_schedule", "run_stage", "stage_preset",
]
