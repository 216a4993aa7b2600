"""flowsplat: continuous-scale super-resolution with flow-matched detail
latents decoded through a 2D Gaussian splat renderer."""

from .estimator import FlowSplatSR
from .pipeline import InferResult, SRModel, Stage1Trainer, Stage2Trainer, TrainConfig

__version__ = "0.1.0"

__all__ = [
    "FlowSplatSR",
    "InferResult",
    "SRModel",
    "Stage1Trainer",
    "Stage2Trainer",
    "TrainConfig",
    "__version__",
]
