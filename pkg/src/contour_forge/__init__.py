"""contour-forge: progressive contour regression for curved-text detection
on synthetic scenes, with a from-scratch differentiation engine."""

from .config import RunConfig
from .model import ContourDetector, Detection, FeatureMap, InferenceResult
from .synth import GenParams, Scene, generate_dataset, generate_scene, load_dataset
from .training import TrainResult, train_loop, training_losses
from .evaluate import EvalReport, evaluate, evaluate_dataset, evaluate_model, timing_harness

__version__ = "0.1.0"

__all__ = [
    "RunConfig",
    "ContourDetector",
    "Detection",
    "FeatureMap",
    "InferenceResult",
    "GenParams",
    "Scene",
    "generate_scene",
    "generate_dataset",
    "load_dataset",
    "TrainResult",
    "train_loop",
    "training_losses",
    "EvalReport",
    "evaluate",
    "evaluate_dataset",
    "evaluate_model",
    "timing_harness",
    "__version__",
]
