"""Audiovisual fusion models with modality-dropout training."""

from .data import Dataset, Sample, SynthSpec, generate, load_dataset, save_dataset, standardize
from .dropout import DropoutPolicy, apply_test_setting
from .fusion import FusionKind, FusionModel, ModelConfig
from .rng import Rng
from .tensor import Tape, Tensor, backward, finite_diff_check, make
from .train import EvalReport, OptimConfig, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "Dataset", "DropoutPolicy", "EvalReport", "FusionKind", "FusionModel",
    "ModelConfig", "OptimConfig", "Rng", "Sample", "SynthSpec", "Tape", "Tensor",
    "apply_test_setting", "backward", "evaluate", "finite_diff_check", "generate",
    "load_dataset", "make", "save_dataset", "standardize", "train", "__version__",
]
