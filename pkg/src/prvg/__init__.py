"""Parallel span regression for dense video grounding on precomputed features."""

__version__ = "0.1.0"

from .data import GeneratorConfig, GroundingSample, generate_dataset, load_dataset
from .losses import LossWeights, MomentSpan, giou_1d, temporal_iou
from .metrics import EvalReport, evaluate, recall_at_1, report_table
from .model import DecoderOutput, ModelConfig, PRVG, load_checkpoint, save_checkpoint
from .tensor import ParameterSet, Tensor, finite_diff_check, no_grad
from .train import Adam, TrainConfig, evaluate_model, run_ablation, train

__all__ = [
    "__version__",
    "Adam",
    "DecoderOutput",
    "EvalReport",
    "GeneratorConfig",
    "GroundingSample",
    "LossWeights",
    "ModelConfig",
    "MomentSpan",
    "PRVG",
    "ParameterSet",
    "Tensor",
    "TrainConfig",
    "evaluate",
    "evaluate_model",
    "finite_diff_check",
    "generate_dataset",
    "giou_1d",
    "load_checkpoint",
    "load_dataset",
    "no_grad",
    "recall_at_1",
    "report_table",
    "run_ablation",
    "save_checkpoint",
    "temporal_iou",
    "train",
]
