"""Sequential test-time adaptation (appearance stage, then skeleton stage) for a
toy attention-based pose-transfer model on a synthetic person world."""
from .autodiff import ParameterSet, adam_step, fd_grad, grad, load_checkpoint, save_checkpoint
from .engine import AdaptationConfig, AdaptationTrace, TargetSkeletonSet, run_order_variant, run_seta
from .features import extract, init_extractor
from .model import ArchConfig, forward, init_model, pretrain

__version__ = "0.1.0"

__all__ = [
    "AdaptationConfig", "AdaptationTrace", "ArchConfig", "ParameterSet", "TargetSkeletonSet",
    "adam_step", "extract", "fd_grad", "forward", "grad", "init_extractor", "init_model",
    "load_checkpoint", "pretrain", "run_order_variant", "run_seta", "save_checkpoint",
]
