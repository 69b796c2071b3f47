"""YOGA: a lightweight one-stage detector on a small NumPy autodiff core."""
from .blocks import AFF, CSPGhost, ConvBlock, Detect, GhostBottleneck, GhostConv, MSCAM, SPP
from .detect import AnchorSet, Detection, SmoothedTarget, ciou_loss, decode, nms
from .errors import DimensionError, DivergenceError, UsageError, WeightFileError, YogaError
from .estimator import YogaDetector
from .graph import (PROFILES, ScaleProfile, build_yoga, flop_count, load_weights, param_count,
                    save_weights, scale_depth, scale_width)
from .tensor import Tensor, no_grad
from .train import TrainConfig, eval_ap, gen_toy_dataset, train_toy

__version__ = "0.1.0"

__all__ = [
    "AFF", "CSPGhost", "ConvBlock", "Detect", "GhostBottleneck", "GhostConv", "MSCAM", "SPP",
    "AnchorSet", "Detection", "SmoothedTarget", "ciou_loss", "decode", "nms",
    "DimensionError", "DivergenceError", "UsageError", "WeightFileError", "YogaError",
    "YogaDetector", "PROFILES", "ScaleProfile", "build_yoga", "flop_count", "load_weights",
    "param_count", "save_weights", "scale_depth", "scale_width", "Tensor", "no_grad",
    "TrainConfig", "eval_ap", "gen_toy_dataset", "train_toy",
]
