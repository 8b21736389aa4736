"""Online continual adaptation of a joint depth and panoptic segmentation model.

The package bundles a small numpy perception network with analytic
gradients, source/target replay buffers, cross-domain mixing with an EMA
teacher, the online adaptation loop with its three evaluation protocols,
and a synthetic multi-domain street-scene generator.
"""

from ._validation import ContractViolation, InvalidInputError, UnusableFrameError
from .config import RunConfig, load_config
from .engine import AdaptationConfig, OnlineAdapter, ProtocolReport, evaluate_model, panoptic_fuse
from .imaging import CameraIntrinsics, PoseTransform, histogram_match, intrinsic_warp, synthesize_view
from .losses import LossWeights
from .metrics import depth_metrics, mean_iou, panoptic_quality
from .mixing import EmaState, MixConfig, ema_update, generate_mixed_sample
from .model import ModelConfig, PerceptionModel, load_checkpoint, save_checkpoint
from .pretrain import SourcePretrainer
from .replay import Sample, SourceBuffer, TargetBuffer, build_source_buffer, compose_batch, update_target_buffer

__version__ = "0.1.0"

__all__ = [
    "AdaptationConfig",
    "CameraIntrinsics",
    "ContractViolation",
    "EmaState",
    "InvalidInputError",
    "LossWeights",
    "MixConfig",
    "ModelConfig",
    "OnlineAdapter",
    "PerceptionModel",
    "PoseTransform",
    "ProtocolReport",
    "RunConfig",
    "Sample",
    "SourceBuffer",
    "SourcePretrainer",
    "TargetBuffer",
    "UnusableFrameError",
    "build_source_buffer",
    "compose_batch",
    "depth_metrics",
    "ema_update",
    "evaluate_model",
    "generate_mixed_sample",
    "histogram_match",
    "intrinsic_warp",
    "load_config",
    "load_checkpoint",
    "mean_iou",
    "panoptic_fuse",
    "panoptic_quality",
    "save_checkpoint",
    "synthesize_view",
    "update_target_buffer",
]
