"""Toy-scale 3D object detector built on primitive voting, attention context
modules and a multi-stage refinement cascade, with AP and counting metrics."""

from .config import ConfigError, PipelineConfig, load_config, parse_config
from .context import ContextConfig, gcm, hcm, pcm
from .evaluation import (
    CountReport,
    EvalReport,
    average_precision,
    count_by_detection,
    counting_metrics,
    evaluate,
    match_detections,
)
from .geometry import Box3, BoxResidual, Detection, decode_residual, encode_residual, iou3d, nms
from .kernels import BACKEND
from .model import ModelParams, detect, forward, init_params, load_model, save_model
from .scenes import Scene, SynthConfig, read_predictions, read_scene, synth_scene, write_predictions, write_scene
from .tensor import Tape, Tensor
from .train import train_toy

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "Box3",
    "BoxResidual",
    "ConfigError",
    "ContextConfig",
    "CountReport",
    "Detection",
    "EvalReport",
    "ModelParams",
    "PipelineConfig",
    "Scene",
    "SynthConfig",
    "Tape",
    "Tensor",
    "average_precision",
    "count_by_detection",
    "counting_metrics",
    "decode_residual",
    "detect",
    "encode_residual",
    "evaluate",
    "forward",
    "gcm",
    "hcm",
    "init_params",
    "iou3d",
    "load_config",
    "load_model",
    "match_detections",
    "nms",
    "parse_config",
    "pcm",
    "read_predictions",
    "read_scene",
    "save_model",
    "synth_scene",
    "train_toy",
    "write_predictions",
    "write_scene",
]
