"""Multimodal RGB/IR small-object detection with an auxiliary super-resolution branch."""

from .backbone import Backbone, BackboneConfig
from .fusion import MfConfig, MultimodalFusion
from .head import HeadConfig, LossConfig, detection_loss, nms
from .model import PRESETS, Detector, ModelConfig, build_model, preset, strip_sr
from .sr import SrBranch, SrConfig

__version__ = "0.1.0"

__all__ = [
    "Backbone", "BackboneConfig", "MfConfig", "MultimodalFusion", "HeadConfig", "LossConfig",
    "detection_loss", "nms", "PRESETS", "Detector", "ModelConfig", "build_model", "preset", "strip_sr",
    "SrBranch", "SrConfig",
]
