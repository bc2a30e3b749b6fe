"""Assembly of fusion, backbone, neck/head and the optional SR branch."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, replace

import torch
import torch.nn as nn

from .backbone import Backbone, BackboneConfig
from .fusion import ConcatFusion, MfConfig, MultimodalFusion
from .head import Detect, HeadConfig, Neck
from .sr import SrBranch, SrConfig


@dataclass
class ModelConfig:
    modality: str = "multi"  # multi | rgb | ir
    fusion: str = "mf"  # mf | concat (multi only)
    sr_enabled: bool = True
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    mf: MfConfig = field(default_factory=MfConfig)
    sr: SrConfig = field(default_factory=SrConfig)

    def validate(self) -> None:
        if self.modality not in ("multi", "rgb", "ir"):
            raise ValueError(f"modality must be multi, rgb or ir, got {self.modality!r}")
        if self.fusion not in ("mf", "concat"):
            raise ValueError(f"fusion must be mf or concat, got {self.fusion!r}")
        self.backbone.validate()
        self.head.validate()
        self.mf.validate()
        self.sr.validate()

    def input_channels(self) -> int:
        if self.modality == "rgb":
            return 3
        if self.modality == "ir":
            return 1
        return self.mf.out_channels if self.fusion == "mf" else 4


class Detector(nn.Module):
    """Multimodal detector; ``forward(rgb, ir)`` returns ``(raw_grids, sr_image_or_None)``."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg = copy.deepcopy(cfg)
        cfg.backbone.in_channels = cfg.input_channels()
        if cfg.modality == "multi" and cfg.fusion == "mf":
            cfg.mf.out_channels = cfg.backbone.in_channels
        cfg.validate()
        self.cfg = cfg
        if cfg.modality == "multi":
            self.fusion = MultimodalFusion(cfg.mf) if cfg.fusion == "mf" else ConcatFusion()
        else:
            self.fusion = None
        self.backbone = Backbone(cfg.backbone)
        bb = self.backbone
        nd = cfg.head.n_detectors
        neck = Neck(bb.pyramid_channels, nd, cfg.backbone.width_multiple, cfg.backbone.depth_multiple)
        detect = Detect(cfg.head.n_classes, neck.out_channels, bb.pyramid_strides[:nd],
                        cfg.head.detector_anchors())
        self.head = nn.ModuleDict({"neck": neck, "detect": detect})
        if cfg.sr_enabled:
            sr_cfg = replace(cfg.sr, decoder_channels=tuple(cfg.sr.decoder_channels[:2]) + (
                {"rgb": 3, "ir": 1, "both": 4}[cfg.sr.target],))
            up = bb.strides[cfg.backbone.tap_high] // bb.strides[cfg.backbone.tap_low]
            self.sr = SrBranch(bb.channels[cfg.backbone.tap_low], bb.channels[cfg.backbone.tap_high],
                               up, sr_cfg)
        else:
            self.sr = None

    @property
    def strides(self) -> list[int]:
        return self.head["detect"].strides.tolist()

    @property
    def anchors(self) -> torch.Tensor:
        return self.head["detect"].anchors

    @property
    def max_stride(self) -> int:
        return self.backbone.max_stride

    def fuse_inputs(self, rgb, ir):
        if self.cfg.modality == "rgb":
            return rgb
        if self.cfg.modality == "ir":
            return ir
        return self.fusion(rgb, ir)

    def forward(self, rgb, ir, return_sr: bool | None = None):
        if return_sr is None:
            return_sr = self.training
        taps = self.backbone(self.fuse_inputs(rgb, ir))
        raw = self.head["detect"](self.head["neck"](taps.pyramid))
        sr = self.sr(taps.low_level, taps.high_level) if (return_sr and self.sr is not None) else None
        return raw, sr

    def sr_target(self, rgb_hr, ir_hr):
        t = self.cfg.sr.target
        if t == "rgb":
            return rgb_hr
        if t == "ir":
            return ir_hr
        return torch.cat((rgb_hr, ir_hr), 1)


def build_model(cfg: ModelConfig | str = "multi") -> Detector:
    if isinstance(cfg, str):
        cfg = preset(cfg)
    return Detector(cfg)


def preset(name: str, n_classes: int = 8) -> ModelConfig:
    """Named model configurations.

    ``multi``      one small-object detector, MF fusion, SR branch (the full model)
    ``rgb``/``ir`` same, single modality
    ``ablation``   one detector, concat fusion, SR branch
    ``yolov5s``    three detectors, concat fusion, Focus stem, no SR
    ``yolov5s-nofocus``  as above without Focus
    """
    head = HeadConfig(n_classes=n_classes)
    if name in ("multi", "rgb", "ir"):
        return ModelConfig(modality=name, fusion="mf", head=head)
    if name == "ablation":
        return ModelConfig(modality="multi", fusion="concat", head=head)
    if name in ("yolov5s", "yolov5s-nofocus"):
        head.n_detectors = 3
        return ModelConfig(modality="multi", fusion="concat", sr_enabled=False, head=head,
                           backbone=BackboneConfig(use_focus=name == "yolov5s"))
    raise KeyError(f"unknown preset {name!r}")


PRESETS = ("multi", "rgb", "ir", "ablation", "yolov5s", "yolov5s-nofocus")


def strip_sr(model: Detector) -> Detector:
    """Inference copy of ``model`` without the SR branch, sharing no storage."""
    cfg = copy.deepcopy(model.cfg)
    cfg.sr_enabled = False
    out = Detector(cfg)
    state = {k: v for k, v in model.state_dict().items() if not k.startswith("sr.")}
    out.load_state_dict(state)
    out.train(model.training)
    return out
