"""Pixel-level RGB/IR fusion with channel and spatial attention."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class MfConfig:
    out_channels: int = 32
    se_reduction: int = 16
    rgb_in_channels: int = 3
    ir_in_channels: int = 1
    cross_gate: bool = False

    def validate(self) -> None:
        if self.out_channels < 2 or self.out_channels % 2:
            raise ValueError(f"out_channels must be even and >= 2, got {self.out_channels}")
        if self.se_reduction < 1:
            raise ValueError("se_reduction must be >= 1")


class SqueezeExcite(nn.Module):
    """Global average pool -> 1x1 bottleneck -> ReLU -> 1x1 expand -> sigmoid gate."""

    def __init__(self, channels: int, reduction: int = 16):
        super().__init__()
        hidden = max(channels // reduction, 1)
        self.fc1 = nn.Conv2d(channels, hidden, 1)
        self.fc2 = nn.Conv2d(hidden, channels, 1)
        nn.init.zeros_(self.fc2.bias)

    def gate(self, x):
        s = x.mean((2, 3), keepdim=True)
        return torch.sigmoid(self.fc2(F.relu(self.fc1(s))))

    def forward(self, x):
        return x * self.gate(x)


def squeeze_excite(x: torch.Tensor, weights: dict) -> torch.Tensor:
    """SE gating with explicit weights ``w1 (h, C), b1 (h,), w2 (C, h), b2 (C,)``."""
    s = x.mean((2, 3))
    z = F.relu(s @ weights["w1"].T + weights["b1"])
    g = torch.sigmoid(z @ weights["w2"].T + weights["b2"])
    return x * g[:, :, None, None]


def _conv1x1(c_in: int, c_out: int) -> nn.Conv2d:
    conv = nn.Conv2d(c_in, c_out, 1)
    nn.init.kaiming_uniform_(conv.weight, a=math.sqrt(5))
    return conv


@dataclass
class MfTrace:
    f_rgb: torch.Tensor
    f_ir: torch.Tensor
    m_rgb: torch.Tensor
    m_ir: torch.Tensor
    f_in1: torch.Tensor
    f_in2: torch.Tensor
    f_ful1: torch.Tensor
    f_ful2: torch.Tensor
    f_o: torch.Tensor


class MultimodalFusion(nn.Module):
    """Fuse a 3-channel RGB image and a 1-channel IR image into ``out_channels`` features.

    Each modality is gated channel-wise by its own SE block, multiplied by a
    single-channel spatial attention map from a 1x1 conv, added back to the raw
    input, and projected to half of ``out_channels``. The two halves are
    concatenated and passed through a final SE block. Every conv is 1x1, so the
    module never changes spatial size.
    """

    def __init__(self, cfg: MfConfig | None = None):
        super().__init__()
        cfg = cfg or MfConfig()
        cfg.validate()
        self.cfg = cfg
        c_rgb, c_ir, half = cfg.rgb_in_channels, cfg.ir_in_channels, cfg.out_channels // 2
        self.se_rgb = SqueezeExcite(c_rgb, cfg.se_reduction)
        self.se_ir = SqueezeExcite(c_ir, cfg.se_reduction)
        self.f1 = _conv1x1(c_ir, 1)  # IR feature -> m_ir
        self.f2 = _conv1x1(c_rgb, 1)  # RGB feature -> m_rgb
        self.f3 = _conv1x1(c_rgb, half)
        self.f4 = _conv1x1(c_ir, half)
        self.se_out = SqueezeExcite(cfg.out_channels, cfg.se_reduction)

    def forward_trace(self, rgb: torch.Tensor, ir: torch.Tensor) -> MfTrace:
        if rgb.shape[-2:] != ir.shape[-2:]:
            raise ValueError(f"RGB {tuple(rgb.shape)} and IR {tuple(ir.shape)} sizes differ")
        f_rgb = self.se_rgb(rgb)
        f_ir = self.se_ir(ir)
        m_ir = self.f1(f_ir)
        m_rgb = self.f2(f_rgb)
        if self.cfg.cross_gate:
            f_in1, f_in2 = m_ir * f_rgb, m_rgb * f_ir
        else:
            f_in1, f_in2 = m_rgb * f_rgb, m_ir * f_ir
        f_ful1 = self.f3(f_in1 + rgb)
        f_ful2 = self.f4(f_in2 + ir)
        f_o = self.se_out(torch.cat((f_ful1, f_ful2), 1))
        return MfTrace(f_rgb, f_ir, m_rgb, m_ir, f_in1, f_in2, f_ful1, f_ful2, f_o)

    def forward(self, rgb, ir):
        return self.forward_trace(rgb, ir).f_o


class ConcatFusion(nn.Module):
    """Parameter-free channel concatenation [rgb; ir]."""

    def forward(self, rgb, ir):
        if rgb.shape[-2:] != ir.shape[-2:]:
            raise ValueError(f"RGB {tuple(rgb.shape)} and IR {tuple(ir.shape)} sizes differ")
        return torch.cat((rgb, ir), 1)


def concat_fuse(rgb: torch.Tensor, ir: torch.Tensor) -> torch.Tensor:
    return ConcatFusion()(rgb, ir)


def mf_forward(rgb: torch.Tensor, ir: torch.Tensor, module: MultimodalFusion):
    """Run fusion and return ``(f_o, trace)``."""
    trace = module.forward_trace(rgb, ir)
    return trace.f_o, trace
