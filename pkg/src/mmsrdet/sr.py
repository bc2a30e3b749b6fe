"""Auxiliary super-resolution branch: encoder over two backbone taps and a deconv decoder."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class SrConfig:
    encoder_kind: str = "plain"  # plain | edsr
    encoder_width: int = 128
    edsr_n_resblocks: int = 8
    edsr_width: int = 64
    edsr_res_scale: float = 1.0
    decoder_channels: tuple = (64, 32, 3)
    loss_kind: str = "l1"  # l1 | l2
    target: str = "rgb"  # rgb | ir | both

    def validate(self) -> None:
        if self.encoder_kind not in ("plain", "edsr"):
            raise ValueError(f"encoder_kind must be plain or edsr, got {self.encoder_kind!r}")
        if self.loss_kind not in ("l1", "l2"):
            raise ValueError(f"loss_kind must be l1 or l2, got {self.loss_kind!r}")
        if self.target not in ("rgb", "ir", "both"):
            raise ValueError(f"target must be rgb, ir or both, got {self.target!r}")
        if len(self.decoder_channels) != 3:
            raise ValueError("the decoder has exactly three transposed convolutions")

    @property
    def out_channels(self) -> int:
        return self.decoder_channels[-1]


class CR(nn.Sequential):
    """3x3 conv + ReLU."""

    def __init__(self, c_in: int, c_out: int):
        super().__init__(nn.Conv2d(c_in, c_out, 3, 1, 1), nn.ReLU())


class ResBlock(nn.Module):
    """EDSR residual block: conv-ReLU-conv with a scaled identity skip, no batch norm."""

    def __init__(self, width: int, res_scale: float = 1.0):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(width, width, 3, 1, 1), nn.ReLU(), nn.Conv2d(width, width, 3, 1, 1)
        )
        self.res_scale = res_scale

    def forward(self, x):
        return x + self.body(x) * self.res_scale


class SrEncoder(nn.Module):
    def __init__(self, low_channels: int, high_channels: int, cfg: SrConfig, upscale: int):
        super().__init__()
        self.upscale = upscale
        w = cfg.encoder_width
        self.low = CR(low_channels, w)
        if cfg.encoder_kind == "plain":
            self.merge = nn.Sequential(CR(w + high_channels, w), CR(w, w))
        else:
            ew = cfg.edsr_width
            self.merge = nn.Sequential(
                CR(w + high_channels, ew),
                *(ResBlock(ew, cfg.edsr_res_scale) for _ in range(cfg.edsr_n_resblocks)),
                CR(ew, w),
            )

    def forward(self, low, high):
        if tuple(high.shape[-2:]) != tuple(s // self.upscale for s in low.shape[-2:]) or (
            low.shape[-1] % self.upscale
        ):
            raise ValueError(
                f"high-level {tuple(high.shape[-2:])} x{self.upscale} does not match "
                f"low-level {tuple(low.shape[-2:])}"
            )
        up = F.interpolate(high, scale_factor=float(self.upscale), mode="nearest")
        return self.merge(torch.cat((self.low(low), up), 1))


class SrDecoder(nn.Module):
    """Three stride-2 transposed convs (x8 total); ReLU between, none on the output."""

    def __init__(self, in_channels: int, channels=(64, 32, 3)):
        super().__init__()
        layers = []
        c = in_channels
        for i, c_out in enumerate(channels):
            layers.append(nn.ConvTranspose2d(c, c_out, 4, 2, 1))
            if i < len(channels) - 1:
                layers.append(nn.ReLU())
            c = c_out
        self.body = nn.Sequential(*layers)

    def forward(self, x):
        return self.body(x)


class SrBranch(nn.Module):
    """Reconstruct a 2x image from the low-level (stride s) and high-level taps.

    The decoder upsamples by 8, so the low-level tap must sit at stride 4 of the
    network input for the output to be twice the input size.
    """

    def __init__(self, low_channels: int, high_channels: int, upscale: int,
                 cfg: SrConfig | None = None):
        super().__init__()
        cfg = cfg or SrConfig()
        cfg.validate()
        self.cfg = cfg
        self.encoder = SrEncoder(low_channels, high_channels, cfg, upscale)
        self.decoder = SrDecoder(cfg.encoder_width, cfg.decoder_channels)

    def forward(self, low, high):
        return self.decoder(self.encoder(low, high))


def sr_loss(s: torch.Tensor, x: torch.Tensor, kind: str = "l1") -> torch.Tensor:
    """Mean absolute (l1) or mean squared (l2) reconstruction error."""
    if s.shape != x.shape:
        raise ValueError(f"reconstruction {tuple(s.shape)} and target {tuple(x.shape)} differ")
    if kind == "l1":
        return (s - x).abs().mean()
    if kind == "l2":
        return ((s - x) ** 2).mean()
    raise ValueError(f"unknown sr loss kind {kind!r}")
