"""CSP backbone: CBS units, C3 blocks, SPP, and the optional Focus stem."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn

BN_EPS = 1e-3
BN_MOMENTUM = 0.03


def make_divisible(x: float, divisor: int = 8) -> int:
    return int(math.ceil(x / divisor) * divisor)


def scaled_depth(n: int, depth_multiple: float) -> int:
    return max(round(n * depth_multiple), 1) if n > 1 else n


class CBS(nn.Module):
    """Conv (same padding, no bias) -> BatchNorm -> SiLU."""

    def __init__(self, c_in: int, c_out: int, k: int = 1, s: int = 1, act: bool = True):
        super().__init__()
        if k % 2 == 0:
            raise ValueError(f"kernel must be odd, got {k}")
        self.conv = nn.Conv2d(c_in, c_out, k, s, k // 2, bias=False)
        self.bn = nn.BatchNorm2d(c_out, eps=BN_EPS, momentum=BN_MOMENTUM)
        self.act = nn.SiLU() if act else nn.Identity()

    def forward(self, x):
        return self.act(self.bn(self.conv(x)))


def cbs(x: torch.Tensor, out_channels: int, kernel: int = 1, stride: int = 1) -> torch.Tensor:
    """Functional CBS with a freshly initialised unit (shape probing and tests)."""
    return CBS(x.shape[1], out_channels, kernel, stride).to(x)(x)


class Bottleneck(nn.Module):
    def __init__(self, c_in: int, c_out: int, shortcut: bool = True):
        super().__init__()
        self.cv1 = CBS(c_in, c_out, 1, 1)
        self.cv2 = CBS(c_out, c_out, 3, 1)
        self.add = shortcut and c_in == c_out

    def forward(self, x):
        y = self.cv2(self.cv1(x))
        return x + y if self.add else y


class C3(nn.Module):
    """Cross-stage-partial block.

    The input is projected by two 1x1 CBS units to half the output width; one
    copy runs through ``n`` bottlenecks, the other skips ahead, and the two are
    concatenated and fused by a final 1x1 CBS.
    """

    def __init__(self, c_in: int, c_out: int, n: int = 1, shortcut: bool = True):
        super().__init__()
        hidden = c_out // 2
        self.cv1 = CBS(c_in, hidden, 1, 1)
        self.cv2 = CBS(c_in, hidden, 1, 1)
        self.cv3 = CBS(2 * hidden, c_out, 1)
        self.m = nn.Sequential(*(Bottleneck(hidden, hidden, shortcut) for _ in range(n)))

    def forward(self, x):
        return self.cv3(torch.cat((self.m(self.cv1(x)), self.cv2(x)), dim=1))


class SPP(nn.Module):
    """Spatial pyramid pooling with parallel stride-1 max pools."""

    def __init__(self, c_in: int, c_out: int, kernels=(5, 9, 13)):
        super().__init__()
        kernels = tuple(kernels)
        if any(k % 2 == 0 for k in kernels) or list(kernels) != sorted(kernels):
            raise ValueError(f"SPP kernels must be odd and ascending, got {kernels}")
        hidden = c_in // 2
        self.cv1 = CBS(c_in, hidden, 1, 1)
        self.cv2 = CBS(hidden * (len(kernels) + 1), c_out, 1, 1)
        self.m = nn.ModuleList(nn.MaxPool2d(k, 1, k // 2) for k in kernels)

    def pooled(self, x):
        """Concatenated [x', pool_k1(x'), ...] before the output CBS."""
        x = self.cv1(x)
        return torch.cat([x] + [m(x) for m in self.m], dim=1)

    def forward(self, x):
        return self.cv2(self.pooled(x))


def space_to_depth(x: torch.Tensor) -> torch.Tensor:
    if x.shape[-2] % 2 or x.shape[-1] % 2:
        raise ValueError(f"space_to_depth needs even H and W, got {tuple(x.shape[-2:])}")
    return torch.cat(
        [x[..., ::2, ::2], x[..., 1::2, ::2], x[..., ::2, 1::2], x[..., 1::2, 1::2]], dim=1
    )


def depth_to_space(x: torch.Tensor) -> torch.Tensor:
    """Inverse of :func:`space_to_depth`."""
    c = x.shape[1] // 4
    b, _, h, w = x.shape
    out = x.new_empty(b, c, 2 * h, 2 * w)
    out[..., ::2, ::2] = x[:, :c]
    out[..., 1::2, ::2] = x[:, c : 2 * c]
    out[..., ::2, 1::2] = x[:, 2 * c : 3 * c]
    out[..., 1::2, 1::2] = x[:, 3 * c :]
    return out


class Focus(nn.Module):
    """Space-to-depth by 2 followed by a CBS. Kept for the baseline ablation only."""

    def __init__(self, c_in: int, c_out: int, k: int = 3):
        super().__init__()
        self.conv = CBS(c_in * 4, c_out, k, 1)

    def forward(self, x):
        return self.conv(space_to_depth(x))


@dataclass
class BackboneConfig:
    depth_multiple: float = 0.33
    width_multiple: float = 0.50
    use_focus: bool = False
    in_channels: int = 32
    spp_kernels: list[int] = field(default_factory=lambda: [5, 9, 13])
    # zero-based layer indices in the layer table below
    tap_low: int = 4
    tap_high: int = 9

    def validate(self) -> None:
        for name in ("depth_multiple", "width_multiple"):
            v = getattr(self, name)
            if not 0 < v <= 1.33:
                raise ValueError(f"{name} must lie in (0, 1.33], got {v}")
        if not 0 <= self.tap_low < self.tap_high < len(LAYER_TABLE):
            raise ValueError(
                f"taps must satisfy 0 <= tap_low < tap_high < {len(LAYER_TABLE)}, "
                f"got {self.tap_low}, {self.tap_high}"
            )
        ks = list(self.spp_kernels)
        if any(k % 2 == 0 for k in ks) or ks != sorted(ks):
            raise ValueError(f"spp_kernels must be odd and ascending, got {ks}")

    @property
    def stem_width(self) -> int:
        return make_divisible(64 * self.width_multiple)


# (kind, base width, base depth, stride) before multiples are applied
LAYER_TABLE = [
    ("stem", 64, 1, 1),
    ("cbs", 128, 1, 2),
    ("c3", 128, 3, 1),
    ("cbs", 256, 1, 2),
    ("c3", 256, 9, 1),
    ("cbs", 512, 1, 2),
    ("c3", 512, 9, 1),
    ("cbs", 1024, 1, 2),
    ("spp", 1024, 1, 1),
    ("c3_noshort", 1024, 3, 1),
]
# layer indices feeding the detection pyramid (fine to coarse)
PYRAMID_LAYERS = (4, 6, 9)


@dataclass
class FeatureTaps:
    low_level: torch.Tensor
    high_level: torch.Tensor
    pyramid: list[torch.Tensor]


class Backbone(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        layers = []
        self.channels: list[int] = []
        self.strides: list[int] = []
        c_in, stride = cfg.in_channels, 1
        for kind, width, depth, s in LAYER_TABLE:
            c_out = make_divisible(width * cfg.width_multiple)
            n = scaled_depth(depth, cfg.depth_multiple)
            if kind == "stem":
                if cfg.use_focus:
                    layer, s = Focus(c_in, c_out, 3), 2
                else:
                    layer = CBS(c_in, c_out, 3, 1)
            elif kind == "cbs":
                layer = CBS(c_in, c_out, 3, s)
            elif kind == "spp":
                layer = SPP(c_in, c_out, cfg.spp_kernels)
            else:
                layer = C3(c_in, c_out, n, shortcut=kind == "c3")
            stride *= s
            layers.append(layer)
            self.channels.append(c_out)
            self.strides.append(stride)
            c_in = c_out
        self.layers = nn.ModuleList(layers)

    @property
    def max_stride(self) -> int:
        return self.strides[-1]

    @property
    def pyramid_channels(self) -> list[int]:
        return [self.channels[i] for i in PYRAMID_LAYERS]

    @property
    def pyramid_strides(self) -> list[int]:
        return [self.strides[i] for i in PYRAMID_LAYERS]

    def forward(self, x: torch.Tensor) -> FeatureTaps:
        if x.shape[-2] % self.max_stride or x.shape[-1] % self.max_stride:
            raise ValueError(
                f"input dims {tuple(x.shape[-2:])} must be divisible by {self.max_stride}"
            )
        outs = []
        for layer in self.layers:
            x = layer(x)
            outs.append(x)
        return FeatureTaps(
            low_level=outs[self.cfg.tap_low],
            high_level=outs[self.cfg.tap_high],
            pyramid=[outs[i] for i in PYRAMID_LAYERS],
        )
