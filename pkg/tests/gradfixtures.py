"""Small double-precision fixtures for finite-difference gradient checks."""

from __future__ import annotations

import torch
import torch.nn as nn

from mmsrdet.backbone import C3, CBS
from mmsrdet.fusion import MfConfig, MultimodalFusion
from mmsrdet.head import DEFAULT_ANCHORS, LossConfig, assign_targets, detection_loss
from mmsrdet.sr import SrBranch, SrConfig, sr_loss
from oracles import finite_difference_check


def _leaves(module: nn.Module, *inputs):
    return [p for p in module.parameters()] + list(inputs)


def mf_gradient_error(seed: int = 0) -> float:
    torch.manual_seed(seed)
    mf = MultimodalFusion(MfConfig(out_channels=8, se_reduction=2)).double()
    # non-zero biases so every path carries gradient
    for p in mf.parameters():
        p.data.uniform_(-0.5, 0.5)
    rgb = torch.rand(1, 3, 8, 8, dtype=torch.float64, requires_grad=True)
    ir = torch.rand(1, 1, 8, 8, dtype=torch.float64, requires_grad=True)
    proj = torch.randn(1, 8, 8, 8, dtype=torch.float64)
    return finite_difference_check(lambda: (mf(rgb, ir) * proj).sum(), _leaves(mf, rgb, ir))


def backbone_gradient_error(seed: int = 0) -> float:
    torch.manual_seed(seed)
    net = nn.Sequential(CBS(4, 8, 3, 2), C3(8, 8, n=1)).double().train()
    x = torch.rand(2, 4, 8, 8, dtype=torch.float64, requires_grad=True)
    proj = torch.randn(2, 8, 4, 4, dtype=torch.float64)
    return finite_difference_check(lambda: (net(x) * proj).sum(), _leaves(net, x))


def sr_gradient_error(seed: int = 0, kind: str = "l1") -> float:
    """sr_loss(decode(encode(low, high)), x) for a 3x32x32 LR image: low tap 8x8, high tap 2x2."""
    torch.manual_seed(seed)
    cfg = SrConfig(encoder_width=8, decoder_channels=(8, 4, 3), loss_kind=kind)
    branch = SrBranch(4, 8, 4, cfg).double()
    low = torch.randn(1, 4, 8, 8, dtype=torch.float64, requires_grad=True)
    high = torch.randn(1, 8, 2, 2, dtype=torch.float64, requires_grad=True)
    target = torch.rand(1, 3, 64, 64, dtype=torch.float64)
    # per-weight gradients are ~1e-6 of the loss value, so a 1e-6 step is
    # roundoff-limited; 1e-5 stays well clear of the ReLU kinks
    return finite_difference_check(lambda: sr_loss(branch(low, high), target, kind),
                                   _leaves(branch, low, high), eps=1e-5)


def _loss_fixture(seed: int):
    g = torch.Generator().manual_seed(seed)
    nc = 3
    anchors = torch.tensor([DEFAULT_ANCHORS[0]], dtype=torch.float64)
    labels = torch.tensor([[0, 0, 0.31, 0.42, 0.20, 0.25],
                           [0, 2, 0.70, 0.66, 0.15, 0.30]], dtype=torch.float64)
    tg = assign_targets(labels, [(8, 8)], [8], anchors)
    raw = torch.randn(1, 3, 8, 8, 5 + nc, dtype=torch.float64, generator=g) * 0.7
    return raw, tg, nc


def loss_gradient_error(seed: int = 0) -> float:
    """Full check with a constant objectness target, plus a check on the obj/cls logits
    with the IoU-scaled target (its IoU factor is a stop-gradient, so only the
    non-box channels have a well-defined finite-difference counterpart)."""
    raw0, tg, nc = _loss_fixture(seed)
    cfg0 = LossConfig(obj_iou_ratio=0.0, ciou_alpha_grad=True).resolved(1, nc)
    raw = raw0.clone().requires_grad_(True)
    e_full = finite_difference_check(lambda: detection_loss([raw], tg, cfg0, nc).l_o, [raw])

    cfg1 = LossConfig(obj_iou_ratio=1.0).resolved(1, nc)
    box = raw0[..., :4].clone()
    rest = raw0[..., 4:].clone().requires_grad_(True)
    e_obj = finite_difference_check(
        lambda: detection_loss([torch.cat((box, rest), -1)], tg, cfg1, nc).l_o, [rest])
    return max(e_full, e_obj)
