"""Parameter and FLOP accounting via forward hooks on leaf modules.

Raw operation counts per output element:

* Conv2d: ``2 * k_h * k_w * C_in / groups`` plus 1 for the bias
* ConvTranspose2d: ``2 * k_h * k_w * C_out / groups`` per *input* element, plus 1 per output for the bias
* BatchNorm2d: 2 (scale and shift)
* SiLU / ReLU / Sigmoid: 1
* MaxPool2d: ``k * k``
* Linear: ``2 * in_features`` plus 1 for the bias

Tensor arithmetic written inline in ``forward`` (residual adds, attention
products, concatenation, nearest upsampling) is not counted.

Reported GFLOPs are ``raw * GFLOPS_SCALE / 1e9``. The scale was fitted once so
that the 4-channel, 8-class YOLOv5s (Focus stem, three detectors) reads 5.32
at 512 x 512 and is frozen here; every report uses the same constant.
"""

from __future__ import annotations

import copy
from collections import defaultdict
from dataclasses import dataclass, field

import torch
import torch.nn as nn

GFLOPS_SCALE = 0.49845974  # 5.32 / 10.672878336 raw GFLOPs of that baseline

_ACTS = (nn.SiLU, nn.ReLU, nn.Sigmoid, nn.LeakyReLU)


def count_params(model: nn.Module, exclude_prefix: str | None = None) -> int:
    return sum(
        p.numel()
        for n, p in model.named_parameters()
        if exclude_prefix is None or not n.startswith(exclude_prefix)
    )


def _module_flops(m: nn.Module, inp: torch.Tensor, out: torch.Tensor) -> int:
    if isinstance(m, nn.Conv2d):
        kh, kw = m.kernel_size
        per = 2 * kh * kw * m.in_channels // m.groups + (1 if m.bias is not None else 0)
        return per * out.numel()
    if isinstance(m, nn.ConvTranspose2d):
        kh, kw = m.kernel_size
        n = 2 * kh * kw * m.out_channels // m.groups * inp.numel()
        return n + (out.numel() if m.bias is not None else 0)
    if isinstance(m, nn.BatchNorm2d):
        return 2 * out.numel()
    if isinstance(m, _ACTS):
        return out.numel()
    if isinstance(m, nn.MaxPool2d):
        k = m.kernel_size if isinstance(m.kernel_size, int) else m.kernel_size[0] * m.kernel_size[1]
        k = k * k if isinstance(m.kernel_size, int) else k
        return k * out.numel()
    if isinstance(m, nn.Linear):
        return (2 * m.in_features + (1 if m.bias is not None else 0)) * out.numel() // m.out_features
    return 0


@dataclass
class ComplexityReport:
    total_params: int
    raw_flops: int
    gflops: float
    input_size: tuple
    params_by_module: dict = field(default_factory=dict)
    flops_by_module: dict = field(default_factory=dict)

    def rows(self):
        names = sorted(set(self.params_by_module) | set(self.flops_by_module))
        for n in names:
            yield n, self.params_by_module.get(n, 0), self.flops_by_module.get(n, 0) * GFLOPS_SCALE / 1e9


def count_flops(model: nn.Module, inputs, depth: int = 1, **forward_kwargs):
    """Run one forward pass on the meta device and return ``(raw_total, raw_by_prefix)``.

    ``inputs`` is a tensor or tuple of tensors. ``depth`` is the number of
    dotted name components used to group the breakdown.
    """
    inputs = inputs if isinstance(inputs, (tuple, list)) else (inputs,)
    meta = copy.deepcopy(model).to("meta")
    meta.eval()
    by_prefix: dict[str, int] = defaultdict(int)
    handles = []
    for name, mod in meta.named_modules():
        if len(list(mod.children())):
            continue
        key = ".".join(name.split(".")[:depth])

        def hook(m, i, o, key=key):
            by_prefix[key] += _module_flops(m, i[0], o)

        handles.append(mod.register_forward_hook(hook))
    try:
        with torch.no_grad():
            meta(*(torch.empty(x.shape, device="meta") for x in inputs), **forward_kwargs)
    finally:
        for h in handles:
            h.remove()
    return sum(by_prefix.values()), dict(by_prefix)


def count_gflops(model: nn.Module, inputs, **forward_kwargs) -> float:
    raw, _ = count_flops(model, inputs, **forward_kwargs)
    return raw * GFLOPS_SCALE / 1e9


def detector_inputs(model, size: int, batch: int = 1):
    """Shape-only (rgb, ir) placeholders for a detector at ``size`` x ``size``."""
    return (torch.empty(batch, 3, size, size), torch.empty(batch, 1, size, size))


def complexity_report(model: nn.Module, size: int = 512, include_sr: bool = False) -> ComplexityReport:
    """Params and GFLOPs of the inference graph (or the training graph when ``include_sr``)."""
    raw, by_mod = count_flops(model, detector_inputs(model, size), return_sr=include_sr)
    params = defaultdict(int)
    for n, p in model.named_parameters():
        if not include_sr and n.startswith("sr."):
            continue
        params[n.split(".")[0]] += p.numel()
    return ComplexityReport(
        total_params=sum(params.values()),
        raw_flops=raw,
        gflops=raw * GFLOPS_SCALE / 1e9,
        input_size=(size, size),
        params_by_module=dict(params),
        flops_by_module=by_mod,
    )
