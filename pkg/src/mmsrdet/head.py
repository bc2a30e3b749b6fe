"""Detection neck + anchor-based head, decoding, NMS, target assignment and losses."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import C3, CBS, make_divisible, scaled_depth

# pixel anchors (w, h), three per detector, fine to coarse
DEFAULT_ANCHORS = [
    [(10, 13), (16, 30), (33, 23)],
    [(30, 61), (62, 45), (59, 119)],
    [(116, 90), (156, 198), (373, 326)],
]


@dataclass
class HeadConfig:
    n_classes: int = 8
    n_detectors: int = 1
    anchors: list = field(default_factory=lambda: [list(a) for a in DEFAULT_ANCHORS])
    conf_threshold: float = 0.001
    nms_iou_threshold: float = 0.6
    max_det: int = 300

    def validate(self) -> None:
        if self.n_detectors not in (1, 3):
            raise ValueError(f"n_detectors must be 1 or 3, got {self.n_detectors}")
        if len(self.anchors) < self.n_detectors or any(
            len(a) != 3 for a in self.anchors[: self.n_detectors]
        ):
            raise ValueError("need three anchors per detector")
        for name in ("conf_threshold", "nms_iou_threshold"):
            v = getattr(self, name)
            if not 0 < v < 1:
                raise ValueError(f"{name} must lie in (0, 1), got {v}")
        if self.n_classes < 1:
            raise ValueError("n_classes must be >= 1")

    def detector_anchors(self) -> torch.Tensor:
        """(n_detectors, 3, 2) anchor tensor in input pixels."""
        return torch.tensor(
            [[list(map(float, wh)) for wh in a] for a in self.anchors[: self.n_detectors]]
        )


class Neck(nn.Module):
    """Top-down FPN path, plus the bottom-up PAN path when three detectors are used."""

    def __init__(self, in_channels, n_detectors: int, width_multiple=0.5, depth_multiple=0.33):
        super().__init__()
        c3_ch, c4_ch, c5_ch = in_channels
        w = lambda c: make_divisible(c * width_multiple)  # noqa: E731
        n = scaled_depth(3, depth_multiple)
        self.n_detectors = n_detectors
        self.lat5 = CBS(c5_ch, w(512), 1, 1)
        self.td4 = C3(w(512) + c4_ch, w(512), n, shortcut=False)
        self.lat4 = CBS(w(512), w(256), 1, 1)
        self.td3 = C3(w(256) + c3_ch, w(256), n, shortcut=False)
        self.out_channels = [w(256)]
        if n_detectors == 3:
            self.down3 = CBS(w(256), w(256), 3, 2)
            self.bu4 = C3(w(256) + w(256), w(512), n, shortcut=False)
            self.down4 = CBS(w(512), w(512), 3, 2)
            self.bu5 = C3(w(512) + w(512), w(1024), n, shortcut=False)
            self.out_channels += [w(512), w(1024)]

    def forward(self, pyramid):
        p3, p4, p5 = pyramid
        x10 = self.lat5(p5)
        x13 = self.td4(torch.cat((F.interpolate(x10, scale_factor=2.0, mode="nearest"), p4), 1))
        x14 = self.lat4(x13)
        x17 = self.td3(torch.cat((F.interpolate(x14, scale_factor=2.0, mode="nearest"), p3), 1))
        if self.n_detectors == 1:
            return [x17]
        x20 = self.bu4(torch.cat((self.down3(x17), x14), 1))
        x23 = self.bu5(torch.cat((self.down4(x20), x10), 1))
        return [x17, x20, x23]


class Detect(nn.Module):
    """Per-detector 1x1 prediction convs producing (B, 3, H, W, 5 + nc) grids."""

    def __init__(self, n_classes: int, in_channels, strides, anchors: torch.Tensor):
        super().__init__()
        self.nc = n_classes
        self.no = n_classes + 5
        self.na = anchors.shape[1]
        self.register_buffer("strides", torch.tensor([float(s) for s in strides]))
        self.register_buffer("anchors", anchors.clone())
        self.m = nn.ModuleList(nn.Conv2d(c, self.no * self.na, 1) for c in in_channels)
        self.initialize_biases()

    def initialize_biases(self, image_size: int = 640) -> None:
        for conv, s in zip(self.m, self.strides.tolist()):
            b = conv.bias.data.view(self.na, -1)
            b[:, 4] += math.log(8 / (image_size / s) ** 2)
            b[:, 5:] += math.log(0.6 / (self.nc - 0.99)) if self.nc > 1 else 0.0

    def forward(self, feats):
        out = []
        for conv, x in zip(self.m, feats):
            b, _, h, w = x.shape
            out.append(conv(x).view(b, self.na, self.no, h, w).permute(0, 1, 3, 4, 2).contiguous())
        return out


# --- decoding -----------------------------------------------------------------


def _grid(h: int, w: int, dtype, device):
    ys, xs = torch.meshgrid(
        torch.arange(h, dtype=dtype, device=device),
        torch.arange(w, dtype=dtype, device=device),
        indexing="ij",
    )
    return torch.stack((xs, ys), -1)


def decode_grid(p: torch.Tensor, stride: float, anchors: torch.Tensor) -> torch.Tensor:
    """Map one raw grid (B, A, H, W, 5+nc) to (B, A, H, W, 5+nc) with xywh in pixels and probabilities."""
    y = p.sigmoid()
    grid = _grid(p.shape[2], p.shape[3], p.dtype, p.device)
    xy = (y[..., 0:2] * 2 - 0.5 + grid) * stride
    wh = (y[..., 2:4] * 2) ** 2 * anchors.to(p).view(1, -1, 1, 1, 2)
    return torch.cat((xy, wh, y[..., 4:]), -1)


def encode_box(box_xywh, cell_xy, anchor_wh, stride: float) -> np.ndarray:
    """Ideal logits (tx, ty, tw, th) that decode to ``box_xywh`` (pixels) at the given cell."""
    box = np.asarray(box_xywh, dtype=np.float64)
    off = box[:2] / stride - np.asarray(cell_xy, dtype=np.float64)
    s_xy = (off + 0.5) / 2
    s_wh = np.sqrt(box[2:] / np.asarray(anchor_wh, dtype=np.float64)) / 2
    s = np.concatenate([s_xy, s_wh])
    if np.any(s <= 0) or np.any(s >= 1):
        raise ValueError("box is not representable from this cell/anchor")
    return np.log(s / (1 - s))


def xywh2xyxy(x):
    y = x.clone() if isinstance(x, torch.Tensor) else np.array(x, dtype=np.float64, copy=True)
    y[..., 0] = x[..., 0] - x[..., 2] / 2
    y[..., 1] = x[..., 1] - x[..., 3] / 2
    y[..., 2] = x[..., 0] + x[..., 2] / 2
    y[..., 3] = x[..., 1] + x[..., 3] / 2
    return y


def box_iou_np(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of xyxy boxes, (N, 4) x (M, 4) -> (N, M)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    inter = np.prod(np.clip(rb - lt, 0, None), axis=2)
    area_a = np.prod(a[:, 2:] - a[:, :2], axis=1)
    area_b = np.prod(b[:, 2:] - b[:, :2], axis=1)
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)


def nms(boxes: np.ndarray, iou_threshold: float) -> np.ndarray:
    """Greedy class-wise suppression.

    ``boxes`` rows are (class_id, score, x1, y1, x2, y2). Returns the kept rows
    ordered by descending score.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 6)
    if len(boxes) == 0:
        return boxes
    order = np.argsort(-boxes[:, 1], kind="stable")
    boxes = boxes[order]
    keep = []
    for c in np.unique(boxes[:, 0]):
        idx = np.flatnonzero(boxes[:, 0] == c)
        xyxy = boxes[idx, 2:]
        alive = np.ones(len(idx), dtype=bool)
        for i in range(len(idx)):
            if not alive[i]:
                continue
            keep.append(idx[i])
            rest = np.flatnonzero(alive[i + 1 :]) + i + 1
            if len(rest):
                ious = box_iou_np(xyxy[i : i + 1], xyxy[rest])[0]
                alive[rest[ious > iou_threshold]] = False
    keep = np.sort(np.asarray(keep))
    return boxes[keep]


def decode(raw, strides, anchors: torch.Tensor, conf_threshold: float,
           image_size=None) -> list[np.ndarray]:
    """Decode raw grids into per-image (class, score, x1, y1, x2, y2) arrays (before NMS).

    Scores are sigmoid(obj) * sigmoid(best class); boxes below ``conf_threshold``
    are dropped and the rest clipped to ``image_size`` (h, w) when given.
    """
    per_level = []
    for p, s, a in zip(raw, strides, anchors):
        d = decode_grid(p.detach(), float(s), a)
        per_level.append(d.reshape(d.shape[0], -1, d.shape[-1]))
    pred = torch.cat(per_level, 1).double()
    results = []
    for x in pred:
        cls_conf, cls_id = x[:, 5:].max(1)
        score = x[:, 4] * cls_conf
        m = score > conf_threshold
        xyxy = xywh2xyxy(x[m, :4])
        if image_size is not None:
            h, w = image_size
            xyxy[:, 0::2] = xyxy[:, 0::2].clamp(0, w)
            xyxy[:, 1::2] = xyxy[:, 1::2].clamp(0, h)
        rows = torch.cat((cls_id[m, None].double(), score[m, None], xyxy), 1).cpu().numpy()
        results.append(rows[np.argsort(-rows[:, 1], kind="stable")])
    return results


def postprocess(raw, strides, anchors, conf_threshold, iou_threshold, image_size=None, max_det=300):
    """decode + NMS, one array per image sorted by descending score."""
    return [nms(d, iou_threshold)[:max_det] for d in
            decode(raw, strides, anchors, conf_threshold, image_size)]


# --- targets and losses --------------------------------------------------------


@dataclass
class Targets:
    """Positive samples per detector: indices (b, a, gy, gx), box offsets, anchors and classes."""

    indices: list
    tbox: list
    anchors: list
    tcls: list

    def n_positive(self, level: int | None = None) -> int:
        levels = range(len(self.tbox)) if level is None else [level]
        return sum(len(self.tbox[i]) for i in levels)


def assign_targets(labels: torch.Tensor, grid_shapes, strides, anchors: torch.Tensor,
                   anchor_t: float = 4.0) -> Targets:
    """Match labels to anchors and grid cells.

    ``labels`` is (n, 6): image index, class, cx, cy, w, h with coordinates
    normalised to [0, 1]. An anchor is positive when both width and height
    ratios to the label are within ``anchor_t``. Besides the cell holding the
    centre, the nearer horizontal neighbour (left when the centre lies in the
    left half of its cell, right when in the right half) and the nearer
    vertical neighbour are positive too, giving at most three cells per match.
    """
    labels = torch.as_tensor(labels, dtype=torch.float64).reshape(-1, 6)
    out = Targets([], [], [], [])
    for (h, w), stride, anch in zip(grid_shapes, strides, anchors):
        anch_g = anch.double() / float(stride)
        if len(labels) == 0:
            e = torch.zeros(0, dtype=torch.long)
            out.indices.append((e, e, e, e))
            out.tbox.append(torch.zeros(0, 4, dtype=torch.float64))
            out.anchors.append(torch.zeros(0, 2, dtype=torch.float64))
            out.tcls.append(e)
            continue
        gain = torch.tensor([w, h, w, h], dtype=torch.float64)
        g = labels[:, 2:6] * gain  # grid units
        r = g[None, :, 2:4] / anch_g[:, None, :]  # (na, n, 2)
        ok = torch.max(r, 1 / r).max(2).values < anchor_t
        a_idx, t_idx = ok.nonzero(as_tuple=True)
        gt = g[t_idx]
        gxy = gt[:, :2]
        frac = gxy % 1.0
        gxi = gain[:2] - gxy
        sel = [torch.ones(len(gt), dtype=torch.bool)]
        offsets = [torch.zeros(2)]
        # left / up neighbour
        for dim in (0, 1):
            cond = (frac[:, dim] < 0.5) & (gxy[:, dim] > 1.0)
            off = torch.zeros(2)
            off[dim] = 1.0
            sel.append(cond)
            offsets.append(off)
        # right / down neighbour
        for dim in (0, 1):
            cond = (frac[:, dim] > 0.5) & (gxi[:, dim] > 1.0)
            off = torch.zeros(2)
            off[dim] = -1.0
            sel.append(cond)
            offsets.append(off)
        bi, ai, gjs, gis, tbs, ans, tcs = [], [], [], [], [], [], []
        for m, off in zip(sel, offsets):
            sub = gt[m]
            ij = (sub[:, :2] - off.double()).long()
            gi = ij[:, 0].clamp(0, w - 1)
            gj = ij[:, 1].clamp(0, h - 1)
            bi.append(labels[t_idx[m], 0].long())
            ai.append(a_idx[m])
            gjs.append(gj)
            gis.append(gi)
            tbs.append(torch.cat((sub[:, :2] - torch.stack((gi, gj), 1).double(), sub[:, 2:4]), 1))
            ans.append(anch_g[a_idx[m]])
            tcs.append(labels[t_idx[m], 1].long())
        out.indices.append((torch.cat(bi), torch.cat(ai), torch.cat(gjs), torch.cat(gis)))
        out.tbox.append(torch.cat(tbs))
        out.anchors.append(torch.cat(ans))
        out.tcls.append(torch.cat(tcs))
    return out


def bbox_ciou(box1: torch.Tensor, box2: torch.Tensor, eps: float = 1e-7, alpha_grad: bool = False) -> torch.Tensor:
    """Complete IoU between matching rows of two (n, 4) xywh tensors.

    The aspect trade-off ``alpha`` is a constant for back-propagation unless
    ``alpha_grad`` is set, which gives the exact derivative of the returned value.
    """
    b1x1, b1x2 = box1[:, 0] - box1[:, 2] / 2, box1[:, 0] + box1[:, 2] / 2
    b1y1, b1y2 = box1[:, 1] - box1[:, 3] / 2, box1[:, 1] + box1[:, 3] / 2
    b2x1, b2x2 = box2[:, 0] - box2[:, 2] / 2, box2[:, 0] + box2[:, 2] / 2
    b2y1, b2y2 = box2[:, 1] - box2[:, 3] / 2, box2[:, 1] + box2[:, 3] / 2
    inter = (torch.min(b1x2, b2x2) - torch.max(b1x1, b2x1)).clamp(0) * (
        torch.min(b1y2, b2y2) - torch.max(b1y1, b2y1)
    ).clamp(0)
    w1, h1 = box1[:, 2], box1[:, 3] + eps
    w2, h2 = box2[:, 2], box2[:, 3] + eps
    union = w1 * h1 + w2 * h2 - inter + eps
    iou = inter / union
    cw = torch.max(b1x2, b2x2) - torch.min(b1x1, b2x1)
    ch = torch.max(b1y2, b2y2) - torch.min(b1y1, b2y1)
    c2 = cw**2 + ch**2 + eps
    rho2 = ((b2x1 + b2x2 - b1x1 - b1x2) ** 2 + (b2y1 + b2y2 - b1y1 - b1y2) ** 2) / 4
    v = (4 / math.pi**2) * (torch.atan(w2 / h2) - torch.atan(w1 / h1)) ** 2
    with torch.set_grad_enabled(alpha_grad and torch.is_grad_enabled()):
        alpha = v / (v - iou + (1 + eps))
    return iou - (rho2 / c2 + v * alpha)


@dataclass
class LossConfig:
    lambda_loc: float = 0.05
    lambda_obj: float = 1.0
    lambda_cls: float | None = None  # None -> 0.5 * n_classes / 80
    layer_weights_a: list | None = None  # None -> 1.0 per detector
    layer_weights_b: list | None = None  # None -> (4.0, 1.0, 0.4) or (1.0,)
    layer_weights_c: list | None = None
    c1: float = 1.0
    c2: float = 1.0
    obj_iou_ratio: float = 1.0  # objectness target = (1 - r) + r * IoU on positives
    ciou_alpha_grad: bool = False  # differentiate through the CIoU aspect weight
    anchor_t: float = 4.0

    def resolved(self, n_detectors: int, n_classes: int) -> LossConfig:
        ones = [1.0] * n_detectors
        default_b = [4.0, 1.0, 0.4] if n_detectors == 3 else [1.0]
        r = LossConfig(
            lambda_loc=self.lambda_loc,
            lambda_obj=self.lambda_obj,
            lambda_cls=0.5 * n_classes / 80 if self.lambda_cls is None else self.lambda_cls,
            layer_weights_a=list(self.layer_weights_a or ones),
            layer_weights_b=list(self.layer_weights_b or default_b),
            layer_weights_c=list(self.layer_weights_c or ones),
            c1=self.c1,
            c2=self.c2,
            obj_iou_ratio=self.obj_iou_ratio,
            ciou_alpha_grad=self.ciou_alpha_grad,
            anchor_t=self.anchor_t,
        )
        for name in ("layer_weights_a", "layer_weights_b", "layer_weights_c"):
            v = getattr(r, name)
            if len(v) != n_detectors:
                raise ValueError(f"{name} needs {n_detectors} entries, got {len(v)}")
            if any(x < 0 for x in v):
                raise ValueError(f"{name} must be non-negative")
        if min(r.lambda_loc, r.lambda_obj, r.lambda_cls, r.c1, r.c2) < 0:
            raise ValueError("loss weights must be non-negative")
        return r


@dataclass
class LossBreakdown:
    l_loc: torch.Tensor
    l_obj: torch.Tensor
    l_cls: torch.Tensor
    l_o: torch.Tensor
    l_s: torch.Tensor
    l_total: torch.Tensor

    def as_floats(self) -> dict:
        return {k: float(getattr(self, k).detach()) for k in ("l_loc", "l_obj", "l_cls", "l_o", "l_s", "l_total")}


def detection_loss(raw, targets: Targets, cfg: LossConfig, n_classes: int) -> LossBreakdown:
    """Weighted localisation / objectness / classification loss.

    ``cfg`` must already be resolved. The returned l_loc, l_obj and l_cls are
    the layer-weighted sums (before the lambda weights); l_o applies them.
    """
    for i, p in enumerate(raw):
        if not torch.isfinite(p).all():
            bad = torch.nonzero(~torch.isfinite(p).flatten(1).all(1)).flatten().tolist()
            raise FloatingPointError(f"non-finite logits at detector {i}, batch ids {bad}")
    zero = raw[0].new_zeros(())
    l_loc, l_obj, l_cls = zero, zero, zero
    for i, p in enumerate(raw):
        b, a, gj, gi = targets.indices[i]
        tobj = torch.zeros_like(p[..., 4])
        n = b.shape[0]
        if n:
            ps = p[b, a, gj, gi]
            pxy = ps[:, :2].sigmoid() * 2 - 0.5
            pwh = (ps[:, 2:4].sigmoid() * 2) ** 2 * targets.anchors[i].to(p)
            ciou = bbox_ciou(torch.cat((pxy, pwh), 1), targets.tbox[i].to(p), alpha_grad=cfg.ciou_alpha_grad)
            l_loc = l_loc + cfg.layer_weights_a[i] * (1.0 - ciou).mean()
            r = cfg.obj_iou_ratio
            tobj[b, a, gj, gi] = (1.0 - r) + r * ciou.detach().clamp(0).to(tobj.dtype)
            if n_classes > 1:
                t = torch.zeros_like(ps[:, 5:])
                t[torch.arange(n), targets.tcls[i]] = 1.0
                l_cls = l_cls + cfg.layer_weights_c[i] * F.binary_cross_entropy_with_logits(ps[:, 5:], t)
        l_obj = l_obj + cfg.layer_weights_b[i] * F.binary_cross_entropy_with_logits(p[..., 4], tobj)
    l_o = cfg.lambda_loc * l_loc + cfg.lambda_obj * l_obj + cfg.lambda_cls * l_cls
    return LossBreakdown(l_loc, l_obj, l_cls, l_o, zero, l_o)


def total_loss(l_o, l_s, cfg: LossConfig):
    return cfg.c1 * l_o + cfg.c2 * l_s


# --- anchors ------------------------------------------------------------------


def kmeans_anchors(wh: np.ndarray, n: int, seed: int = 0) -> np.ndarray:
    """Cluster label (w, h) pairs in pixels into ``n`` anchors sorted by area."""
    from scipy.cluster.vq import kmeans2

    wh = np.asarray(wh, dtype=np.float64).reshape(-1, 2)
    wh = wh[(wh > 0).all(1)]
    if len(wh) < n:
        raise ValueError(f"need at least {n} boxes to fit {n} anchors, got {len(wh)}")
    scale = wh.std(0)
    scale[scale == 0] = 1.0
    centers, _ = kmeans2(wh / scale, n, iter=30, minit="++", seed=np.random.default_rng(seed))
    k = centers * scale
    return k[np.argsort(k.prod(1))]
