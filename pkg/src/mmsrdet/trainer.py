"""Training loop, evaluation, checkpoint plumbing and SR-free export."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt_io
from .checkpoint import Checkpoint
from .config import from_dict, to_dict
from .data import AugmentationConfig, apply_augmentations, bilinear_downsample
from .head import LossBreakdown, LossConfig, assign_targets, detection_loss, kmeans_anchors, postprocess, total_loss
from .metrics import mean_average_precision, psnr, ssim
from .model import Detector, ModelConfig, strip_sr
from .sr import sr_loss

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    """Training aborted; ``snapshot`` holds the model state at the failing step."""

    def __init__(self, message: str, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot


@dataclass
class TrainConfig:
    epochs: int = 300
    batch_size: int = 2
    lr0: float = 0.01
    momentum: float = 0.937
    weight_decay: float = 0.0005
    nesterov: bool = True
    optimizer: str = "sgd"  # sgd | adam
    warmup_epochs: float = 3.0
    final_lr_frac: float = 0.01
    seed: int = 0
    image_size: int = 1024  # HR size; the network sees image_size / scale_n
    scale_n: int = 2
    sr_enabled: bool = True
    augment: bool = True
    auto_anchor: bool = True
    device: str = "cpu"
    checkpoint_every: int = 1

    def validate(self) -> None:
        if self.lr0 <= 0:
            raise ValueError("lr0 must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.scale_n < 1:
            raise ValueError("scale_n must be >= 1")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"optimizer must be sgd or adam, got {self.optimizer!r}")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    augment: AugmentationConfig = field(default_factory=AugmentationConfig)


def config_from_snapshot(snap: dict) -> RunConfig:
    return from_dict(RunConfig, snap)


# --- batching -------------------------------------------------------------------


def make_batch(items, n: int, device="cpu", dtype=torch.float32):
    """Stack HR pairs, derive the LR network input and gather labels.

    Returns ``(rgb_lr, ir_lr, rgb_hr, ir_hr, labels)`` where ``labels`` rows
    are (image index, class, cx, cy, w, h), normalised.
    """
    rgb = torch.as_tensor(np.stack([p.rgb for p, _ in items]), dtype=dtype, device=device)
    ir = torch.as_tensor(np.stack([p.ir for p, _ in items]), dtype=dtype, device=device)
    rows = [np.concatenate([np.full((len(l), 1), i), l], 1) for i, (_, l) in enumerate(items) if len(l)]
    labels = torch.as_tensor(np.concatenate(rows) if rows else np.zeros((0, 6)), dtype=torch.float64)
    return bilinear_downsample(rgb, n), bilinear_downsample(ir, n), rgb, ir, labels


def fit_anchors(items, n_detectors: int, lr_size: float, seed: int = 0):
    """k-means anchors (in network-input pixels) from normalised training labels."""
    wh = np.concatenate([l[:, 3:5] for _, l in items if len(l)] or [np.zeros((0, 2))]) * lr_size
    k = kmeans_anchors(wh, 3 * n_detectors, seed=seed)
    return [[tuple(map(float, a)) for a in k[i * 3 : (i + 1) * 3]] for i in range(n_detectors)]


def compute_losses(model: Detector, raw, sr, labels, rgb_hr, ir_hr, loss_cfg: LossConfig) -> LossBreakdown:
    grid_shapes = [p.shape[2:4] for p in raw]
    targets = assign_targets(labels, grid_shapes, model.strides, model.anchors.cpu(), loss_cfg.anchor_t)
    lb = detection_loss(raw, targets, loss_cfg, model.cfg.head.n_classes)
    if sr is not None:
        lb.l_s = sr_loss(sr, model.sr_target(rgb_hr, ir_hr).to(sr), model.cfg.sr.loss_kind)
    lb.l_total = total_loss(lb.l_o, lb.l_s, loss_cfg)
    return lb


def _param_groups(model, weight_decay):
    decay, no_decay = [], []
    for n, p in model.named_parameters():
        (decay if p.ndim > 1 else no_decay).append(p)
    return [{"params": decay, "weight_decay": weight_decay}, {"params": no_decay, "weight_decay": 0.0}]


def make_optimizer(model, tc: TrainConfig):
    groups = _param_groups(model, tc.weight_decay)
    if tc.optimizer == "adam":
        # momentum doubles as beta1, as YOLOv5 does for its Adam option
        return torch.optim.Adam(groups, lr=tc.lr0, betas=(tc.momentum, 0.999))
    return torch.optim.SGD(groups, lr=tc.lr0, momentum=tc.momentum, nesterov=tc.nesterov)


def lr_factor(epoch_float: float, cfg: TrainConfig) -> float:
    """Linear warm-up, then cosine decay from 1 to ``final_lr_frac`` over the remaining epochs."""
    if cfg.warmup_epochs > 0 and epoch_float < cfg.warmup_epochs:
        return (epoch_float + 1e-9) / cfg.warmup_epochs
    span = max(cfg.epochs - cfg.warmup_epochs, 1e-9)
    t = min(max(epoch_float - cfg.warmup_epochs, 0.0) / span, 1.0)
    return cfg.final_lr_frac + (1 - cfg.final_lr_frac) * (1 + math.cos(math.pi * t)) / 2


def snapshot(model: Detector, run: RunConfig, epoch: int, history, opt=None) -> Checkpoint:
    snap = to_dict(run)
    snap["model"] = to_dict(model.cfg)
    weights = {k: v.detach().clone() for k, v in model.state_dict().items()}
    optim = ckpt_io.optimizer_state_tensors(opt) if opt is not None else {}
    return Checkpoint(weights, snap, epoch, list(history), optim, "training")


def model_from_checkpoint(ckpt: Checkpoint) -> Detector:
    run = config_from_snapshot(ckpt.config)
    model = Detector(run.model)
    model.load_state_dict(ckpt.weights)
    model.eval()
    return model


def train(run: RunConfig, items, out_dir=None, max_steps: int | None = None, callback=None):
    """Train on in-memory ``(ImagePair, labels)`` items; returns ``(model, checkpoint)``.

    Deterministic for a fixed ``run.train.seed`` on CPU. When ``out_dir`` is
    given a checkpoint is written every ``checkpoint_every`` epochs.
    """
    run = copy.deepcopy(run)
    tc = run.train
    tc.validate()
    if not items:
        raise ValueError("empty training set")
    torch.manual_seed(tc.seed)
    run.model.sr_enabled = tc.sr_enabled
    n_classes = run.model.head.n_classes
    for _, l in items:
        if len(l) and (l[:, 0].max() >= n_classes):
            raise ValueError(f"label class id exceeds n_classes={n_classes}")
    lr_size = items[0][0].height / tc.scale_n
    if tc.auto_anchor:
        run.model.head.anchors = fit_anchors(items, run.model.head.n_detectors, lr_size, tc.seed)
    model = Detector(run.model).to(tc.device)
    loss_cfg = run.loss.resolved(run.model.head.n_detectors, n_classes)
    run.loss = loss_cfg
    opt = make_optimizer(model, tc)
    aug = run.augment if tc.augment else AugmentationConfig.disabled()
    rng = np.random.default_rng(tc.seed)
    steps_per_epoch = math.ceil(len(items) / tc.batch_size)
    history = []
    step = 0
    ckpt = None
    for epoch in range(tc.epochs):
        model.train()
        order = rng.permutation(len(items))
        for bi in range(steps_per_epoch):
            idx = order[bi * tc.batch_size : (bi + 1) * tc.batch_size]
            batch = []
            for j in idx:
                pair, lab = items[j]
                if aug.enabled:
                    seed = int(rng.integers(0, 2**31 - 1))
                    pair, lab = apply_augmentations(pair, lab, aug, seed, mosaic_pool=items)
                batch.append((pair, lab))
            rgb_lr, ir_lr, rgb_hr, ir_hr, labels = make_batch(batch, tc.scale_n, tc.device)
            f = lr_factor(epoch + bi / steps_per_epoch, tc)
            for g in opt.param_groups:
                g["lr"] = tc.lr0 * f
            raw, sr = model(rgb_lr, ir_lr)
            where = f"epoch {epoch} step {step} (images {[items[j][0].id for j in idx]})"
            try:
                lb = compute_losses(model, raw, sr, labels, rgb_hr, ir_hr, loss_cfg)
                bad = None if torch.isfinite(lb.l_total) else f"non-finite loss at {where}: {lb.as_floats()}"
            except FloatingPointError as e:
                bad = f"{e} at {where}"
            if bad is not None:
                diag = snapshot(model, run, epoch, history, opt)
                if out_dir is not None:
                    path = ckpt_io.save_checkpoint(diag, Path(out_dir) / "diagnostic.safetensors")
                    bad += f"; state saved to {path}"
                raise TrainingError(bad, diag)
            opt.zero_grad(set_to_none=True)
            lb.l_total.backward()
            opt.step()
            rec = {"step": step, "epoch": epoch, "lr": tc.lr0 * f, **lb.as_floats()}
            history.append(rec)
            if callback is not None:
                callback(rec)
            step += 1
            if max_steps is not None and step >= max_steps:
                break
        log.info("epoch %d: %s", epoch, history[-1])
        ckpt = snapshot(model, run, epoch + 1, history, opt)
        if out_dir is not None and ((epoch + 1) % tc.checkpoint_every == 0 or epoch + 1 == tc.epochs):
            ckpt_io.save_checkpoint(ckpt, Path(out_dir) / "last.safetensors")
        if max_steps is not None and step >= max_steps:
            break
    model.eval()
    return model, ckpt


# --- evaluation ------------------------------------------------------------------


@dataclass
class EvalResult:
    ap_per_class: list
    map50: float
    psnr: float | None = None
    ssim: float | None = None
    detections: list = field(default_factory=list)
    ground_truth: list = field(default_factory=list)

    def as_dict(self) -> dict:
        return {"ap_per_class": self.ap_per_class, "map50": self.map50, "psnr": self.psnr, "ssim": self.ssim}


def labels_to_gt_xyxy(labels: np.ndarray, w: float, h: float) -> np.ndarray:
    l = np.asarray(labels, dtype=np.float64).reshape(-1, 5)
    out = np.empty((len(l), 5))
    out[:, 0] = l[:, 0]
    out[:, 1] = (l[:, 1] - l[:, 3] / 2) * w
    out[:, 2] = (l[:, 2] - l[:, 4] / 2) * h
    out[:, 3] = (l[:, 1] + l[:, 3] / 2) * w
    out[:, 4] = (l[:, 2] + l[:, 4] / 2) * h
    return out


@torch.no_grad()
def predict(model: Detector, rgb_lr, ir_lr, conf_threshold=None, iou_threshold=None):
    """Eval-mode detections per image, (class, score, x1, y1, x2, y2) in input pixels."""
    model.eval()
    hc = model.cfg.head
    raw, _ = model(rgb_lr, ir_lr, return_sr=False)
    return postprocess(raw, model.strides, model.anchors.cpu(),
                       hc.conf_threshold if conf_threshold is None else conf_threshold,
                       hc.nms_iou_threshold if iou_threshold is None else iou_threshold,
                       image_size=tuple(rgb_lr.shape[-2:]), max_det=hc.max_det)


@torch.no_grad()
def evaluate(model_or_ckpt, items, scale_n: int = 2, batch_size: int = 4, n_classes: int | None = None,
             conf_threshold: float = 0.001, iou_threshold: float = 0.6) -> EvalResult:
    """mAP50 (and PSNR/SSIM when an SR branch exists) with augmentation off and BN in inference mode."""
    model = model_or_ckpt if isinstance(model_or_ckpt, Detector) else model_from_checkpoint(model_or_ckpt)
    nc = model.cfg.head.n_classes
    if n_classes is not None and n_classes != nc:
        raise ValueError(f"dataset has {n_classes} classes but the model was built for {nc}")
    model.eval()
    dets, gts, ps, ss = [], [], [], []
    for i in range(0, len(items), batch_size):
        chunk = items[i : i + batch_size]
        rgb_lr, ir_lr, rgb_hr, ir_hr, _ = make_batch(chunk, scale_n)
        raw, sr = model(rgb_lr, ir_lr, return_sr=model.sr is not None)
        h, w = rgb_lr.shape[-2:]
        dets += postprocess(raw, model.strides, model.anchors.cpu(), conf_threshold, iou_threshold,
                            image_size=(h, w), max_det=model.cfg.head.max_det)
        gts += [labels_to_gt_xyxy(l, w, h) for _, l in chunk]
        if sr is not None:
            tgt = model.sr_target(rgb_hr, ir_hr)
            for a, b in zip(sr.double().numpy(), tgt.double().numpy()):
                ps.append(psnr(np.clip(a, 0, 1), b))
                ss.append(ssim(np.clip(a, 0, 1), b))
    aps, m, _ = mean_average_precision(dets, gts, nc)
    return EvalResult(
        [None if np.isnan(a) else float(a) for a in aps], m,
        float(np.mean(ps)) if ps else None, float(np.mean(ss)) if ss else None, dets, gts,
    )


# --- export ------------------------------------------------------------------------


def export_inference(ckpt: Checkpoint) -> Checkpoint:
    """Drop every ``sr.*`` weight and the optimizer state; the config is marked SR-free."""
    config = copy.deepcopy(ckpt.config)
    config["model"]["sr_enabled"] = False
    config["train"]["sr_enabled"] = False
    weights = {k: v.clone() for k, v in ckpt.weights.items() if not k.startswith("sr.")}
    return Checkpoint(weights, config, ckpt.epoch, list(ckpt.history), {}, "inference")


def export_model(model: Detector) -> Detector:
    return strip_sr(model)
