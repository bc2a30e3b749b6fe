"""Image pairs, YOLO labels, VEDAI conversion, resampling, augmentation and synthetic data."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, ImageDraw

log = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1

# source id -> contiguous id, in the order car, pickup, camping, truck, other, tractor, boat, van
VEDAI_CLASS_MAP = {1: 0, 11: 1, 5: 2, 2: 3, 10: 4, 4: 5, 23: 6, 9: 7}
VEDAI_CLASS_NAMES = ["car", "pickup", "camping", "truck", "other", "tractor", "boat", "van"]


class LabelParseError(ValueError):
    pass


@dataclass
class ImagePair:
    """Aligned RGB (3, H, W) and IR (1, H, W) float rasters in [0, 1]."""

    rgb: np.ndarray
    ir: np.ndarray
    id: str = ""

    @property
    def height(self) -> int:
        return self.rgb.shape[1]

    @property
    def width(self) -> int:
        return self.rgb.shape[2]

    def validate(self, stride: int = 32, n: int = 2) -> None:
        if self.rgb.ndim != 3 or self.rgb.shape[0] != 3:
            raise ValueError(f"rgb must be (3, H, W), got {self.rgb.shape}")
        if self.ir.ndim != 3 or self.ir.shape[0] != 1:
            raise ValueError(f"ir must be (1, H, W), got {self.ir.shape}")
        if self.rgb.shape[1:] != self.ir.shape[1:]:
            raise ValueError(f"rgb {self.rgb.shape[1:]} and ir {self.ir.shape[1:]} sizes differ")
        for name, a in (("rgb", self.rgb), ("ir", self.ir)):
            if a.size and (a.min() < 0 or a.max() > 1):
                raise ValueError(f"{name} values must lie in [0, 1]")
        for d in (self.height, self.width):
            if d % stride or d % n:
                raise ValueError(f"image dims {self.height}x{self.width} must be divisible by {stride} and {n}")


@dataclass
class LrPair:
    rgb_lr: np.ndarray
    ir_lr: np.ndarray
    scale_n: int


@dataclass(frozen=True)
class BoundingBoxLabel:
    class_id: int
    cx: float
    cy: float
    w: float
    h: float

    def as_row(self) -> list[float]:
        return [self.class_id, self.cx, self.cy, self.w, self.h]


@dataclass
class VedaiRecord:
    center_x: float
    center_y: float
    orientation: float
    corners: list  # four (x, y) pairs in pixels
    raw_class_id: int
    occluded: bool = False
    cropped: bool = False


@dataclass
class AugmentationConfig:
    enabled: bool = True
    hsv_gains: tuple = (0.015, 0.7, 0.4)
    flip_lr_prob: float = 0.5
    translate_frac: float = 0.1
    scale_range: tuple = (0.5, 1.5)
    mosaic_prob: float = 1.0

    def validate(self) -> None:
        for name in ("flip_lr_prob", "mosaic_prob"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if not 0 <= self.translate_frac <= 1:
            raise ValueError("translate_frac must lie in [0, 1]")
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ValueError(f"scale_range must satisfy 0 < min <= max, got {self.scale_range}")
        if len(self.hsv_gains) != 3 or any(g < 0 for g in self.hsv_gains):
            raise ValueError("hsv_gains needs three non-negative fractions")

    @classmethod
    def disabled(cls) -> AugmentationConfig:
        return cls(enabled=False)


# --- pixel ops ------------------------------------------------------------------


def normalize(image, bit_depth: int = 8) -> np.ndarray:
    """Scale an integer raster in [0, 2**bit_depth - 1] to float64 in [0, 1]."""
    a = np.asarray(image)
    peak = float(2**bit_depth - 1)
    if a.size and (a.min() < 0 or a.max() > peak):
        raise ValueError(f"pixel values must lie in [0, {peak:g}], got [{a.min()}, {a.max()}]")
    return a.astype(np.float64) / peak


def bilinear_downsample(image, n: int):
    """Downsample (..., H, W) by an integer factor with half-pixel-centre bilinear sampling.

    Accepts numpy arrays or torch tensors and returns the same type. ``n`` must
    divide both spatial dims.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    h, w = image.shape[-2:]
    if h % n or w % n:
        raise ValueError(f"n={n} does not divide image size {h}x{w}")
    if n == 1:
        return image.clone() if isinstance(image, torch.Tensor) else np.array(image, copy=True)
    is_np = not isinstance(image, torch.Tensor)
    t = torch.from_numpy(np.ascontiguousarray(image)) if is_np else image
    lead = t.shape[:-2]
    x = t.reshape(-1, 1, h, w)
    if not x.is_floating_point():
        x = x.double()
    y = F.interpolate(x, size=(h // n, w // n), mode="bilinear", align_corners=False, antialias=False)
    y = y.reshape(*lead, h // n, w // n)
    return y.numpy() if is_np else y


def make_lr_pair(pair: ImagePair, n: int = 2) -> LrPair:
    return LrPair(bilinear_downsample(pair.rgb, n), bilinear_downsample(pair.ir, n), n)


# --- labels ---------------------------------------------------------------------


def parse_label_file(text: str, n_classes: int | None = None) -> list[BoundingBoxLabel]:
    labels = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        toks = line.split()
        if len(toks) != 5:
            raise LabelParseError(f"line {lineno}: expected 5 fields, got {len(toks)}")
        try:
            vals = [float(t) for t in toks]
        except ValueError:
            raise LabelParseError(f"line {lineno}: non-numeric token in {line.strip()!r}") from None
        cls, cx, cy, w, h = vals
        if cls != int(cls) or cls < 0 or (n_classes is not None and cls >= n_classes):
            raise LabelParseError(f"line {lineno}: invalid class id {toks[0]}")
        if not all(0 <= v <= 1 for v in (cx, cy, w, h)) or w <= 0 or h <= 0:
            raise LabelParseError(f"line {lineno}: box values out of range in {line.strip()!r}")
        labels.append(BoundingBoxLabel(int(cls), cx, cy, w, h))
    return labels


def serialize_labels(labels) -> str:
    return "".join(f"{b.class_id} {b.cx:.8f} {b.cy:.8f} {b.w:.8f} {b.h:.8f}\n" for b in labels)


def labels_to_array(labels) -> np.ndarray:
    return np.asarray([b.as_row() for b in labels], dtype=np.float64).reshape(-1, 5)


def array_to_labels(a: np.ndarray) -> list[BoundingBoxLabel]:
    return [BoundingBoxLabel(int(r[0]), *map(float, r[1:5])) for r in np.asarray(a).reshape(-1, 5)]


# --- VEDAI ----------------------------------------------------------------------


def parse_vedai_line(line: str) -> tuple[str | None, VedaiRecord]:
    """Parse one annotation row.

    Column order: ``[image_id] cx cy orientation x1 x2 x3 x4 y1 y2 y3 y4 class occluded cropped``.
    The leading image id is optional (15 vs 14 columns).
    """
    toks = line.split()
    image_id = None
    if len(toks) == 15:
        image_id, toks = toks[0], toks[1:]
    if len(toks) != 14:
        raise ValueError(f"expected 14 or 15 columns, got {len(toks)}")
    v = [float(t) for t in toks]
    corners = list(zip(v[3:7], v[7:11]))
    return image_id, VedaiRecord(v[0], v[1], v[2], corners, int(v[11]), bool(int(v[12])), bool(int(v[13])))


def convert_vedai_record(r: VedaiRecord, class_map, img_w: int, img_h: int) -> BoundingBoxLabel | None:
    """Axis-aligned, normalised and clipped box of the four corners; None when skipped."""
    if img_w <= 0 or img_h <= 0:
        raise ValueError("image size must be positive")
    if r.raw_class_id not in class_map:
        return None
    xs = np.clip([c[0] / img_w for c in r.corners], 0.0, 1.0)
    ys = np.clip([c[1] / img_h for c in r.corners], 0.0, 1.0)
    x0, x1, y0, y1 = xs.min(), xs.max(), ys.min(), ys.max()
    if x1 - x0 <= 0 or y1 - y0 <= 0:
        return None
    return BoundingBoxLabel(int(class_map[r.raw_class_id]), float((x0 + x1) / 2), float((y0 + y1) / 2),
                            float(x1 - x0), float(y1 - y0))


@dataclass
class ConversionStats:
    kept: int = 0
    skipped_class: dict = field(default_factory=dict)
    degenerate: int = 0

    @property
    def skipped(self) -> int:
        return sum(self.skipped_class.values()) + self.degenerate


def convert_vedai_records(records, class_map, img_w, img_h, stats: ConversionStats | None = None):
    stats = stats if stats is not None else ConversionStats()
    out = []
    for r in records:
        if r.raw_class_id not in class_map:
            stats.skipped_class[r.raw_class_id] = stats.skipped_class.get(r.raw_class_id, 0) + 1
            continue
        lab = convert_vedai_record(r, class_map, img_w, img_h)
        if lab is None:
            stats.degenerate += 1
            log.warning("degenerate box skipped (class %d)", r.raw_class_id)
            continue
        stats.kept += 1
        out.append(lab)
    return out, stats


# --- augmentation ---------------------------------------------------------------


def _hwc(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.transpose(a, (1, 2, 0)))


def _chw(a: np.ndarray) -> np.ndarray:
    if a.ndim == 2:
        a = a[:, :, None]
    return np.ascontiguousarray(np.transpose(a, (2, 0, 1)))


def _boxes_px(labels: np.ndarray, w: int, h: int) -> np.ndarray:
    b = np.empty((len(labels), 4))
    b[:, 0] = (labels[:, 1] - labels[:, 3] / 2) * w
    b[:, 1] = (labels[:, 2] - labels[:, 4] / 2) * h
    b[:, 2] = (labels[:, 1] + labels[:, 3] / 2) * w
    b[:, 3] = (labels[:, 2] + labels[:, 4] / 2) * h
    return b


def _labels_from_px(cls: np.ndarray, boxes: np.ndarray, w: int, h: int, min_area: float = 1e-6) -> np.ndarray:
    boxes = boxes.copy()
    boxes[:, [0, 2]] = boxes[:, [0, 2]].clip(0, w)
    boxes[:, [1, 3]] = boxes[:, [1, 3]].clip(0, h)
    bw = boxes[:, 2] - boxes[:, 0]
    bh = boxes[:, 3] - boxes[:, 1]
    keep = (bw > 0) & (bh > 0) & (bw * bh >= min_area * w * h)
    out = np.stack(
        [cls, (boxes[:, 0] + boxes[:, 2]) / 2 / w, (boxes[:, 1] + boxes[:, 3]) / 2 / h, bw / w, bh / h], 1
    )
    return out[keep].reshape(-1, 5)


def _mosaic(items, rng, size_hw):
    """Four-image mosaic around a jittered centre, cropped back to the input size."""
    h, w = size_hw
    xc = int(rng.uniform(0.5 * w, 1.5 * w))
    yc = int(rng.uniform(0.5 * h, 1.5 * h))
    rgb = np.full((3, 2 * h, 2 * w), 0.5)
    ir = np.full((1, 2 * h, 2 * w), 0.5)
    cls_all, box_all = [], []
    for k, (pair, lab) in enumerate(items):
        ph, pw = pair.height, pair.width
        if k == 0:
            x1a, y1a, x2a, y2a = max(xc - pw, 0), max(yc - ph, 0), xc, yc
            x1b, y1b = pw - (x2a - x1a), ph - (y2a - y1a)
        elif k == 1:
            x1a, y1a, x2a, y2a = xc, max(yc - ph, 0), min(xc + pw, 2 * w), yc
            x1b, y1b = 0, ph - (y2a - y1a)
        elif k == 2:
            x1a, y1a, x2a, y2a = max(xc - pw, 0), yc, xc, min(2 * h, yc + ph)
            x1b, y1b = pw - (x2a - x1a), 0
        else:
            x1a, y1a, x2a, y2a = xc, yc, min(xc + pw, 2 * w), min(2 * h, yc + ph)
            x1b, y1b = 0, 0
        x2b, y2b = x1b + (x2a - x1a), y1b + (y2a - y1a)
        rgb[:, y1a:y2a, x1a:x2a] = pair.rgb[:, y1b:y2b, x1b:x2b]
        ir[:, y1a:y2a, x1a:x2a] = pair.ir[:, y1b:y2b, x1b:x2b]
        if len(lab):
            b = _boxes_px(lab, pw, ph)
            b[:, [0, 2]] += x1a - x1b
            b[:, [1, 3]] += y1a - y1b
            cls_all.append(lab[:, 0])
            box_all.append(b)
    # crop an h x w window centred on the mosaic junction
    x0, y0 = xc - w // 2, yc - h // 2
    rgb = rgb[:, y0 : y0 + h, x0 : x0 + w]
    ir = ir[:, y0 : y0 + h, x0 : x0 + w]
    if cls_all:
        b = np.concatenate(box_all)
        b[:, [0, 2]] -= x0
        b[:, [1, 3]] -= y0
        labels = _labels_from_px(np.concatenate(cls_all), b, w, h)
    else:
        labels = np.zeros((0, 5))
    return ImagePair(np.ascontiguousarray(rgb), np.ascontiguousarray(ir), items[0][0].id), labels


def _affine(pair: ImagePair, labels: np.ndarray, scale: float, tx: float, ty: float):
    h, w = pair.height, pair.width
    M = np.array([[scale, 0, (1 - scale) * w / 2 + tx], [0, scale, (1 - scale) * h / 2 + ty]])
    warp = lambda a: _chw(  # noqa: E731
        cv2.warpAffine(_hwc(a).astype(np.float32), M, (w, h), flags=cv2.INTER_LINEAR,
                       borderMode=cv2.BORDER_CONSTANT, borderValue=(0.5, 0.5, 0.5))
    ).astype(np.float64)
    rgb, ir = warp(pair.rgb), warp(pair.ir)
    if len(labels):
        b = _boxes_px(labels, w, h)
        b[:, [0, 2]] = b[:, [0, 2]] * scale + M[0, 2]
        b[:, [1, 3]] = b[:, [1, 3]] * scale + M[1, 2]
        labels = _labels_from_px(labels[:, 0], b, w, h)
    return ImagePair(rgb.clip(0, 1), ir.clip(0, 1), pair.id), labels


def _hsv(rgb: np.ndarray, gains, rng) -> np.ndarray:
    r = rng.uniform(-1, 1, 3) * np.asarray(gains) + 1
    hsv = cv2.cvtColor(_hwc(rgb).astype(np.float32), cv2.COLOR_RGB2HSV)
    hsv[..., 0] = (hsv[..., 0] * r[0]) % 360.0
    hsv[..., 1] = np.clip(hsv[..., 1] * r[1], 0, 1)
    hsv[..., 2] = np.clip(hsv[..., 2] * r[2], 0, 1)
    return _chw(cv2.cvtColor(hsv, cv2.COLOR_HSV2RGB)).astype(np.float64).clip(0, 1)


def flip_lr(pair: ImagePair, labels: np.ndarray):
    labels = np.array(labels, dtype=np.float64, copy=True).reshape(-1, 5)
    labels[:, 1] = 1 - labels[:, 1]
    return ImagePair(pair.rgb[:, :, ::-1].copy(), pair.ir[:, :, ::-1].copy(), pair.id), labels


def apply_augmentations(pair: ImagePair, labels, cfg: AugmentationConfig, rng_seed, mosaic_pool=None):
    """Augment one pair and its labels.

    ``labels`` is a list of BoundingBoxLabel or an (n, 5) array; the same kind is
    returned. Geometry (mosaic, scale, translation, flip) is applied to RGB,
    IR and labels alike; HSV jitter touches RGB only. ``mosaic_pool`` supplies
    the other three (pair, labels) tiles; without it mosaic is skipped.
    """
    as_list = not isinstance(labels, np.ndarray)
    arr = labels_to_array(labels) if as_list else np.asarray(labels, dtype=np.float64).reshape(-1, 5)
    if not cfg.enabled:
        return pair, labels
    cfg.validate()
    rng = np.random.default_rng(rng_seed)
    if mosaic_pool and cfg.mosaic_prob > 0 and rng.random() < cfg.mosaic_prob:
        picks = [mosaic_pool[int(i)] for i in rng.integers(0, len(mosaic_pool), 3)]
        tiles = [(pair, arr)] + [(p, l if isinstance(l, np.ndarray) else labels_to_array(l)) for p, l in picks]
        pair, arr = _mosaic(tiles, rng, (pair.height, pair.width))
    lo, hi = cfg.scale_range
    scale = rng.uniform(lo, hi) if hi > lo else lo
    t = cfg.translate_frac
    tx = rng.uniform(-t, t) * pair.width if t > 0 else 0.0
    ty = rng.uniform(-t, t) * pair.height if t > 0 else 0.0
    if scale != 1.0 or tx != 0.0 or ty != 0.0:
        pair, arr = _affine(pair, arr, scale, tx, ty)
    if any(cfg.hsv_gains):
        pair = ImagePair(_hsv(pair.rgb, cfg.hsv_gains, rng), pair.ir, pair.id)
    if cfg.flip_lr_prob > 0 and rng.random() < cfg.flip_lr_prob:
        pair, arr = flip_lr(pair, arr)
    return pair, (array_to_labels(arr) if as_list else arr)


# --- files and manifests ----------------------------------------------------------


def read_image(path, channels: int) -> tuple[np.ndarray, int]:
    """Load an image as a (C, H, W) float array in [0, 1]; returns (array, bit_depth)."""
    img = Image.open(path)
    if channels == 1:
        if img.mode in ("I;16", "I;16B", "I;16L", "I"):
            a = np.asarray(img, dtype=np.int64)
            return normalize(a, 16)[None], 16
        a = np.asarray(img.convert("L"))
        return normalize(a, 8)[None], 8
    a = np.asarray(img.convert("RGB"))
    return normalize(a, 8).transpose(2, 0, 1).copy(), 8


def write_image(path, a: np.ndarray) -> None:
    a = np.asarray(a)
    u8 = np.round(np.clip(a, 0, 1) * 255).astype(np.uint8)
    if u8.shape[0] == 1:
        Image.fromarray(u8[0], mode="L").save(path, format="PNG")
    else:
        Image.fromarray(u8.transpose(1, 2, 0), mode="RGB").save(path, format="PNG")


def write_manifest(root, entries, **meta) -> Path:
    root = Path(root)
    doc = {"format_version": MANIFEST_VERSION, **meta, "entries": entries}
    path = root / MANIFEST_NAME
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def read_manifest(root) -> dict:
    path = Path(root)
    path = path / MANIFEST_NAME if path.is_dir() else path
    doc = json.loads(path.read_text())
    if doc.get("format_version") != MANIFEST_VERSION:
        raise ValueError(f"unsupported manifest version {doc.get('format_version')}")
    doc["root"] = str(path.parent)
    return doc


def load_dataset(root, split: str | None = None, n_classes: int | None = None):
    """Load (ImagePair, labels array) items from a manifest directory."""
    doc = read_manifest(root)
    base = Path(doc["root"])
    items = []
    for e in doc["entries"]:
        if split is not None and e.get("split") != split:
            continue
        rgb, _ = read_image(base / e["rgb"], 3)
        ir, _ = read_image(base / e["ir"], 1)
        labels = parse_label_file((base / e["label"]).read_text(), n_classes)
        items.append((ImagePair(rgb, ir, e["id"]), labels_to_array(labels)))
    return items, doc


# --- synthetic data ---------------------------------------------------------------

_SHAPES = ("rect", "ellipse", "triangle", "cross", "diamond")


def _class_style(c: int, n_classes: int):
    hue = (c * 0.61803398875) % 1.0
    rgb = cv2.cvtColor(np.array([[[hue * 360, 0.8, 0.9]]], dtype=np.float32), cv2.COLOR_HSV2RGB)[0, 0]
    ir = 0.45 + 0.5 * (c + 1) / n_classes
    return _SHAPES[c % len(_SHAPES)], tuple(int(round(v * 255)) for v in rgb), int(round(ir * 255))


def _draw(draw: ImageDraw.ImageDraw, shape: str, box, fill) -> None:
    x0, y0, x1, y1 = box
    cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
    if shape == "rect":
        draw.rectangle(box, fill=fill)
    elif shape == "ellipse":
        draw.ellipse(box, fill=fill)
    elif shape == "triangle":
        draw.polygon([(cx, y0), (x1, y1), (x0, y1)], fill=fill)
    elif shape == "cross":
        tw, th = (x1 - x0) / 3, (y1 - y0) / 3
        draw.rectangle((x0, cy - th / 2, x1, cy + th / 2), fill=fill)
        draw.rectangle((cx - tw / 2, y0, cx + tw / 2, y1), fill=fill)
    else:
        draw.polygon([(cx, y0), (x1, cy), (cx, y1), (x0, cy)], fill=fill)


def render_synthetic_pair(rng: np.random.Generator, image_size: int, n_classes: int,
                          max_objects: int = 4, size_frac=(0.12, 0.28)):
    """One RGB/IR uint8 pair with 1..max_objects non-overlapping shapes and their labels."""
    s = image_size
    yy, xx = np.mgrid[0:s, 0:s] / s
    base = rng.uniform(0.25, 0.55, 3)
    tilt = rng.uniform(-0.15, 0.15, 2)
    bg = base[None, None, :] + (tilt[0] * xx + tilt[1] * yy)[..., None]
    rgb_img = Image.fromarray(np.round(bg.clip(0, 1) * 255).astype(np.uint8), "RGB")
    ir_bg = 0.15 + 0.1 * (1 - xx) * rng.uniform(0.5, 1.0)
    ir_img = Image.fromarray(np.round(ir_bg.clip(0, 1) * 255).astype(np.uint8), "L")
    d_rgb, d_ir = ImageDraw.Draw(rgb_img), ImageDraw.Draw(ir_img)
    placed, labels = [], []
    for _ in range(int(rng.integers(1, max_objects + 1))):
        for _attempt in range(20):
            bw = int(rng.uniform(*size_frac) * s)
            bh = int(rng.uniform(*size_frac) * s)
            x0 = int(rng.integers(0, s - bw))
            y0 = int(rng.integers(0, s - bh))
            box = (x0, y0, x0 + bw, y0 + bh)
            if all(box[2] < p[0] or box[0] > p[2] or box[3] < p[1] or box[1] > p[3] for p in placed):
                break
        else:
            continue
        c = int(rng.integers(0, n_classes))
        shape, col, ir_val = _class_style(c, n_classes)
        _draw(d_rgb, shape, (box[0], box[1], box[2] - 1, box[3] - 1), col)
        _draw(d_ir, shape, (box[0], box[1], box[2] - 1, box[3] - 1), ir_val)
        placed.append(box)
        labels.append(BoundingBoxLabel(c, (box[0] + box[2]) / 2 / s, (box[1] + box[3]) / 2 / s, bw / s, bh / s))
    return np.asarray(rgb_img), np.asarray(ir_img), labels


def generate_synthetic_dataset(out_dir, seed: int = 0, n_images: int = 8, image_size: int = 256,
                               n_classes: int = 3, val_fraction: float = 0.0) -> Path:
    """Write a deterministic RGB/IR detection dataset with YOLO labels and a manifest."""
    if image_size % 32:
        raise ValueError(f"image_size must be divisible by 32, got {image_size}")
    if n_classes < 1:
        raise ValueError("n_classes must be >= 1")
    out = Path(out_dir)
    for sub in ("rgb", "ir", "labels"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    n_val = int(math.floor(n_images * val_fraction))
    entries = []
    for i in range(n_images):
        rgb, ir, labels = render_synthetic_pair(rng, image_size, n_classes)
        name = f"{i:06d}"
        Image.fromarray(rgb, "RGB").save(out / "rgb" / f"{name}.png", format="PNG")
        Image.fromarray(ir, "L").save(out / "ir" / f"{name}.png", format="PNG")
        (out / "labels" / f"{name}.txt").write_text(serialize_labels(labels))
        entries.append({
            "id": name,
            "rgb": f"rgb/{name}.png",
            "ir": f"ir/{name}.png",
            "label": f"labels/{name}.txt",
            "split": "val" if i >= n_images - n_val else "train",
        })
    write_manifest(out, entries, n_classes=n_classes, image_size=image_size,
                   class_names=[f"class{c}" for c in range(n_classes)],
                   ir_normalization="bit_depth_max", source="synthetic", seed=seed)
    return out
