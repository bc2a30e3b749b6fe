"""Command-line entry points.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, dump_config, iter_fields, load_config
from .data import (VEDAI_CLASS_MAP, VEDAI_CLASS_NAMES, ConversionStats, ImagePair, convert_vedai_records,
                   generate_synthetic_dataset, load_dataset, parse_vedai_line, read_image, serialize_labels,
                   write_manifest)

log = logging.getLogger("mmsrdet")

OUTPUT_ENV = "MMSRDET_OUTPUT_DIR"


class UsageError(Exception):
    pass


def default_output_dir() -> Path:
    return Path(os.environ.get(OUTPUT_ENV, "runs"))


def _run_config_help() -> str:
    from .trainer import RunConfig

    lines = ["config keys (override with KEY=VALUE):"]
    for key, tp, default in iter_fields(RunConfig):
        name = getattr(tp, "__name__", str(tp))
        lines.append(f"  {key:34s} {name:12s} default={default!r}")
    return "\n".join(lines)


def _load_run_config(args):
    from .model import preset
    from .trainer import RunConfig

    base = RunConfig()
    if getattr(args, "preset", None):
        base.model = preset(args.preset)
    return load_config(RunConfig, getattr(args, "config", None), getattr(args, "overrides", None), base=base)


# --- commands --------------------------------------------------------------------


def cmd_prepare_data(args) -> int:
    out = Path(args.out)
    if args.synthetic:
        generate_synthetic_dataset(out, seed=args.seed, n_images=args.n_images, image_size=args.image_size,
                                   n_classes=args.n_classes, val_fraction=args.val_fraction)
        print(f"wrote {args.n_images} synthetic pairs to {out}")
        return 0
    if not args.annotations:
        raise UsageError("either --synthetic or --annotations is required")
    ann = Path(args.annotations)
    if not ann.is_file():
        raise UsageError(f"annotation file not found: {ann}")
    images = Path(args.images) if args.images else ann.parent
    if not images.is_dir():
        raise UsageError(f"image directory not found: {images}")
    per_image: dict[str, list] = {}
    for lineno, line in enumerate(ann.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            image_id, rec = parse_vedai_line(line)
        except ValueError as e:
            raise UsageError(f"{ann}:{lineno}: malformed row ({e})") from None
        if image_id is None:
            image_id = ann.stem
        per_image.setdefault(image_id, []).append(rec)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    stats = ConversionStats()
    entries = []
    for image_id in sorted(per_image):
        rgb_path = images / f"{image_id}_co.png"
        ir_path = images / f"{image_id}_ir.png"
        w = h = args.image_size
        if rgb_path.is_file():
            a, _ = read_image(rgb_path, 3)
            h, w = a.shape[1:]
        labels, _ = convert_vedai_records(per_image[image_id], VEDAI_CLASS_MAP, w, h, stats)
        (out / "labels" / f"{image_id}.txt").write_text(serialize_labels(labels))
        entries.append({"id": image_id, "rgb": os.path.relpath(rgb_path, out),
                        "ir": os.path.relpath(ir_path, out), "label": f"labels/{image_id}.txt",
                        "split": "train"})
    write_manifest(out, entries, n_classes=len(VEDAI_CLASS_NAMES), class_names=VEDAI_CLASS_NAMES,
                   ir_normalization="bit_depth_max", source="vedai")
    print(f"images: {len(entries)}  labels: {stats.kept}  skipped: {stats.skipped}")
    for cls, n in sorted(stats.skipped_class.items()):
        print(f"  skipped source class {cls}: {n}")
    if stats.degenerate:
        print(f"  skipped degenerate boxes: {stats.degenerate}")
    return 0


def cmd_train(args) -> int:
    from . import checkpoint as ckpt_io
    from .trainer import train

    run = _load_run_config(args)
    items, doc = load_dataset(args.data, split=args.split, n_classes=run.model.head.n_classes)
    if doc.get("n_classes") is not None and doc["n_classes"] != run.model.head.n_classes:
        raise ConfigError(f"model.head.n_classes: dataset has {doc['n_classes']} classes, "
                          f"config says {run.model.head.n_classes}")
    out = Path(args.out or default_output_dir() / "train")
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(dump_config(run))
    _, ckpt = train(run, items, out_dir=out, max_steps=args.max_steps)
    ckpt_io.save_checkpoint(ckpt, out / "last.safetensors")
    (out / "history.json").write_text(json.dumps(ckpt.history, indent=1))
    print(f"final loss {ckpt.history[-1]['l_total']:.6f}; checkpoint {out / 'last.safetensors'}")
    return 0


def _require_checkpoint(path):
    from . import checkpoint as ckpt_io

    if not path:
        raise UsageError("--checkpoint is required")
    if not Path(path).is_file():
        raise UsageError(f"checkpoint not found: {path}")
    return ckpt_io.load_checkpoint(path)


def format_ap_table(ap_per_class, map50, names) -> str:
    head = "".join(f"{n:>10s}" for n in names) + f"{'mAP50':>10s}"
    row = "".join(f"{'-':>10s}" if a is None or np.isnan(a) else f"{a * 100:>10.2f}"
                  for a in ap_per_class) + f"{map50 * 100:>10.2f}"
    return head + "\n" + row


def cmd_eval(args) -> int:
    from .trainer import evaluate, model_from_checkpoint

    ckpt = _require_checkpoint(args.checkpoint)
    model = model_from_checkpoint(ckpt)
    items, doc = load_dataset(args.data, split=args.split)
    n_scale = ckpt.config.get("train", {}).get("scale_n", 2)
    res = evaluate(model, items, scale_n=n_scale, n_classes=doc.get("n_classes"))
    names = doc.get("class_names") or [f"class{i}" for i in range(model.cfg.head.n_classes)]
    out = Path(args.out or default_output_dir() / "eval")
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(json.dumps({**res.as_dict(), "class_names": names}, indent=2))
    from .metrics import mean_average_precision

    _, _, curves = mean_average_precision(res.detections, res.ground_truth, model.cfg.head.n_classes)
    (out / "pr_curves.json").write_text(json.dumps({
        "class_names": names,
        "curves": {str(c): {"recall": cv.recall.tolist(), "precision": cv.precision.tolist(), "ap": cv.ap}
                   for c, cv in curves.items()},
    }))
    ids = [p.id for p, _ in items]
    (out / "detections.txt").write_text(format_detections(ids, res.detections))
    print(format_ap_table(res.ap_per_class, res.map50, names))
    if res.psnr is not None:
        print(f"PSNR {res.psnr:.3f} dB  SSIM {res.ssim:.4f}")
    return 0


def format_detections(ids, dets) -> str:
    buf = io.StringIO()
    for image_id, d in zip(ids, dets):
        for c, s, x1, y1, x2, y2 in np.asarray(d).reshape(-1, 6):
            buf.write(f"{image_id} {int(c)} {s:.6f} {x1:.2f} {y1:.2f} {x2:.2f} {y2:.2f}\n")
    return buf.getvalue()


def cmd_detect(args) -> int:
    import torch

    from .data import bilinear_downsample
    from .trainer import model_from_checkpoint, predict

    ckpt = _require_checkpoint(args.checkpoint)
    model = model_from_checkpoint(ckpt)
    n = ckpt.config.get("train", {}).get("scale_n", 2) if args.downsample else 1
    rgb, _ = read_image(args.rgb, 3)
    ir, _ = read_image(args.ir, 1) if args.ir else (np.zeros((1,) + rgb.shape[1:]), 8)
    pair = ImagePair(rgb, ir, Path(args.rgb).stem)
    rgb_t = bilinear_downsample(torch.as_tensor(pair.rgb[None], dtype=torch.float32), n)
    ir_t = bilinear_downsample(torch.as_tensor(pair.ir[None], dtype=torch.float32), n)
    dets = predict(model, rgb_t, ir_t, conf_threshold=args.conf)
    for d in dets:
        d[:, 2:6] *= n  # back to source-image pixels
    text = format_detections([pair.id], dets)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return 0


def cmd_export(args) -> int:
    from . import checkpoint as ckpt_io
    from .trainer import export_inference

    ckpt = _require_checkpoint(args.checkpoint)
    out = Path(args.out or default_output_dir() / "export" / "inference.safetensors")
    exported = export_inference(ckpt)
    ckpt_io.save_checkpoint(exported, out)
    print(f"removed {len(ckpt.sr_keys())} sr tensors; wrote {out}")
    return 0


def cmd_summarize(args) -> int:
    from .backbone import LAYER_TABLE
    from .complexity import complexity_report
    from .model import build_model
    from .trainer import model_from_checkpoint

    if args.checkpoint:
        model = model_from_checkpoint(_require_checkpoint(args.checkpoint))
    else:
        model = build_model(_load_run_config(args).model)
    rep = complexity_report(model, args.size)
    lines = [f"{'module':12s}{'params':>14s}{'GFLOPs':>10s}"]
    for name, p, g in rep.rows():
        lines.append(f"{name:12s}{p:>14,d}{g:>10.2f}")
    lines.append(f"{'total':12s}{rep.total_params:>14,d}{rep.gflops:>10.2f}")
    lines.append(f"Params {rep.total_params / 1e6:.4f}M  GFLOPs {rep.gflops:.2f} @ {args.size}x{args.size}")
    if model.sr is not None:
        train_rep = complexity_report(model, args.size, include_sr=True)
        lines.append(f"training graph (with SR branch): Params {train_rep.total_params / 1e6:.4f}M  "
                     f"GFLOPs {train_rep.gflops:.2f}")
    if args.layers:
        bb = model.backbone
        lines.append("backbone layers:")
        for i, ((kind, *_), c, s) in enumerate(zip(LAYER_TABLE, bb.channels, bb.strides)):
            np_ = sum(p.numel() for p in bb.layers[i].parameters())
            lines.append(f"  {i:2d} {type(bb.layers[i]).__name__:10s} out={c:4d} stride={s:2d} params={np_:,d}")
    print("\n".join(lines))
    if args.csv:
        Path(args.csv).parent.mkdir(parents=True, exist_ok=True)
        with open(args.csv, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["module", "params", "gflops"])
            for name, p, g in rep.rows():
                w.writerow([name, p, f"{g:.6f}"])
            w.writerow(["total", rep.total_params, f"{rep.gflops:.6f}"])
    return 0


def cmd_plot_pr(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    src = Path(args.eval_dir) / "pr_curves.json"
    if not src.is_file():
        raise UsageError(f"no pr_curves.json in {args.eval_dir}")
    doc = json.loads(src.read_text())
    names = doc["class_names"]
    out = Path(args.out or Path(args.eval_dir) / "pr")
    out.mkdir(parents=True, exist_ok=True)
    fig_all, ax_all = plt.subplots(figsize=(6, 5))
    for c, cv in sorted(doc["curves"].items(), key=lambda kv: int(kv[0])):
        label = f"{names[int(c)]} AP50={cv['ap']:.3f}"
        fig, ax = plt.subplots(figsize=(5, 4))
        for a in (ax, ax_all):
            a.plot(cv["recall"], cv["precision"], label=label)
        ax.set(xlabel="recall", ylabel="precision", xlim=(0, 1), ylim=(0, 1.05), title=names[int(c)])
        ax.legend(loc="lower left")
        fig.savefig(out / f"pr_{int(c):02d}_{names[int(c)]}.png", dpi=100)
        plt.close(fig)
    ax_all.set(xlabel="recall", ylabel="precision", xlim=(0, 1), ylim=(0, 1.05), title="all classes")
    ax_all.legend(loc="lower left", fontsize=7)
    fig_all.savefig(out / "pr_all.png", dpi=100)
    plt.close(fig_all)
    print(f"wrote PR plots to {out}")
    return 0


# --- parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    from .model import PRESETS

    p = argparse.ArgumentParser(prog="mmsrdet", description="Multimodal SR-assisted small-object detection.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)
    cfg_help = _run_config_help()
    fmt = argparse.RawDescriptionHelpFormatter

    def with_config(sp):
        sp.add_argument("--config", help="YAML config file (defaults < file < KEY=VALUE overrides)")
        sp.add_argument("--preset", choices=PRESETS, help="start from a named model configuration")
        sp.add_argument("overrides", nargs="*", metavar="KEY=VALUE", help="dotted config overrides")

    sp = sub.add_parser("prepare-data", help="convert VEDAI annotations or write a synthetic set")
    sp.add_argument("--out", required=True)
    sp.add_argument("--synthetic", action="store_true")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--n-images", type=int, default=8)
    sp.add_argument("--image-size", type=int, default=256)
    sp.add_argument("--n-classes", type=int, default=3)
    sp.add_argument("--val-fraction", type=float, default=0.0)
    sp.add_argument("--annotations", help="VEDAI annotation file")
    sp.add_argument("--images", help="directory with <id>_co.png and <id>_ir.png")
    sp.set_defaults(func=cmd_prepare_data)

    sp = sub.add_parser("train", help="train a detector", epilog=cfg_help, formatter_class=fmt)
    sp.add_argument("--data", required=True, help="dataset directory with manifest.json")
    sp.add_argument("--split", default="train")
    sp.add_argument("--out")
    sp.add_argument("--max-steps", type=int)
    with_config(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="per-class AP50, mAP50, PSNR/SSIM")
    sp.add_argument("--checkpoint")
    sp.add_argument("--data", required=True)
    sp.add_argument("--split", default=None)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("detect", help="detect objects in one RGB(/IR) image")
    sp.add_argument("--checkpoint")
    sp.add_argument("--rgb", required=True)
    sp.add_argument("--ir")
    sp.add_argument("--conf", type=float, default=0.25)
    sp.add_argument("--no-downsample", dest="downsample", action="store_false",
                    help="feed the image at full size instead of downsampling by scale_n")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_detect)

    sp = sub.add_parser("export", help="strip the SR branch for inference")
    sp.add_argument("--checkpoint")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_export)

    sp = sub.add_parser("summarize", help="parameter and GFLOPs report", epilog=cfg_help, formatter_class=fmt)
    sp.add_argument("--checkpoint")
    sp.add_argument("--size", type=int, default=512)
    sp.add_argument("--csv")
    sp.add_argument("--layers", action="store_true", help="also dump the backbone layer table")
    with_config(sp)
    sp.set_defaults(func=cmd_summarize, preset="multi")

    sp = sub.add_parser("plot-pr", help="write PR-curve images from an eval directory")
    sp.add_argument("--eval-dir", required=True)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_plot_pr)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001
        log.debug("failure", exc_info=True)
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
