"""Single-file checkpoints.

The container is a safetensors file: an 8-byte little-endian header length, a
UTF-8 JSON header describing each tensor (dtype, shape, byte offsets) and the
raw little-endian tensor bytes. The header's ``__metadata__`` holds one key,
``manifest``, a JSON document with::

    format_version   int
    kind             "training" | "inference"
    config           model/training config snapshot
    epoch            last completed epoch
    history          list of per-step loss dicts and per-epoch metrics

Tensor names: ``model.<module path>`` for weights and buffers and
``optim.<param index>.<state name>`` for optimizer state. Inference
checkpoints carry no ``model.sr.*`` and no ``optim.*`` entries.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import torch
from safetensors.torch import load as st_load
from safetensors.torch import save as st_save

FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    weights: dict
    config: dict
    epoch: int = 0
    history: list = field(default_factory=list)
    optimizer: dict = field(default_factory=dict)
    kind: str = "training"

    def manifest(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "kind": self.kind,
            "config": self.config,
            "epoch": self.epoch,
            "history": self.history,
        }

    def sr_keys(self) -> list[str]:
        return [k for k in self.weights if k.startswith("sr.")]


def to_bytes(ckpt: Checkpoint) -> bytes:
    tensors = {f"model.{k}": v.detach().cpu().contiguous() for k, v in ckpt.weights.items()}
    for k, v in ckpt.optimizer.items():
        tensors[f"optim.{k}"] = v.detach().cpu().contiguous()
    meta = {"manifest": json.dumps(ckpt.manifest(), sort_keys=True)}
    return st_save(tensors, metadata=meta)


def from_bytes(data: bytes) -> Checkpoint:
    n = int.from_bytes(data[:8], "little")
    header = json.loads(data[8 : 8 + n])
    manifest = json.loads(header.get("__metadata__", {}).get("manifest", "{}"))
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format {manifest.get('format_version')!r}")
    tensors = st_load(data)
    weights = {k[6:]: v for k, v in tensors.items() if k.startswith("model.")}
    optim = {k[6:]: v for k, v in tensors.items() if k.startswith("optim.")}
    return Checkpoint(weights, manifest["config"], manifest.get("epoch", 0),
                      manifest.get("history", []), optim, manifest.get("kind", "training"))


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(to_bytes(ckpt))
    tmp.replace(path)
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return from_bytes(path.read_bytes())


def optimizer_state_tensors(opt: torch.optim.Optimizer) -> dict:
    out = {}
    for idx, st in opt.state_dict()["state"].items():
        for name, v in st.items():
            if isinstance(v, torch.Tensor):
                out[f"{idx}.{name}"] = v
    return out


def load_optimizer_state(opt: torch.optim.Optimizer, tensors: dict) -> None:
    sd = opt.state_dict()
    state = {}
    for key, v in tensors.items():
        idx, name = key.split(".", 1)
        state.setdefault(int(idx), {})[name] = v
    sd["state"] = state
    opt.load_state_dict(sd)
