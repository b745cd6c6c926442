"""Shared training plumbing: seeding, LR schedule, checkpoints, hashing and JSONL logs."""
from __future__ import annotations

import hashlib
import io
import json
import math
import zlib
from pathlib import Path

import numpy as np
import torch

CHECKPOINT_FORMAT = 1


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator per named consumer so adding one never shifts another's draws."""
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


def torch_seed(seed: int, name: str) -> int:
    return int(substream(seed, name).integers(2**62))


def cosine_lr(step: int, total_steps: int, lr0: float, lr_min: float) -> float:
    """Cosine annealing from ``lr0`` at step 0 to ``lr_min`` at step ``total_steps - 1``."""
    if total_steps <= 1:
        return lr0
    frac = min(max(step / (total_steps - 1), 0.0), 1.0)
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + math.cos(math.pi * frac))


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":"), default=str).encode()
    return hashlib.sha256(blob).hexdigest()


def parameter_hash(params) -> str:
    """Hash of parameter values; accepts a module, a state dict or an iterable of tensors."""
    if isinstance(params, torch.nn.Module):
        params = params.state_dict()
    h = hashlib.sha256()
    if isinstance(params, dict):
        for key in sorted(params):
            h.update(key.encode())
            h.update(params[key].detach().cpu().contiguous().numpy().tobytes())
    else:
        for p in params:
            h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def save_checkpoint(path, module_tag: str, model: torch.nn.Module, step: int, cfg: dict, extra: dict | None = None) -> str:
    """Write a self-describing checkpoint and return its file hash."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "module": module_tag,
        "model_class": type(model).__name__,
        "hparams": dict(getattr(model, "hparams", {})),
        "state_dict": {k: v.detach().cpu().clone() for k, v in model.state_dict().items()},
        "step": int(step),
        "config": cfg,
        "config_hash": config_hash(cfg),
        "extra": extra or {},
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)
    return hashlib.sha256(buf.getvalue()).hexdigest()


def load_checkpoint(path) -> dict:
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a keypointlab checkpoint")
    return payload


def build_model(payload: dict) -> torch.nn.Module:
    from .models import DetectorModel, RankerModel

    classes = {"DetectorModel": DetectorModel, "RankerModel": RankerModel}
    cls = classes[payload["model_class"]]
    model = cls(**payload["hparams"])
    model.load_state_dict(payload["state_dict"])
    return model


class JsonlLogger:
    """Append-only JSON-lines sink; also keeps records in memory."""

    def __init__(self, path=None):
        self.path = None if path is None else Path(path)
        self.records: list[dict] = []
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def log(self, **record):
        clean = {k: (float(v) if isinstance(v, (np.floating, float)) else v) for k, v in record.items()}
        self.records.append(clean)
        if self.path is not None:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(clean, sort_keys=True) + "\n")


def set_optimizer_lr(optimizer: torch.optim.Optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr
