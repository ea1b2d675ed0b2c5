"""Parameter checkpoints as a directory of named MSDF matrices plus a JSON
index (name -> file/shape/dtype).  Float64 tensors round-trip bit-exactly
via the version-2 payload; naming is deterministic so checkpoints diff."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import FormatError
from .features import read_feature_file, write_matrix

INDEX_NAME = "index.json"
PARAMS_DIR = "params"


def _as_2d(arr: np.ndarray) -> np.ndarray:
    if arr.ndim == 0:
        return arr.reshape(1, 1)
    if arr.ndim == 1:
        return arr.reshape(1, -1)
    if arr.ndim == 2:
        return arr
    return arr.reshape(arr.shape[0], -1)


def save_checkpoint(ckpt_dir, model: nn.Module, extras: dict[str, dict] | None = None) -> None:
    """Write every state-dict tensor as <name>.msdf plus index.json.

    extras maps filename stem -> JSON-serializable payload (e.g. the train
    config), stored alongside the index.
    """
    ckpt_dir = Path(ckpt_dir)
    params_dir = ckpt_dir / PARAMS_DIR
    params_dir.mkdir(parents=True, exist_ok=True)
    index = {}
    for name, tensor in sorted(model.state_dict().items()):
        arr = tensor.detach().cpu().numpy()
        fname = name.replace(".", "__") + ".msdf"
        write_matrix(params_dir / fname, _as_2d(arr))
        index[name] = {"file": fname, "shape": list(arr.shape), "dtype": str(arr.dtype)}
    with open(ckpt_dir / INDEX_NAME, "w", encoding="utf-8") as fh:
        json.dump(index, fh, indent=2, sort_keys=True)
    for stem, payload in (extras or {}).items():
        with open(ckpt_dir / f"{stem}.json", "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2)


def load_checkpoint(ckpt_dir, model: nn.Module) -> None:
    """Restore a model's state dict from a checkpoint directory."""
    ckpt_dir = Path(ckpt_dir)
    index_path = ckpt_dir / INDEX_NAME
    if not index_path.exists():
        raise FormatError(f"{ckpt_dir}: missing {INDEX_NAME}")
    with open(index_path, "r", encoding="utf-8") as fh:
        index = json.load(fh)
    expected = set(model.state_dict().keys())
    found = set(index.keys())
    if expected != found:
        missing = sorted(expected - found)
        extra = sorted(found - expected)
        raise FormatError(f"checkpoint mismatch: missing={missing} extra={extra}")
    state = {}
    for name, meta in index.items():
        arr = read_feature_file(ckpt_dir / PARAMS_DIR / meta["file"])
        state[name] = torch.from_numpy(arr.reshape(meta["shape"]).copy())
    model.load_state_dict(state)


def load_extra(ckpt_dir, stem: str) -> dict:
    with open(Path(ckpt_dir) / f"{stem}.json", "r", encoding="utf-8") as fh:
        return json.load(fh)
