"""Model checkpoints: JSON header followed by little-endian float64 weights.

Layout mirrors ZGRID: a UTF-8 JSON header terminated by ``b"\\n\\x00"``,
then each tensor listed in ``header["tensors"]`` back to back.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ..errors import FormatError
from .network import ModelSpec
from .train import ModelState, TrainConfig

__all__ = ["save_checkpoint", "load_checkpoint"]

_END = b"\n\x00"
_DT = np.dtype("<f8")


def save_checkpoint(path, spec, state, cfg=None, metrics=None, extra=None):
    names = sorted(state.weights)
    tensors = [{"name": k, "shape": list(np.shape(state.weights[k]))} for k in names]
    header = {
        "format": "updraft-checkpoint/1",
        "spec": spec.to_dict(),
        "train_config": cfg.to_dict() if cfg is not None else None,
        "epoch": state.epoch,
        "best_epoch": state.best_epoch,
        "best_val_loss": state.best_val_loss,
        "metrics": metrics or {},
        "extra": extra or {},
        "tensors": tensors,
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode("utf-8"))
        fh.write(_END)
        for k in names:
            fh.write(np.ascontiguousarray(state.weights[k], dtype=_DT).tobytes())


def load_checkpoint(path):
    """Returns ``(spec, state, header)``."""
    raw = Path(path).read_bytes()
    end = raw.find(_END)
    if end < 0:
        raise FormatError(f"{path}: no checkpoint header terminator")
    try:
        header = json.loads(raw[:end].decode("utf-8"))
        spec = ModelSpec.from_dict(header["spec"])
        tensors = header["tensors"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise FormatError(f"{path}: malformed checkpoint header ({exc})") from exc
    payload = memoryview(raw)[end + len(_END):]
    weights = {}
    offset = 0
    for t in tensors:
        count = int(np.prod(t["shape"], dtype=np.int64))
        nbytes = count * _DT.itemsize
        if offset + nbytes > len(payload):
            raise FormatError(f"{path}: payload truncated at tensor {t['name']}")
        weights[t["name"]] = np.frombuffer(payload[offset:offset + nbytes], dtype=_DT).reshape(t["shape"]).astype(np.float64)
        offset += nbytes
    if offset != len(payload):
        raise FormatError(f"{path}: {len(payload) - offset} trailing payload bytes")
    state = ModelState(
        weights=weights,
        epoch=header.get("epoch", 0),
        best_epoch=header.get("best_epoch", 0),
        best_val_loss=header.get("best_val_loss", float("inf")),
    )
    if header.get("train_config"):
        header["train_config_obj"] = TrainConfig.from_dict(header["train_config"])
    return spec, state, header
