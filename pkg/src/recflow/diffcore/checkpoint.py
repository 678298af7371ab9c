"""Lossless checkpoint container for parameters and optimizer state.

A checkpoint is a single .npz archive: one float64 array per parameter id,
optional Adam moment arrays, and a JSON metadata blob.  Binary float64
storage round-trips exactly.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .optim import Adam
from .tape import Parameter

_PARAM = "param:"
_ADAM_M = "adam_m:"
_ADAM_V = "adam_v:"
_META = "__meta__"


@dataclass
class Checkpoint:
    values: dict[str, np.ndarray]
    adam_state: dict | None = None
    adam_first: dict[str, np.ndarray] = field(default_factory=dict)
    adam_second: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def restore_into(self, params: dict[str, Parameter]):
        missing = sorted(set(params) - set(self.values))
        extra = sorted(set(self.values) - set(params))
        if missing or extra:
            raise KeyError(
                f"checkpoint/parameter mismatch: missing={missing} extra={extra}")
        for name, p in params.items():
            stored = self.values[name]
            if stored.shape != p.value.shape:
                raise ValueError(
                    f"shape mismatch for {name!r}: {stored.shape} vs {p.value.shape}")
            p.value = stored.copy()
            p.reset_grad()

    def restore_optimizer(self, optimizer: Adam):
        if self.adam_state is None:
            raise ValueError("checkpoint carries no optimizer state")
        optimizer.load_state(self.adam_state, self.adam_first, self.adam_second)


def save_checkpoint(path, params: dict[str, Parameter], optimizer: Adam | None = None,
                    meta: dict | None = None):
    path = Path(path)
    arrays: dict[str, np.ndarray] = {}
    for name, p in params.items():
        arrays[_PARAM + name] = np.asarray(p.value, dtype=np.float64)
    meta = dict(meta or {})
    if optimizer is not None:
        meta["adam"] = optimizer.state()
        for name in params:
            arrays[_ADAM_M + name] = optimizer.first_moment[name]
            arrays[_ADAM_V + name] = optimizer.second_moment[name]
    arrays[_META] = np.frombuffer(
        json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    path.write_bytes(buf.getvalue())


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no checkpoint at {path}")
    with np.load(path) as archive:
        meta = json.loads(bytes(archive[_META]).decode("utf-8")) if _META in archive else {}
        ckpt = Checkpoint(values={}, adam_state=meta.pop("adam", None), meta=meta)
        for key in archive.files:
            if key.startswith(_PARAM):
                ckpt.values[key[len(_PARAM):]] = archive[key]
            elif key.startswith(_ADAM_M):
                ckpt.adam_first[key[len(_ADAM_M):]] = archive[key]
            elif key.startswith(_ADAM_V):
                ckpt.adam_second[key[len(_ADAM_V):]] = archive[key]
    return ckpt
