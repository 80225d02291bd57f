"""Self-describing binary checkpoints.

Layout::

    magic (8 bytes) | version u32 | header length u64 | JSON header | raw tensor bytes

The JSON header carries the model config, precision, step, phase, data
cursor, optimizer step count and an index of every tensor (group, name,
dtype, shape, byte offset).  Tensors are stored little-endian, so a
save/load round trip is bit-exact.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .model import ModelConfig, ModelState
from .optim import AdamW
from .tensor import Tensor

MAGIC = b"TSTCKPT\x00"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


def save_checkpoint(path, state: ModelState, opt: AdamW | None = None, step: int = 0,
                    phase: str = "recovery", cursor: dict | None = None, extra: dict | None = None) -> None:
    groups = [("param", state.named_arrays())]
    if opt is not None:
        groups += [("m", opt.m), ("v", opt.v)]
    index, blobs, offset = [], [], 0
    for group, arrays in groups:
        for name, arr in arrays.items():
            a = np.ascontiguousarray(arr)
            a = a.astype(a.dtype.newbyteorder("<"), copy=False)
            raw = a.tobytes()
            index.append({"group": group, "name": name, "dtype": a.dtype.str, "shape": list(a.shape),
                          "offset": offset, "nbytes": len(raw)})
            blobs.append(raw)
            offset += len(raw)
    header = {
        "model_config": asdict(state.config),
        "precision": state.precision,
        "step": int(step),
        "phase": phase,
        "cursor": cursor or {},
        "optimizer": None if opt is None else {"t": opt.t, "betas": [opt.beta1, opt.beta2],
                                                 "eps": opt.eps, "weight_decay": opt.weight_decay},
        "extra": extra or {},
        "tensors": index,
    }
    hb = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(tmp, "wb") as fh:
            fh.write(_PREFIX.pack(MAGIC, VERSION, len(hb)))
            fh.write(hb)
            for b in blobs:
                fh.write(b)
        os.replace(tmp, path)
    except OSError as exc:
        raise CheckpointError(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path):
    """Return ``(state, optimizer or None, header)``."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(raw) < _PREFIX.size:
        raise CheckpointError(f"{path}: truncated")
    magic, version, hlen = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a tstlab checkpoint")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    start = _PREFIX.size + hlen
    try:
        header = json.loads(raw[_PREFIX.size:start])
    except ValueError as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    body = memoryview(raw)[start:]
    groups: dict[str, dict] = {"param": {}, "m": {}, "v": {}}
    for e in header["tensors"]:
        if e["offset"] + e["nbytes"] > len(body):
            raise CheckpointError(f"{path}: tensor {e['name']} runs past end of file")
        buf = body[e["offset"]: e["offset"] + e["nbytes"]]
        arr = np.frombuffer(buf, dtype=np.dtype(e["dtype"])).reshape(e["shape"])
        groups[e["group"]][e["name"]] = arr.astype(arr.dtype.newbyteorder("="), copy=True)
    cfg = ModelConfig(**header["model_config"])
    params = {k: Tensor(v, requires_grad=True, name=k) for k, v in groups["param"].items()}
    state = ModelState(cfg, params, header["precision"])
    opt = None
    if header.get("optimizer") is not None:
        o = header["optimizer"]
        opt = AdamW(tuple(o["betas"]), o["eps"], o["weight_decay"])
        opt.t = o["t"]
        opt.m, opt.v = groups["m"], groups["v"]
    return state, opt, header
