"""Checkpoint container.

Layout, all integers little-endian:

    bytes 0..3    magic b"NCKP"
    bytes 4..5    format version (u16) == 1
    bytes 6..9    header length in bytes (u32)
    header        UTF-8 JSON: {"config": {...},
                               "arrays": [{"name", "dtype", "shape", "offset"}],
                               "extra": {...}}
    data          raw array bytes at the stated offsets (relative to the
                  end of the header), C order, little-endian

Arrays named "opt.m.*" / "opt.v.*" hold optimizer moments; everything
else is a model weight.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .model import ModelConfig, ModelParameters

MAGIC = b"NCKP"
VERSION = 1


@dataclass
class OptimizerState:
    """AdamW first/second moments plus the shared step count."""
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def _dtype_tag(dt: np.dtype) -> str:
    return np.dtype(dt).newbyteorder("<").str


def save_checkpoint(path, params: ModelParameters,
                    optimizer: OptimizerState | None = None,
                    extra: dict | None = None) -> None:
    arrays: dict[str, np.ndarray] = {k: t.data for k, t in params.tensors.items()}
    extra = dict(extra or {})
    if optimizer is not None:
        for k, a in optimizer.m.items():
            arrays[f"opt.m.{k}"] = a
        for k, a in optimizer.v.items():
            arrays[f"opt.v.{k}"] = a
        extra["optimizer_step"] = optimizer.step

    table = []
    offset = 0
    blobs = []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        blob = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        table.append({"name": name, "dtype": _dtype_tag(arr.dtype),
                      "shape": list(arr.shape), "offset": offset})
        offset += len(blob)
        blobs.append(blob)

    header = json.dumps({"config": json.loads(params.config.to_json()),
                         "arrays": table, "extra": extra}).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<HI", VERSION, len(header)))
        f.write(header)
        for blob in blobs:
            f.write(blob)


def load_checkpoint(path):
    """Returns (ModelParameters, OptimizerState | None, extra dict)."""
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack_from("<HI", raw, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[10:10 + hlen].decode())
    data = raw[10 + hlen:]

    arrays: dict[str, np.ndarray] = {}
    for entry in header["arrays"]:
        dt = np.dtype(entry["dtype"])
        shape = tuple(entry["shape"])
        n = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        off = entry["offset"]
        if off + n > len(data):
            raise ValueError(f"{path}: truncated array {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(
            data[off:off + n], dtype=dt).reshape(shape).copy()

    config = ModelConfig.from_json(json.dumps(header["config"]))
    extra = header.get("extra", {})

    tensors = {k: ad.Tensor(a, name=k) for k, a in arrays.items()
               if not k.startswith("opt.")}
    params = ModelParameters(config, tensors)

    optimizer = None
    m = {k[len("opt.m."):]: a for k, a in arrays.items() if k.startswith("opt.m.")}
    v = {k[len("opt.v."):]: a for k, a in arrays.items() if k.startswith("opt.v.")}
    if m or v:
        optimizer = OptimizerState(m=m, v=v, step=int(extra.get("optimizer_step", 0)))
    return params, optimizer, extra
