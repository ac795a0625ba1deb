"""Binary checkpoint container.

Layout (all integers little-endian)::

    bytes 0..7    magic  b"UTSCKPT1"
    bytes 8..15   uint64 header length H
    next H bytes  UTF-8 JSON header:
                    {"format": 1,
                     "config": {ablation flags},
                     "arch": {architecture hyper-parameters},
                     "tensors": [{"name", "shape", "offset"}, ...]}
    remainder     float64 ("<f8") tensor data, row-major, concatenated in
                  header order; "offset" counts bytes from the start of this
                  region.

The header is serialised with sorted keys so identical parameters always
produce identical files.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from pathlib import Path

import numpy as np

from .params import AblationConfig, LVitArch, LVitParams, init_params

MAGIC = b"UTSCKPT1"


def to_bytes(params: LVitParams, config: AblationConfig) -> bytes:
    tensors = []
    chunks = []
    offset = 0
    for name, t in params.named_parameters().items():
        raw = np.ascontiguousarray(t.data, dtype="<f8").tobytes()
        tensors.append({"name": name, "shape": list(t.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    arch = dataclasses.asdict(params.arch)
    arch["channels"] = list(arch["channels"])
    header = json.dumps({"format": 1, "config": dataclasses.asdict(config), "arch": arch,
                         "tensors": tensors}, sort_keys=True).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(header)) + header + b"".join(chunks)


def from_bytes(blob: bytes) -> tuple[LVitParams, AblationConfig]:
    if blob[:8] != MAGIC:
        raise ValueError("not an L-ViT checkpoint (bad magic)")
    (hlen,) = struct.unpack("<Q", blob[8:16])
    header = json.loads(blob[16:16 + hlen].decode("utf-8"))
    if header.get("format") != 1:
        raise ValueError(f"unsupported checkpoint format {header.get('format')!r}")
    config = AblationConfig(**header["config"])
    arch_fields = dict(header["arch"])
    arch_fields["channels"] = tuple(arch_fields["channels"])
    params = init_params(config, seed=0, arch=LVitArch(**arch_fields))
    slots = params.named_parameters()
    body = memoryview(blob)[16 + hlen:]
    seen = set()
    for entry in header["tensors"]:
        name, shape = entry["name"], tuple(entry["shape"])
        if name not in slots:
            raise ValueError(f"checkpoint tensor {name!r} has no slot in this configuration")
        if slots[name].shape != shape:
            raise ValueError(f"{name}: stored shape {shape} vs expected {slots[name].shape}")
        count = int(np.prod(shape))
        start = entry["offset"]
        data = np.frombuffer(body[start:start + 8 * count], dtype="<f8")
        if data.size != count:
            raise ValueError(f"{name}: truncated data")
        slots[name].data = data.astype(np.float64).reshape(shape)
        seen.add(name)
    if seen != set(slots):
        raise ValueError(f"checkpoint is missing tensors: {sorted(set(slots) - seen)}")
    return params, config


def save_checkpoint(path, params: LVitParams, config: AblationConfig) -> None:
    Path(path).write_bytes(to_bytes(params, config))


def load_checkpoint(path) -> tuple[LVitParams, AblationConfig]:
    return from_bytes(Path(path).read_bytes())
