"""Bit-exact checkpoint serialization.

File layout: magic ``ELCK``, little-endian u16 format version, u32 JSON
header length, the UTF-8 JSON header, then a contiguous little-endian
float32 payload. The header lists every named entry (parameters and
buffers) with shape, kind, and byte offset into the payload, and embeds the
resolved model configuration together with its fingerprint (sha256 of the
canonical JSON). Loading refuses files whose fingerprint does not match
their embedded configuration, so weights can never be restored into a
different architecture.

Training runs in float64; the float32 cast here is the only permitted
precision loss. Save/load round-trips are bit-exact at float32.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import CheckpointError
from .layers import Module
from .tensor import Parameter

MAGIC = b"ELCK"
VERSION = 1


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def fingerprint(model_config: dict) -> str:
    return hashlib.sha256(canonical_json(model_config).encode()).hexdigest()


class Checkpoint:
    def __init__(self, version: int, header: dict,
                 arrays: dict[str, np.ndarray]):
        self.version = version
        self.header = header
        self.arrays = arrays

    @property
    def model_config(self) -> dict:
        return self.header["model_config"]

    @property
    def metadata(self) -> dict:
        return self.header.get("metadata", {})


def save_checkpoint(path, model: Module, model_config: dict,
                    metadata: Optional[dict] = None) -> None:
    """Serialize all named model state (float32) plus the resolved config."""
    entries = []
    blobs = []
    offset = 0
    for name, tensor in model.named_state():
        data = tensor.data.astype("<f4")
        kind = "param" if isinstance(tensor, Parameter) else "buffer"
        entries.append({"name": name, "shape": list(tensor.shape),
                        "offset": offset, "kind": kind})
        blobs.append(data.tobytes())
        offset += data.nbytes
    header = {
        "fingerprint": fingerprint(model_config),
        "model_config": model_config,
        "entries": entries,
        "metadata": metadata or {},
    }
    header_bytes = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<H", VERSION))
        f.write(struct.pack("<I", len(header_bytes)))
        f.write(header_bytes)
        for blob in blobs:
            f.write(blob)


def load_checkpoint(path) -> Checkpoint:
    """Parse and validate a checkpoint file."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint: {exc}") from None
    if len(data) < 10:
        raise CheckpointError("truncated checkpoint: missing preamble")
    if data[:4] != MAGIC:
        raise CheckpointError(f"bad checkpoint magic {data[:4]!r}")
    (version,) = struct.unpack_from("<H", data, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (header_len,) = struct.unpack_from("<I", data, 6)
    if len(data) < 10 + header_len:
        raise CheckpointError("truncated checkpoint: incomplete header")
    try:
        header = json.loads(data[10:10 + header_len].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from None
    for key in ("fingerprint", "model_config", "entries"):
        if key not in header:
            raise CheckpointError(f"checkpoint header missing '{key}'")
    if header["fingerprint"] != fingerprint(header["model_config"]):
        raise CheckpointError(
            "checkpoint fingerprint does not match its model config")
    payload = data[10 + header_len:]
    arrays: dict[str, np.ndarray] = {}
    for entry in header["entries"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        if start + 4 * count > len(payload):
            raise CheckpointError(
                f"truncated checkpoint: entry '{entry['name']}' incomplete")
        arrays[entry["name"]] = np.frombuffer(
            payload, dtype="<f4", count=count, offset=start).reshape(shape)
    return Checkpoint(version, header, arrays)


def restore_into(model: Module, ckpt: Checkpoint) -> None:
    """Copy checkpoint arrays into a freshly built model, upcast to float64."""
    state = dict(model.named_state())
    missing = [n for n in state if n not in ckpt.arrays]
    extra = [n for n in ckpt.arrays if n not in state]
    if missing or extra:
        raise CheckpointError(
            f"checkpoint/model state mismatch (missing {missing[:3]}, "
            f"extra {extra[:3]})")
    for name, tensor in state.items():
        arr = ckpt.arrays[name]
        if arr.shape != tensor.shape:
            raise CheckpointError(
                f"shape mismatch for '{name}': checkpoint {arr.shape}, "
                f"model {tensor.shape}")
        tensor.data = arr.astype(np.float64)
