"""Versioned single-file checkpoints.

Layout: ``MAGIC | u32 format version | u64 manifest length | manifest JSON | tensor bytes``.
The manifest records the config, its hash and, for every tensor, name, dtype,
shape and byte offset into the payload. Writing is byte-deterministic, so
save -> load -> save reproduces the file exactly.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

MAGIC = b"DGCKPT\x00\x01"
FORMAT_VERSION = 1

_DTYPES = {
    torch.float32: "<f4",
    torch.float64: "<f8",
    torch.int64: "<i8",
    torch.int32: "<i4",
    torch.bool: "|b1",
}
_TORCH = {v: k for k, v in _DTYPES.items()}


class CheckpointError(RuntimeError):
    pass


@dataclass
class Checkpoint:
    tensors: dict  # name -> tensor (e.g. "model/neck.lateral.0.weight", "ema/...")
    meta: dict = field(default_factory=dict)  # kind, iteration, config, config_hash, ...

    def state(self, prefix: str) -> dict:
        p = prefix.rstrip("/") + "/"
        return {k[len(p):]: v for k, v in self.tensors.items() if k.startswith(p)}


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    entries, chunks, offset = [], [], 0
    for name in sorted(ckpt.tensors):
        t = ckpt.tensors[name].detach().cpu().contiguous()
        if t.dtype not in _DTYPES:
            raise CheckpointError(f"unsupported dtype {t.dtype} for {name}")
        data = t.numpy().astype(_DTYPES[t.dtype], copy=False).tobytes()
        entries.append({"name": name, "dtype": _DTYPES[t.dtype], "shape": list(t.shape),
                        "offset": offset, "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)
    manifest = {"format_version": FORMAT_VERSION, "meta": ckpt.meta, "tensors": entries}
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(blob)))
        fh.write(blob)
        for c in chunks:
            fh.write(c)
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    raw = path.read_bytes()
    if not raw.startswith(MAGIC):
        raise CheckpointError(f"{path} is not a checkpoint file")
    head = len(MAGIC)
    version, mlen = struct.unpack_from("<IQ", raw, head)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    start = head + struct.calcsize("<IQ")
    manifest = json.loads(raw[start:start + mlen].decode("utf-8"))
    payload = memoryview(raw)[start + mlen:]
    tensors = {}
    for e in manifest["tensors"]:
        arr = np.frombuffer(payload[e["offset"]:e["offset"] + e["nbytes"]], dtype=e["dtype"])
        tensors[e["name"]] = torch.from_numpy(arr.reshape(e["shape"]).copy())
    return Checkpoint(tensors, manifest["meta"])


def pack_state(prefix: str, state_dict: dict) -> dict:
    return {f"{prefix}/{k}": v for k, v in state_dict.items()}
