"""Named-tensor checkpoints.

Layout::

    b"SMOECKPT"                 8-byte magic
    <u32 format version>
    <u64 header length>
    header                      UTF-8 JSON, keys sorted
    payloads                    raw little-endian arrays in header order

The header records the config text, its architecture hash, the step
counter and ``name``/``shape``/``dtype`` for every tensor (model weights,
batch-norm running statistics and optimizer moments).
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"SMOECKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config_text: str
    config_hash: str
    step: int
    tensors: dict[str, np.ndarray]


def save_checkpoint(path: str, ckpt: Checkpoint) -> None:
    entries, payloads = [], []
    for name, arr in ckpt.tensors.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<")
        entries.append({"name": name, "shape": list(arr.shape), "dtype": dt.str})
        payloads.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    header = json.dumps({"version": VERSION, "config": ckpt.config_text, "config_hash": ckpt.config_hash,
                         "step": ckpt.step, "tensors": entries},
                        sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<IQ", VERSION, len(header)) + header)
        for p in payloads:
            fh.write(p)


def load_checkpoint(path: str, expect_hash: str | None = None) -> Checkpoint:
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e.strerror}") from e
    if buf[:8] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<IQ", buf, 8)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(buf[20:20 + hlen].decode())
    if expect_hash is not None and header["config_hash"] != expect_hash:
        raise CheckpointError(f"{path}: model config does not match the checkpoint "
                              f"(hash {header['config_hash'][:12]} vs {expect_hash[:12]})")
    pos = 20 + hlen
    tensors = {}
    for e in header["tensors"]:
        dt = np.dtype(e["dtype"])
        n = int(np.prod(e["shape"], dtype=np.int64))
        tensors[e["name"]] = np.frombuffer(buf, dtype=dt, count=n, offset=pos).reshape(e["shape"]).copy()
        pos += n * dt.itemsize
    if pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - pos} trailing bytes after payloads")
    return Checkpoint(header["config"], header["config_hash"], header["step"], tensors)
