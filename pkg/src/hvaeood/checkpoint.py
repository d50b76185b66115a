"""Versioned binary checkpoints for model parameters.

Layout: 8-byte magic, little-endian u32 format version, u64 header length,
a UTF-8 JSON header (model config, name/shape manifest, rng state, epoch,
payload digest), the header's SHA-256, then every parameter as raw
little-endian float64 in manifest order.  Writes are atomic (temp file +
rename); loads verify both checksums and the exact payload length.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from collections import OrderedDict
from pathlib import Path

import numpy as np

from .hvae import HvaeConfig, HvaeParams
from .tensor import Tensor

MAGIC = b"HVAECKPT"
VERSION = 1


class CheckpointError(ValueError):
    """Raised when a checkpoint file is malformed or corrupt."""


def save_checkpoint(path, params: HvaeParams, rng_state: dict | None = None,
                    epoch: int = 0, extra: dict | None = None) -> None:
    payload = b"".join(
        np.ascontiguousarray(t.data, dtype="<f8").tobytes() for t in params.tensors.values()
    )
    header = {
        "version": VERSION,
        "model": params.config.to_dict(),
        "manifest": [[name, list(shape)] for name, shape in params.manifest()],
        "rng_state": rng_state or {},
        "epoch": epoch,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    if extra:
        header["extra"] = extra
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    blob = (
        MAGIC
        + struct.pack("<I", VERSION)
        + struct.pack("<Q", len(header_bytes))
        + header_bytes
        + hashlib.sha256(header_bytes).digest()
        + payload
    )
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path) -> tuple[HvaeParams, dict]:
    """Rebuild parameters bit-exactly; returns (params, header)."""
    blob = Path(path).read_bytes()
    if blob[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    (version,) = struct.unpack("<I", blob[8:12])
    if version != VERSION:
        raise CheckpointError(f"{path}: format version {version} unsupported (expected {VERSION})")
    (header_len,) = struct.unpack("<Q", blob[12:20])
    header_end = 20 + header_len
    if len(blob) < header_end + 32:
        raise CheckpointError(f"{path}: truncated header")
    header_bytes = blob[20:header_end]
    digest = blob[header_end:header_end + 32]
    if hashlib.sha256(header_bytes).digest() != digest:
        raise CheckpointError(f"{path}: header checksum mismatch")
    header = json.loads(header_bytes.decode("utf-8"))

    manifest = [(name, tuple(shape)) for name, shape in header["manifest"]]
    expected = sum(8 * int(np.prod(shape, dtype=np.int64)) for _, shape in manifest)
    payload = blob[header_end + 32:]
    if len(payload) != expected:
        raise CheckpointError(
            f"{path}: payload length mismatch, expected {expected} bytes, found {len(payload)}")
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise CheckpointError(f"{path}: payload checksum mismatch")

    config = HvaeConfig.from_dict(header["model"])
    tensors: "OrderedDict[str, Tensor]" = OrderedDict()
    offset = 0
    for name, shape in manifest:
        size = 8 * int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(payload[offset:offset + size], dtype="<f8").reshape(shape)
        tensors[name] = Tensor(arr.astype(np.float64))
        offset += size
    params = HvaeParams(config, tensors)
    _check_manifest(params, config)
    return params, header


def _check_manifest(params: HvaeParams, config: HvaeConfig) -> None:
    from .hvae import manifest_for

    if params.manifest() != manifest_for(config):
        raise CheckpointError("checkpoint manifest does not match its model config")


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
