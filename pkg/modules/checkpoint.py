"""
Binary checkpoints.

Layout:
    b"EGCK" | uint32 version | uint32 header length | JSON header | blobs | SHA-256

All integers and blobs are little-endian. The digest covers every byte
before it. Blobs are float32 unless the model was created in f64 mode.
"""
import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from modules.batchnorm import BNState, RecalibrationRule
from modules.errors import CheckpointError, ChecksumError, ShapeError, VersionError
from modules.netgraph import NetworkSpec, ParamStore, check_params
from modules.pruner import PruningStrategy

logger = logging.getLogger(__name__)

MAGIC = b"EGCK"
VERSION = 1
PREFIX = struct.Struct("<4sII")
DIGEST_BYTES = hashlib.sha256().digest_size
BLOB_DTYPES = {np.dtype(np.float32): "<f4", np.dtype(np.float64): "<f8"}
BN_ARRAYS = ("gamma", "beta", "moving_mean", "moving_var")


@dataclass
class Checkpoint:
    spec: NetworkSpec
    params: ParamStore
    strategy: Optional[PruningStrategy] = None
    criterion: Optional[str] = None
    meta: dict = field(default_factory=dict)


def _blob_items(params):
    for i in sorted(params.weights):
        yield f"{i}.weight", params.weights[i]
    for i in sorted(params.biases):
        yield f"{i}.bias", params.biases[i]
    for i in sorted(params.bn):
        for name in BN_ARRAYS:
            yield f"{i}.{name}", getattr(params.bn[i], name)


def save_checkpoint(path, spec, params, strategy=None, criterion=None, meta=None):
    check_params(spec, params)
    blob_dtype = BLOB_DTYPES.get(np.dtype(params.dtype), "<f4")

    table, chunks, offset = [], [], 0
    for key, arr in _blob_items(params):
        raw = np.ascontiguousarray(arr, dtype=blob_dtype).tobytes()
        table.append({"key": key, "shape": list(arr.shape), "dtype": blob_dtype,
                      "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)

    header = {
        "spec": spec.to_dict(),
        "strategy": strategy.to_dict() if strategy is not None else None,
        "criterion": criterion,
        "blobs": table,
        "bn": {
            str(i): {
                "epsilon": s.epsilon,
                "momentum": s.momentum,
                "recalib_momentum": s.recalib_momentum,
                "recalib_rule": s.recalib_rule.value,
                "recalib_steps": s.recalib_steps,
            }
            for i, s in sorted(params.bn.items())
        },
        "meta": meta or {},
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    body = PREFIX.pack(MAGIC, VERSION, len(header_bytes)) + header_bytes + b"".join(chunks)

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(body + hashlib.sha256(body).digest())
    logger.info("saved checkpoint %s (%d bytes)", path, len(body) + DIGEST_BYTES)
    return path


def load_checkpoint(path):
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if len(raw) < PREFIX.size + DIGEST_BYTES:
        raise CheckpointError(f"{path}: {len(raw)} bytes is too short for a checkpoint")

    magic, version, header_len = PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise VersionError(f"{path}: checkpoint version {version}, this build reads version {VERSION}")

    body, digest = raw[:-DIGEST_BYTES], raw[-DIGEST_BYTES:]
    if hashlib.sha256(body).digest() != digest:
        raise ChecksumError(f"{path}: SHA-256 mismatch, file is corrupt")

    start = PREFIX.size
    try:
        header = json.loads(body[start:start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: unreadable header: {e}") from e
    blob_base = start + header_len

    arrays = {}
    for entry in header["blobs"]:
        begin = blob_base + entry["offset"]
        if begin + entry["nbytes"] > len(body):
            raise CheckpointError(f"{path}: blob {entry['key']} runs past the end of the file")
        arr = np.frombuffer(body, dtype=entry["dtype"], count=entry["nbytes"] // np.dtype(entry["dtype"]).itemsize,
                            offset=begin)
        native = np.float64 if np.dtype(entry["dtype"]).itemsize == 8 else np.float32
        arrays[entry["key"]] = arr.reshape(entry["shape"]).astype(native)

    spec = NetworkSpec.from_dict(header["spec"])
    params = ParamStore()
    for key, arr in arrays.items():
        i, name = key.split(".", 1)
        if name == "weight":
            params.weights[int(i)] = arr
        elif name == "bias":
            params.biases[int(i)] = arr
    for i, scalars in header["bn"].items():
        params.bn[int(i)] = BNState(
            gamma=arrays[f"{i}.gamma"],
            beta=arrays[f"{i}.beta"],
            moving_mean=arrays[f"{i}.moving_mean"],
            moving_var=arrays[f"{i}.moving_var"],
            epsilon=scalars["epsilon"],
            momentum=scalars["momentum"],
            recalib_momentum=scalars["recalib_momentum"],
            recalib_rule=RecalibrationRule(scalars["recalib_rule"]),
            recalib_steps=scalars["recalib_steps"],
        )
    try:
        check_params(spec, params)
    except ShapeError as e:
        raise CheckpointError(f"{path}: parameters do not match the stored spec: {e}") from e

    strategy = PruningStrategy.from_dict(header["strategy"]) if header.get("strategy") else None
    return Checkpoint(spec, params, strategy, header.get("criterion"), header.get("meta", {}))
