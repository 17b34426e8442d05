"""
checkpoint.py - NHCK binary checkpoint format

Layout:
    b"NHCK" | version (u32 LE) | header_len (u64 LE) | header JSON | body

The header is canonical JSON (sorted keys, no whitespace):
    {"arch": ArchSpec dict,
     "meta": free-form run metadata,
     "tensors": [{"name", "dtype", "shape", "byte_offset", "nbytes"}, ...]}

byte_offset is relative to the start of the body. Tensors are laid out in
name order, back to back, so offsets ascend and never overlap. f32 payloads
are raw little-endian floats; fp8e4m3/fp8e5m2 payloads use the Fp8Tensor
serialization (format tag, LE float64 scale, codes).
"""

import json
import logging
import os
import struct
from dataclasses import dataclass, field
from typing import Any, Dict, Optional, Union

import numpy as np

from common import LOG_LEVEL, CheckpointError
from fp8 import E4M3, E5M2, FormatKind, Fp8Tensor, quantize
from hybrid_model import ArchSpec, HybridModel

logger = logging.getLogger(__name__)
logger.setLevel(LOG_LEVEL)

MAGIC = b"NHCK"
VERSION = 1
_PREAMBLE = struct.Struct("<4sIQ")

_FP8_DTYPES = {FormatKind.E4M3: "fp8e4m3", FormatKind.E5M2: "fp8e5m2"}
_FP8_FORMATS = {"fp8e4m3": E4M3, "fp8e5m2": E5M2}

TensorValue = Union[np.ndarray, Fp8Tensor]


@dataclass
class Checkpoint:
    arch: ArchSpec
    tensors: Dict[str, TensorValue]
    meta: Dict[str, Any] = field(default_factory=dict)

    def to_model(self) -> HybridModel:
        """Float32 model; FP8 tensors are dequantized."""
        params = {
            name: (t.dequantize() if isinstance(t, Fp8Tensor) else t).astype(np.float32)
            for name, t in self.tensors.items()
        }
        return HybridModel(self.arch, params)


def _encode_tensor(name: str, value: TensorValue) -> tuple:
    if isinstance(value, Fp8Tensor):
        dtype = _FP8_DTYPES.get(value.format.kind)
        if dtype is None:
            raise CheckpointError(f"{name}: format {value.format.kind.value} cannot be stored", tensor=name)
        return dtype, list(value.shape), value.to_bytes()
    arr = np.asarray(value)
    if arr.dtype != np.float32:
        raise CheckpointError(f"{name}: only float32 and FP8 tensors are stored, got {arr.dtype}", tensor=name)
    return "f32", list(arr.shape), np.ascontiguousarray(arr, dtype="<f4").tobytes()


def save_checkpoint(path: str, arch: ArchSpec, tensors: Dict[str, TensorValue],
                    meta: Optional[Dict[str, Any]] = None) -> int:
    """
    Write a checkpoint; returns the file size in bytes.

    Raises:
        CheckpointError: If a tensor has an unsupported dtype
    """
    entries = []
    chunks = []
    offset = 0
    for name in sorted(tensors):
        dtype, shape, payload = _encode_tensor(name, tensors[name])
        entries.append({"name": name, "dtype": dtype, "shape": shape, "byte_offset": offset, "nbytes": len(payload)})
        chunks.append(payload)
        offset += len(payload)
    header = json.dumps(
        {"arch": arch.to_dict(), "meta": meta or {}, "tensors": entries},
        sort_keys=True, separators=(",", ":"),
    ).encode("utf-8")

    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    with open(path, "wb") as f:
        f.write(_PREAMBLE.pack(MAGIC, VERSION, len(header)))
        f.write(header)
        for chunk in chunks:
            f.write(chunk)
    size = _PREAMBLE.size + len(header) + offset
    logger.info(f"💾 Saved checkpoint {path} ({len(entries)} tensors, {size} bytes)")
    return size


def load_checkpoint(path: str) -> Checkpoint:
    """
    Read a checkpoint written by save_checkpoint.

    Raises:
        CheckpointError: On bad magic/version, truncation or inconsistent offsets
    """
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}", path=path)
    if len(data) < _PREAMBLE.size:
        raise CheckpointError("checkpoint is truncated", path=path)
    magic, version, header_len = _PREAMBLE.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}", path=path)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}", path=path)
    body_start = _PREAMBLE.size + header_len
    if body_start > len(data):
        raise CheckpointError("checkpoint header is truncated", path=path)
    try:
        header = json.loads(data[_PREAMBLE.size:body_start].decode("utf-8"))
        arch = ArchSpec.from_dict(header["arch"])
    except (ValueError, KeyError, TypeError) as e:
        raise CheckpointError(f"bad checkpoint header: {e}", path=path)

    body = memoryview(data)[body_start:]
    tensors: Dict[str, TensorValue] = {}
    expected_offset = 0
    for entry in header["tensors"]:
        name, dtype, shape = entry["name"], entry["dtype"], tuple(entry["shape"])
        start, nbytes = entry["byte_offset"], entry["nbytes"]
        if start != expected_offset or start + nbytes > len(body):
            raise CheckpointError(f"{name}: offset {start} inconsistent with layout", tensor=name)
        raw = bytes(body[start:start + nbytes])
        expected_offset = start + nbytes
        if dtype == "f32":
            count = int(np.prod(shape)) if shape else 1
            if nbytes != 4 * count:
                raise CheckpointError(f"{name}: {nbytes} bytes for shape {list(shape)}", tensor=name)
            tensors[name] = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(shape)
        elif dtype in _FP8_FORMATS:
            try:
                value = Fp8Tensor.from_bytes(raw, shape)
            except ValueError as e:
                raise CheckpointError(f"{name}: {e}", tensor=name)
            if value.format != _FP8_FORMATS[dtype]:
                raise CheckpointError(f"{name}: payload tag disagrees with dtype {dtype}", tensor=name)
            tensors[name] = value
        else:
            raise CheckpointError(f"{name}: unknown dtype {dtype}", tensor=name)
    if expected_offset != len(body):
        raise CheckpointError("checkpoint body has trailing bytes", path=path)
    return Checkpoint(arch, tensors, header.get("meta", {}))


def save_model(path: str, model: HybridModel, meta: Optional[Dict[str, Any]] = None,
               fp8_weights: bool = False) -> int:
    """
    Save a model; with fp8_weights every matrix is stored as E4M3 (vectors stay f32).
    """
    tensors: Dict[str, TensorValue] = {}
    for name, arr in model.params.items():
        if fp8_weights and arr.ndim == 2:
            tensors[name] = quantize(arr, E4M3)
        else:
            tensors[name] = arr.astype(np.float32)
    return save_checkpoint(path, model.spec, tensors, meta)


def load_model(path: str) -> HybridModel:
    return load_checkpoint(path).to_model()


def checkpoint_param_count(path: str) -> int:
    """Sum of tensor element counts recorded in the checkpoint."""
    ckpt = load_checkpoint(path)
    return int(sum(np.prod(t.shape) for t in ckpt.tensors.values()))
