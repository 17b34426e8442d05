"""
fp8.py - Software FP8 numerics: codecs, per-tensor current scaling, quantized GEMM

This module emulates the FP8 training recipe bit-exactly on the CPU:
- E4M3 / E5M2 encode and decode (round-to-nearest-even, saturating, flush-to-zero)
- Per-tensor "current" scaling: scale = max_finite / amax, recomputed on every call
- Quantize / dequantize into Fp8Tensor (one byte per element + one scale)
- qgemm: dequantize both operands and accumulate in float64
- Layer-wise precision policy (first/last N layers stay high precision)

Format conventions:
- E4M3: bias 7, no infinities, a single NaN pattern per sign (S.1111.111)
- E5M2: bias 15, IEEE-like (exponent all-ones is Inf or NaN)
- E8M10: synthetic wide IEEE-like format, only used to show GEMM error
  shrinking as mantissa bits grow

max_finite and min_subnormal are never hardcoded: they are read off the
decode of every code point of the format.

Usage Examples:
    q = quantize(weights, E4M3)
    y = qgemm(quantize(x, E4M3), q.T)
    blob = q.to_bytes()
"""

import logging
import struct
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from typing import Tuple

import numpy as np

from common import LOG_LEVEL, NonFiniteError, ShapeError

logger = logging.getLogger(__name__)
logger.setLevel(LOG_LEVEL)


# ===============================================
# FORMATS
# ===============================================

class FormatKind(str, Enum):
    E4M3 = "E4M3"
    E5M2 = "E5M2"
    E8M10 = "E8M10"


@dataclass(frozen=True)
class Fp8Format:
    """
    A sign/exponent/mantissa float format small enough to enumerate.

    Only exponent/mantissa widths and the infinity convention are stored; bias,
    max_finite and min_subnormal are derived.
    """

    kind: FormatKind
    exponent_bits: int
    mantissa_bits: int
    has_infinities: bool

    @property
    def bias(self) -> int:
        return (1 << (self.exponent_bits - 1)) - 1

    @property
    def n_bits(self) -> int:
        return 1 + self.exponent_bits + self.mantissa_bits

    @property
    def n_codes(self) -> int:
        return 1 << self.n_bits

    @property
    def code_dtype(self) -> np.dtype:
        return np.dtype(np.uint8) if self.n_bits <= 8 else np.dtype(np.uint32)

    @property
    def max_finite(self) -> float:
        return _format_tables(self).max_finite

    @property
    def min_subnormal(self) -> float:
        return _format_tables(self).min_subnormal


E4M3 = Fp8Format(FormatKind.E4M3, exponent_bits=4, mantissa_bits=3, has_infinities=False)
E5M2 = Fp8Format(FormatKind.E5M2, exponent_bits=5, mantissa_bits=2, has_infinities=True)
E8M10 = Fp8Format(FormatKind.E8M10, exponent_bits=8, mantissa_bits=10, has_infinities=True)

FORMATS = {f.kind: f for f in (E4M3, E5M2, E8M10)}

# Serialization tags (first byte of a serialized Fp8Tensor)
FORMAT_TAGS = {FormatKind.E4M3: 0, FormatKind.E5M2: 1, FormatKind.E8M10: 2}
_TAG_FORMATS = {tag: FORMATS[kind] for kind, tag in FORMAT_TAGS.items()}

# Linear-layer recipe: weights and activations in E4M3, gradients in E5M2
WEIGHT_FORMAT = E4M3
ACTIVATION_FORMAT = E4M3
GRADIENT_FORMAT = E5M2


# ===============================================
# CODECS
# ===============================================

def decode_array(codes: np.ndarray, fmt: Fp8Format) -> np.ndarray:
    """
    Decode integer codes to float64 values (NaN codes decode to NaN).

    Args:
        codes: Array of codes (any integer dtype)
        fmt: Format the codes belong to

    Returns:
        float64 array with the same shape as codes
    """
    c = np.asarray(codes).astype(np.int64)
    e, m = fmt.exponent_bits, fmt.mantissa_bits
    sign = (c >> (e + m)) & 1
    exp_field = (c >> m) & ((1 << e) - 1)
    mant = c & ((1 << m) - 1)
    exp_max = (1 << e) - 1

    mant_f = mant.astype(np.float64)
    subnormal = np.ldexp(mant_f, np.full(c.shape, 1 - fmt.bias - m, dtype=np.int32))
    normal = np.ldexp(1.0 + mant_f / (1 << m), (exp_field - fmt.bias).astype(np.int32))
    values = np.where(exp_field == 0, subnormal, normal)

    if fmt.has_infinities:
        special = exp_field == exp_max
        values = np.where(special & (mant == 0), np.inf, values)
        values = np.where(special & (mant != 0), np.nan, values)
    else:
        values = np.where((exp_field == exp_max) & (mant == (1 << m) - 1), np.nan, values)

    return np.where(sign == 1, -values, values)


@dataclass(frozen=True)
class _FormatTables:
    magnitudes: np.ndarray  # ascending finite non-negative values
    codes: np.ndarray       # code of each magnitude (sign bit clear)
    max_finite: float
    min_subnormal: float


@lru_cache(maxsize=None)
def _format_tables(fmt: Fp8Format) -> _FormatTables:
    all_codes = np.arange(fmt.n_codes, dtype=np.int64)
    all_values = decode_array(all_codes, fmt)
    finite = np.isfinite(all_values)
    max_finite = float(np.max(np.abs(all_values[finite])))
    nonzero = np.abs(all_values[finite])
    min_subnormal = float(np.min(nonzero[nonzero > 0]))

    half = all_codes[: fmt.n_codes // 2]
    half_values = all_values[: fmt.n_codes // 2]
    keep = np.isfinite(half_values)
    magnitudes = half_values[keep]
    codes = half[keep]
    if np.any(np.diff(magnitudes) <= 0):
        raise AssertionError(f"{fmt.kind.value} codes are not monotone in magnitude")

    logger.debug(f"{fmt.kind.value}: max_finite={max_finite} min_subnormal={min_subnormal}")
    return _FormatTables(magnitudes, codes, max_finite, min_subnormal)


def encode_array(values: np.ndarray, fmt: Fp8Format) -> np.ndarray:
    """
    Encode finite values with round-to-nearest-even.

    Magnitudes above max_finite saturate to max_finite; magnitudes at or
    below half the smallest subnormal become (signed) zero.

    Raises:
        NonFiniteError: If any value is NaN or infinite
    """
    x = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"cannot encode non-finite values as {fmt.kind.value}")

    tables = _format_tables(fmt)
    mags = np.abs(x)
    last = len(tables.magnitudes) - 1
    idx = np.searchsorted(tables.magnitudes, mags, side="left")
    hi_idx = np.minimum(idx, last)
    lo_idx = np.maximum(np.minimum(idx, last + 1) - 1, 0)

    d_hi = tables.magnitudes[hi_idx] - mags
    d_lo = mags - tables.magnitudes[lo_idx]
    hi_code = tables.codes[hi_idx]
    lo_code = tables.codes[lo_idx]

    # Adjacent magnitudes have adjacent codes, so exactly one side of a tie is even
    take_hi = np.where(d_hi == d_lo, (hi_code & 1) == 0, d_hi < d_lo)
    code = np.where(take_hi, hi_code, lo_code)
    code = code | (np.signbit(x).astype(np.int64) << (fmt.exponent_bits + fmt.mantissa_bits))
    return code.astype(fmt.code_dtype)


def encode_fp8(value: float, fmt: Fp8Format) -> int:
    """Encode one finite real value; returns the integer code."""
    return int(encode_array(np.array([value]), fmt)[0])


def decode_fp8(code: int, fmt: Fp8Format) -> float:
    """Decode one code; NaN codes return float('nan')."""
    return float(decode_array(np.array([code]), fmt)[0])


# ===============================================
# PER-TENSOR CURRENT SCALING
# ===============================================

def compute_scale(t: np.ndarray, fmt: Fp8Format) -> float:
    """
    Quantization scale = max_finite / amax(|t|), or 1.0 for an all-zero tensor.

    Raises:
        NonFiniteError: If t holds NaN or Inf
    """
    arr = np.asarray(t, dtype=np.float64)
    if arr.size and not np.all(np.isfinite(arr)):
        raise NonFiniteError("cannot compute scale of a non-finite tensor", format=fmt.kind.value)
    amax = float(np.max(np.abs(arr))) if arr.size else 0.0
    if amax == 0.0:
        return 1.0
    scale = fmt.max_finite / amax
    if not np.isfinite(scale):
        # amax deep in float64 subnormals
        scale = float(np.finfo(np.float64).max)
    return scale


@dataclass(frozen=True, eq=False)
class Fp8Tensor:
    """Quantized payload (one code per element), its scale and its format."""

    payload: np.ndarray
    scale: float
    format: Fp8Format

    def __post_init__(self):
        if not (np.isfinite(self.scale) and self.scale > 0):
            raise ValueError(f"Fp8Tensor scale must be positive and finite, got {self.scale}")
        if self.payload.dtype != self.format.code_dtype:
            raise ValueError(
                f"payload dtype {self.payload.dtype} does not match {self.format.kind.value}"
            )

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.payload.shape)

    @property
    def T(self) -> "Fp8Tensor":
        return Fp8Tensor(np.ascontiguousarray(self.payload.T), self.scale, self.format)

    def dequantize(self) -> np.ndarray:
        return dequantize(self)

    def to_bytes(self) -> bytes:
        """Serialized form: format tag (1 byte), scale (LE float64), payload."""
        payload = np.ascontiguousarray(self.payload).astype(
            self.format.code_dtype.newbyteorder("<"), copy=False
        )
        return bytes([FORMAT_TAGS[self.format.kind]]) + struct.pack("<d", self.scale) + payload.tobytes()

    @classmethod
    def from_bytes(cls, data: bytes, shape: Tuple[int, ...]) -> "Fp8Tensor":
        if len(data) < 9:
            raise ValueError("serialized Fp8Tensor is truncated")
        fmt = _TAG_FORMATS.get(data[0])
        if fmt is None:
            raise ValueError(f"unknown FP8 format tag {data[0]}")
        (scale,) = struct.unpack("<d", data[1:9])
        codes = np.frombuffer(data[9:], dtype=fmt.code_dtype.newbyteorder("<"))
        expected = int(np.prod(shape)) if shape else 1
        if codes.size != expected:
            raise ValueError(f"payload holds {codes.size} codes, shape needs {expected}")
        return cls(codes.astype(fmt.code_dtype).reshape(shape), scale, fmt)


def quantize(t: np.ndarray, fmt: Fp8Format) -> Fp8Tensor:
    """
    Scale t by its current scale and cast every element to fmt.

    The largest-magnitude element maps onto max_finite, so it survives the
    round trip within one format ULP.
    """
    arr = np.asarray(t, dtype=np.float64)
    scale = compute_scale(arr, fmt)
    codes = encode_array(arr * scale, fmt).reshape(arr.shape)
    return Fp8Tensor(codes, scale, fmt)


def dequantize(q: Fp8Tensor) -> np.ndarray:
    """
    Decode q and divide by its scale (float64).

    Raises:
        NonFiniteError: If the payload holds NaN codes
    """
    values = decode_array(q.payload, q.format)
    if not np.all(np.isfinite(values)):
        raise NonFiniteError("Fp8Tensor payload holds NaN/Inf codes", format=q.format.kind.value)
    return values / q.scale


def fake_quantize(t: np.ndarray, fmt: Fp8Format) -> np.ndarray:
    """quantize -> dequantize, returned in the input dtype."""
    arr = np.asarray(t)
    return dequantize(quantize(arr, fmt)).astype(arr.dtype, copy=False)


def qgemm(a: Fp8Tensor, b: Fp8Tensor) -> np.ndarray:
    """
    Quantized GEMM: dequantize(a) @ dequantize(b) accumulated in float64.

    Args:
        a: (m, k) quantized operand
        b: (k, n) quantized operand

    Raises:
        ShapeError: If operands are not 2-D or inner dimensions differ
    """
    if len(a.shape) != 2 or len(b.shape) != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"qgemm shape mismatch: {a.shape} x {b.shape}", a=a.shape, b=b.shape)
    return dequantize(a) @ dequantize(b)


# ===============================================
# LAYER-WISE PRECISION POLICY
# ===============================================

class Precision(str, Enum):
    FP8 = "FP8"
    HIGH = "HIGH"


@dataclass(frozen=True)
class PrecisionPolicy:
    high_precision_prefix: int = 4
    high_precision_suffix: int = 4

    @classmethod
    def reference_default(cls) -> "PrecisionPolicy":
        """First 4 and last 4 layers kept in high precision."""
        return cls(4, 4)

    def validate(self, n_layers: int) -> None:
        if self.high_precision_prefix < 0 or self.high_precision_suffix < 0:
            raise ValueError("precision policy counts must be non-negative")
        if self.high_precision_prefix + self.high_precision_suffix > n_layers:
            raise ValueError(
                f"prefix {self.high_precision_prefix} + suffix {self.high_precision_suffix} "
                f"exceeds {n_layers} layers"
            )


def assign_precision(layer_index: int, n_layers: int, policy: PrecisionPolicy) -> Precision:
    """
    HIGH for the first `prefix` and last `suffix` layers, FP8 otherwise.

    Raises:
        ValueError: If layer_index is outside [0, n_layers) or the policy does not fit
    """
    if not 0 <= layer_index < n_layers:
        raise ValueError(f"layer index {layer_index} out of range for {n_layers} layers")
    policy.validate(n_layers)
    if layer_index < policy.high_precision_prefix:
        return Precision.HIGH
    if layer_index >= n_layers - policy.high_precision_suffix:
        return Precision.HIGH
    return Precision.FP8
