"""
hybrid_model.py - Hybrid Mamba-2 / attention / FFN language model on the tape

This module provides:
- ArchSpec: the layer-type sequence plus per-type dimensions (JSON round-trip)
- build_architecture: alternate Mamba-2/FFN, then insert ~8% attention layers
  each immediately before an FFN at evenly spaced points
- build_transformer_baseline: attention/FFN alternation with rotary positions
- Layer forwards (Mamba-2 mixer, grouped-query attention, squared-ReLU FFN,
  RMSNorm) and the pre-norm residual model forward
- Decode-time states: MambaState (constant size) and KvCache (grows by one
  entry per token)
- Parameter init, shapes and the closed-form parameter count

Architecture:
- Every layer is x <- x + Layer(rmsnorm(x)); final rmsnorm then a separate
  output head; no biases, no dropout
- Hybrid attention has no positional encoding; the Transformer baseline sets
  ArchSpec.rope and rotates queries/keys
- Linear layers inside the stack go through the `linear` primitive so the
  precision policy can route them to FP8; embedding and head stay high
  precision
"""

import logging
import math
from dataclasses import asdict, dataclass, fields, replace
from enum import Enum
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from autodiff import GradTape, Tensor, ssd_chunked
from common import LOG_LEVEL, ShapeError
from fp8 import Precision, PrecisionPolicy, assign_precision

logger = logging.getLogger(__name__)
logger.setLevel(LOG_LEVEL)

# ===============================================
# CONSTANTS
# ===============================================

RMS_EPS = 1e-6
INIT_STD = 0.02
DEFAULT_CHUNK = 16
ROPE_BASE = 10000.0
DEFAULT_ATTN_FRACTION = 0.08

# Desk-scale dimensions used when a builder caller does not pass its own
DESK_DIMS: Dict[str, Any] = {
    "d_model": 64,
    "d_ffn": 256,
    "n_q_heads": 4,
    "n_kv_heads": 2,
    "d_state": 16,
    "n_groups": 1,
    "mamba_head_dim": 32,
    "mamba_expand": 2,
    "conv_window": 4,
    "vocab_size": 258,
}

# Published model families (vocabulary size assumed, the rest as published)
PUBLISHED_SPECS: Dict[str, Dict[str, Any]] = {
    "8B": {"total_layers": 52, "attn_fraction": 0.08, "d_model": 4096, "d_ffn": 21504,
           "n_q_heads": 32, "n_kv_heads": 8, "d_state": 128, "n_groups": 8,
           "mamba_head_dim": 64, "mamba_expand": 2, "conv_window": 4, "vocab_size": 131072},
    "56B": {"total_layers": 118, "attn_fraction": 0.085, "d_model": 8192, "d_ffn": 32768,
            "n_q_heads": 64, "n_kv_heads": 8, "d_state": 256, "n_groups": 8,
            "mamba_head_dim": 64, "mamba_expand": 2, "conv_window": 4, "vocab_size": 131072},
}


class LayerKind(str, Enum):
    MAMBA2 = "Mamba2"
    ATTENTION = "Attention"
    FFN = "FFN"

    @property
    def short(self) -> str:
        return {"Mamba2": "M", "Attention": "A", "FFN": "F"}[self.value]


_PARAM_GROUP = {LayerKind.MAMBA2: "mamba", LayerKind.ATTENTION: "attn", LayerKind.FFN: "ffn"}

# Projections writing into the residual stream get depth-scaled init
_RESIDUAL_OUTPUTS = {"mamba.out_proj", "attn.o_proj", "ffn.down_proj"}


# ===============================================
# ARCHITECTURE SPEC
# ===============================================

@dataclass
class ArchSpec:
    """Layer-type sequence plus per-type dimensions."""

    layers: List[LayerKind]
    d_model: int
    d_ffn: int
    n_q_heads: int
    n_kv_heads: int
    d_state: int
    n_groups: int
    mamba_head_dim: int = 64
    mamba_expand: int = 2
    conv_window: int = 4
    vocab_size: int = 258
    rope: bool = False

    def __post_init__(self):
        self.layers = [LayerKind(k) for k in self.layers]
        self.validate()

    # ---- derived dimensions ----

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_q_heads

    @property
    def d_inner(self) -> int:
        return self.mamba_expand * self.d_model

    @property
    def n_mamba_heads(self) -> int:
        return self.d_inner // self.mamba_head_dim

    @property
    def conv_dim(self) -> int:
        return self.d_inner + 2 * self.n_groups * self.d_state

    @property
    def d_in_proj(self) -> int:
        return 2 * self.d_inner + 2 * self.n_groups * self.d_state + self.n_mamba_heads

    def counts(self) -> Dict[str, int]:
        return {kind.value: sum(1 for k in self.layers if k == kind) for kind in LayerKind}

    def layer_ids(self, kind: LayerKind) -> List[int]:
        return [i for i, k in enumerate(self.layers) if k == kind]

    def pattern(self) -> str:
        return "".join(k.short for k in self.layers)

    def validate(self) -> None:
        """Dimension rules; raises ValueError on the first violation."""
        positive = ("d_model", "d_ffn", "n_q_heads", "n_kv_heads", "d_state", "n_groups",
                    "mamba_head_dim", "mamba_expand", "conv_window", "vocab_size")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.d_model % self.n_q_heads:
            raise ValueError("d_model must be divisible by n_q_heads")
        if self.n_q_heads % self.n_kv_heads:
            raise ValueError("n_q_heads must be divisible by n_kv_heads")
        if self.d_inner % self.mamba_head_dim:
            raise ValueError("mamba_expand * d_model must be divisible by mamba_head_dim")
        if self.n_mamba_heads % self.n_groups:
            raise ValueError("Mamba-2 heads must be divisible by n_groups")
        if self.rope and self.head_dim % 2:
            raise ValueError("rotary encoding needs an even head_dim")

    def placement_violations(self) -> List[str]:
        """Hybrid placement rules that this spec breaks (empty list when sound)."""
        problems = []
        if not self.layers:
            return ["no layers"]
        if self.layers[0] != LayerKind.MAMBA2:
            problems.append("first layer is not Mamba2")
        if self.layers[-1] != LayerKind.FFN:
            problems.append("last layer is not FFN")
        for i, kind in enumerate(self.layers):
            if kind == LayerKind.ATTENTION and (i + 1 >= len(self.layers) or self.layers[i + 1] != LayerKind.FFN):
                problems.append(f"attention layer {i} is not followed by FFN")
        counts = self.counts()
        if counts["FFN"] - counts["Mamba2"] not in (0, 1):
            problems.append(f"{counts['Mamba2']} Mamba2 vs {counts['FFN']} FFN breaks the even split")
        return problems

    # ---- serialization ----

    def to_dict(self) -> Dict[str, Any]:
        d = asdict(self)
        d["layers"] = [k.value for k in self.layers]
        return d

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "ArchSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"Unknown ArchSpec fields: {sorted(unknown)}")
        return cls(**d)

    def with_changes(self, **changes: Any) -> "ArchSpec":
        return replace(self, **changes)


def build_layer_pattern(total_layers: int, attn_fraction: float = DEFAULT_ATTN_FRACTION) -> List[LayerKind]:
    """
    Alternate-then-insert construction of the hybrid layer sequence.

    n_attn = round(attn_fraction * total) (half rounds up); the rest splits
    evenly between Mamba2 and FFN with any odd layer going to FFN. Attention
    i lands right before FFN number floor((i + 0.5) * n_ffn / n_attn).

    Raises:
        ValueError: If total_layers < 4 or the counts cannot be placed
    """
    if total_layers < 4:
        raise ValueError(f"need at least 4 layers, got {total_layers}")
    if not 0.0 <= attn_fraction < 1.0:
        raise ValueError(f"attn_fraction must be in [0, 1), got {attn_fraction}")
    n_attn = int(math.floor(attn_fraction * total_layers + 0.5))
    rest = total_layers - n_attn
    n_mamba = rest // 2
    n_ffn = rest - n_mamba
    if n_mamba < 1 or n_attn > n_ffn:
        raise ValueError(
            f"infeasible counts for {total_layers} layers: {n_attn} attention, "
            f"{n_mamba} Mamba2, {n_ffn} FFN"
        )

    base: List[LayerKind] = []
    for _ in range(n_mamba):
        base += [LayerKind.MAMBA2, LayerKind.FFN]
    if n_ffn > n_mamba:
        base.append(LayerKind.FFN)

    insert_before = {((2 * i + 1) * n_ffn) // (2 * n_attn) for i in range(n_attn)}
    layers: List[LayerKind] = []
    ffn_index = 0
    for kind in base:
        if kind == LayerKind.FFN:
            if ffn_index in insert_before:
                layers.append(LayerKind.ATTENTION)
            ffn_index += 1
        layers.append(kind)
    return layers


def build_architecture(total_layers: int, attn_fraction: float = DEFAULT_ATTN_FRACTION, **dims: Any) -> ArchSpec:
    """
    Build a hybrid ArchSpec that satisfies every placement rule.

    Args:
        total_layers: Total layer count (>= 4)
        attn_fraction: Target share of attention layers (~0.08)
        **dims: ArchSpec dimension overrides (DESK_DIMS otherwise)
    """
    spec = ArchSpec(layers=build_layer_pattern(total_layers, attn_fraction), **{**DESK_DIMS, **dims})
    problems = spec.placement_violations()
    if problems:
        raise AssertionError(f"builder produced an unsound pattern: {problems}")
    logger.debug(f"Built {total_layers}-layer hybrid {spec.pattern()}")
    return spec


def build_transformer_baseline(total_layers: int, **dims: Any) -> ArchSpec:
    """Attention/FFN alternation with rotary positions and the same dimensions."""
    if total_layers < 2 or total_layers % 2:
        raise ValueError(f"baseline needs an even layer count >= 2, got {total_layers}")
    layers = [LayerKind.ATTENTION, LayerKind.FFN] * (total_layers // 2)
    return ArchSpec(layers=layers, rope=True, **{**DESK_DIMS, **dims})


def published_spec(name: str) -> ArchSpec:
    """ArchSpec with the published dimensions of the 8B or 56B family."""
    cfg = dict(PUBLISHED_SPECS[name])
    return build_architecture(cfg.pop("total_layers"), cfg.pop("attn_fraction"), **cfg)


# ===============================================
# PARAMETERS
# ===============================================

def layer_parameter_shapes(spec: ArchSpec, kind: LayerKind) -> Dict[str, Tuple[int, ...]]:
    d = spec.d_model
    if kind == LayerKind.MAMBA2:
        heads = spec.n_mamba_heads
        return {
            "mamba.in_proj": (spec.d_in_proj, d),
            "mamba.conv_weight": (spec.conv_dim, spec.conv_window),
            "mamba.dt_bias": (heads,),
            "mamba.A_log": (heads,),
            "mamba.D": (spec.d_inner,),
            "mamba.gate_norm": (spec.d_inner,),
            "mamba.out_proj": (d, spec.d_inner),
        }
    if kind == LayerKind.ATTENTION:
        q_dim = spec.n_q_heads * spec.head_dim
        kv_dim = spec.n_kv_heads * spec.head_dim
        return {
            "attn.q_proj": (q_dim, d),
            "attn.k_proj": (kv_dim, d),
            "attn.v_proj": (kv_dim, d),
            "attn.o_proj": (d, q_dim),
        }
    return {
        "ffn.up_proj": (spec.d_ffn, d),     # rows are neurons
        "ffn.down_proj": (d, spec.d_ffn),
    }


def parameter_shapes(spec: ArchSpec) -> Dict[str, Tuple[int, ...]]:
    """Name -> shape for every parameter, in a fixed order."""
    shapes: Dict[str, Tuple[int, ...]] = {"embed": (spec.vocab_size, spec.d_model)}
    for i, kind in enumerate(spec.layers):
        shapes[f"layers.{i}.norm"] = (spec.d_model,)
        for name, shape in layer_parameter_shapes(spec, kind).items():
            shapes[f"layers.{i}.{name}"] = shape
    shapes["final_norm"] = (spec.d_model,)
    shapes["lm_head"] = (spec.vocab_size, spec.d_model)
    return shapes


def count_params(spec: ArchSpec) -> int:
    """Exact parameter count from the dimensions (no tensors allocated)."""
    d, v = spec.d_model, spec.vocab_size
    per_kind = {
        LayerKind.MAMBA2: (spec.d_in_proj * d + spec.conv_dim * spec.conv_window
                           + 2 * spec.n_mamba_heads + 2 * spec.d_inner + d * spec.d_inner),
        LayerKind.ATTENTION: 2 * d * spec.n_q_heads * spec.head_dim + 2 * d * spec.n_kv_heads * spec.head_dim,
        LayerKind.FFN: 2 * d * spec.d_ffn,
    }
    total = 2 * v * d + d
    for kind in spec.layers:
        total += d + per_kind[kind]
    return total


def init_params(spec: ArchSpec, seed: int = 0, dtype: Any = np.float32) -> Dict[str, np.ndarray]:
    """
    Initialize parameters.

    normal(0, 0.02) for weights, normal(0, 0.02 / sqrt(2 * n_layers)) for
    residual-output projections, ones for norm gains and D; A_log and dt_bias
    follow the usual Mamba-2 ranges (A in [1, 16], dt in [1e-3, 1e-1]).
    """
    rng = np.random.default_rng(seed)
    residual_std = INIT_STD / math.sqrt(2 * max(spec.n_layers, 1))
    params: Dict[str, np.ndarray] = {}
    for name, shape in parameter_shapes(spec).items():
        short = name.split(".", 2)[-1] if name.startswith("layers.") else name
        if short in ("norm", "final_norm", "mamba.gate_norm", "mamba.D"):
            value = np.ones(shape)
        elif short == "mamba.A_log":
            value = np.log(rng.uniform(1.0, 16.0, size=shape))
        elif short == "mamba.dt_bias":
            dt = np.exp(rng.uniform(math.log(1e-3), math.log(1e-1), size=shape))
            value = dt + np.log(-np.expm1(-dt))  # inverse softplus
        elif short in _RESIDUAL_OUTPUTS:
            value = rng.normal(0.0, residual_std, size=shape)
        else:
            value = rng.normal(0.0, INIT_STD, size=shape)
        params[name] = value.astype(dtype)
    return params


@dataclass
class HybridModel:
    """An ArchSpec together with its parameter arrays."""

    spec: ArchSpec
    params: Dict[str, np.ndarray]

    def __post_init__(self):
        expected = parameter_shapes(self.spec)
        if set(expected) != set(self.params):
            missing = sorted(set(expected) - set(self.params))
            extra = sorted(set(self.params) - set(expected))
            raise ShapeError("parameters do not match spec", missing=missing[:5], extra=extra[:5])
        for name, shape in expected.items():
            if tuple(self.params[name].shape) != shape:
                raise ShapeError(f"{name}: shape {self.params[name].shape}, expected {shape}")

    @classmethod
    def initialize(cls, spec: ArchSpec, seed: int = 0, dtype: Any = np.float32) -> "HybridModel":
        return cls(spec, init_params(spec, seed, dtype))

    @property
    def dtype(self) -> np.dtype:
        return self.params["embed"].dtype

    def copy(self) -> "HybridModel":
        return HybridModel(replace(self.spec), {k: v.copy() for k, v in self.params.items()})

    def astype(self, dtype: Any) -> "HybridModel":
        return HybridModel(replace(self.spec), {k: v.astype(dtype) for k, v in self.params.items()})


# ===============================================
# DECODE-TIME STATE
# ===============================================

@dataclass
class MambaState:
    """Recurrent state of one Mamba-2 layer; size never depends on tokens seen."""

    ssm_state: np.ndarray   # (heads, head_dim, d_state)
    conv_state: np.ndarray  # (conv_window - 1, conv_dim) last raw conv inputs

    @classmethod
    def zeros(cls, spec: ArchSpec, dtype: Any = np.float32) -> "MambaState":
        return cls(
            np.zeros((spec.n_mamba_heads, spec.mamba_head_dim, spec.d_state), dtype=dtype),
            np.zeros((spec.conv_window - 1, spec.conv_dim), dtype=dtype),
        )

    @property
    def nbytes(self) -> int:
        return int(self.ssm_state.nbytes + self.conv_state.nbytes)


@dataclass
class KvCache:
    """Keys/values of one attention layer, (n_kv_heads, tokens_seen, head_dim)."""

    keys: np.ndarray
    values: np.ndarray

    @classmethod
    def empty(cls, spec: ArchSpec, dtype: Any = np.float32) -> "KvCache":
        shape = (spec.n_kv_heads, 0, spec.head_dim)
        return cls(np.zeros(shape, dtype=dtype), np.zeros(shape, dtype=dtype))

    @property
    def tokens_seen(self) -> int:
        return int(self.keys.shape[1])

    @property
    def nbytes(self) -> int:
        return int(self.keys.nbytes + self.values.nbytes)


LayerState = Union[MambaState, KvCache]


# ===============================================
# LAYERS
# ===============================================

def bind_parameters(tape: GradTape, params: Dict[str, np.ndarray], trainable: bool = True) -> Dict[str, Tensor]:
    """Register every parameter on the tape (as gradient leaves when trainable)."""
    return {name: tape.leaf(arr, requires_grad=trainable) for name, arr in params.items()}


def _layer_view(bound: Dict[str, Tensor], index: int) -> Dict[str, Tensor]:
    prefix = f"layers.{index}."
    return {name[len(prefix):]: t for name, t in bound.items() if name.startswith(prefix)}


def rmsnorm(tape: GradTape, x: Tensor, gain: Tensor, eps: float = RMS_EPS) -> Tensor:
    """x / sqrt(mean(x^2) + eps) * gain over the last axis."""
    return tape.rmsnorm(x, gain, eps)


def ffn_forward(tape: GradTape, p: Dict[str, Tensor], x: Tensor,
                precision: Precision = Precision.HIGH,
                capture: Optional[Callable[[np.ndarray], None]] = None) -> Tensor:
    """squared_relu(x W1^T) W2^T with W1 = up_proj (d_ffn x d), W2 = down_proj (d x d_ffn)."""
    hidden = tape.squared_relu(tape.linear(x, p["ffn.up_proj"], precision))
    if capture is not None:
        capture(hidden.data)
    return tape.linear(hidden, p["ffn.down_proj"], precision)


def attention_forward(tape: GradTape, p: Dict[str, Tensor], x: Tensor, spec: ArchSpec,
                      precision: Precision = Precision.HIGH,
                      cache: Optional[KvCache] = None) -> Tuple[Tensor, Optional[KvCache]]:
    """
    Causal grouped-query attention.

    Query head h reads kv head h // (n_q_heads / n_kv_heads). With a cache the
    new keys/values are appended and the returned cache holds them all.

    Raises:
        ShapeError: If the cache does not match the spec
    """
    length = x.shape[0]
    hd, n_q, n_kv = spec.head_dim, spec.n_q_heads, spec.n_kv_heads
    offset = 0
    if cache is not None:
        if cache.keys.shape[0] != n_kv or cache.keys.shape[2] != hd:
            raise ShapeError(f"kv cache {cache.keys.shape} does not match spec heads/head_dim")
        offset = cache.tokens_seen

    def heads(t: Tensor, n: int) -> Tensor:
        return tape.transpose(tape.reshape(t, (length, n, hd)), (1, 0, 2))

    q = heads(tape.linear(x, p["attn.q_proj"], precision), n_q)
    k = heads(tape.linear(x, p["attn.k_proj"], precision), n_kv)
    v = heads(tape.linear(x, p["attn.v_proj"], precision), n_kv)
    positions = np.arange(offset, offset + length)
    if spec.rope:
        q = tape.rope(q, positions, ROPE_BASE)
        k = tape.rope(k, positions, ROPE_BASE)

    new_cache = None
    if cache is not None:
        if offset:
            k = tape.concat([tape.constant(cache.keys), k], axis=1)
            v = tape.concat([tape.constant(cache.values), v], axis=1)
        new_cache = KvCache(np.ascontiguousarray(k.data), np.ascontiguousarray(v.data))

    group_of = np.arange(n_q) // (n_q // n_kv)
    k_full = tape.take(k, group_of, axis=0)
    v_full = tape.take(v, group_of, axis=0)
    scores = tape.scale(tape.einsum("hqd,hkd->hqk", q, k_full), 1.0 / math.sqrt(hd))
    visible = np.arange(offset + length)[None, :] <= positions[:, None]
    probs = tape.softmax(scores, mask=visible)
    out = tape.einsum("hqk,hkd->hqd", probs, v_full)
    out = tape.reshape(tape.transpose(out, (1, 0, 2)), (length, n_q * hd))
    return tape.linear(out, p["attn.o_proj"], precision), new_cache


def mamba2_chunked_forward(tape: GradTape, p: Dict[str, Tensor], x: Tensor, spec: ArchSpec,
                           chunk: Optional[int] = DEFAULT_CHUNK,
                           precision: Precision = Precision.HIGH,
                           state: Optional[MambaState] = None) -> Tuple[Tensor, Optional[MambaState]]:
    """
    Mamba-2 mixer over a whole sequence.

    in_proj -> [z | x B C | dt]; causal depthwise conv + SiLU on xBC;
    dt = softplus(dt + dt_bias); selective scan with A = -exp(A_log);
    y = scan + D * x; y = rmsnorm(y * silu(z)); out_proj.

    Args:
        chunk: Chunk length for the chunked scan; None runs the sequential scan
        state: Optional starting state; when given, the final state is returned

    Raises:
        ShapeError: If input/state dimensions do not match the spec
    """
    length = x.shape[0]
    if x.shape != (length, spec.d_model) or length < 1:
        raise ShapeError(f"mamba2 input {x.shape}, expected (seq >= 1, {spec.d_model})")
    di, gn, heads, hp = spec.d_inner, spec.n_groups * spec.d_state, spec.n_mamba_heads, spec.mamba_head_dim
    if state is not None and state.ssm_state.shape != (heads, hp, spec.d_state):
        raise ShapeError(f"mamba state {state.ssm_state.shape} does not match spec")

    zxbcdt = tape.linear(x, p["mamba.in_proj"], precision)
    z = tape.slice(zxbcdt, -1, 0, di)
    xbc_raw = tape.slice(zxbcdt, -1, di, di + spec.conv_dim)
    dt_raw = tape.slice(zxbcdt, -1, di + spec.conv_dim, spec.d_in_proj)

    prefix = state.conv_state if state is not None else None
    xbc = tape.silu(tape.causal_conv1d(xbc_raw, p["mamba.conv_weight"], prefix))
    xs = tape.reshape(tape.slice(xbc, -1, 0, di), (length, heads, hp))
    b = tape.reshape(tape.slice(xbc, -1, di, di + gn), (length, spec.n_groups, spec.d_state))
    c = tape.reshape(tape.slice(xbc, -1, di + gn, di + 2 * gn), (length, spec.n_groups, spec.d_state))

    dt = tape.softplus(tape.add(dt_raw, p["mamba.dt_bias"]))
    a_neg = tape.scale(tape.exp(p["mamba.A_log"]), -1.0)
    h0_data = state.ssm_state if state is not None else np.zeros((heads, hp, spec.d_state))
    h0 = tape.constant(h0_data)

    if chunk is None:
        y, h_last = tape.ssd_scan(xs, dt, a_neg, b, c, h0)
    else:
        y, h_last = ssd_chunked(tape, xs, dt, a_neg, b, c, h0, chunk)

    y = tape.add(y, tape.mul(xs, tape.reshape(p["mamba.D"], (heads, hp))))
    y = tape.mul(tape.reshape(y, (length, di)), tape.silu(z))
    y = tape.rmsnorm(y, p["mamba.gate_norm"], RMS_EPS)
    out = tape.linear(y, p["mamba.out_proj"], precision)

    new_state = None
    if state is not None:
        history = np.concatenate([state.conv_state, xbc_raw.data.astype(state.conv_state.dtype)], axis=0)
        new_state = MambaState(
            h_last.data.astype(state.ssm_state.dtype, copy=True),
            history[-(spec.conv_window - 1):].copy() if spec.conv_window > 1 else history[:0].copy(),
        )
    return out, new_state


def mamba2_step(state: MambaState, x_t: np.ndarray, params: Dict[str, np.ndarray], spec: ArchSpec,
                precision: Precision = Precision.HIGH) -> Tuple[np.ndarray, MambaState]:
    """
    One decode step of a Mamba-2 mixer (work and memory independent of t).

    Args:
        state: State after the previous token
        x_t: (d_model,) normalized input of this token
        params: This layer's parameters keyed "mamba.*"

    Returns:
        (y_t of shape (d_model,), the next state)
    """
    tape = GradTape(dtype=state.ssm_state.dtype, record=False)
    p = {name: tape.constant(arr) for name, arr in params.items()}
    x = tape.constant(np.asarray(x_t).reshape(1, spec.d_model))
    out, new_state = mamba2_chunked_forward(tape, p, x, spec, chunk=None, precision=precision, state=state)
    return out.data[0], new_state


# ===============================================
# MODEL FORWARD
# ===============================================

def layer_precisions(spec: ArchSpec, policy: Optional[PrecisionPolicy]) -> List[Precision]:
    if policy is None:
        return [Precision.HIGH] * spec.n_layers
    return [assign_precision(i, spec.n_layers, policy) for i in range(spec.n_layers)]


def model_forward(model: HybridModel, tokens: Sequence[int], *,
                  tape: Optional[GradTape] = None,
                  bound: Optional[Dict[str, Tensor]] = None,
                  policy: Optional[PrecisionPolicy] = None,
                  skip_layers: Sequence[int] = (),
                  capture: Optional[Callable[[int, np.ndarray], None]] = None,
                  chunk: Optional[int] = DEFAULT_CHUNK,
                  states: Optional[Dict[int, LayerState]] = None,
                  return_hidden: bool = False) -> Tensor:
    """
    Pre-norm residual forward: x <- x + Layer(rmsnorm(x)) per layer, then the
    final norm and the output head.

    Args:
        model: Spec and parameters
        tokens: Token ids (1-D, each < vocab_size)
        tape: Tape to record on (a non-recording one is created if omitted)
        bound: Parameters already registered on tape (training binds them once)
        policy: FP8 precision policy; None keeps every layer high precision
        skip_layers: Layers bypassed through their residual connection
        capture: Called as capture(layer_index, ffn_activation) for FFN layers
        chunk: Chunk length of the Mamba-2 scan (None: sequential scan)
        states: Per-layer decode states (MambaState / KvCache), replaced in place
        return_hidden: Return the normalized pre-head activation instead of logits

    Returns:
        (seq, vocab) logits, or (seq, d_model) hidden when return_hidden

    Raises:
        ValueError: If a token id is outside [0, vocab_size)
    """
    spec = model.spec
    ids = np.asarray(tokens, dtype=np.int64).reshape(-1)
    if ids.size == 0:
        raise ValueError("model_forward needs at least one token")
    if ids.min() < 0 or ids.max() >= spec.vocab_size:
        raise ValueError(f"token id outside [0, {spec.vocab_size})")

    if tape is None:
        tape = GradTape(dtype=model.dtype, record=False)
    if bound is None:
        bound = bind_parameters(tape, model.params, trainable=False)
    precisions = layer_precisions(spec, policy)
    skip = set(skip_layers)

    x = tape.take(bound["embed"], ids, axis=0)
    for i, kind in enumerate(spec.layers):
        if i in skip:
            continue
        p = _layer_view(bound, i)
        h = rmsnorm(tape, x, p["norm"])
        if kind == LayerKind.MAMBA2:
            state = states.get(i) if states is not None else None
            branch, new_state = mamba2_chunked_forward(tape, p, h, spec, chunk, precisions[i], state)
            if states is not None:
                states[i] = new_state
        elif kind == LayerKind.ATTENTION:
            cache = states.get(i) if states is not None else None
            branch, new_cache = attention_forward(tape, p, h, spec, precisions[i], cache)
            if states is not None:
                states[i] = new_cache
        else:
            hook = (lambda act, _i=i: capture(_i, act)) if capture is not None else None
            branch = ffn_forward(tape, p, h, precisions[i], hook)
        x = tape.add(x, branch)

    hidden = rmsnorm(tape, x, bound["final_norm"])
    if return_hidden:
        return hidden
    return tape.linear(hidden, bound["lm_head"], Precision.HIGH)


def fresh_layer_states(spec: ArchSpec, dtype: Any = np.float32) -> Dict[int, LayerState]:
    """Empty decode states for every Mamba-2 and attention layer."""
    states: Dict[int, LayerState] = {}
    for i, kind in enumerate(spec.layers):
        if kind == LayerKind.MAMBA2:
            states[i] = MambaState.zeros(spec, dtype)
        elif kind == LayerKind.ATTENTION:
            states[i] = KvCache.empty(spec, dtype)
    return states


def predict_logits(model: HybridModel, tokens: Sequence[int], policy: Optional[PrecisionPolicy] = None,
                   chunk: Optional[int] = DEFAULT_CHUNK) -> np.ndarray:
    """Evaluation-mode logits as a plain array."""
    return model_forward(model, tokens, policy=policy, chunk=chunk).data
