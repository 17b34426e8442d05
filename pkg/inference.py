"""
inference.py - Prefill, incremental decode and decode-cost accounting

This module provides:
- DecodeState: per-sequence KV caches (attention layers) and recurrent
  states (Mamba-2 layers) plus the position counter
- prefill / decode_step / decode with greedy or seeded temperature sampling
- decode_step_flops + FlopLedger: analytic per-token FLOPs by layer kind
  (multiply-accumulates count 2; Mamba conv and scan included)
- memory_report / weight_bytes / max_feasible_batch: closed-form memory
  estimate and the largest batch that fits a byte budget
- throughput_bench: wall-clock tokens/sec, FLOPs/token and the comparison
  against an equal-depth attention/FFN baseline

Architecture:
- Mamba-2 state bytes never change with position; each attention layer's
  cache grows by n_kv_heads * head_dim keys and values per token
- Decoding reuses the training forward on one token with states threaded
  through, so decode logits equal teacher-forced logits
"""

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np

from common import LOG_LEVEL, MemoryBudgetError, SamplerError
from fp8 import PrecisionPolicy
from hybrid_model import (
    DEFAULT_CHUNK,
    ArchSpec,
    HybridModel,
    KvCache,
    LayerKind,
    MambaState,
    build_transformer_baseline,
    count_params,
    fresh_layer_states,
    model_forward,
)
from run_logger import log_bench_complete

logger = logging.getLogger(__name__)
logger.setLevel(LOG_LEVEL)

GIB = 1 << 30

# Desk engine keeps caches and states in float32
DEFAULT_ELEM_BYTES = 4


# ===============================================
# SAMPLERS
# ===============================================

class Sampler:
    """Maps last-position logits to the next token id."""

    def __call__(self, logits: np.ndarray) -> int:
        raise NotImplementedError


class GreedySampler(Sampler):
    def __call__(self, logits: np.ndarray) -> int:
        return int(np.argmax(logits))


class TemperatureSampler(Sampler):
    """Softmax(logits / temperature) sampling from a seeded generator."""

    def __init__(self, temperature: float = 1.0, seed: int = 0):
        if not temperature > 0:
            raise SamplerError("temperature must be positive", temperature=temperature)
        self.temperature = temperature
        self.rng = np.random.default_rng(seed)

    def __call__(self, logits: np.ndarray) -> int:
        z = np.asarray(logits, dtype=np.float64) / self.temperature
        p = np.exp(z - z.max())
        return int(self.rng.choice(len(p), p=p / p.sum()))


def make_sampler(name: str, temperature: float = 1.0, seed: int = 0) -> Sampler:
    if name == "greedy":
        return GreedySampler()
    if name == "temperature":
        return TemperatureSampler(temperature, seed)
    raise SamplerError(f"Unknown sampler: {name}", known=["greedy", "temperature"])


# ===============================================
# DECODE STATE
# ===============================================

@dataclass
class DecodeState:
    kv: Dict[int, KvCache]
    mamba: Dict[int, MambaState]
    position: int = 0
    last_logits: Optional[np.ndarray] = None

    @classmethod
    def fresh(cls, spec: ArchSpec, dtype: Any = np.float32) -> "DecodeState":
        states = fresh_layer_states(spec, dtype)
        return cls(
            kv={i: s for i, s in states.items() if isinstance(s, KvCache)},
            mamba={i: s for i, s in states.items() if isinstance(s, MambaState)},
        )

    def layer_states(self) -> Dict[int, Any]:
        return {**self.kv, **self.mamba}

    def absorb(self, states: Dict[int, Any]) -> None:
        for i, s in states.items():
            if isinstance(s, KvCache):
                self.kv[i] = s
            else:
                self.mamba[i] = s

    def kv_bytes(self) -> int:
        return sum(c.nbytes for c in self.kv.values())

    def state_bytes(self) -> int:
        return sum(s.nbytes for s in self.mamba.values())


def _run(model: HybridModel, state: DecodeState, tokens: Sequence[int],
         policy: Optional[PrecisionPolicy], chunk: Optional[int]) -> np.ndarray:
    states = state.layer_states()
    logits = model_forward(model, tokens, policy=policy, chunk=chunk, states=states).data
    state.absorb(states)
    state.position += len(tokens)
    state.last_logits = logits[-1].copy()
    return logits


def prefill(model: HybridModel, prompt: Sequence[int], budget_bytes: Optional[int] = None,
            policy: Optional[PrecisionPolicy] = None,
            chunk: Optional[int] = DEFAULT_CHUNK) -> tuple:
    """
    Process the whole prompt and build the decode state.

    Args:
        model: Model to run
        prompt: Non-empty token ids
        budget_bytes: Optional memory budget checked before any work
        policy: Optional FP8 precision policy

    Returns:
        (logits at the last prompt position, DecodeState)

    Raises:
        ValueError: If the prompt is empty
        MemoryBudgetError: If weights + caches + states exceed budget_bytes
    """
    if len(prompt) == 0:
        raise ValueError("prefill needs a non-empty prompt")
    if budget_bytes is not None:
        check_budget(
            memory_report(model.spec, seq=len(prompt), batch=1, weight_bits=model.dtype.itemsize * 8,
                          kv_elem_bytes=model.dtype.itemsize, state_elem_bytes=model.dtype.itemsize),
            budget_bytes,
        )
    state = DecodeState.fresh(model.spec, model.dtype)
    _run(model, state, prompt, policy, chunk)
    return state.last_logits, state


def decode_step(model: HybridModel, state: DecodeState, token: int,
                policy: Optional[PrecisionPolicy] = None) -> np.ndarray:
    """Feed one token; returns its logits and advances state by one position."""
    return _run(model, state, [token], policy, None)[-1]


def decode(model: HybridModel, state: DecodeState, n_tokens: int, sampler: Sampler,
           ledger: Optional["FlopLedger"] = None,
           policy: Optional[PrecisionPolicy] = None) -> List[int]:
    """
    Generate n_tokens tokens after the state's current position.

    Each generated token is sampled from the state's last logits and then fed
    back, so the state always ends one step past the final token.

    Raises:
        SamplerError: If sampler is not a Sampler
        ValueError: If the state has no logits yet (prefill first)
    """
    if not isinstance(sampler, Sampler):
        raise SamplerError(f"invalid sampler: {type(sampler).__name__}")
    if n_tokens <= 0:
        return []
    if state.last_logits is None:
        raise ValueError("decode needs a prefilled state")
    out: List[int] = []
    for _ in range(n_tokens):
        token = sampler(state.last_logits)
        out.append(token)
        if ledger is not None:
            ledger.record(decode_step_flops(model.spec, state.position))
        decode_step(model, state, token, policy)
    return out


# ===============================================
# FLOP ACCOUNTING
# ===============================================

def layer_step_flops(spec: ArchSpec, kind: LayerKind, position: int) -> int:
    """FLOPs of one layer for one token that sees `position` earlier tokens."""
    d = spec.d_model
    if kind == LayerKind.MAMBA2:
        heads, hp, n = spec.n_mamba_heads, spec.mamba_head_dim, spec.d_state
        in_proj = 2 * d * spec.d_in_proj
        conv = 2 * spec.conv_dim * spec.conv_window
        scan = 6 * heads * hp * n          # decay + outer-product update, C readout
        skip = 2 * spec.d_inner
        out_proj = 2 * spec.d_inner * d
        return in_proj + conv + scan + skip + out_proj
    if kind == LayerKind.ATTENTION:
        q_dim = spec.n_q_heads * spec.head_dim
        kv_dim = spec.n_kv_heads * spec.head_dim
        projections = 2 * d * (q_dim + 2 * kv_dim) + 2 * q_dim * d
        reads = 4 * q_dim * (position + 1)  # scores and weighted values
        return projections + reads
    return 4 * d * spec.d_ffn


def decode_step_flops(spec: ArchSpec, position: int) -> Dict[str, int]:
    """Per-kind FLOPs of the decode step at `position` (plus output head and total)."""
    totals = {kind.value: 0 for kind in LayerKind}
    for kind in spec.layers:
        totals[kind.value] += layer_step_flops(spec, kind, position)
    totals["head"] = 2 * spec.d_model * spec.vocab_size
    totals["total"] = sum(totals.values())
    return totals


@dataclass
class FlopLedger:
    steps: List[Dict[str, int]] = field(default_factory=list)

    def record(self, breakdown: Dict[str, int]) -> None:
        self.steps.append(dict(breakdown))

    def totals(self) -> Dict[str, int]:
        out: Dict[str, int] = {}
        for step in self.steps:
            for k, v in step.items():
                out[k] = out.get(k, 0) + v
        return out

    def per_token(self) -> float:
        if not self.steps:
            return 0.0
        return self.totals()["total"] / len(self.steps)


def generation_flops_per_token(spec: ArchSpec, prompt_len: int, gen_len: int) -> float:
    """Mean decode FLOPs per generated token for a prompt_len prompt."""
    if gen_len <= 0:
        return 0.0
    total = sum(decode_step_flops(spec, prompt_len + t)["total"] for t in range(gen_len))
    return total / gen_len


# ===============================================
# MEMORY
# ===============================================

@dataclass
class MemoryReport:
    seq: int
    batch: int
    weight_bits: int
    weight_bytes: int
    kv_bytes: int
    state_bytes: int
    activation_reserve: int = 0

    @property
    def total_bytes(self) -> int:
        return self.weight_bytes + self.kv_bytes + self.state_bytes + self.activation_reserve

    def components(self) -> Dict[str, int]:
        return {
            "weights": self.weight_bytes,
            "kv_cache": self.kv_bytes,
            "mamba_state": self.state_bytes,
            "activations": self.activation_reserve,
        }

    def to_dict(self) -> Dict[str, Any]:
        d = asdict(self)
        d["total_bytes"] = self.total_bytes
        d["total_gib"] = self.total_bytes / GIB
        return d


def weight_bytes(n_params: int, bits: float, overhead_fraction: float = 0.0) -> int:
    """n_params * bits / 8, optionally inflated by overhead_fraction."""
    return int(round(n_params * bits / 8 * (1.0 + overhead_fraction)))


def kv_cache_bytes(spec: ArchSpec, seq: int, batch: int, elem_bytes: int = DEFAULT_ELEM_BYTES) -> int:
    n_attn = spec.counts()[LayerKind.ATTENTION.value]
    return n_attn * 2 * spec.n_kv_heads * spec.head_dim * seq * batch * elem_bytes


def mamba_state_bytes(spec: ArchSpec, batch: int, elem_bytes: int = DEFAULT_ELEM_BYTES) -> int:
    n_mamba = spec.counts()[LayerKind.MAMBA2.value]
    per_layer = (spec.n_mamba_heads * spec.mamba_head_dim * spec.d_state
                 + (spec.conv_window - 1) * spec.conv_dim)
    return n_mamba * per_layer * batch * elem_bytes


def memory_report(spec: ArchSpec, seq: int, batch: int, weight_bits: float,
                  kv_elem_bytes: int = DEFAULT_ELEM_BYTES, state_elem_bytes: int = DEFAULT_ELEM_BYTES,
                  overhead_fraction: float = 0.0, activation_reserve: int = 0) -> MemoryReport:
    """
    Closed-form inference memory for batch sequences of seq tokens.

    Raises:
        ValueError: If seq, batch or weight_bits is not positive
    """
    if seq < 1 or batch < 1 or weight_bits <= 0:
        raise ValueError("seq, batch and weight_bits must be positive")
    return MemoryReport(
        seq=seq,
        batch=batch,
        weight_bits=weight_bits,
        weight_bytes=weight_bytes(count_params(spec), weight_bits, overhead_fraction),
        kv_bytes=kv_cache_bytes(spec, seq, batch, kv_elem_bytes),
        state_bytes=mamba_state_bytes(spec, batch, state_elem_bytes),
        activation_reserve=activation_reserve,
    )


def check_budget(report: MemoryReport, budget_bytes: int) -> None:
    """
    Raises:
        MemoryBudgetError: Naming the component that first crosses the budget
    """
    used = 0
    for component, size in report.components().items():
        used += size
        if used > budget_bytes:
            raise MemoryBudgetError(
                f"{component} pushes memory to {used} bytes, budget is {budget_bytes}",
                component=component,
                required_bytes=report.total_bytes,
                budget_bytes=budget_bytes,
            )


def max_feasible_batch(fits: Callable[[int], bool], limit: int = 1 << 20) -> int:
    """
    Largest batch b <= limit with fits(b), assuming fits is monotone.

    Doubles until the first failure, then bisects. Returns 0 when batch 1
    does not fit.
    """
    if not fits(1):
        return 0
    good = 1
    while good < limit:
        trial = min(good * 2, limit)
        if not fits(trial):
            bad = trial
            break
        good = trial
    else:
        return good
    while bad - good > 1:
        mid = (good + bad) // 2
        if fits(mid):
            good = mid
        else:
            bad = mid
    return good


def max_batch_under_budget(spec: ArchSpec, seq: int, weight_bits: float, budget_bytes: int,
                           **report_kwargs: Any) -> int:
    return max_feasible_batch(
        lambda b: memory_report(spec, seq, b, weight_bits, **report_kwargs).total_bytes <= budget_bytes
    )


# ===============================================
# BENCHMARK
# ===============================================

def equal_depth_baseline(spec: ArchSpec) -> ArchSpec:
    """Attention/FFN baseline with the same dimensions and (rounded down to even) depth."""
    depth = max(2, spec.n_layers - spec.n_layers % 2)
    return build_transformer_baseline(
        depth,
        d_model=spec.d_model, d_ffn=spec.d_ffn, n_q_heads=spec.n_q_heads, n_kv_heads=spec.n_kv_heads,
        d_state=spec.d_state, n_groups=spec.n_groups, mamba_head_dim=spec.mamba_head_dim,
        mamba_expand=spec.mamba_expand, conv_window=spec.conv_window, vocab_size=spec.vocab_size,
    )


def throughput_bench(model: HybridModel, prompt_len: int, gen_len: int, batch: int,
                     budget_bytes: Optional[int] = None, seed: int = 0,
                     sampler: Optional[Sampler] = None, memory_seq: Optional[int] = None,
                     weight_bits: Optional[float] = None, kv_elem_bytes: Optional[int] = None,
                     state_elem_bytes: Optional[int] = None, overhead_fraction: float = 0.0,
                     activation_reserve: int = 0) -> Dict[str, Any]:
    """
    Prefill batch random prompts, decode gen_len tokens for each in lockstep.

    The memory report and budget checks size the KV cache for memory_seq
    tokens (prompt_len + gen_len by default). Unset element sizes follow
    the model dtype.

    Returns:
        Report {prompt_len, gen_len, batch, tokens_per_sec, flops_per_token,
        memory, max_feasible_batch, baseline, prefill_seconds, decode_seconds}

    Raises:
        MemoryBudgetError: If even batch 1 exceeds budget_bytes, or the
            requested batch does not fit
    """
    spec = model.spec
    elem = model.dtype.itemsize
    seq = memory_seq or prompt_len + gen_len
    bits = weight_bits or elem * 8
    report_kwargs = {
        "kv_elem_bytes": kv_elem_bytes or elem,
        "state_elem_bytes": state_elem_bytes or elem,
        "overhead_fraction": overhead_fraction,
        "activation_reserve": activation_reserve,
    }
    memory = memory_report(spec, seq, batch, bits, **report_kwargs)
    max_batch = None
    if budget_bytes is not None:
        max_batch = max_batch_under_budget(spec, seq, bits, budget_bytes, **report_kwargs)
        if max_batch == 0:
            check_budget(memory_report(spec, seq, 1, bits, **report_kwargs), budget_bytes)
        check_budget(memory, budget_bytes)

    sampler = sampler or GreedySampler()
    rng = np.random.default_rng(seed)
    prompts = rng.integers(0, min(spec.vocab_size, 256), size=(batch, prompt_len))

    started = time.perf_counter()
    states = [prefill(model, p)[1] for p in prompts]
    prefill_seconds = time.perf_counter() - started

    ledger = FlopLedger()
    started = time.perf_counter()
    for _ in range(gen_len):
        for i, state in enumerate(states):
            decode(model, state, 1, sampler, ledger if i == 0 else None)
    decode_seconds = time.perf_counter() - started

    baseline = equal_depth_baseline(spec)
    report = {
        "prompt_len": prompt_len,
        "gen_len": gen_len,
        "batch": batch,
        "tokens_per_sec": (batch * gen_len / decode_seconds) if decode_seconds > 0 else None,
        "flops_per_token": ledger.per_token(),
        "flops_by_kind": ledger.totals(),
        "memory": memory.to_dict(),
        "max_feasible_batch": max_batch,
        "baseline": {
            "layers": baseline.n_layers,
            "pattern": baseline.pattern(),
            "flops_per_token": generation_flops_per_token(baseline, prompt_len, gen_len),
            "kv_bytes": kv_cache_bytes(baseline, seq, batch, elem),
        },
        "prefill_seconds": prefill_seconds,
        "decode_seconds": decode_seconds,
    }
    log_bench_complete(report)
    return report
