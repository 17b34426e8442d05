"""
training.py - Desk-scale pre-training loop

This module provides:
- TrainConfig: optimizer, schedule and precision settings (Adam betas 0.9/0.95,
  weight decay 0.1, cosine decay to 1% of peak, no batch-size ramp-up)
- BlendSchedule: phased data blending with switch points at fractions of the
  token budget (0 / 60% / 80% by default, optional fourth phase)
- lr_at, adam_step, clip_by_global_norm, sample_batch: the pieces of a step
- train: the loop itself, writing one interval record every 1% of tokens
- loss_gap / compare_precision: relative training-loss gap between a
  full-precision and an FP8 mixed-precision run of the same seed

Architecture:
- Parameters are float32 master copies; FP8 only touches the linear layers
  selected by the precision policy (forward operands E4M3, gradients E5M2)
- Optimizer moments stay high precision
- A step with non-finite gradients is skipped and counted, not applied
- A non-finite loss aborts the run with TrainingDivergedError
- Batches are drawn synchronously from one seeded generator so a fixed seed
  gives bit-identical run logs
"""

import logging
import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from autodiff import GradTape, backward
from common import LOG_LEVEL, SHOW_PROGRESS, ConfigError, CorpusError, NonFiniteError, TrainingDivergedError
from fp8 import PrecisionPolicy
from hybrid_model import DEFAULT_CHUNK, HybridModel, bind_parameters, model_forward
from run_logger import RunLogWriter, log_step_skipped, log_train_interval

logger = logging.getLogger(__name__)
logger.setLevel(LOG_LEVEL)

# Phase switch points as fractions of the token budget
DEFAULT_PHASE_STARTS = (0.0, 0.6, 0.8)


class PrecisionMode(str, Enum):
    FULL = "FULL"
    FP8_MIXED = "FP8_MIXED"


# ===============================================
# CONFIGURATION
# ===============================================

@dataclass
class TrainConfig:
    """
    Optimizer/schedule settings.

    total_tokens == 0 is a valid no-op run (the model is returned untouched);
    otherwise warmup_tokens must be below total_tokens.
    """

    peak_lr: float = 3e-3
    min_lr_fraction: float = 0.01
    warmup_tokens: int = 0
    total_tokens: int = 0
    batch_tokens: int = 16384
    weight_decay: float = 0.1
    adam_beta1: float = 0.9
    adam_beta2: float = 0.95
    seq_len: int = 256
    precision_mode: PrecisionMode = PrecisionMode.FULL
    adam_eps: float = 1e-8
    grad_clip: float = 1.0
    eval_interval_fraction: float = 0.01
    eval_sequences: int = 8
    high_precision_prefix: int = 4
    high_precision_suffix: int = 4
    seed: int = 0

    def __post_init__(self):
        self.precision_mode = PrecisionMode(self.precision_mode)
        self.validate()

    def validate(self) -> None:
        problems = []
        if self.total_tokens < 0 or self.warmup_tokens < 0:
            problems.append("token counts must be non-negative")
        elif self.total_tokens > 0 and self.warmup_tokens >= self.total_tokens:
            problems.append("warmup_tokens must be below total_tokens")
        elif self.total_tokens == 0 and self.warmup_tokens:
            problems.append("warmup_tokens must be 0 when total_tokens is 0")
        if self.peak_lr < 0:
            problems.append("peak_lr must be non-negative")
        if not 0 < self.min_lr_fraction <= 1:
            problems.append("min_lr_fraction must be in (0, 1]")
        if self.weight_decay < 0:
            problems.append("weight_decay must be non-negative")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            problems.append("Adam betas must be in [0, 1)")
        if self.seq_len < 1 or self.batch_tokens < self.seq_len:
            problems.append("need seq_len >= 1 and batch_tokens >= seq_len")
        if self.adam_eps <= 0 or self.grad_clip <= 0:
            problems.append("adam_eps and grad_clip must be positive")
        if not 0 < self.eval_interval_fraction <= 1 or self.eval_sequences < 1:
            problems.append("eval_interval_fraction in (0, 1] and eval_sequences >= 1 required")
        if problems:
            raise ConfigError("invalid training config", problems=problems)

    @property
    def batch_size(self) -> int:
        return self.batch_tokens // self.seq_len

    @property
    def tokens_per_step(self) -> int:
        return self.batch_size * self.seq_len

    @property
    def total_steps(self) -> int:
        return math.ceil(self.total_tokens / self.tokens_per_step)

    def policy(self) -> Optional[PrecisionPolicy]:
        if self.precision_mode == PrecisionMode.FULL:
            return None
        return PrecisionPolicy(self.high_precision_prefix, self.high_precision_suffix)

    def to_dict(self) -> Dict[str, Any]:
        d = asdict(self)
        d["precision_mode"] = self.precision_mode.value
        return d


@dataclass
class BlendSchedule:
    """Phases of (start_fraction, category -> weight); the last started phase is active."""

    phases: List[Tuple[float, Dict[str, float]]]

    def __post_init__(self):
        self.phases = [(float(start), dict(weights)) for start, weights in self.phases]
        self.validate()

    def validate(self) -> None:
        if not self.phases:
            raise ConfigError("blend schedule needs at least one phase")
        starts = [start for start, _ in self.phases]
        if starts[0] != 0.0:
            raise ConfigError("first blend phase must start at 0", starts=starts)
        if any(b <= a for a, b in zip(starts, starts[1:])) or starts[-1] >= 1.0:
            raise ConfigError("blend phase starts must be strictly increasing and below 1", starts=starts)
        for start, weights in self.phases:
            if any(w < 0 for w in weights.values()) or sum(weights.values()) <= 0:
                raise ConfigError("blend weights must be non-negative with a positive sum", phase_start=start)

    @classmethod
    def single(cls, category: str) -> "BlendSchedule":
        return cls([(0.0, {category: 1.0})])

    @classmethod
    def phased(cls, categories: Sequence[str], fourth_phase_start: Optional[float] = None,
               weights: Optional[Sequence[Dict[str, float]]] = None) -> "BlendSchedule":
        """
        Phase boundaries at 0 / 0.6 / 0.8 (plus an optional fourth start).

        Without explicit weights every phase weighs all categories equally.
        """
        starts = list(DEFAULT_PHASE_STARTS)
        if fourth_phase_start is not None:
            starts.append(float(fourth_phase_start))
        if weights is None:
            weights = [{c: 1.0 for c in categories} for _ in starts]
        if len(weights) != len(starts):
            raise ConfigError(f"{len(starts)} phases need {len(starts)} weight maps, got {len(weights)}")
        return cls(list(zip(starts, weights)))

    def phase_index(self, progress: float) -> int:
        index = 0
        for i, (start, _) in enumerate(self.phases):
            if progress >= start:
                index = i
        return index

    def weights_at(self, progress: float) -> Dict[str, float]:
        return self.phases[self.phase_index(progress)][1]

    def to_dict(self) -> Dict[str, Any]:
        return {"phases": [{"start": s, "weights": w} for s, w in self.phases]}


# ===============================================
# SCHEDULE AND OPTIMIZER
# ===============================================

def lr_at(config: TrainConfig, tokens_seen: float) -> float:
    """
    Linear warmup to peak_lr, then cosine decay to min_lr_fraction * peak_lr.

    Raises:
        ValueError: If tokens_seen is outside [0, total_tokens]
    """
    if not 0 <= tokens_seen <= config.total_tokens:
        raise ValueError(f"tokens_seen {tokens_seen} outside [0, {config.total_tokens}]")
    peak = config.peak_lr
    if tokens_seen < config.warmup_tokens:
        return peak * tokens_seen / config.warmup_tokens
    decay_span = config.total_tokens - config.warmup_tokens
    if decay_span <= 0:
        return peak
    progress = (tokens_seen - config.warmup_tokens) / decay_span
    floor = config.min_lr_fraction * peak
    return floor + 0.5 * (peak - floor) * (1.0 + math.cos(math.pi * progress))


@dataclass
class AdamState:
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    skipped_steps: int = 0


def adam_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.95, eps: float = 1e-8,
              weight_decay: float = 0.0) -> Dict[str, np.ndarray]:
    """
    Adam with bias-corrected moments and decoupled weight decay.

    Weight decay applies to matrices only (norm gains and per-head scalars
    are exempt). Non-finite gradients skip the whole step and bump
    state.skipped_steps; params come back unchanged.

    Returns:
        New parameter dict (input arrays are not mutated)

    Raises:
        ValueError: If grads and params do not cover the same shapes
    """
    for name, p in params.items():
        g = grads.get(name)
        if g is None or g.shape != p.shape:
            raise ValueError(f"gradient for {name} missing or mis-shaped")
    if not all(np.all(np.isfinite(g)) for g in grads.values()):
        state.skipped_steps += 1
        log_step_skipped(state.step + 1, "non-finite gradient", state.skipped_steps)
        return params

    state.step += 1
    t = state.step
    bias1 = 1.0 - beta1 ** t
    bias2 = 1.0 - beta2 ** t
    updated: Dict[str, np.ndarray] = {}
    for name, p in params.items():
        g = grads[name].astype(np.float64)
        m = beta1 * state.m.get(name, 0.0) + (1.0 - beta1) * g
        v = beta2 * state.v.get(name, 0.0) + (1.0 - beta2) * g * g
        state.m[name], state.v[name] = m, v
        step = lr * (m / bias1) / (np.sqrt(v / bias2) + eps)
        new = p.astype(np.float64)
        if weight_decay and p.ndim >= 2:
            new = new - lr * weight_decay * new
        updated[name] = (new - step).astype(p.dtype)
    return updated


def clip_by_global_norm(grads: Dict[str, np.ndarray], max_norm: float) -> Tuple[Dict[str, np.ndarray], float]:
    """Scale all gradients down together when their global L2 norm exceeds max_norm."""
    norm = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    if not math.isfinite(norm) or norm <= max_norm:
        return grads, norm
    factor = max_norm / norm
    return {k: (g * factor).astype(g.dtype) for k, g in grads.items()}, norm


# ===============================================
# BATCHES
# ===============================================

@dataclass
class Batch:
    tokens: np.ndarray            # (batch, seq_len + 1)
    categories: List[str]

    @property
    def inputs(self) -> np.ndarray:
        return self.tokens[:, :-1]

    @property
    def targets(self) -> np.ndarray:
        return self.tokens[:, 1:]


def choose_categories(weights: Dict[str, float], n: int, rng: np.random.Generator) -> List[str]:
    """Draw n category names with probability proportional to weights."""
    names = sorted(k for k, w in weights.items() if w > 0)
    probs = np.array([weights[k] for k in names], dtype=np.float64)
    picks = rng.choice(len(names), size=n, p=probs / probs.sum())
    return [names[i] for i in picks]


def sample_batch(blend: BlendSchedule, tokens_seen: int, total_tokens: int,
                 corpora: Dict[str, np.ndarray], rng: np.random.Generator,
                 batch_size: int, seq_len: int) -> Batch:
    """
    Draw batch_size windows of seq_len + 1 tokens.

    Each window's category is drawn from the blend phase active at
    tokens_seen / total_tokens; its start is uniform within the corpus.

    Raises:
        CorpusError: If a positively weighted category has no usable corpus
    """
    progress = tokens_seen / total_tokens if total_tokens else 0.0
    weights = blend.weights_at(progress)
    for name, w in weights.items():
        if w > 0 and (name not in corpora or len(corpora[name]) < seq_len + 1):
            raise CorpusError(
                f"corpus '{name}' has positive blend weight but fewer than {seq_len + 1} tokens",
                category=name,
            )
    categories = choose_categories(weights, batch_size, rng)
    rows = []
    for name in categories:
        stream = corpora[name]
        start = int(rng.integers(0, len(stream) - seq_len))
        rows.append(stream[start:start + seq_len + 1])
    return Batch(np.stack(rows).astype(np.int64), categories)


def validation_windows(corpora: Dict[str, np.ndarray], seq_len: int, n_sequences: int,
                       seed: int) -> List[np.ndarray]:
    """Fixed evaluation windows spread evenly over every validation stream."""
    rng = np.random.default_rng([seed, 7919])
    windows = []
    for name in sorted(corpora):
        stream = corpora[name]
        length = min(seq_len, len(stream) - 1)
        if length < 1:
            continue
        for _ in range(n_sequences):
            start = int(rng.integers(0, len(stream) - length))
            windows.append(stream[start:start + length + 1].astype(np.int64))
    return windows


# ===============================================
# LOSS AND GRADIENTS
# ===============================================

def sequence_loss(model: HybridModel, sequences: Sequence[np.ndarray],
                  policy: Optional[PrecisionPolicy] = None,
                  chunk: Optional[int] = DEFAULT_CHUNK) -> float:
    """Mean next-token cross-entropy without recording a tape."""
    tape = GradTape(dtype=model.dtype, record=False)
    bound = bind_parameters(tape, model.params, trainable=False)
    losses = []
    for seq in sequences:
        logits = model_forward(model, seq[:-1], tape=tape, bound=bound, policy=policy, chunk=chunk)
        losses.append(tape.cross_entropy(logits, seq[1:]).item())
    return float(np.mean(losses))


def loss_and_grads(model: HybridModel, sequences: Sequence[np.ndarray],
                   loss_builder: Optional[Callable] = None,
                   policy: Optional[PrecisionPolicy] = None,
                   chunk: Optional[int] = DEFAULT_CHUNK) -> Tuple[float, Dict[str, np.ndarray]]:
    """
    Mean loss over sequences and its gradient w.r.t. every parameter.

    Args:
        loss_builder: loss_builder(tape, logits, sequence_index, sequence) -> scalar
            Tensor; next-token cross-entropy when omitted
    """
    tape = GradTape(dtype=model.dtype)
    bound = bind_parameters(tape, model.params, trainable=True)
    total = None
    for i, seq in enumerate(sequences):
        logits = model_forward(model, seq[:-1], tape=tape, bound=bound, policy=policy, chunk=chunk)
        if loss_builder is None:
            term = tape.cross_entropy(logits, seq[1:])
        else:
            term = loss_builder(tape, logits, i, seq)
        total = term if total is None else tape.add(total, term)
    loss = tape.scale(total, 1.0 / len(sequences))
    backward(tape, loss)
    grads = {name: tape.grad(t) for name, t in bound.items()}
    return loss.item(), grads


# ===============================================
# TRAINING LOOP
# ===============================================

@dataclass
class TrainResult:
    model: HybridModel
    log: List[Dict[str, Any]]
    optimizer: AdamState

    @property
    def final_val_loss(self) -> Optional[float]:
        return self.log[-1]["val_loss"] if self.log else None


def train(model: HybridModel, config: TrainConfig, blend: BlendSchedule,
          corpora: Dict[str, np.ndarray], val_corpora: Optional[Dict[str, np.ndarray]] = None,
          writer: Optional[RunLogWriter] = None, chunk: Optional[int] = DEFAULT_CHUNK) -> TrainResult:
    """
    Train a copy of model for config.total_tokens tokens.

    Args:
        model: Starting point (not mutated)
        config: Optimizer, schedule and precision settings
        blend: Phased category weights
        corpora: Category name -> training token stream
        val_corpora: Validation streams (training streams when omitted)
        writer: Optional NDJSON sink for interval records

    Returns:
        TrainResult with the trained model and interval records
        {tokens, step, lr, train_loss, val_loss, mode}

    Raises:
        TrainingDivergedError: If the loss becomes non-finite
    """
    model = model.copy()
    state = AdamState()
    if config.total_tokens == 0:
        logger.info("total_tokens is 0; returning the initial model")
        return TrainResult(model, [], state)

    policy = config.policy()
    if policy is not None:
        policy.validate(model.spec.n_layers)
    rng = np.random.default_rng(config.seed)
    windows = validation_windows(val_corpora or corpora, config.seq_len, config.eval_sequences, config.seed)
    interval = max(config.tokens_per_step, int(config.total_tokens * config.eval_interval_fraction))
    mode = config.precision_mode.value

    log: List[Dict[str, Any]] = []
    tokens_seen = 0
    next_eval = interval
    recent: List[float] = []
    steps = range(1, config.total_steps + 1)
    for step in tqdm(steps, desc=f"train[{mode}]", disable=not SHOW_PROGRESS):
        lr = lr_at(config, tokens_seen)
        batch = sample_batch(blend, tokens_seen, config.total_tokens, corpora, rng,
                             config.batch_size, config.seq_len)
        try:
            loss, grads = loss_and_grads(model, list(batch.tokens), policy=policy, chunk=chunk)
        except NonFiniteError as e:
            raise TrainingDivergedError(
                f"loss became non-finite at step {step}", step=step, tokens=tokens_seen, lr=lr, cause=e.message,
            )
        if not math.isfinite(loss):
            raise TrainingDivergedError(f"loss became non-finite at step {step}", step=step, tokens=tokens_seen)
        grads, _ = clip_by_global_norm(grads, config.grad_clip)
        model.params = adam_step(model.params, grads, state, lr, config.adam_beta1, config.adam_beta2,
                                 config.adam_eps, config.weight_decay)
        tokens_seen = min(tokens_seen + config.tokens_per_step, config.total_tokens)
        recent.append(loss)

        if tokens_seen >= next_eval or step == config.total_steps:
            record = {
                "tokens": tokens_seen,
                "step": step,
                "lr": lr,
                "train_loss": float(np.mean(recent)),
                "val_loss": sequence_loss(model, windows, policy, chunk),
                "mode": mode,
            }
            log.append(record)
            log_train_interval(record, writer)
            recent = []
            while next_eval <= tokens_seen:
                next_eval += interval

    if state.skipped_steps:
        logger.warning(f"⚠️  {state.skipped_steps} steps skipped for non-finite gradients")
    logger.info(f"✅ Trained {config.total_steps} steps ({tokens_seen} tokens, {mode})")
    return TrainResult(model, log, state)


# ===============================================
# FP8 LOSS GAP
# ===============================================

def loss_gap(full_log: Sequence[Dict[str, Any]], fp8_log: Sequence[Dict[str, Any]]) -> List[Dict[str, Any]]:
    """
    Per-interval relative gaps (L_fp8 - L_full) / L_full for train and val loss.

    Raises:
        ValueError: If the two logs do not cover the same intervals
    """
    if len(full_log) != len(fp8_log):
        raise ValueError(f"logs have {len(full_log)} and {len(fp8_log)} intervals")
    gaps = []
    for full, fp8 in zip(full_log, fp8_log):
        if full["tokens"] != fp8["tokens"]:
            raise ValueError(f"interval mismatch at tokens {full['tokens']} vs {fp8['tokens']}")
        gaps.append({
            "tokens": full["tokens"],
            "step": full["step"],
            "full_train_loss": full["train_loss"],
            "fp8_train_loss": fp8["train_loss"],
            "train_gap": (fp8["train_loss"] - full["train_loss"]) / full["train_loss"],
            "full_val_loss": full["val_loss"],
            "fp8_val_loss": fp8["val_loss"],
            "val_gap": (fp8["val_loss"] - full["val_loss"]) / full["val_loss"],
        })
    return gaps


def gap_summary(gaps: Sequence[Dict[str, Any]]) -> Dict[str, Any]:
    """Typical (median absolute) and final relative gaps."""
    if not gaps:
        return {"intervals": 0, "typical_train_gap": None, "typical_val_gap": None, "final_val_gap": None}
    return {
        "intervals": len(gaps),
        "typical_train_gap": float(np.median([abs(g["train_gap"]) for g in gaps])),
        "typical_val_gap": float(np.median([abs(g["val_gap"]) for g in gaps])),
        "final_val_gap": gaps[-1]["val_gap"],
    }


def compare_precision(model: HybridModel, config: TrainConfig, blend: BlendSchedule,
                      corpora: Dict[str, np.ndarray], val_corpora: Optional[Dict[str, np.ndarray]] = None,
                      writers: Optional[Dict[str, RunLogWriter]] = None,
                      chunk: Optional[int] = DEFAULT_CHUNK) -> Dict[str, Any]:
    """Train FULL and FP8_MIXED from the same init and seed; return both results and the gap series."""
    writers = writers or {}
    results: Dict[str, TrainResult] = {}
    for mode in PrecisionMode:
        cfg = TrainConfig(**{**config.to_dict(), "precision_mode": mode})
        logger.info(f"🔄 Training {mode.value} run")
        results[mode.value] = train(model, cfg, blend, corpora, val_corpora, writers.get(mode.value), chunk)
    gaps = loss_gap(results["FULL"].log, results["FP8_MIXED"].log)
    return {"results": results, "gaps": gaps, "summary": gap_summary(gaps)}
