"""
minipuzzle.py - Pruning + distillation pipeline for hybrid models

Stages:
1. Importance: per-layer MSE at the pre-head activation when the layer is
   bypassed; per-neuron FFN scores from aggregated squared-ReLU activations
2. Search: enumerate (attention, Mamba-2, FFN counts, FFN width) grid points,
   keep the most important layers/neurons, drop anything over the memory budget
3. Scoring: next-token accuracy and parent agreement on held-out text,
   combined by min-rank; top-k1 benchmarked; top-k2 short-distilled
4. Distillation: forward-KL logit distillation (temperature 1.0), short for
   the shortlist, extended (9x the short budget) for the winner
5. Merging: elementwise interpolation between two compatible checkpoints

Candidate scoring is parallel over a ThreadPoolExecutor; the parent's
weights are shared read-only and results are merged by candidate id, so the
report order never depends on worker timing.
"""

import itertools
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import spearmanr
from tqdm import tqdm

from common import (
    LOG_LEVEL,
    SHOW_PROGRESS,
    CorpusError,
    NoFeasibleCandidatesError,
    NonFiniteError,
    ShapeError,
    canonical_json,
)
from hybrid_model import ArchSpec, HybridModel, LayerKind, model_forward, predict_logits
from inference import DEFAULT_ELEM_BYTES, memory_report
from run_logger import RunLogWriter, log_candidate_scored, log_distill_interval
from training import (
    AdamState,
    BlendSchedule,
    TrainConfig,
    adam_step,
    clip_by_global_norm,
    loss_and_grads,
    lr_at,
    sample_batch,
    sequence_loss,
    validation_windows,
)

logger = logging.getLogger(__name__)
logger.setLevel(LOG_LEVEL)

AGGREGATIONS = ("mean", "l2")

# Short:extended distillation token budgets
EXTENDED_RATIO = 9


# ===============================================
# TYPES
# ===============================================

@dataclass
class LayerImportance:
    """Layer index -> mean MSE of the pre-head activation with that layer bypassed."""

    scores: Dict[int, float]

    def top(self, layer_ids: Sequence[int], n: int) -> List[int]:
        """The n most important of layer_ids (ties keep the earlier layer)."""
        ranked = sorted(layer_ids, key=lambda i: (-self.scores[i], i))
        return sorted(ranked[:n])

    def to_dict(self) -> Dict[str, float]:
        return {str(i): float(s) for i, s in sorted(self.scores.items())}

    @classmethod
    def from_dict(cls, d: Dict[str, float]) -> "LayerImportance":
        return cls({int(k): float(v) for k, v in d.items()})


@dataclass
class NeuronImportance:
    """FFN layer index -> per-neuron score vector of length d_ffn."""

    scores: Dict[int, np.ndarray]
    seq_agg: str = "mean"
    batch_agg: str = "l2"

    def keep(self, layer: int, width: int) -> np.ndarray:
        """Indices of the width highest-scoring neurons, in original order."""
        s = self.scores[layer]
        if width > len(s):
            raise ShapeError(f"width {width} exceeds {len(s)} neurons in layer {layer}")
        order = np.argsort(-s, kind="stable")
        return np.sort(order[:width])

    def to_dict(self) -> Dict[str, Any]:
        return {
            "seq_agg": self.seq_agg,
            "batch_agg": self.batch_agg,
            "scores": {str(i): v.tolist() for i, v in sorted(self.scores.items())},
        }

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "NeuronImportance":
        scores = {int(k): np.asarray(v, dtype=np.float64) for k, v in d["scores"].items()}
        return cls(scores, d.get("seq_agg", "mean"), d.get("batch_agg", "l2"))


@dataclass
class SearchGrid:
    n_attention: List[int]
    n_mamba: List[int]
    n_ffn: List[int]
    ffn_widths: List[int]

    def __post_init__(self):
        if not all([self.n_attention, self.n_mamba, self.n_ffn, self.ffn_widths]):
            raise ValueError("search grid needs at least one value per axis")

    def points(self):
        return itertools.product(self.n_attention, self.n_mamba, self.n_ffn, self.ffn_widths)

    @property
    def size(self) -> int:
        return len(self.n_attention) * len(self.n_mamba) * len(self.n_ffn) * len(self.ffn_widths)


@dataclass
class CandidateReport:
    candidate_id: str
    spec: ArchSpec
    kept_layer_ids: List[int]
    ffn_width: int
    memory_bytes: int
    next_token_accuracy: Optional[float] = None
    parent_agreement: Optional[float] = None
    benchmark_avg: Optional[float] = None
    post_short_distill_avg: Optional[float] = None
    combined_rank: Optional[int] = None

    @property
    def sort_spec(self) -> str:
        return canonical_json(self.spec.to_dict(), indent=None)

    def to_dict(self) -> Dict[str, Any]:
        d = asdict(self)
        d["spec"] = self.spec.to_dict()
        d["pattern"] = self.spec.pattern()
        return d

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "CandidateReport":
        d = {k: v for k, v in d.items() if k != "pattern"}
        d["spec"] = ArchSpec.from_dict(d["spec"])
        return cls(**d)


def write_reports_jsonl(path: str, reports: Sequence[CandidateReport]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for r in reports:
            f.write(canonical_json(r.to_dict(), indent=None))


def read_reports_jsonl(path: str) -> List[CandidateReport]:
    with open(path, "r", encoding="utf-8") as f:
        return [CandidateReport.from_dict(json.loads(line)) for line in f if line.strip()]


# ===============================================
# IMPORTANCE
# ===============================================

def aggregate(values: np.ndarray, kind: str, axis: int = 0) -> np.ndarray:
    """mean: mean(|S|); l2: sqrt(sum(S^2)) along axis."""
    values = np.asarray(values, dtype=np.float64)
    if kind == "mean":
        return np.mean(np.abs(values), axis=axis)
    if kind == "l2":
        return np.sqrt(np.sum(values * values, axis=axis))
    raise ValueError(f"Unknown aggregation: {kind} (expected one of {AGGREGATIONS})")


def _hidden(model: HybridModel, tokens: np.ndarray, skip: Sequence[int] = ()) -> np.ndarray:
    return model_forward(model, tokens, skip_layers=skip, return_hidden=True).data.astype(np.float64)


def layer_importance(parent: HybridModel, calib: Sequence[np.ndarray]) -> LayerImportance:
    """
    Score every layer by the mean (over samples) MSE of the pre-head
    activation when that layer is bypassed through its residual.

    Raises:
        ValueError: If calib is empty
    """
    if not calib:
        raise ValueError("layer importance needs at least one calibration sample")
    totals = np.zeros(parent.spec.n_layers)
    for tokens in calib:
        full = _hidden(parent, tokens)
        for i in range(parent.spec.n_layers):
            diff = full - _hidden(parent, tokens, skip=[i])
            totals[i] += float(np.mean(diff * diff))
    return LayerImportance({i: totals[i] / len(calib) for i in range(parent.spec.n_layers)})


def ffn_neuron_importance(parent: HybridModel, calib: Sequence[np.ndarray],
                          seq_agg: str = "mean", batch_agg: str = "l2") -> NeuronImportance:
    """
    Per-neuron scores of every FFN layer from its squared-ReLU activations.

    The sequence aggregation is applied per sample first, then the batch
    aggregation across samples.

    Raises:
        ValueError: If calib is empty or an aggregation is unknown
    """
    if not calib:
        raise ValueError("neuron importance needs at least one calibration sample")
    for kind in (seq_agg, batch_agg):
        if kind not in AGGREGATIONS:
            raise ValueError(f"Unknown aggregation: {kind} (expected one of {AGGREGATIONS})")
    per_sample: Dict[int, List[np.ndarray]] = {i: [] for i in parent.spec.layer_ids(LayerKind.FFN)}

    def capture(layer: int, act: np.ndarray) -> None:
        per_sample[layer].append(aggregate(act, seq_agg, axis=0))

    for tokens in calib:
        model_forward(parent, tokens, capture=capture)
    scores = {i: aggregate(np.stack(v), batch_agg, axis=0) for i, v in per_sample.items()}
    return NeuronImportance(scores, seq_agg, batch_agg)


# ===============================================
# CANDIDATES
# ===============================================

def default_search_grid(parent: ArchSpec, keep_fraction: float = 0.5, n_widths: int = 9) -> SearchGrid:
    """
    Layer counts from ceil(keep_fraction * n) to n per kind; FFN widths
    stepping down from the parent width in strides of d_ffn / 32.
    """
    counts = parent.counts()

    def span(n: int) -> List[int]:
        low = max(1, math.ceil(keep_fraction * n)) if n else 0
        return list(range(low, n + 1))

    stride = max(1, parent.d_ffn // 32)
    widths = [parent.d_ffn - k * stride for k in range(n_widths) if parent.d_ffn - k * stride > 0]
    return SearchGrid(span(counts["Attention"]), span(counts["Mamba2"]), span(counts["FFN"]), widths)


def child_spec(parent: ArchSpec, kept_layer_ids: Sequence[int], ffn_width: int) -> ArchSpec:
    return parent.with_changes(layers=[parent.layers[i] for i in kept_layer_ids], d_ffn=ffn_width)


def enumerate_candidates(parent: ArchSpec, grid: SearchGrid, budget_bytes: float,
                         importance: LayerImportance, seq: int = 1024, batch: int = 1,
                         weight_bits: float = 32, kv_elem_bytes: int = DEFAULT_ELEM_BYTES,
                         state_elem_bytes: int = DEFAULT_ELEM_BYTES,
                         overhead_fraction: float = 0.0, activation_reserve: int = 0) -> List[CandidateReport]:
    """
    Realize each grid point from the most important layers of each kind and
    keep the ones whose memory estimate fits budget_bytes.

    Candidate ids follow grid order ("c0000", ...), so they are stable
    across runs and independent of the budget.

    Raises:
        NoFeasibleCandidatesError: If nothing fits
    """
    ids_by_kind = {kind: parent.layer_ids(kind) for kind in LayerKind}
    reports: List[CandidateReport] = []
    for index, (n_attn, n_mamba, n_ffn, width) in enumerate(grid.points()):
        wanted = {LayerKind.ATTENTION: n_attn, LayerKind.MAMBA2: n_mamba, LayerKind.FFN: n_ffn}
        if any(n > len(ids_by_kind[k]) for k, n in wanted.items()):
            continue
        kept = sorted(itertools.chain.from_iterable(
            importance.top(ids_by_kind[k], n) for k, n in wanted.items()
        ))
        if not kept:
            continue
        spec = child_spec(parent, kept, width)
        memory = memory_report(spec, seq, batch, weight_bits, kv_elem_bytes, state_elem_bytes,
                               overhead_fraction, activation_reserve).total_bytes
        if memory > budget_bytes:
            continue
        reports.append(CandidateReport(f"c{index:04d}", spec, kept, width, memory))
    if not reports:
        raise NoFeasibleCandidatesError(
            "no candidate fits the memory budget",
            budget_bytes=budget_bytes, grid_points=grid.size,
        )
    logger.info(f"🔍 {len(reports)} of {grid.size} grid points fit {budget_bytes} bytes")
    return reports


def realize_pruned(parent: HybridModel, kept_layer_ids: Sequence[int], ffn_width: int,
                   neurons: Optional[NeuronImportance] = None) -> HybridModel:
    """
    Copy kept layers verbatim (renumbered in order) and slice every FFN to
    ffn_width neurons: rows of up_proj and matching columns of down_proj.

    Raises:
        ShapeError: If a layer id is out of range or FFN scores are missing
    """
    spec = parent.spec
    if any(not 0 <= i < spec.n_layers for i in kept_layer_ids) or len(set(kept_layer_ids)) != len(kept_layer_ids):
        raise ShapeError("kept layer ids must be unique and in range", kept=list(kept_layer_ids))
    if ffn_width > spec.d_ffn or ffn_width < 1:
        raise ShapeError(f"ffn width {ffn_width} outside [1, {spec.d_ffn}]")
    kept = sorted(kept_layer_ids)
    params = {name: parent.params[name].copy() for name in ("embed", "final_norm", "lm_head")}
    for new, old in enumerate(kept):
        prefix_old, prefix_new = f"layers.{old}.", f"layers.{new}."
        for name, arr in parent.params.items():
            if name.startswith(prefix_old):
                params[prefix_new + name[len(prefix_old):]] = arr.copy()
        if spec.layers[old] == LayerKind.FFN and ffn_width != spec.d_ffn:
            if neurons is None or old not in neurons.scores:
                raise ShapeError(f"no neuron ranking for FFN layer {old}")
            if len(neurons.scores[old]) != spec.d_ffn:
                raise ShapeError(f"neuron ranking for layer {old} has wrong length")
            idx = neurons.keep(old, ffn_width)
            params[prefix_new + "ffn.up_proj"] = params[prefix_new + "ffn.up_proj"][idx].copy()
            params[prefix_new + "ffn.down_proj"] = params[prefix_new + "ffn.down_proj"][:, idx].copy()
    return HybridModel(child_spec(spec, kept, ffn_width), params)


# ===============================================
# SCORING
# ===============================================

def greedy_predictions(model: HybridModel, samples: Sequence[np.ndarray]) -> List[np.ndarray]:
    """Argmax next-token predictions for every position but the last of each sample."""
    return [np.argmax(predict_logits(model, s[:-1]), axis=-1) if len(s) > 1 else np.zeros(0, dtype=np.int64)
            for s in samples]


def score_candidate(child: HybridModel, parent_preds: Sequence[np.ndarray],
                    samples: Sequence[np.ndarray], parent_vocab: Optional[int] = None) -> Tuple[float, float]:
    """
    (next-token accuracy, parent agreement) of child's greedy predictions.

    Raises:
        ValueError: If child and parent vocabularies differ
        CorpusError: If the samples hold no position to predict
    """
    if parent_vocab is not None and parent_vocab != child.spec.vocab_size:
        raise ValueError(f"vocab mismatch: child {child.spec.vocab_size}, parent {parent_vocab}")
    correct = agree = total = 0
    for sample, p_pred in zip(samples, parent_preds):
        if len(sample) < 2:
            continue
        c_pred = np.argmax(predict_logits(child, sample[:-1]), axis=-1)
        correct += int(np.sum(c_pred == sample[1:]))
        agree += int(np.sum(c_pred == p_pred))
        total += len(c_pred)
    if total == 0:
        raise CorpusError("no scoring positions: every sample needs at least 2 tokens",
                          samples=len(samples))
    return correct / total, agree / total


def score_candidates(parent: HybridModel, reports: Sequence[CandidateReport], neurons: NeuronImportance,
                     samples: Sequence[np.ndarray], workers: int = 1,
                     writer: Optional[RunLogWriter] = None) -> List[CandidateReport]:
    """Score every candidate (in parallel when workers > 1); results ordered by candidate id."""
    parent_preds = greedy_predictions(parent, samples)

    def job(report: CandidateReport) -> CandidateReport:
        child = realize_pruned(parent, report.kept_layer_ids, report.ffn_width, neurons)
        acc, agree = score_candidate(child, parent_preds, samples, parent.spec.vocab_size)
        return replace(report, next_token_accuracy=acc, parent_agreement=agree)

    scored: Dict[str, CandidateReport] = {}
    with ThreadPoolExecutor(max_workers=max(1, workers)) as executor:
        futures = {executor.submit(job, r): r.candidate_id for r in reports}
        for future in tqdm(as_completed(futures), total=len(futures), desc="score", disable=not SHOW_PROGRESS):
            result = future.result()
            scored[result.candidate_id] = result
    ordered = [scored[r.candidate_id] for r in sorted(reports, key=lambda r: r.candidate_id)]
    for r in ordered:
        log_candidate_scored(r.to_dict(), writer)
    return ordered


# ===============================================
# RANKING AND SELECTION
# ===============================================

def _metric_ranks(reports: Sequence[CandidateReport], metric: str) -> Dict[str, int]:
    ordered = sorted(reports, key=lambda r: (-getattr(r, metric), r.memory_bytes, r.sort_spec))
    return {r.candidate_id: rank for rank, r in enumerate(ordered)}


def combined_ranking(reports: Sequence[CandidateReport]) -> List[CandidateReport]:
    """
    Order by min(rank by accuracy, rank by agreement); ties go to lower
    memory_bytes, then the lexicographically smaller spec.
    """
    if any(r.next_token_accuracy is None or r.parent_agreement is None for r in reports):
        raise ValueError("every candidate must be scored before ranking")
    acc = _metric_ranks(reports, "next_token_accuracy")
    agr = _metric_ranks(reports, "parent_agreement")
    ranked = []
    for r in reports:
        ranked.append(replace(r, combined_rank=min(acc[r.candidate_id], agr[r.candidate_id])))
    return sorted(ranked, key=lambda r: (r.combined_rank, r.memory_bytes, r.sort_spec))


def rank_and_select(reports: Sequence[CandidateReport], k1: int, k2: int,
                    evaluate: Callable[[CandidateReport], float]) -> Tuple[List[CandidateReport], List[CandidateReport]]:
    """
    Keep the top k1 by combined rank, benchmark them with evaluate (lower is
    better) and return (benchmarked top-k1, top-k2 shortlist).

    Raises:
        ValueError: Unless k2 <= k1 <= len(reports)
    """
    if not 1 <= k2 <= k1 <= len(reports):
        raise ValueError(f"need 1 <= k2 ({k2}) <= k1 ({k1}) <= {len(reports)}")
    top = combined_ranking(reports)[:k1]
    benched = [replace(r, benchmark_avg=float(evaluate(r))) for r in top]
    shortlist = sorted(benched, key=lambda r: (r.benchmark_avg, r.memory_bytes, r.sort_spec))[:k2]
    return benched, shortlist


def benchmark_average(model: HybridModel, task_corpora: Dict[str, np.ndarray], seq_len: int = 64,
                      n_windows: int = 4, seed: int = 0) -> float:
    """Mean validation loss over the held-out task corpora, equal weights (lower is better)."""
    if not task_corpora:
        raise ValueError("benchmark needs at least one task corpus")
    losses = []
    for name in sorted(task_corpora):
        windows = validation_windows({name: task_corpora[name]}, seq_len, n_windows, seed)
        losses.append(sequence_loss(model, windows))
    return float(np.mean(losses))


def ranking_correlation(scores: Sequence[float], losses: Sequence[float]) -> float:
    """Spearman rho between candidate scores and their post-prune losses."""
    rho, _ = spearmanr(scores, losses)
    return float(rho)


def search_summary(scored: Sequence[CandidateReport], benched: Sequence[CandidateReport]) -> Dict[str, Any]:
    """
    Candidate counts plus the rank-vs-benchmark correlation over the
    benchmarked set. Negative rho means better-ranked candidates lose less
    when pruned; it is None below 3 candidates or when either side is constant.
    """
    rho = None
    if len(benched) >= 3:
        rho = ranking_correlation([-r.combined_rank for r in benched], [r.benchmark_avg for r in benched])
        if math.isnan(rho):
            rho = None
    return {"feasible_candidates": len(scored), "benchmarked": len(benched), "ranking_correlation": rho}


# ===============================================
# DISTILLATION
# ===============================================

def kl_divergence(p: np.ndarray, q: np.ndarray) -> float:
    """sum p log(p / q) with 0 log 0 = 0."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    mask = p > 0
    return float(np.sum(p[mask] * (np.log(p[mask]) - np.log(q[mask]))))


@dataclass
class DistillConfig:
    tokens: int
    peak_lr: float = 1e-3
    warmup_fraction: float = 0.05
    seq_len: int = 64
    batch_size: int = 4
    temperature: float = 1.0
    weight_decay: float = 0.1
    grad_clip: float = 1.0
    log_every: int = 10
    seed: int = 0

    def train_config(self) -> TrainConfig:
        tokens_per_step = self.seq_len * self.batch_size
        total = max(self.tokens, 0)
        warmup = int(total * self.warmup_fraction) if total else 0
        return TrainConfig(
            peak_lr=self.peak_lr, warmup_tokens=min(warmup, max(total - 1, 0)), total_tokens=total,
            batch_tokens=tokens_per_step, seq_len=self.seq_len, weight_decay=self.weight_decay,
            grad_clip=self.grad_clip, seed=self.seed,
        )


@dataclass
class DistillResult:
    student: HybridModel
    log: List[Dict[str, Any]] = field(default_factory=list)


def distill(teacher: HybridModel, student: HybridModel, corpora: Dict[str, np.ndarray],
            config: DistillConfig, phase: str = "short",
            writer: Optional[RunLogWriter] = None) -> DistillResult:
    """
    Forward-KL logit distillation of student toward teacher.

    The teacher only runs in evaluation mode (no tape, no gradients). The
    optimizer and schedule are the training module's Adam and cosine decay.

    Raises:
        ValueError: If teacher and student vocabularies differ
        NonFiniteError: If the loss becomes non-finite
    """
    if teacher.spec.vocab_size != student.spec.vocab_size:
        raise ValueError("teacher and student must share a vocabulary")
    student = student.copy()
    tc = config.train_config()
    if tc.total_tokens == 0:
        return DistillResult(student)
    blend = BlendSchedule([(0.0, {name: 1.0 for name in corpora})])
    rng = np.random.default_rng([config.seed, 17])
    state = AdamState()
    tokens_seen = 0
    log: List[Dict[str, Any]] = []

    for step in tqdm(range(1, tc.total_steps + 1), desc=f"distill[{phase}]", disable=not SHOW_PROGRESS):
        lr = lr_at(tc, tokens_seen)
        batch = sample_batch(blend, tokens_seen, tc.total_tokens, corpora, rng, tc.batch_size, tc.seq_len)
        sequences = list(batch.tokens)
        teacher_logits = [predict_logits(teacher, s[:-1]).astype(np.float64) for s in sequences]

        def kl_loss(tape, logits, i, seq):
            return tape.forward_kl(logits, teacher_logits[i], config.temperature)

        loss, grads = loss_and_grads(student, sequences, loss_builder=kl_loss)
        if not math.isfinite(loss):
            raise NonFiniteError(f"distillation loss became non-finite at step {step}", step=step, phase=phase)
        grads, _ = clip_by_global_norm(grads, tc.grad_clip)
        student.params = adam_step(student.params, grads, state, lr, tc.adam_beta1, tc.adam_beta2,
                                   tc.adam_eps, tc.weight_decay)
        tokens_seen = min(tokens_seen + tc.tokens_per_step, tc.total_tokens)
        if step % config.log_every == 0 or step == tc.total_steps:
            record = {"phase": phase, "step": step, "tokens": tokens_seen, "lr": lr, "kl": loss}
            log.append(record)
            log_distill_interval(record, writer)
    return DistillResult(student, log)


# ===============================================
# CHECKPOINT INTERPOLATION
# ===============================================

def merge_checkpoints(w1: HybridModel, w2: HybridModel, alpha: float) -> HybridModel:
    """
    (1 - alpha) * w1 + alpha * w2 per weight; alpha 0 and 1 return exact copies.

    Raises:
        ValueError: If alpha is outside [0, 1] or the specs differ
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    if w1.spec.to_dict() != w2.spec.to_dict():
        raise ShapeError("cannot merge checkpoints with different architectures")
    if alpha == 0.0:
        return w1.copy()
    if alpha == 1.0:
        return w2.copy()
    params = {
        name: ((1.0 - alpha) * w1.params[name].astype(np.float64)
               + alpha * w2.params[name].astype(np.float64)).astype(w1.params[name].dtype)
        for name in w1.params
    }
    return HybridModel(w1.spec.with_changes(), params)


def merge_sweep(w1: HybridModel, w2: HybridModel, alphas: Sequence[float],
                evaluate: Optional[Callable[[HybridModel], float]] = None) -> List[Dict[str, Any]]:
    """Merge at each alpha; optionally benchmark every merge."""
    rows = []
    for alpha in alphas:
        merged = merge_checkpoints(w1, w2, alpha)
        rows.append({"alpha": float(alpha), "benchmark_avg": evaluate(merged) if evaluate else None})
    return rows


# ===============================================
# PIPELINE
# ===============================================

@dataclass
class MiniPuzzleConfig:
    budget_bytes: float
    k1: int = 130
    k2: int = 3
    layer_calib_samples: int = 128
    neuron_calib_samples: int = 1024
    score_samples: int = 64
    calib_seq_len: int = 64
    seq_agg: str = "mean"
    batch_agg: str = "l2"
    keep_fraction: float = 0.5
    n_widths: int = 9
    memory_seq: int = 1024
    memory_batch: int = 1
    weight_bits: float = 32
    kv_elem_bytes: int = DEFAULT_ELEM_BYTES
    state_elem_bytes: int = DEFAULT_ELEM_BYTES
    overhead_fraction: float = 0.0
    activation_reserve: int = 0
    short_tokens: int = 20000
    extended_ratio: int = EXTENDED_RATIO
    distill_lr: float = 1e-3
    distill_batch_size: int = 4
    temperature: float = 1.0
    bench_windows: int = 4
    workers: int = 1
    seed: int = 0

    def distill_config(self, tokens: int) -> DistillConfig:
        return DistillConfig(tokens=tokens, peak_lr=self.distill_lr, seq_len=self.calib_seq_len,
                             batch_size=self.distill_batch_size, temperature=self.temperature, seed=self.seed)


def calibration_samples(corpora: Dict[str, np.ndarray], n: int, seq_len: int, seed: int) -> List[np.ndarray]:
    """n windows of seq_len + 1 tokens spread round-robin over the corpora."""
    per_corpus = max(1, math.ceil(n / max(len(corpora), 1)))
    return validation_windows(corpora, seq_len, per_corpus, seed)[:n]


def arrow(before: Optional[float], after: Optional[float]) -> str:
    fmt = lambda v: "n/a" if v is None else f"{v:.4f}"
    return f"{fmt(before)} → {fmt(after)}"


@dataclass
class MiniPuzzleResult:
    layer_importance: LayerImportance
    neuron_importance: NeuronImportance
    candidates: List[CandidateReport]
    benchmarked: List[CandidateReport]
    shortlist: List[CandidateReport]
    winner: CandidateReport
    final_model: HybridModel
    distill_table: List[Dict[str, Any]]
    summary: Dict[str, Any]


def search_candidates(parent: HybridModel, corpora: Dict[str, np.ndarray], held_out: Dict[str, np.ndarray],
                      config: MiniPuzzleConfig, writer: Optional[RunLogWriter] = None):
    """Importance, enumeration, scoring and ranking (everything before distillation)."""
    layer_calib = calibration_samples(corpora, config.layer_calib_samples, config.calib_seq_len, config.seed)
    neuron_calib = calibration_samples(corpora, config.neuron_calib_samples, config.calib_seq_len, config.seed + 1)
    score_set = calibration_samples(held_out, config.score_samples, config.calib_seq_len, config.seed + 2)

    logger.info(f"🔄 Layer importance over {len(layer_calib)} samples")
    li = layer_importance(parent, layer_calib)
    logger.info(f"🔄 Neuron importance over {len(neuron_calib)} samples")
    ni = ffn_neuron_importance(parent, neuron_calib, config.seq_agg, config.batch_agg)

    grid = default_search_grid(parent.spec, config.keep_fraction, config.n_widths)
    reports = enumerate_candidates(
        parent.spec, grid, config.budget_bytes, li, config.memory_seq, config.memory_batch,
        config.weight_bits, config.kv_elem_bytes, config.state_elem_bytes, config.overhead_fraction,
        config.activation_reserve,
    )
    scored = score_candidates(parent, reports, ni, score_set, config.workers, writer)

    def evaluate(report: CandidateReport) -> float:
        child = realize_pruned(parent, report.kept_layer_ids, report.ffn_width, ni)
        return benchmark_average(child, held_out, config.calib_seq_len, config.bench_windows, config.seed)

    k1 = min(config.k1, len(scored))
    k2 = min(config.k2, k1)
    benched, shortlist = rank_and_select(scored, k1, k2, evaluate)
    return li, ni, scored, benched, shortlist


def distill_shortlist(parent: HybridModel, shortlist: Sequence[CandidateReport], neurons: NeuronImportance,
                      corpora: Dict[str, np.ndarray], held_out: Dict[str, np.ndarray],
                      config: MiniPuzzleConfig, writer: Optional[RunLogWriter] = None):
    """
    Short-distill each shortlisted candidate, pick the best by post-distill
    benchmark, then run the extended distillation on it.

    Returns:
        (updated shortlist, winner report, final model, distillation table rows, summary)
    """
    score_set = calibration_samples(held_out, config.score_samples, config.calib_seq_len, config.seed + 2)
    parent_preds = greedy_predictions(parent, score_set)

    def bench(model: HybridModel) -> float:
        return benchmark_average(model, held_out, config.calib_seq_len, config.bench_windows, config.seed)

    rows: List[Dict[str, Any]] = []
    students: Dict[str, HybridModel] = {}
    updated: List[CandidateReport] = []
    for report in shortlist:
        child = realize_pruned(parent, report.kept_layer_ids, report.ffn_width, neurons)
        before_bench = report.benchmark_avg if report.benchmark_avg is not None else bench(child)
        acc0, agr0 = score_candidate(child, parent_preds, score_set)
        result = distill(parent, child, corpora, config.distill_config(config.short_tokens), "short", writer)
        acc1, agr1 = score_candidate(result.student, parent_preds, score_set)
        after_bench = bench(result.student)
        students[report.candidate_id] = result.student
        updated.append(replace(report, benchmark_avg=before_bench, post_short_distill_avg=after_bench))
        rows.append({
            "candidate_id": report.candidate_id,
            "phase": "short",
            "pattern": report.spec.pattern(),
            "ffn_width": report.ffn_width,
            "next_token_accuracy": arrow(acc0, acc1),
            "parent_agreement": arrow(agr0, agr1),
            "benchmark_avg": arrow(before_bench, after_bench),
        })

    winner = min(updated, key=lambda r: (r.post_short_distill_avg, r.memory_bytes, r.sort_spec))
    extended_tokens = config.short_tokens * config.extended_ratio
    logger.info(f"🏆 Winner {winner.candidate_id} ({winner.spec.pattern()}); extended distillation "
                f"for {extended_tokens} tokens")
    start = students[winner.candidate_id]
    acc0, agr0 = score_candidate(start, parent_preds, score_set)
    final = distill(parent, start, corpora, config.distill_config(extended_tokens), "extended", writer).student
    acc1, agr1 = score_candidate(final, parent_preds, score_set)
    final_bench = bench(final)
    rows.append({
        "candidate_id": winner.candidate_id,
        "phase": "extended",
        "pattern": winner.spec.pattern(),
        "ffn_width": winner.ffn_width,
        "next_token_accuracy": arrow(acc0, acc1),
        "parent_agreement": arrow(agr0, agr1),
        "benchmark_avg": arrow(winner.post_short_distill_avg, final_bench),
    })

    parent_bench = bench(parent)
    pruned_bench = winner.benchmark_avg
    gap = pruned_bench - parent_bench
    summary = {
        "winner": winner.candidate_id,
        "parent_benchmark_avg": parent_bench,
        "pruned_benchmark_avg": pruned_bench,
        "final_benchmark_avg": final_bench,
        "gap_recovered": (pruned_bench - final_bench) / gap if gap > 0 else None,
        "short_tokens": config.short_tokens,
        "extended_tokens": extended_tokens,
    }
    return updated, winner, final, rows, summary


def run_minipuzzle(parent: HybridModel, corpora: Dict[str, np.ndarray], held_out: Dict[str, np.ndarray],
                   config: MiniPuzzleConfig, writer: Optional[RunLogWriter] = None) -> MiniPuzzleResult:
    """Full pipeline: importance -> search -> ranking -> short distill -> extended distill."""
    li, ni, scored, benched, shortlist = search_candidates(parent, corpora, held_out, config, writer)
    shortlist, winner, final, rows, summary = distill_shortlist(parent, shortlist, ni, corpora, held_out, config, writer)
    summary.update(search_summary(scored, benched))
    return MiniPuzzleResult(li, ni, scored, benched, shortlist, winner, final, rows, summary)
