"""
run_config.py - RunConfig schema for workbench commands

One JSON document drives every command. It is validated with pydantic
before any work starts; unknown keys anywhere are rejected. Sections:

    seed, arch, train, blend, corpus, memory, search, distill, bench

`arch` holds either an explicit layer list or builder inputs
(total_layers + attn_fraction, or transformer_baseline=true).
"""

import copy
import logging
from typing import Dict, List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from common import LOG_LEVEL, ConfigError, read_json
from corpus import CATEGORIES
from hybrid_model import DESK_DIMS, ArchSpec, build_architecture, build_transformer_baseline
from minipuzzle import DistillConfig, MiniPuzzleConfig
from training import BlendSchedule, PrecisionMode, TrainConfig

logger = logging.getLogger(__name__)
logger.setLevel(LOG_LEVEL)

# Smoke mode divisors (NH_DESK_SMOKE=1)
SMOKE_TOKEN_DIVISOR = 100
SMOKE_SAMPLE_DIVISOR = 8
SMOKE_CORPUS_DIVISOR = 10
SMOKE_MAX_CANDIDATES_K1 = 8


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ArchSection(_Section):
    total_layers: Optional[int] = Field(default=None, ge=2)
    attn_fraction: float = Field(default=0.08, ge=0.0, lt=1.0)
    transformer_baseline: bool = False
    layers: Optional[List[Literal["Mamba2", "Attention", "FFN"]]] = None
    d_model: int = DESK_DIMS["d_model"]
    d_ffn: int = DESK_DIMS["d_ffn"]
    n_q_heads: int = DESK_DIMS["n_q_heads"]
    n_kv_heads: int = DESK_DIMS["n_kv_heads"]
    d_state: int = DESK_DIMS["d_state"]
    n_groups: int = DESK_DIMS["n_groups"]
    mamba_head_dim: int = DESK_DIMS["mamba_head_dim"]
    mamba_expand: int = DESK_DIMS["mamba_expand"]
    conv_window: int = DESK_DIMS["conv_window"]
    vocab_size: int = DESK_DIMS["vocab_size"]
    rope: bool = False

    @model_validator(mode="after")
    def _one_source(self):
        if (self.layers is None) == (self.total_layers is None):
            raise ValueError("give exactly one of 'layers' or 'total_layers'")
        return self

    def dims(self) -> Dict[str, int]:
        return {k: getattr(self, k) for k in DESK_DIMS}

    def to_spec(self) -> ArchSpec:
        if self.layers is not None:
            return ArchSpec(layers=list(self.layers), rope=self.rope, **self.dims())
        if self.transformer_baseline:
            return build_transformer_baseline(self.total_layers, **self.dims())
        return build_architecture(self.total_layers, self.attn_fraction, **self.dims())


class TrainSection(_Section):
    peak_lr: float = Field(default=3e-3, ge=0.0)
    min_lr_fraction: float = Field(default=0.01, gt=0.0, le=1.0)
    warmup_tokens: int = Field(default=0, ge=0)
    total_tokens: int = Field(default=0, ge=0)
    batch_tokens: int = Field(default=16384, ge=1)
    weight_decay: float = Field(default=0.1, ge=0.0)
    adam_beta1: float = 0.9
    adam_beta2: float = 0.95
    seq_len: int = Field(default=256, ge=1)
    precision_mode: PrecisionMode = PrecisionMode.FULL
    compare_precision: bool = False
    adam_eps: float = 1e-8
    grad_clip: float = 1.0
    eval_interval_fraction: float = 0.01
    eval_sequences: int = 8
    high_precision_prefix: int = 4
    high_precision_suffix: int = 4
    init_seed: int = 0


class BlendPhase(_Section):
    start: float = Field(ge=0.0, lt=1.0)
    weights: Dict[str, float]


class BlendSection(_Section):
    phases: Optional[List[BlendPhase]] = None
    fourth_phase_start: Optional[float] = Field(default=None, gt=0.8, lt=1.0)


class CorpusSection(_Section):
    size: int = Field(default=2000, ge=1)
    categories: List[str] = Field(default_factory=lambda: list(CATEGORIES), min_length=1)
    held_out_size: int = Field(default=200, ge=1)
    val_fraction: float = Field(default=0.1, gt=0.0, lt=1.0)

    @model_validator(mode="after")
    def _known_categories(self):
        unknown = sorted(set(self.categories) - set(CATEGORIES))
        if unknown:
            raise ValueError(f"unknown categories {unknown}")
        return self


class MemorySection(_Section):
    budget_bytes: Optional[float] = Field(default=None, ge=0)
    seq: int = Field(default=1024, ge=1)
    batch: int = Field(default=1, ge=1)
    weight_bits: float = Field(default=32, gt=0)
    kv_elem_bytes: int = Field(default=4, ge=1)
    state_elem_bytes: int = Field(default=4, ge=1)
    overhead_fraction: float = Field(default=0.0, ge=0.0)
    activation_reserve: int = Field(default=0, ge=0)


class SearchSection(_Section):
    k1: int = Field(default=130, ge=1)
    k2: int = Field(default=3, ge=1)
    layer_calib_samples: int = Field(default=128, ge=1)
    neuron_calib_samples: int = Field(default=1024, ge=1)
    score_samples: int = Field(default=64, ge=1)
    calib_seq_len: int = Field(default=64, ge=2)
    seq_agg: Literal["mean", "l2"] = "mean"
    batch_agg: Literal["mean", "l2"] = "l2"
    keep_fraction: float = Field(default=0.5, gt=0.0, le=1.0)
    n_widths: int = Field(default=9, ge=1)
    bench_windows: int = Field(default=4, ge=1)


class DistillSection(_Section):
    short_tokens: int = Field(default=20000, ge=0)
    extended_ratio: int = Field(default=9, ge=1)
    peak_lr: float = Field(default=1e-3, ge=0.0)
    batch_size: int = Field(default=4, ge=1)
    temperature: float = Field(default=1.0, gt=0.0)
    merge_alphas: List[float] = Field(default_factory=lambda: [0.1 * i for i in range(1, 10)])


class BenchSection(_Section):
    prompt_len: int = Field(default=64, ge=1)
    gen_len: int = Field(default=32, ge=0)
    batch: int = Field(default=1, ge=1)
    sampler: Literal["greedy", "temperature"] = "greedy"
    temperature: float = Field(default=1.0, gt=0.0)


class RunConfig(_Section):
    seed: int = 0
    arch: ArchSection
    train: TrainSection = Field(default_factory=TrainSection)
    blend: BlendSection = Field(default_factory=BlendSection)
    corpus: CorpusSection = Field(default_factory=CorpusSection)
    memory: MemorySection = Field(default_factory=MemorySection)
    search: SearchSection = Field(default_factory=SearchSection)
    distill: DistillSection = Field(default_factory=DistillSection)
    bench: BenchSection = Field(default_factory=BenchSection)

    # ---- conversions ----

    def train_config(self, mode: Optional[PrecisionMode] = None) -> TrainConfig:
        t = self.train.model_dump(exclude={"compare_precision", "init_seed"})
        if mode is not None:
            t["precision_mode"] = mode
        try:
            return TrainConfig(seed=self.seed, **t)
        except ConfigError as e:
            raise ConfigError(f"train: {e.message}", **e.details)

    def blend_schedule(self) -> BlendSchedule:
        if self.blend.phases:
            return BlendSchedule([(p.start, p.weights) for p in self.blend.phases])
        return BlendSchedule.phased(self.corpus.categories, self.blend.fourth_phase_start)

    def minipuzzle_config(self, workers: int = 1) -> MiniPuzzleConfig:
        budget = self.memory.budget_bytes
        return MiniPuzzleConfig(
            budget_bytes=float("inf") if budget is None else budget,
            k1=self.search.k1,
            k2=self.search.k2,
            layer_calib_samples=self.search.layer_calib_samples,
            neuron_calib_samples=self.search.neuron_calib_samples,
            score_samples=self.search.score_samples,
            calib_seq_len=self.search.calib_seq_len,
            seq_agg=self.search.seq_agg,
            batch_agg=self.search.batch_agg,
            keep_fraction=self.search.keep_fraction,
            n_widths=self.search.n_widths,
            memory_seq=self.memory.seq,
            memory_batch=self.memory.batch,
            weight_bits=self.memory.weight_bits,
            kv_elem_bytes=self.memory.kv_elem_bytes,
            state_elem_bytes=self.memory.state_elem_bytes,
            overhead_fraction=self.memory.overhead_fraction,
            activation_reserve=self.memory.activation_reserve,
            short_tokens=self.distill.short_tokens,
            extended_ratio=self.distill.extended_ratio,
            distill_lr=self.distill.peak_lr,
            distill_batch_size=self.distill.batch_size,
            temperature=self.distill.temperature,
            bench_windows=self.search.bench_windows,
            workers=workers,
            seed=self.seed,
        )

    def distill_config(self, tokens: int) -> DistillConfig:
        return self.minipuzzle_config().distill_config(tokens)


def _format_errors(err: ValidationError) -> List[str]:
    return [".".join(str(p) for p in e["loc"]) + f": {e['msg']}" for e in err.errors()]


def parse_run_config(data: dict) -> RunConfig:
    """
    Validate a config document.

    Raises:
        ConfigError: Listing every offending field path
    """
    try:
        config = RunConfig.model_validate(data)
        config.arch.to_spec()
        config.train_config()
        config.blend_schedule()
    except ValidationError as e:
        raise ConfigError("run config failed validation", fields=_format_errors(e))
    except ValueError as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(f"run config is inconsistent: {e}")
    return config


def load_run_config(path: str, seed: Optional[int] = None) -> RunConfig:
    """Read and validate a config file, optionally overriding its seed."""
    try:
        data = read_json(path)
    except (OSError, ValueError) as e:
        raise ConfigError(f"cannot read config {path}: {e}", path=path)
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object", path=path)
    if seed is not None:
        data["seed"] = seed
    return parse_run_config(data)


def apply_smoke_overrides(config: RunConfig) -> RunConfig:
    """Shrink every token and sample budget so a full run finishes in CI time."""
    data = copy.deepcopy(config.model_dump(mode="json"))
    train = data["train"]
    if train["total_tokens"]:
        step = max(1, train["batch_tokens"] // train["seq_len"]) * train["seq_len"]
        train["total_tokens"] = max(step * 2, train["total_tokens"] // SMOKE_TOKEN_DIVISOR)
        train["warmup_tokens"] = min(train["warmup_tokens"] // SMOKE_TOKEN_DIVISOR, train["total_tokens"] - 1)
    data["corpus"]["size"] = max(50, data["corpus"]["size"] // SMOKE_CORPUS_DIVISOR)
    data["corpus"]["held_out_size"] = max(20, data["corpus"]["held_out_size"] // SMOKE_CORPUS_DIVISOR)
    search = data["search"]
    for key in ("layer_calib_samples", "neuron_calib_samples", "score_samples"):
        search[key] = max(2, search[key] // SMOKE_SAMPLE_DIVISOR)
    search["k1"] = min(search["k1"], SMOKE_MAX_CANDIDATES_K1)
    search["k2"] = min(search["k2"], search["k1"])
    data["distill"]["short_tokens"] = data["distill"]["short_tokens"] // SMOKE_TOKEN_DIVISOR
    data["bench"]["gen_len"] = min(data["bench"]["gen_len"], 8)
    data["bench"]["prompt_len"] = min(data["bench"]["prompt_len"], 32)
    logger.info("🧪 Smoke mode: token and sample budgets shrunk")
    return parse_run_config(data)
