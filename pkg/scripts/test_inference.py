import numpy as np
import pytest

from common import MemoryBudgetError, SamplerError
from conftest import MEMORIZED_TEXT, tiny_spec
from corpus import TOKENIZER
from hybrid_model import HybridModel, LayerKind, predict_logits, published_spec
from inference import (
    DecodeState,
    FlopLedger,
    GreedySampler,
    TemperatureSampler,
    check_budget,
    decode,
    decode_step,
    decode_step_flops,
    equal_depth_baseline,
    generation_flops_per_token,
    kv_cache_bytes,
    make_sampler,
    mamba_state_bytes,
    max_batch_under_budget,
    max_feasible_batch,
    memory_report,
    prefill,
    throughput_bench,
    weight_bytes,
)

TOKENS = np.random.default_rng(8).integers(0, 256, size=12)


# ==========================================
# Prefill and decode
# ==========================================

def test_decode_logits_match_teacher_forced_logits(model8_f64):
    forced = predict_logits(model8_f64, TOKENS, chunk=None)
    last, state = prefill(model8_f64, TOKENS[:5], chunk=3)
    assert np.allclose(last, forced[4], atol=1e-9)
    for t in range(5, len(TOKENS)):
        logits = decode_step(model8_f64, state, int(TOKENS[t]))
        assert np.allclose(logits, forced[t], atol=1e-9), t
    assert state.position == len(TOKENS)


def test_kv_cache_grows_and_mamba_state_does_not(model8):
    _, state = prefill(model8, TOKENS[:5])
    (attn_layer,) = model8.spec.layer_ids(LayerKind.ATTENTION)
    assert state.kv[attn_layer].tokens_seen == 5
    kv_before, mamba_before = state.kv_bytes(), state.state_bytes()
    decode(model8, state, 3, GreedySampler())
    assert state.kv[attn_layer].tokens_seen == 8
    assert state.state_bytes() == mamba_before
    per_token = 2 * model8.spec.n_kv_heads * model8.spec.head_dim * 4
    assert state.kv_bytes() - kv_before == 3 * per_token


def test_mamba_state_is_constant_over_a_long_decode(model8):
    _, state = prefill(model8, TOKENS[:1])
    mamba_bytes = state.state_bytes()
    shapes = {i: (s.ssm_state.shape, s.conv_state.shape) for i, s in state.mamba.items()}
    per_token = 2 * model8.spec.n_kv_heads * model8.spec.head_dim * 4
    sampler = GreedySampler()
    steps = 0
    for target in (1, 2, 16, 128, 512):
        decode(model8, state, target - steps, sampler)
        steps = target
        assert state.state_bytes() == mamba_bytes, steps
        assert {i: (s.ssm_state.shape, s.conv_state.shape) for i, s in state.mamba.items()} == shapes
        assert state.kv_bytes() == (1 + steps) * per_token
    assert state.position == 513


def test_decode_state_starts_empty(spec8):
    state = DecodeState.fresh(spec8)
    assert state.kv_bytes() == 0
    assert state.state_bytes() == mamba_state_bytes(spec8, batch=1)
    assert sorted(state.mamba) == spec8.layer_ids(LayerKind.MAMBA2)


def test_prefill_errors(model8):
    with pytest.raises(ValueError):
        prefill(model8, [])
    with pytest.raises(MemoryBudgetError) as err:
        prefill(model8, TOKENS, budget_bytes=1000)
    assert err.value.details["component"] == "weights"


def test_decode_needs_prefill_and_a_sampler(model8, spec8):
    with pytest.raises(ValueError):
        decode(model8, DecodeState.fresh(spec8), 1, GreedySampler())
    _, state = prefill(model8, TOKENS[:3])
    with pytest.raises(SamplerError):
        decode(model8, state, 1, "greedy")
    assert decode(model8, state, 0, GreedySampler()) == []


def test_memorized_model_continues_the_cycle(memorized_model):
    prompt = TOKENIZER.encode(MEMORIZED_TEXT[:8])
    _, state = prefill(memorized_model, prompt)
    out = decode(memorized_model, state, 8, GreedySampler())
    assert TOKENIZER.decode(out) == MEMORIZED_TEXT[8:16]


# ==========================================
# Samplers
# ==========================================

def test_make_sampler():
    assert isinstance(make_sampler("greedy"), GreedySampler)
    assert isinstance(make_sampler("temperature", 0.7, 3), TemperatureSampler)
    with pytest.raises(SamplerError):
        make_sampler("beam")
    with pytest.raises(SamplerError):
        TemperatureSampler(0.0)


def test_temperature_sampler_is_seeded():
    logits = np.random.default_rng(0).normal(size=50)
    s1, s2 = TemperatureSampler(1.0, seed=5), TemperatureSampler(1.0, seed=5)
    assert [s1(logits) for _ in range(20)] == [s2(logits) for _ in range(20)]


def test_low_temperature_approaches_greedy():
    logits = np.array([0.0, 3.0, 1.0])
    sampler = TemperatureSampler(0.01, seed=1)
    assert all(sampler(logits) == 1 for _ in range(50))


# ==========================================
# FLOPs
# ==========================================

def test_only_attention_flops_grow_with_position(spec13):
    early, late = decode_step_flops(spec13, 0), decode_step_flops(spec13, 1000)
    assert early["Mamba2"] == late["Mamba2"]
    assert early["FFN"] == late["FFN"]
    assert late["Attention"] > early["Attention"]
    assert late["total"] == sum(v for k, v in late.items() if k != "total")


def test_hybrid_flops_grow_slower_than_baseline():
    spec = published_spec("8B")
    baseline = equal_depth_baseline(spec)
    hybrid_growth = decode_step_flops(spec, 65536)["total"] - decode_step_flops(spec, 0)["total"]
    baseline_growth = decode_step_flops(baseline, 65536)["total"] - decode_step_flops(baseline, 0)["total"]
    assert hybrid_growth * 5 < baseline_growth


def test_flop_ledger_matches_closed_form(model8):
    _, state = prefill(model8, TOKENS[:4])
    ledger = FlopLedger()
    decode(model8, state, 5, GreedySampler(), ledger)
    assert len(ledger.steps) == 5
    assert ledger.per_token() == pytest.approx(generation_flops_per_token(model8.spec, 4, 5))
    assert FlopLedger().per_token() == 0.0


def test_equal_depth_baseline_rounds_down_to_even(spec13):
    baseline = equal_depth_baseline(spec13)
    assert baseline.n_layers == 12
    assert baseline.d_model == spec13.d_model
    assert set(baseline.pattern()) == {"A", "F"}


# ==========================================
# Memory
# ==========================================

def test_weight_bytes():
    assert weight_bytes(8_000_000_000, 8) == 8_000_000_000
    assert weight_bytes(8_000_000_000, 16) == 16_000_000_000
    assert weight_bytes(100, 8, overhead_fraction=0.5) == 150


def test_memory_report_components(spec8):
    report = memory_report(spec8, seq=64, batch=3, weight_bits=32)
    assert set(report.components()) == {"weights", "kv_cache", "mamba_state", "activations"}
    assert report.kv_bytes == 1 * 2 * 1 * 8 * 64 * 3 * 4
    assert report.total_bytes == sum(report.components().values())
    assert report.to_dict()["total_bytes"] == report.total_bytes
    with pytest.raises(ValueError):
        memory_report(spec8, seq=0, batch=1, weight_bits=8)


def test_kv_bytes_scale_linearly(spec13):
    assert kv_cache_bytes(spec13, 200, 2) == 2 * kv_cache_bytes(spec13, 100, 2)
    assert mamba_state_bytes(spec13, 4) == 4 * mamba_state_bytes(spec13, 1)


def test_check_budget_names_the_crossing_component(spec8):
    report = memory_report(spec8, seq=64, batch=1, weight_bits=32)
    with pytest.raises(MemoryBudgetError) as err:
        check_budget(report, report.weight_bytes + 1)
    assert err.value.details["component"] == "kv_cache"
    check_budget(report, report.total_bytes)


def test_max_feasible_batch():
    assert max_feasible_batch(lambda b: b <= 37) == 37
    assert max_feasible_batch(lambda b: b <= 1) == 1
    assert max_feasible_batch(lambda b: False) == 0
    assert max_feasible_batch(lambda b: True, limit=100) == 100


def test_max_batch_under_budget_is_tight(spec13):
    budget = memory_report(spec13, 1024, 1, 32).total_bytes * 3
    best = max_batch_under_budget(spec13, 1024, 32, budget)
    assert memory_report(spec13, 1024, best, 32).total_bytes <= budget
    assert memory_report(spec13, 1024, best + 1, 32).total_bytes > budget


# ==========================================
# Benchmark
# ==========================================

def test_throughput_bench_report(model8):
    report = throughput_bench(model8, prompt_len=4, gen_len=3, batch=2)
    assert report["batch"] == 2
    assert report["flops_per_token"] == pytest.approx(generation_flops_per_token(model8.spec, 4, 3))
    assert report["baseline"]["pattern"] == "AFAFAFAF"
    assert report["max_feasible_batch"] is None
    assert report["memory"]["batch"] == 2


def test_throughput_bench_budget(model8):
    generous = throughput_bench(model8, 4, 2, 1, budget_bytes=1 << 30)
    assert generous["max_feasible_batch"] >= 1
    with pytest.raises(MemoryBudgetError):
        throughput_bench(model8, 4, 2, 1, budget_bytes=1000)


def test_throughput_bench_uses_memory_settings(model8):
    budget = memory_report(model8.spec, 256, 4, 32).total_bytes
    plain = throughput_bench(model8, 4, 2, 1, budget_bytes=budget, memory_seq=256)
    assert plain["memory"]["seq"] == 256
    assert plain["max_feasible_batch"] >= 4

    reserve = budget - memory_report(model8.spec, 256, 1, 32).total_bytes
    reserved = throughput_bench(model8, 4, 2, 1, budget_bytes=budget, memory_seq=256,
                                activation_reserve=reserve)
    assert reserved["memory"]["activation_reserve"] == reserve
    assert reserved["max_feasible_batch"] == 1

    fp8 = throughput_bench(model8, 4, 2, 1, memory_seq=256, weight_bits=8)
    assert fp8["memory"]["weight_bytes"] * 4 == pytest.approx(
        plain["memory"]["weight_bytes"], abs=4)


def test_published_8b_fits_a_desk_gpu_in_fp8():
    report = memory_report(published_spec("8B"), seq=65536, batch=1, weight_bits=8,
                           kv_elem_bytes=1, state_elem_bytes=2)
    assert report.total_bytes < 24 * (1 << 30)


def test_tiny_spec_helper_is_consistent():
    model = HybridModel.initialize(tiny_spec(4, vocab_size=300), seed=0)
    assert predict_logits(model, [299]).shape == (1, 300)
