import numpy as np
import pytest

from common import CorpusError, NoFeasibleCandidatesError, ShapeError
from conftest import MEMORIZED_TEXT, tiny_spec
from corpus import TOKENIZER
from hybrid_model import HybridModel, LayerKind, model_forward, predict_logits
from inference import memory_report
from minipuzzle import (
    CandidateReport,
    DistillConfig,
    LayerImportance,
    MiniPuzzleConfig,
    NeuronImportance,
    SearchGrid,
    aggregate,
    arrow,
    benchmark_average,
    calibration_samples,
    combined_ranking,
    default_search_grid,
    distill,
    enumerate_candidates,
    ffn_neuron_importance,
    greedy_predictions,
    kl_divergence,
    layer_importance,
    merge_checkpoints,
    merge_sweep,
    rank_and_select,
    ranking_correlation,
    read_reports_jsonl,
    realize_pruned,
    run_minipuzzle,
    score_candidate,
    score_candidates,
    search_summary,
    write_reports_jsonl,
)
from run_logger import RunLogWriter, read_ndjson
from training import BlendSchedule, TrainConfig, train, validation_windows


def _samples(n=2, length=13, seed=0):
    rng = np.random.default_rng(seed)
    return [rng.integers(0, 256, size=length) for _ in range(n)]


def _report(cid, acc, agree, memory, spec):
    return CandidateReport(cid, spec, list(range(spec.n_layers)), spec.d_ffn, memory,
                           next_token_accuracy=acc, parent_agreement=agree)


# ==========================================
# Importance
# ==========================================

def test_aggregations():
    values = np.array([[1.0, -2.0], [-3.0, 4.0]])
    assert np.allclose(aggregate(values, "mean"), [2.0, 3.0])
    assert np.allclose(aggregate(values, "l2"), [np.sqrt(10), np.sqrt(20)])
    with pytest.raises(ValueError):
        aggregate(values, "max")


def test_layer_importance_matches_pruned_model_oracle(model8):
    calib = _samples()
    scores = layer_importance(model8, calib).scores
    assert sorted(scores) == list(range(model8.spec.n_layers))
    for i in range(model8.spec.n_layers):
        kept = [j for j in range(model8.spec.n_layers) if j != i]
        child = realize_pruned(model8, kept, model8.spec.d_ffn)
        mse = []
        for tokens in calib:
            full = model_forward(model8, tokens, return_hidden=True).data.astype(np.float64)
            pruned = model_forward(child, tokens, return_hidden=True).data.astype(np.float64)
            mse.append(np.mean((full - pruned) ** 2))
        assert scores[i] == pytest.approx(np.mean(mse), rel=1e-4, abs=1e-12)
        assert scores[i] > 0


def test_layer_importance_needs_samples(model8):
    with pytest.raises(ValueError):
        layer_importance(model8, [])


def test_neuron_importance_shapes_and_aggregation(model8):
    calib = _samples(3)
    ni = ffn_neuron_importance(model8, calib, seq_agg="mean", batch_agg="l2")
    ffn_layers = model8.spec.layer_ids(LayerKind.FFN)
    assert sorted(ni.scores) == ffn_layers
    acts = []
    for tokens in calib:
        seen = {}
        model_forward(model8, tokens, capture=lambda i, a: seen.setdefault(i, a))
        acts.append(np.mean(np.abs(seen[ffn_layers[0]]), axis=0))
    expected = np.sqrt(np.sum(np.stack(acts) ** 2, axis=0))
    assert np.allclose(ni.scores[ffn_layers[0]], expected)
    assert all(s.shape == (model8.spec.d_ffn,) for s in ni.scores.values())


def test_neuron_importance_rejects_unknown_aggregation(model8):
    with pytest.raises(ValueError):
        ffn_neuron_importance(model8, _samples(), seq_agg="median")


def test_neuron_keep_is_sorted_and_stable():
    ni = NeuronImportance({1: np.array([0.5, 2.0, 0.5, 3.0, 0.5])})
    assert ni.keep(1, 3).tolist() == [0, 1, 3]
    assert ni.keep(1, 5).tolist() == [0, 1, 2, 3, 4]
    with pytest.raises(ShapeError):
        ni.keep(1, 6)


def test_layer_top_prefers_earlier_layer_on_ties():
    li = LayerImportance({0: 1.0, 2: 5.0, 4: 1.0, 6: 0.1})
    assert li.top([0, 2, 4, 6], 2) == [0, 2]
    assert li.top([0, 2, 4, 6], 0) == []


# ==========================================
# Pruning
# ==========================================

def test_pruning_neurons_with_zero_output_is_exact(model8_f64):
    model = model8_f64.copy()
    ffn_layers = model.spec.layer_ids(LayerKind.FFN)
    for i in ffn_layers:
        model.params[f"layers.{i}.ffn.down_proj"][:, 16:] = 0.0
    neurons = NeuronImportance({i: np.arange(32, 0, -1, dtype=float) for i in ffn_layers})
    child = realize_pruned(model, list(range(model.spec.n_layers)), 16, neurons)
    assert child.spec.d_ffn == 16
    tokens = _samples(1)[0]
    assert np.allclose(predict_logits(child, tokens), predict_logits(model, tokens), atol=1e-10)


def test_realize_pruned_renumbers_layers(model8):
    child = realize_pruned(model8, [0, 1, 5, 6], model8.spec.d_ffn)
    assert child.spec.pattern() == "MFAF"
    assert np.array_equal(child.params["layers.2.attn.q_proj"], model8.params["layers.5.attn.q_proj"])


def test_realize_pruned_errors(model8):
    with pytest.raises(ShapeError):
        realize_pruned(model8, [0, 0, 1], model8.spec.d_ffn)
    with pytest.raises(ShapeError):
        realize_pruned(model8, [0, 8], model8.spec.d_ffn)
    with pytest.raises(ShapeError):
        realize_pruned(model8, [0, 1], 0)
    with pytest.raises(ShapeError):
        realize_pruned(model8, [0, 1], 8)


# ==========================================
# Search
# ==========================================

def test_default_grid(spec13):
    grid = default_search_grid(spec13)
    assert grid.n_attention == [1]
    assert grid.n_mamba == [3, 4, 5, 6]
    assert grid.n_ffn == [3, 4, 5, 6]
    assert grid.ffn_widths == list(range(32, 23, -1))
    assert grid.size == 144


def test_twenty_six_layer_grid_has_882_points():
    assert default_search_grid(tiny_spec(26)).size == 882


def test_grid_needs_every_axis():
    with pytest.raises(ValueError):
        SearchGrid([1], [], [1], [8])


def test_enumeration_respects_budget_and_importance(spec13):
    li = LayerImportance({i: float(i) for i in range(13)})
    grid = default_search_grid(spec13)
    everything = enumerate_candidates(spec13, grid, float("inf"), li)
    assert len(everything) == grid.size
    assert [r.candidate_id for r in everything] == [f"c{i:04d}" for i in range(grid.size)]
    smallest = min(everything, key=lambda r: r.memory_bytes)
    assert smallest.kept_layer_ids == [6, 7, 8, 9, 10, 11, 12]

    budget = memory_report(spec13, 1024, 1, 32).total_bytes * 0.9
    feasible = enumerate_candidates(spec13, grid, budget, li)
    assert 0 < len(feasible) < grid.size
    assert all(r.memory_bytes <= budget for r in feasible)
    ids = {r.candidate_id for r in everything}
    assert {r.candidate_id for r in feasible} <= ids

    with pytest.raises(NoFeasibleCandidatesError):
        enumerate_candidates(spec13, grid, 1000, li)


def test_activation_reserve_removes_candidates(spec13):
    li = LayerImportance({i: float(i) for i in range(13)})
    grid = default_search_grid(spec13)
    budget = memory_report(spec13, 1024, 1, 32).total_bytes * 0.9
    plain = enumerate_candidates(spec13, grid, budget, li)
    reserve = int(budget - max(r.memory_bytes for r in plain)) + 1
    reserved = enumerate_candidates(spec13, grid, budget, li, activation_reserve=reserve)
    assert 0 < len(reserved) < len(plain)
    assert {r.candidate_id for r in reserved} < {r.candidate_id for r in plain}
    assert all(r.memory_bytes <= budget for r in reserved)


def test_scoring_is_independent_of_worker_count(model13, held_out, tmp_path):
    li = LayerImportance({i: float(i) for i in range(13)})
    ni = ffn_neuron_importance(model13, _samples())
    reports = enumerate_candidates(model13.spec, default_search_grid(model13.spec), float("inf"), li)[::20]
    samples = calibration_samples(held_out, 3, 16, seed=0)
    writer = RunLogWriter(str(tmp_path / "candidates.ndjson"))
    serial = score_candidates(model13, reports, ni, samples, workers=1, writer=writer)
    parallel = score_candidates(model13, list(reversed(reports)), ni, samples, workers=3)
    assert serial == parallel
    assert all(0 <= r.next_token_accuracy <= 1 and 0 <= r.parent_agreement <= 1 for r in serial)
    assert len(read_ndjson(writer.path)) == len(reports)


def test_scoring_without_positions_is_a_corpus_error(model8):
    short = [np.array([5]), np.array([7])]
    preds = greedy_predictions(model8, short)
    assert [len(p) for p in preds] == [0, 0]
    with pytest.raises(CorpusError) as err:
        score_candidate(model8, preds, short)
    assert err.value.details["samples"] == 2
    with pytest.raises(CorpusError):
        score_candidate(model8, [], [])


def test_combined_ranking_uses_min_rank_and_tie_breaks(spec8):
    reports = [
        _report("a", acc=0.9, agree=0.1, memory=300, spec=spec8),
        _report("b", acc=0.1, agree=0.9, memory=200, spec=spec8),
        _report("c", acc=0.5, agree=0.5, memory=100, spec=spec8),
    ]
    ranked = combined_ranking(reports)
    assert [r.candidate_id for r in ranked] == ["b", "a", "c"]
    assert [r.combined_rank for r in ranked] == [0, 0, 1]
    with pytest.raises(ValueError):
        combined_ranking([_report("d", None, 0.5, 1, spec8)])


def test_rank_and_select(spec8):
    reports = [_report(f"c{i}", acc=i / 10, agree=i / 10, memory=100, spec=spec8) for i in range(5)]
    losses = {"c4": 3.0, "c3": 1.0, "c2": 2.0}
    benched, shortlist = rank_and_select(reports, 3, 2, lambda r: losses[r.candidate_id])
    assert [r.candidate_id for r in benched] == ["c4", "c3", "c2"]
    assert [r.candidate_id for r in shortlist] == ["c3", "c2"]
    assert shortlist[0].benchmark_avg == 1.0
    with pytest.raises(ValueError):
        rank_and_select(reports, 2, 3, lambda r: 0.0)
    with pytest.raises(ValueError):
        rank_and_select(reports, 6, 1, lambda r: 0.0)


def test_ranking_correlation():
    assert ranking_correlation([1, 2, 3, 4], [10, 20, 30, 40]) == pytest.approx(1.0)
    assert ranking_correlation([1, 2, 3, 4], [4, 3, 2, 1]) == pytest.approx(-1.0)


def test_search_summary_correlates_rank_with_benchmark(spec8):
    reports = [_report(f"c{i}", acc=i / 10, agree=i / 10, memory=100, spec=spec8) for i in range(5)]
    benched, _ = rank_and_select(reports, 4, 1, lambda r: 10.0 - float(r.candidate_id[1:]))
    summary = search_summary(reports, benched)
    assert summary["feasible_candidates"] == 5
    assert summary["benchmarked"] == 4
    assert summary["ranking_correlation"] == pytest.approx(-1.0)
    assert search_summary(reports, benched[:2])["ranking_correlation"] is None


def test_benchmark_average(model8, held_out):
    value = benchmark_average(model8, held_out, seq_len=16, n_windows=2)
    assert value == pytest.approx(np.log(258), rel=0.1)
    with pytest.raises(ValueError):
        benchmark_average(model8, {})


def test_calibration_samples(corpora):
    samples = calibration_samples(corpora, 5, 16, seed=0)
    assert len(samples) == 5
    assert all(len(s) == 17 for s in samples)


# ==========================================
# Serialization
# ==========================================

def test_reports_round_trip_through_jsonl(spec8, tmp_path):
    reports = [_report("c0001", 0.5, 0.25, 1234, spec8)]
    path = str(tmp_path / "candidates.jsonl")
    write_reports_jsonl(path, reports)
    assert read_reports_jsonl(path) == reports
    assert reports[0].to_dict()["pattern"] == spec8.pattern()


def test_importance_round_trips():
    li = LayerImportance({0: 0.5, 3: 1.5})
    assert LayerImportance.from_dict(li.to_dict()) == li
    ni = NeuronImportance({1: np.array([0.1, 0.2])}, "l2", "mean")
    back = NeuronImportance.from_dict(ni.to_dict())
    assert back.seq_agg == "l2" and back.batch_agg == "mean"
    assert np.array_equal(back.scores[1], ni.scores[1])


def test_arrow():
    assert arrow(0.5, 0.25) == "0.5000 → 0.2500"
    assert arrow(None, 1.0) == "n/a → 1.0000"


# ==========================================
# Distillation and merging
# ==========================================

def test_kl_divergence():
    p = np.array([0.5, 0.5, 0.0])
    assert kl_divergence(p, p) == 0.0
    assert kl_divergence(p, np.array([0.25, 0.25, 0.5])) == pytest.approx(np.log(2))


def test_distill_config_schedule():
    tc = DistillConfig(tokens=1000, seq_len=64, batch_size=4).train_config()
    assert tc.batch_tokens == 256
    assert tc.warmup_tokens == 50
    assert DistillConfig(tokens=0).train_config().total_tokens == 0


def _mean_kl(teacher, student, windows):
    total = []
    for w in windows:
        lp = predict_logits(teacher, w[:-1]).astype(np.float64)
        lq = predict_logits(student, w[:-1]).astype(np.float64)
        p = np.exp(lp - lp.max(-1, keepdims=True))
        q = np.exp(lq - lq.max(-1, keepdims=True))
        p, q = p / p.sum(-1, keepdims=True), q / q.sum(-1, keepdims=True)
        total += [kl_divergence(pi, qi) for pi, qi in zip(p, q)]
    return float(np.mean(total))


def test_distillation_pulls_student_toward_teacher(memorized_model):
    corpora = {"cycle": TOKENIZER.encode(MEMORIZED_TEXT * 20)}
    student = realize_pruned(memorized_model, [0, 2, 3], memorized_model.spec.d_ffn)
    windows = validation_windows(corpora, 16, 4, seed=5)
    before = _mean_kl(memorized_model, student, windows)
    config = DistillConfig(tokens=40 * 32, peak_lr=3e-3, seq_len=16, batch_size=2, log_every=5)
    result = distill(memorized_model, student, corpora, config)
    assert _mean_kl(memorized_model, result.student, windows) < before
    assert [r["step"] for r in result.log] == [5, 10, 15, 20, 25, 30, 35, 40]
    assert result.log[0]["phase"] == "short"


def test_distill_edge_cases(model8):
    corpora = {"cycle": TOKENIZER.encode(MEMORIZED_TEXT * 5)}
    same = distill(model8, model8, corpora, DistillConfig(tokens=0))
    assert same.log == [] and same.student is not model8
    other_vocab = HybridModel.initialize(tiny_spec(8, vocab_size=300), seed=1)
    with pytest.raises(ValueError):
        distill(model8, other_vocab, corpora, DistillConfig(tokens=32))


def test_merge_checkpoints(model8, spec8):
    other = HybridModel.initialize(spec8, seed=9)
    assert all(np.array_equal(merge_checkpoints(model8, other, 0.0).params[k], model8.params[k])
               for k in model8.params)
    assert all(np.array_equal(merge_checkpoints(model8, other, 1.0).params[k], other.params[k])
               for k in model8.params)
    half = merge_checkpoints(model8, other, 0.5)
    assert np.allclose(half.params["embed"], (model8.params["embed"] + other.params["embed"]) / 2)
    with pytest.raises(ValueError):
        merge_checkpoints(model8, other, 1.5)
    with pytest.raises(ShapeError):
        merge_checkpoints(model8, realize_pruned(model8, [0, 1, 2, 3], 32), 0.5)


def test_merge_sweep(model8, spec8):
    other = HybridModel.initialize(spec8, seed=9)
    rows = merge_sweep(model8, other, [0.0, 0.5, 1.0], lambda m: float(m.params["final_norm"][0]))
    assert [r["alpha"] for r in rows] == [0.0, 0.5, 1.0]
    assert all(r["benchmark_avg"] == 1.0 for r in rows)
    assert merge_sweep(model8, other, [0.3])[0]["benchmark_avg"] is None


# ==========================================
# End to end
# ==========================================

def test_run_minipuzzle_end_to_end(model13, corpora, held_out, tmp_path):
    budget = memory_report(model13.spec, 1024, 1, 32).total_bytes * 0.9
    config = MiniPuzzleConfig(
        budget_bytes=budget, k1=4, k2=2, layer_calib_samples=2, neuron_calib_samples=3,
        score_samples=2, calib_seq_len=16, short_tokens=64, distill_batch_size=2, bench_windows=1,
        workers=2,
    )
    writer = RunLogWriter(str(tmp_path / "candidates.ndjson"))
    result = run_minipuzzle(model13, corpora, held_out, config, writer)
    assert all(r.memory_bytes <= budget for r in result.candidates)
    assert len(result.benchmarked) == 4
    expected = sorted(result.benchmarked, key=lambda r: (r.benchmark_avg, r.memory_bytes, r.sort_spec))[:2]
    assert [r.candidate_id for r in result.shortlist] == [r.candidate_id for r in expected]
    assert len(result.shortlist) == 2
    assert all(r.post_short_distill_avg is not None for r in result.shortlist)
    assert result.winner.candidate_id in {r.candidate_id for r in result.shortlist}
    assert result.final_model.spec == result.winner.spec
    assert [row["phase"] for row in result.distill_table] == ["short", "short", "extended"]
    assert result.summary["extended_tokens"] == 9 * 64
    assert result.summary["feasible_candidates"] == len(result.candidates)
    assert result.summary["benchmarked"] == 4


@pytest.mark.slow
def test_toy26_search_reproduces_pruning_shape(corpora, held_out):
    """Trained 26-layer parent: the ranking predicts pruned loss and distillation closes the gap."""
    parent = HybridModel.initialize(tiny_spec(26), seed=7)
    parent_config = TrainConfig(peak_lr=3e-3, warmup_tokens=64 * 20, total_tokens=64 * 400, batch_tokens=64,
                                seq_len=32, eval_interval_fraction=1.0, eval_sequences=1, seed=0)
    parent = train(parent, parent_config, BlendSchedule.phased(sorted(corpora)), corpora).model

    budget = memory_report(parent.spec, 1024, 1, 32).total_bytes * 0.8
    config = MiniPuzzleConfig(budget_bytes=budget, k1=24, k2=3, layer_calib_samples=8,
                              neuron_calib_samples=16, score_samples=16, calib_seq_len=32,
                              short_tokens=512, distill_batch_size=2, workers=4)
    result = run_minipuzzle(parent, corpora, held_out, config)
    assert result.final_model.spec.n_layers < 26 or result.final_model.spec.d_ffn < parent.spec.d_ffn
    assert memory_report(result.final_model.spec, 1024, 1, 32).total_bytes <= budget
    assert len(result.distill_table) == 4
    assert result.summary["feasible_candidates"] >= 100
    assert result.summary["benchmarked"] == 24
    assert result.summary["ranking_correlation"] <= -0.5
    recovered = result.summary["gap_recovered"]
    assert recovered is None or recovered >= 0.9
