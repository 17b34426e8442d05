import csv
import json
from dataclasses import replace

import pytest

from common import write_json
from conftest import tiny_spec
from minipuzzle import CandidateReport, write_reports_jsonl
from run_logger import (
    RunLogWriter,
    generate_run_id,
    log_candidate_scored,
    log_train_interval,
    read_ndjson,
)
from run_report import (
    BENCH_FILE,
    BENCHMARKED_FILE,
    CANDIDATES_FILE,
    DISTILL_TABLE_FILE,
    LOG_DIR,
    MERGE_SWEEP_FILE,
    REPORT_DIR,
    SEARCH_SUMMARY_FILE,
    SHORTLIST_FILE,
    build_reports,
    ensure_run_dirs,
    print_run_summary,
    run_path,
    write_csv,
)


def _record(tokens, train_loss, val_loss, mode):
    return {"tokens": tokens, "step": tokens // 10, "lr": 0.001,
            "train_loss": train_loss, "val_loss": val_loss, "mode": mode}


# ==========================================
# Run logs
# ==========================================

def test_run_id_is_a_stable_hash():
    assert generate_run_id({"a": 1, "b": [1, 2]}) == generate_run_id({"b": [1, 2], "a": 1})
    assert generate_run_id({"a": 1}) != generate_run_id({"a": 2})
    assert len(generate_run_id({})) == 12


def test_writer_appends_canonical_lines(tmp_path):
    path = str(tmp_path / "logs" / "x.ndjson")
    writer = RunLogWriter(path)
    log_train_interval(_record(10, 2.0, 2.1, "FULL"), writer)
    log_candidate_scored({"candidate_id": "c0", "memory_bytes": 5}, writer)
    assert writer.count == 2
    assert read_ndjson(path)[1] == {"candidate_id": "c0", "memory_bytes": 5}
    first = (tmp_path / "logs" / "x.ndjson").read_text().splitlines()[0]
    assert first == json.dumps(_record(10, 2.0, 2.1, "FULL"), sort_keys=True, separators=(",", ":"))


def test_writer_truncates_unless_asked_not_to(tmp_path):
    path = str(tmp_path / "x.ndjson")
    RunLogWriter(path).append({"a": 1})
    RunLogWriter(path, truncate=False).append({"a": 2})
    assert read_ndjson(path) == [{"a": 1}, {"a": 2}]
    RunLogWriter(path)
    assert read_ndjson(path) == []


def test_train_record_needs_every_key():
    with pytest.raises(ValueError):
        log_train_interval({"tokens": 1})


# ==========================================
# Reports
# ==========================================

def test_write_csv_fills_missing_values(tmp_path):
    path = tmp_path / "t.csv"
    write_csv(str(path), [{"a": 1, "b": None}, {"a": 2}], ["a", "b"])
    assert path.read_text() == "a,b\n1,\n2,\n"


@pytest.fixture
def run_dir(tmp_path):
    out = str(tmp_path / "run")
    ensure_run_dirs(out)
    for mode, losses in (("FULL", [(2.0, 2.2), (1.5, 1.8)]), ("FP8_MIXED", [(2.02, 2.21), (1.53, 1.8)])):
        writer = RunLogWriter(run_path(out, LOG_DIR, f"train_{mode}.ndjson"))
        for i, (tr, va) in enumerate(losses):
            writer.append(_record(10 * (i + 1), tr, va, mode))

    spec = tiny_spec(8)
    reports = [CandidateReport(f"c{i}", spec, list(range(8)), 32, 1000 + i,
                               next_token_accuracy=0.5, parent_agreement=0.9, combined_rank=i)
               for i in range(3)]
    write_reports_jsonl(run_path(out, REPORT_DIR, CANDIDATES_FILE), reports)
    write_json(run_path(out, REPORT_DIR, BENCHMARKED_FILE),
               [replace(reports[0], benchmark_avg=4.5).to_dict(), replace(reports[1], benchmark_avg=4.3).to_dict()])
    listed = replace(reports[1], benchmark_avg=4.2, post_short_distill_avg=3.9)
    write_json(run_path(out, REPORT_DIR, SHORTLIST_FILE), [listed.to_dict()])
    write_json(run_path(out, REPORT_DIR, DISTILL_TABLE_FILE), [
        {"candidate_id": "c1", "phase": "short", "pattern": spec.pattern(), "ffn_width": 32,
         "next_token_accuracy": 0.6, "parent_agreement": 0.95, "benchmark_avg": 3.9},
    ])
    write_json(run_path(out, REPORT_DIR, MERGE_SWEEP_FILE), [{"alpha": 0.5, "benchmark_avg": 4.0}])
    write_json(run_path(out, REPORT_DIR, SEARCH_SUMMARY_FILE),
               {"feasible_candidates": 3, "benchmarked": 2, "ranking_correlation": -0.75})
    write_json(run_path(out, REPORT_DIR, BENCH_FILE), {
        "flops_per_token": 1000.0, "baseline": {"flops_per_token": 1500.0}, "max_feasible_batch": 4,
    })
    return out


def test_build_reports_writes_every_table(run_dir):
    written = build_reports(run_dir)
    assert sorted(written) == ["candidates", "distill_table", "loss_gap", "merge_sweep"]
    with open(written["candidates"], encoding="utf-8") as f:
        rows = list(csv.DictReader(f))
    assert [r["candidate_id"] for r in rows] == ["c0", "c1", "c2"]
    assert rows[1]["benchmark_avg"] == "4.2"
    assert rows[1]["post_short_distill_avg"] == "3.9"
    summary = json.loads(open(run_path(run_dir, REPORT_DIR, "loss_gap_summary.json")).read())
    assert summary["intervals"] == 2
    assert summary["typical_train_gap"] == pytest.approx((0.01 + 0.02) / 2)


def test_candidates_table_carries_every_benchmark_score(run_dir):
    with open(build_reports(run_dir)["candidates"], encoding="utf-8") as f:
        rows = {r["candidate_id"]: r for r in csv.DictReader(f)}
    assert rows["c0"]["benchmark_avg"] == "4.5"
    assert rows["c0"]["post_short_distill_avg"] == ""
    assert rows["c2"]["benchmark_avg"] == ""


def test_build_reports_is_idempotent(run_dir):
    first = build_reports(run_dir)
    before = {name: open(path, "rb").read() for name, path in first.items()}
    second = build_reports(run_dir)
    assert {name: open(path, "rb").read() for name, path in second.items()} == before


def test_empty_run_dir_writes_nothing(tmp_path):
    ensure_run_dirs(str(tmp_path))
    assert build_reports(str(tmp_path)) == {}


def test_run_summary_prints(run_dir, capsys):
    build_reports(run_dir)
    print_run_summary(run_dir)
    out = capsys.readouterr().out
    assert "Training [FULL]: 2 intervals" in out
    assert "FP8 loss gap" in out
    assert "Search: 3 feasible, 2 benchmarked, rank-vs-benchmark rho -0.750" in out
    assert "c1" in out
