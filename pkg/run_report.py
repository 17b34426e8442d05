#!/usr/bin/env python3
"""
Run Report
Helper functions for reading a run directory and writing plot-ready tables.

Every table is written twice, as CSV and as JSON, under <run>/reports/.
Nothing here reads the clock, so regenerating a report from the same run
directory produces byte-identical files.
"""

import csv
import logging
import os
from typing import Any, Dict, List, Optional, Sequence

from common import LOG_LEVEL, read_json, write_json
from run_logger import TRAIN_LOG, read_ndjson
from training import gap_summary, loss_gap

logger = logging.getLogger(__name__)
logger.setLevel(LOG_LEVEL)

# Run directory layout
CONFIG_FILE = "config.json"
CHECKPOINT_DIR = "checkpoints"
REPORT_DIR = "reports"
LOG_DIR = "logs"
CORPUS_DIR = "corpora"

CANDIDATES_FILE = "candidates.jsonl"
SHORTLIST_FILE = "shortlist.json"
BENCHMARKED_FILE = "benchmarked.json"
SEARCH_SUMMARY_FILE = "search_summary.json"
DISTILL_TABLE_FILE = "distill_table.json"
MERGE_SWEEP_FILE = "merge_sweep.json"
BENCH_FILE = "bench.json"

CANDIDATE_COLUMNS = (
    "candidate_id", "pattern", "ffn_width", "memory_bytes", "next_token_accuracy",
    "parent_agreement", "combined_rank", "benchmark_avg", "post_short_distill_avg",
)
GAP_COLUMNS = (
    "tokens", "step", "full_train_loss", "fp8_train_loss", "train_gap",
    "full_val_loss", "fp8_val_loss", "val_gap",
)
DISTILL_COLUMNS = (
    "candidate_id", "phase", "pattern", "ffn_width",
    "next_token_accuracy", "parent_agreement", "benchmark_avg",
)


def run_path(run_dir: str, *parts: str) -> str:
    return os.path.join(run_dir, *parts)


def ensure_run_dirs(run_dir: str) -> None:
    for sub in (CHECKPOINT_DIR, REPORT_DIR, LOG_DIR, CORPUS_DIR):
        os.makedirs(run_path(run_dir, sub), exist_ok=True)


# ==========================================
# Writers
# ==========================================

def write_csv(path: str, rows: Sequence[Dict[str, Any]], columns: Sequence[str]) -> None:
    """Write rows with a fixed column order ('' for missing values)."""
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow(["" if row.get(c) is None else row.get(c) for c in columns])


def write_table(run_dir: str, name: str, rows: Sequence[Dict[str, Any]], columns: Sequence[str]) -> str:
    csv_path = run_path(run_dir, REPORT_DIR, f"{name}.csv")
    write_csv(csv_path, rows, columns)
    write_json(run_path(run_dir, REPORT_DIR, f"{name}_table.json"),
               {"columns": list(columns), "rows": [{c: r.get(c) for c in columns} for r in rows]})
    return csv_path


# ==========================================
# Readers
# ==========================================

def read_train_log(run_dir: str, mode: str) -> Optional[List[Dict[str, Any]]]:
    path = run_path(run_dir, LOG_DIR, TRAIN_LOG.format(mode=mode))
    return read_ndjson(path) if os.path.exists(path) else None


def read_candidates(run_dir: str) -> Optional[List[Dict[str, Any]]]:
    path = run_path(run_dir, REPORT_DIR, CANDIDATES_FILE)
    return read_ndjson(path) if os.path.exists(path) else None


def read_report_json(run_dir: str, name: str) -> Optional[Any]:
    path = run_path(run_dir, REPORT_DIR, name)
    return read_json(path) if os.path.exists(path) else None


# ==========================================
# Report
# ==========================================

def build_reports(run_dir: str) -> Dict[str, str]:
    """
    Regenerate every table the run directory has data for.

    Returns:
        Mapping table name -> CSV path
    """
    written: Dict[str, str] = {}

    full, fp8 = read_train_log(run_dir, "FULL"), read_train_log(run_dir, "FP8_MIXED")
    if full is not None and fp8 is not None:
        gaps = loss_gap(full, fp8)
        written["loss_gap"] = write_table(run_dir, "loss_gap", gaps, GAP_COLUMNS)
        write_json(run_path(run_dir, REPORT_DIR, "loss_gap_summary.json"), gap_summary(gaps))

    candidates = read_candidates(run_dir)
    if candidates is not None:
        # benchmarked top-k1 first, then the shortlist with its distillation scores
        overlays = [
            {c["candidate_id"]: c for c in read_report_json(run_dir, name) or []}
            for name in (BENCHMARKED_FILE, SHORTLIST_FILE)
        ]
        rows = []
        for c in candidates:
            row = dict(c)
            for listed in overlays:
                if c["candidate_id"] in listed:
                    row.update({k: v for k, v in listed[c["candidate_id"]].items() if v is not None})
            rows.append(row)
        written["candidates"] = write_table(run_dir, "candidates", rows, CANDIDATE_COLUMNS)

    distill_rows = read_report_json(run_dir, DISTILL_TABLE_FILE)
    if distill_rows is not None:
        written["distill_table"] = write_table(run_dir, "distill_table", distill_rows, DISTILL_COLUMNS)

    merge_rows = read_report_json(run_dir, MERGE_SWEEP_FILE)
    if merge_rows is not None:
        written["merge_sweep"] = write_table(run_dir, "merge_sweep", merge_rows, ("alpha", "benchmark_avg"))

    logger.info(f"📊 Wrote {len(written)} report tables under {run_path(run_dir, REPORT_DIR)}")
    return written


def print_run_summary(run_dir: str) -> None:
    """Print a human-readable summary of a run directory."""
    print("\n" + "=" * 80)
    print(f"RUN: {run_dir}")
    print("=" * 80)

    for mode in ("FULL", "FP8_MIXED"):
        log = read_train_log(run_dir, mode)
        if log:
            last = log[-1]
            print(f"\nTraining [{mode}]: {len(log)} intervals, {last['tokens']} tokens")
            print(f"  Final train loss: {last['train_loss']:.4f}")
            print(f"  Final val loss:   {last['val_loss']:.4f}")

    summary = read_report_json(run_dir, "loss_gap_summary.json")
    if summary and summary.get("intervals"):
        print(f"\nFP8 loss gap: typical {summary['typical_train_gap']:.4%}, final val {summary['final_val_gap']:.4%}")

    bench = read_report_json(run_dir, BENCH_FILE)
    if bench:
        print(f"\nBench: {bench['flops_per_token']:.0f} FLOPs/token "
              f"(baseline {bench['baseline']['flops_per_token']:.0f}), "
              f"max batch {bench.get('max_feasible_batch')}")

    search = read_report_json(run_dir, SEARCH_SUMMARY_FILE)
    if search:
        rho = search.get("ranking_correlation")
        print(f"\nSearch: {search['feasible_candidates']} feasible, {search['benchmarked']} benchmarked, "
              f"rank-vs-benchmark rho {'n/a' if rho is None else f'{rho:.3f}'}")

    rows = read_report_json(run_dir, DISTILL_TABLE_FILE)
    if rows:
        print("\nDistillation:")
        for r in rows:
            print(f"  {r['candidate_id']:8s} {r['phase']:9s} acc {r['next_token_accuracy']}  "
                  f"agree {r['parent_agreement']}  bench {r['benchmark_avg']}")
    print()
