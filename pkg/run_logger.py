"""
run_logger.py - Run-log writing for training, benchmarking and pruning runs

Every interval/result record is written twice:
- appended to a newline-delimited JSON file under the run's logs/ directory
  (the source of truth for reports; no wall-clock values inside)
- emitted as a structured log event (TRAIN_INTERVAL, CANDIDATE_SCORED, ...)
  so console output and any log collector see the same numbers
"""

import hashlib
import json
import logging
import os
from typing import Any, Dict, List, Optional

from common import LOG_LEVEL, NumpyEncoder, canonical_json, get_log_timestamp

logger = logging.getLogger(__name__)
logger.setLevel(LOG_LEVEL)

TRAIN_LOG = "train_{mode}.ndjson"
CANDIDATE_LOG = "candidates.ndjson"
DISTILL_LOG = "distill.ndjson"

# Keys every training record carries, in report column order
TRAIN_RECORD_KEYS = ("tokens", "step", "lr", "train_loss", "val_loss", "mode")


def generate_run_id(config: Dict[str, Any]) -> str:
    """Deterministic run id: hash of the canonical config document"""
    return hashlib.md5(canonical_json(config, indent=None).encode()).hexdigest()[:12]


class RunLogWriter:
    """
    Append-only NDJSON writer.

    Args:
        path: File to append to (parent directories are created)
        truncate: Start a fresh file instead of appending
    """

    def __init__(self, path: str, truncate: bool = True):
        self.path = path
        parent = os.path.dirname(path)
        if parent:
            os.makedirs(parent, exist_ok=True)
        if truncate:
            open(path, "w", encoding="utf-8").close()
        self.count = 0

    def append(self, record: Dict[str, Any]) -> None:
        line = json.dumps(record, cls=NumpyEncoder, sort_keys=True, separators=(",", ":"))
        with open(self.path, "a", encoding="utf-8") as f:
            f.write(line + "\n")
        self.count += 1


def read_ndjson(path: str) -> List[Dict[str, Any]]:
    with open(path, "r", encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


# ===============================================
# STRUCTURED EVENTS
# ===============================================

def log_train_interval(record: Dict[str, Any], writer: Optional[RunLogWriter] = None) -> None:
    """Log one training interval record to the NDJSON file and as TRAIN_INTERVAL."""
    missing = [k for k in TRAIN_RECORD_KEYS if k not in record]
    if missing:
        raise ValueError(f"training record missing keys: {missing}")
    if writer is not None:
        writer.append(record)
    logger.info(
        "TRAIN_INTERVAL",
        extra={
            "mode": record["mode"],
            "step": record["step"],
            "tokens": record["tokens"],
            "lr": record["lr"],
            "train_loss": record["train_loss"],
            "val_loss": record["val_loss"],
            "logged_at": get_log_timestamp(),
        },
    )


def log_step_skipped(step: int, reason: str, skipped_total: int) -> None:
    logger.warning(
        "STEP_SKIPPED",
        extra={"step": step, "reason": reason, "skipped_total": skipped_total},
    )


def log_candidate_scored(report: Dict[str, Any], writer: Optional[RunLogWriter] = None) -> None:
    if writer is not None:
        writer.append(report)
    logger.info(
        "CANDIDATE_SCORED",
        extra={
            "candidate_id": report.get("candidate_id"),
            "memory_bytes": report.get("memory_bytes"),
            "next_token_accuracy": report.get("next_token_accuracy"),
            "parent_agreement": report.get("parent_agreement"),
        },
    )


def log_distill_interval(record: Dict[str, Any], writer: Optional[RunLogWriter] = None) -> None:
    if writer is not None:
        writer.append(record)
    logger.info(
        "DISTILL_INTERVAL",
        extra={
            "phase": record.get("phase"),
            "step": record.get("step"),
            "tokens": record.get("tokens"),
            "kl": record.get("kl"),
        },
    )


def log_bench_complete(report: Dict[str, Any]) -> None:
    logger.info(
        "BENCH_COMPLETE",
        extra={
            "prompt_len": report.get("prompt_len"),
            "gen_len": report.get("gen_len"),
            "batch": report.get("batch"),
            "tokens_per_sec": report.get("tokens_per_sec"),
            "flops_per_token": report.get("flops_per_token"),
            "max_feasible_batch": report.get("max_feasible_batch"),
        },
    )
