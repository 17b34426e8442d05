"""
common.py - Shared utilities for the hybrid model desk workbench

This module provides common functionality used by every other module:
- Environment configuration (log level, smoke mode, progress bars, timezone)
- Logging bootstrap for command-line entry points
- The error hierarchy and its machine-readable JSON form
- JSON helpers that understand numpy scalars/arrays and write canonical output

Architecture:
- Library modules never configure handlers; they only create module loggers
- The CLI (workbench.py) calls configure_logging() once at startup
- Every error raised on purpose derives from WorkbenchError so the CLI can
  turn it into an error JSON document and a nonzero exit code
"""

import json
import logging
import os
import sys
from datetime import datetime
from typing import Any, Dict, Optional

import numpy as np
import pytz

# ===============================================
# ENVIRONMENT CONFIGURATION
# ===============================================
# Load configuration from environment variables with sensible defaults

LOG_LEVEL = os.getenv("LOG_LEVEL", "INFO").upper()

# Smoke mode shrinks every token/sample budget so CI finishes in seconds
SMOKE_MODE = os.getenv("NH_DESK_SMOKE", "0") == "1"

# Progress bars (tqdm) for long loops; off in CI logs
SHOW_PROGRESS = os.getenv("NH_DESK_PROGRESS", "1") == "1"

# Timezone for wall-clock stamps in logs/ (never written to checkpoints or reports)
LOG_TIMEZONE = os.getenv("NH_DESK_TIMEZONE", "America/New_York")

logger = logging.getLogger(__name__)
logger.setLevel(LOG_LEVEL)

_LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def configure_logging(level: Optional[str] = None) -> None:
    """Install a single stderr handler on the root logger (idempotent)."""
    root = logging.getLogger()
    root.setLevel((level or LOG_LEVEL).upper())
    if not any(getattr(h, "_nh_desk", False) for h in root.handlers):
        handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(logging.Formatter(_LOG_FORMAT))
        handler._nh_desk = True  # type: ignore[attr-defined]
        root.addHandler(handler)


def get_log_timestamp() -> str:
    """
    Current wall-clock time as an ISO string in the configured log timezone.

    Only used for human-facing log lines; anything that must be reproducible
    (checkpoints, reports, run logs) carries token/step counters instead.
    """
    tz = pytz.timezone(LOG_TIMEZONE)
    return datetime.now(tz).isoformat(timespec="seconds")


# ===============================================
# ERRORS
# ===============================================

class WorkbenchError(Exception):
    """
    Base class for every deliberate failure in the workbench.

    Carries a short machine-readable error_type and a details dict so the
    CLI can emit {"error": ..., "message": ..., "details": {...}}.
    """

    error_type = "workbench_error"

    def __init__(self, message: str, **details: Any):
        super().__init__(message)
        self.message = message
        self.details = details

    def to_dict(self) -> Dict[str, Any]:
        return {
            "error": self.error_type,
            "message": self.message,
            "details": to_jsonable(self.details),
        }


class ShapeError(WorkbenchError, ValueError):
    error_type = "shape_mismatch"


class NonFiniteError(WorkbenchError, ArithmeticError):
    error_type = "non_finite"


class ConfigError(WorkbenchError, ValueError):
    error_type = "invalid_config"


class MemoryBudgetError(WorkbenchError):
    """Raised when a configuration does not fit the memory budget.

    details["component"] names what overflowed: weights, kv_cache, mamba_state
    or activations.
    """

    error_type = "memory_budget_exceeded"


class NoFeasibleCandidatesError(WorkbenchError):
    error_type = "no_feasible_candidates"


class TrainingDivergedError(WorkbenchError):
    error_type = "training_diverged"


class CheckpointError(WorkbenchError, ValueError):
    error_type = "bad_checkpoint"


class SamplerError(WorkbenchError, ValueError):
    error_type = "invalid_sampler"


class CorpusError(WorkbenchError, ValueError):
    error_type = "invalid_corpus"


def error_payload(exc: BaseException) -> Dict[str, Any]:
    """
    Convert any exception into the error JSON document printed by the CLI.

    Unexpected exceptions report their class name as the error type.
    """
    if isinstance(exc, WorkbenchError):
        return exc.to_dict()
    return {
        "error": type(exc).__name__,
        "message": str(exc),
        "details": {},
    }


# ===============================================
# JSON HELPERS
# ===============================================

class NumpyEncoder(json.JSONEncoder):
    """JSON encoder that handles numpy scalars and arrays"""
    def default(self, obj):
        if isinstance(obj, np.integer):
            return int(obj)
        if isinstance(obj, np.floating):
            return float(obj)
        if isinstance(obj, np.bool_):
            return bool(obj)
        if isinstance(obj, np.ndarray):
            return obj.tolist()
        return super(NumpyEncoder, self).default(obj)


def to_jsonable(obj: Any) -> Any:
    """Round-trip through NumpyEncoder to get plain Python containers."""
    return json.loads(json.dumps(obj, cls=NumpyEncoder))


def canonical_json(obj: Any, indent: Optional[int] = 2) -> str:
    """Deterministic JSON text (sorted keys, fixed separators, trailing newline)."""
    text = json.dumps(obj, cls=NumpyEncoder, sort_keys=True, indent=indent,
                      separators=(",", ": ") if indent else (",", ":"))
    return text + "\n"


def write_json(path: str, obj: Any) -> None:
    """Write canonical JSON to path, creating parent directories."""
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        f.write(canonical_json(obj))


def read_json(path: str) -> Any:
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)
