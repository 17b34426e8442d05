"""
Shared fixtures: tiny hybrid models, corpora and a memorized model.

Long acceptance runs are marked `slow` and only run with NH_DESK_SLOW=1.
"""

import os

os.environ.setdefault("NH_DESK_PROGRESS", "0")

import numpy as np
import pytest

from corpus import CATEGORIES, generate_lines, lines_to_tokens, TOKENIZER
from hybrid_model import HybridModel, build_architecture
from training import BlendSchedule, TrainConfig, train

RUN_SLOW = os.getenv("NH_DESK_SLOW", "0") == "1"

# Small enough that a forward over 32 tokens takes milliseconds
TINY_DIMS = {
    "d_model": 16,
    "d_ffn": 32,
    "n_q_heads": 2,
    "n_kv_heads": 1,
    "d_state": 4,
    "n_groups": 1,
    "mamba_head_dim": 8,
    "mamba_expand": 2,
    "conv_window": 4,
    "vocab_size": 258,
}

MEMORIZED_TEXT = "abcdefghijklmnopqrstuvwxyz012345"


def pytest_collection_modifyitems(config, items):
    if RUN_SLOW:
        return
    skip = pytest.mark.skip(reason="slow acceptance run (set NH_DESK_SLOW=1)")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


def tiny_spec(total_layers: int = 8, **overrides):
    return build_architecture(total_layers, 0.08, **{**TINY_DIMS, **overrides})


@pytest.fixture
def spec8():
    return tiny_spec(8)


@pytest.fixture
def spec13():
    return tiny_spec(13)


@pytest.fixture
def model8(spec8):
    return HybridModel.initialize(spec8, seed=0)


@pytest.fixture
def model8_f64(spec8):
    return HybridModel.initialize(spec8, seed=0, dtype=np.float64)


@pytest.fixture
def model13(spec13):
    return HybridModel.initialize(spec13, seed=1)


@pytest.fixture
def model13_f64(spec13):
    return HybridModel.initialize(spec13, seed=1, dtype=np.float64)


@pytest.fixture(scope="session")
def corpora():
    return {c: lines_to_tokens(generate_lines(c, seed=0, size=200)) for c in CATEGORIES}


@pytest.fixture(scope="session")
def held_out():
    return {f"task_{c}": lines_to_tokens(generate_lines(c, seed=0, size=40, stream=1_000_003))
            for c in CATEGORIES}


@pytest.fixture(scope="session")
def memorized_model():
    """4-layer model trained until it reproduces MEMORIZED_TEXT cyclically."""
    spec = build_architecture(4, 0.25, **TINY_DIMS)
    model = HybridModel.initialize(spec, seed=3)
    stream = TOKENIZER.encode(MEMORIZED_TEXT * 40)
    config = TrainConfig(
        peak_lr=1e-2,
        warmup_tokens=0,
        total_tokens=300 * 64,
        batch_tokens=64,
        seq_len=32,
        weight_decay=0.0,
        eval_interval_fraction=1.0,
        eval_sequences=1,
        seed=0,
    )
    return train(model, config, BlendSchedule.single("cycle"), {"cycle": stream}).model
