import json
import os

import pytest

from common import ConfigError
from run_config import (
    SMOKE_MAX_CANDIDATES_K1,
    apply_smoke_overrides,
    load_run_config,
    parse_run_config,
)
from training import PrecisionMode

CONFIG_DIR = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "configs")


@pytest.mark.parametrize("name", ["toy13.json", "toy26_minipuzzle.json"])
def test_shipped_configs_load(name):
    config = load_run_config(os.path.join(CONFIG_DIR, name))
    assert config.arch.to_spec().placement_violations() == []


def test_toy13_is_thirteen_layers_with_one_attention():
    spec = load_run_config(os.path.join(CONFIG_DIR, "toy13.json")).arch.to_spec()
    assert spec.n_layers == 13
    assert spec.counts()["Attention"] == 1


def test_defaults_fill_every_section():
    config = parse_run_config({"arch": {"total_layers": 8}})
    assert config.train.total_tokens == 0
    assert config.search.k1 == 130
    assert config.memory.budget_bytes is None
    assert config.minipuzzle_config().budget_bytes == float("inf")


def test_explicit_layer_list():
    config = parse_run_config({"arch": {"layers": ["Mamba2", "FFN", "Attention", "FFN"]}})
    assert config.arch.to_spec().pattern() == "MFAF"


@pytest.mark.parametrize("data", [
    {"arch": {"total_layers": 8}, "bogus": 1},
    {"arch": {"total_layers": 8, "n_experts": 2}},
    {"arch": {}},
    {"arch": {"total_layers": 8, "layers": ["Mamba2", "FFN"]}},
    {"arch": {"total_layers": 8}, "train": {"peak_lr": -1}},
    {"arch": {"total_layers": 8}, "corpus": {"categories": ["poetry"]}},
    {"arch": {"total_layers": 8, "d_model": 15}},
    {"arch": {"total_layers": 8}, "train": {"total_tokens": 100, "warmup_tokens": 100}},
    {"arch": {"total_layers": 8}, "blend": {"phases": [{"start": 0.5, "weights": {"soup": 1.0}}]}},
    {"arch": {"total_layers": 8}, "bench": {"sampler": "beam"}},
])
def test_invalid_documents_raise_config_error(data):
    with pytest.raises(ConfigError):
        parse_run_config(data)


def test_validation_lists_field_paths():
    with pytest.raises(ConfigError) as err:
        parse_run_config({"arch": {"total_layers": 8}, "train": {"peak_lr": -1, "seq_len": 0}})
    fields = " ".join(err.value.details["fields"])
    assert "train.peak_lr" in fields
    assert "train.seq_len" in fields


def test_unreadable_config(tmp_path):
    with pytest.raises(ConfigError):
        load_run_config(str(tmp_path / "missing.json"))
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError):
        load_run_config(str(bad))


def test_load_run_config_overrides_the_seed(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"seed": 1, "arch": {"total_layers": 8}}))
    assert load_run_config(str(path)).seed == 1
    assert load_run_config(str(path), seed=12).seed == 12
    path.write_text("[1, 2]")
    with pytest.raises(ConfigError):
        load_run_config(str(path))


def test_derived_configs():
    config = parse_run_config({
        "seed": 5,
        "arch": {"total_layers": 8},
        "train": {"total_tokens": 4096, "batch_tokens": 512, "seq_len": 64},
        "memory": {"budget_bytes": 1e6, "weight_bits": 8, "activation_reserve": 4096, "overhead_fraction": 0.1},
        "distill": {"peak_lr": 0.002, "batch_size": 3},
    })
    tc = config.train_config()
    assert tc.seed == 5
    assert tc.batch_size == 8
    assert config.train_config(PrecisionMode.FP8_MIXED).precision_mode == PrecisionMode.FP8_MIXED
    mp = config.minipuzzle_config(workers=3)
    assert mp.workers == 3
    assert mp.budget_bytes == 1e6
    assert mp.weight_bits == 8
    assert mp.activation_reserve == 4096
    assert mp.overhead_fraction == pytest.approx(0.1)
    dc = config.distill_config(1000)
    assert dc.train_config().peak_lr == pytest.approx(0.002)
    assert len(config.blend_schedule().phases) == 3


def test_smoke_overrides_shrink_budgets():
    with open(os.path.join(CONFIG_DIR, "toy26_minipuzzle.json"), encoding="utf-8") as f:
        config = parse_run_config(json.load(f))
    smoke = apply_smoke_overrides(config)
    assert smoke.train.total_tokens < config.train.total_tokens
    assert smoke.train.warmup_tokens < smoke.train.total_tokens
    assert smoke.search.k1 == SMOKE_MAX_CANDIDATES_K1
    assert smoke.search.k2 <= smoke.search.k1
    assert smoke.corpus.size == 1000
    assert smoke.distill.short_tokens == 200
    assert smoke.arch == config.arch


def test_smoke_keeps_zero_token_runs():
    smoke = apply_smoke_overrides(parse_run_config({"arch": {"total_layers": 8}}))
    assert smoke.train.total_tokens == 0
