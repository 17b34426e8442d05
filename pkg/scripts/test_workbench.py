import json
import os

import numpy as np
import pytest

from checkpoint import load_checkpoint, load_model
from conftest import TINY_DIMS
from run_logger import read_ndjson
from workbench import EXIT_OK, EXIT_WORKBENCH_ERROR, main


def _tiny_config(**sections):
    config = {
        "seed": 0,
        "arch": {"total_layers": 8, **TINY_DIMS},
        "train": {"total_tokens": 256, "warmup_tokens": 64, "batch_tokens": 64, "seq_len": 16,
                  "eval_interval_fraction": 0.5, "eval_sequences": 1},
        "corpus": {"size": 50, "held_out_size": 20},
        "search": {"k1": 4, "k2": 2, "layer_calib_samples": 2, "neuron_calib_samples": 3,
                   "score_samples": 2, "calib_seq_len": 16, "bench_windows": 1},
        "distill": {"short_tokens": 64, "extended_ratio": 2, "batch_size": 2, "merge_alphas": [0.5]},
        "bench": {"prompt_len": 4, "gen_len": 2},
    }
    for name, values in sections.items():
        config[name] = {**config.get(name, {}), **values}
    return config


@pytest.fixture
def config_path(tmp_path):
    def write(**sections):
        path = tmp_path / "config.json"
        path.write_text(json.dumps(_tiny_config(**sections)))
        return str(path)
    return write


def _error(capsys):
    return json.loads(capsys.readouterr().out)


# ==========================================
# Errors
# ==========================================

def test_missing_config_exits_with_error_json(tmp_path, capsys):
    assert main(["train", "--out", str(tmp_path / "run")]) == EXIT_WORKBENCH_ERROR
    payload = _error(capsys)
    assert payload["error"] == "invalid_config"
    assert set(payload) == {"error", "message", "details"}


def test_invalid_config_lists_fields(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"arch": {"total_layers": 8}, "train": {"seq_len": 0}}))
    assert main(["gen-corpus", "--config", str(path), "--out", str(tmp_path / "run")]) == EXIT_WORKBENCH_ERROR
    assert any("train.seq_len" in f for f in _error(capsys)["details"]["fields"])


def test_distill_before_search_fails(config_path, tmp_path, capsys):
    out = str(tmp_path / "run")
    assert main(["train", "--config", config_path(train={"total_tokens": 0, "warmup_tokens": 0}),
                 "--out", out]) == EXIT_OK
    capsys.readouterr()
    assert main(["distill", "--out", out]) == EXIT_WORKBENCH_ERROR
    assert "prune-search" in _error(capsys)["message"]


def test_report_needs_a_run_dir(tmp_path, capsys):
    assert main(["report", "--out", str(tmp_path / "nope")]) == EXIT_WORKBENCH_ERROR
    assert _error(capsys)["error"] == "invalid_config"


def test_bench_without_checkpoint(config_path, tmp_path, capsys):
    assert main(["bench", "--config", config_path(), "--out", str(tmp_path / "run")]) == EXIT_WORKBENCH_ERROR
    assert _error(capsys)["error"] == "bad_checkpoint"


def test_bench_over_budget(config_path, tmp_path, capsys):
    out = str(tmp_path / "run")
    main(["train", "--config", config_path(train={"total_tokens": 0, "warmup_tokens": 0}), "--out", out])
    capsys.readouterr()
    assert main(["bench", "--config", config_path(memory={"budget_bytes": 1000}), "--out", out]) \
        == EXIT_WORKBENCH_ERROR
    payload = _error(capsys)
    assert payload["error"] == "memory_budget_exceeded"
    assert payload["details"]["component"] == "weights"


# ==========================================
# Commands
# ==========================================

def test_zero_token_training_saves_the_initial_model(config_path, tmp_path):
    out = tmp_path / "run"
    assert main(["train", "--config", config_path(train={"total_tokens": 0, "warmup_tokens": 0}),
                 "--out", str(out)]) == EXIT_OK
    init = load_model(str(out / "checkpoints" / "init.nhck"))
    final = load_model(str(out / "checkpoints" / "final.nhck"))
    assert all(np.array_equal(init.params[k], final.params[k]) for k in init.params)
    assert read_ndjson(str(out / "logs" / "train_FULL.ndjson")) == []


def test_seed_override_lands_in_the_run_config(config_path, tmp_path):
    out = tmp_path / "run"
    assert main(["gen-corpus", "--config", config_path(), "--seed", "9", "--out", str(out)]) == EXIT_OK
    assert json.loads((out / "config.json").read_text())["seed"] == 9
    assert sorted(os.listdir(out / "corpora")) == [
        "arithmetic.txt", "grammar.txt", "soup.txt",
        "task_arithmetic.txt", "task_grammar.txt", "task_soup.txt",
    ]


def test_config_is_reused_from_the_run_dir(config_path, tmp_path):
    out = str(tmp_path / "run")
    assert main(["gen-corpus", "--config", config_path(), "--out", out]) == EXIT_OK
    assert main(["gen-corpus", "--out", out]) == EXIT_OK


def test_bench_reports_the_configured_memory(config_path, tmp_path):
    out = tmp_path / "run"
    main(["train", "--config", config_path(train={"total_tokens": 0, "warmup_tokens": 0}), "--out", str(out)])
    path = config_path(memory={"seq": 32, "activation_reserve": 512, "weight_bits": 8})
    assert main(["bench", "--config", path, "--out", str(out)]) == EXIT_OK
    memory = json.loads((out / "reports" / "bench.json").read_text())["memory"]
    assert memory["seq"] == 32
    assert memory["activation_reserve"] == 512
    assert memory["weight_bits"] == 8


def test_compare_precision_writes_both_logs(config_path, tmp_path):
    out = tmp_path / "run"
    assert main(["train", "--config", config_path(train={"compare_precision": True}),
                 "--out", str(out)]) == EXIT_OK
    full = read_ndjson(str(out / "logs" / "train_FULL.ndjson"))
    fp8 = read_ndjson(str(out / "logs" / "train_FP8_MIXED.ndjson"))
    assert [r["tokens"] for r in full] == [r["tokens"] for r in fp8] == [128, 256]
    assert (out / "checkpoints" / "fp8.nhck").exists()
    summary = json.loads((out / "reports" / "loss_gap_summary.json").read_text())
    assert summary["intervals"] == 2


def test_full_pipeline(config_path, tmp_path, capsys):
    out = tmp_path / "run"
    path = config_path()
    for command in ("gen-corpus", "train", "bench", "prune-search", "distill", "report"):
        assert main([command, "--config", path, "--out", str(out), "--workers", "2"]) == EXIT_OK, command

    reports = out / "reports"
    bench = json.loads((reports / "bench.json").read_text())
    assert bench["flops_per_token"] > 0
    shortlist = json.loads((reports / "shortlist.json").read_text())
    assert len(shortlist) == 2
    search = json.loads((reports / "search_summary.json").read_text())
    assert search["benchmarked"] == 4
    assert all(r["post_short_distill_avg"] is not None for r in shortlist)
    assert len(json.loads((reports / "merge_sweep.json").read_text())) == 1
    winner = load_checkpoint(str(out / "checkpoints" / "winner.nhck"))
    assert winner.meta["phase"] == "extended"
    for table in ("candidates", "distill_table", "merge_sweep"):
        assert (reports / f"{table}.csv").exists()
    assert "Distillation:" in capsys.readouterr().out
