#!/usr/bin/env python3
"""
Desk Workbench CLI
Runs the hybrid-model recipe end to end from one JSON config.

Usage:
    python workbench.py gen-corpus   --config configs/toy13.json --out runs/toy13
    python workbench.py train        --config configs/toy13.json --out runs/toy13
    python workbench.py bench        --config configs/toy13.json --out runs/toy13
    python workbench.py prune-search --config configs/toy26_minipuzzle.json --out runs/toy26 --workers 4
    python workbench.py distill      --config configs/toy26_minipuzzle.json --out runs/toy26
    python workbench.py report       --out runs/toy26

Run directory layout:
    config.json    validated config (canonical JSON)
    corpora/       synthetic training corpora + held-out task corpora
    checkpoints/   NHCK checkpoints (init, final, full/fp8, winner)
    logs/          NDJSON run logs
    reports/       JSON/JSONL results and CSV tables

Exit codes: 0 success, 2 WorkbenchError, 1 unexpected error, 130 interrupted.
Errors are printed to stdout as {"error", "message", "details"}; progress
goes to stderr.
"""

import argparse
import logging
import os
import sys
from typing import Dict, List, Optional, Tuple

import numpy as np

from checkpoint import load_model, save_model
from common import (
    LOG_LEVEL,
    SMOKE_MODE,
    ConfigError,
    CorpusError,
    WorkbenchError,
    canonical_json,
    configure_logging,
    error_payload,
    read_json,
    write_json,
)
from corpus import load_corpora, split_corpora, task_corpora, training_corpora, write_corpora
from hybrid_model import HybridModel
from inference import make_sampler, throughput_bench
from minipuzzle import (
    CandidateReport,
    NeuronImportance,
    benchmark_average,
    distill_shortlist,
    merge_sweep,
    realize_pruned,
    search_candidates,
    search_summary,
    write_reports_jsonl,
)
from run_config import RunConfig, apply_smoke_overrides, load_run_config
from run_logger import CANDIDATE_LOG, DISTILL_LOG, TRAIN_LOG, RunLogWriter, generate_run_id
from run_report import (
    BENCH_FILE,
    BENCHMARKED_FILE,
    CANDIDATES_FILE,
    CHECKPOINT_DIR,
    CONFIG_FILE,
    CORPUS_DIR,
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
)
from training import PrecisionMode, compare_precision, train

logger = logging.getLogger(__name__)
logger.setLevel(LOG_LEVEL)

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_WORKBENCH_ERROR = 2
EXIT_INTERRUPTED = 130

DEFAULT_RUNS_DIR = "runs"
FINAL_CHECKPOINT = "final.nhck"


# ==========================================
# Config and run directory
# ==========================================

def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Load --config (or the run directory's config.json), apply --seed and smoke mode."""
    path = args.config
    if path is None and args.out and os.path.exists(run_path(args.out, CONFIG_FILE)):
        path = run_path(args.out, CONFIG_FILE)
    if path is None:
        raise ConfigError("--config is required (no config.json in the run directory)")
    config = load_run_config(path, args.seed)
    if SMOKE_MODE:
        config = apply_smoke_overrides(config)
    return config


def prepare_run_dir(args: argparse.Namespace, config: RunConfig) -> str:
    document = config.model_dump(mode="json")
    out = args.out or os.path.join(DEFAULT_RUNS_DIR, generate_run_id(document))
    ensure_run_dirs(out)
    write_json(run_path(out, CONFIG_FILE), document)
    logger.info(f"📁 Run directory: {out}")
    return out


def ensure_corpora(out: str, config: RunConfig) -> Dict[str, np.ndarray]:
    """Load the run's corpora, generating them first when the directory is empty."""
    corpus_dir = run_path(out, CORPUS_DIR)
    if not any(f.endswith(".txt") for f in os.listdir(corpus_dir)):
        write_corpora(corpus_dir, config.seed, config.corpus.size, config.corpus.categories,
                      config.corpus.held_out_size)
    return load_corpora(corpus_dir)


def split_for_training(corpora: Dict[str, np.ndarray], config: RunConfig) -> Tuple[Dict, Dict]:
    train_streams = {k: v for k, v in training_corpora(corpora).items() if k in config.corpus.categories}
    if not train_streams:
        raise CorpusError("no training corpora for the configured categories",
                          categories=config.corpus.categories)
    return split_corpora(train_streams, config.corpus.val_fraction)


def held_out_corpora(corpora: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
    held_out = task_corpora(corpora)
    if not held_out:
        raise CorpusError("no held-out task corpora; set corpus.held_out_size > 0 and regenerate")
    return held_out


def resolve_checkpoint(args: argparse.Namespace, out: str) -> str:
    return args.checkpoint or run_path(out, CHECKPOINT_DIR, FINAL_CHECKPOINT)


# ==========================================
# Commands
# ==========================================

def cmd_gen_corpus(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    out = prepare_run_dir(args, config)
    paths = write_corpora(run_path(out, CORPUS_DIR), config.seed, config.corpus.size,
                          config.corpus.categories, config.corpus.held_out_size)
    logger.info(f"✅ Wrote {len(paths)} corpus files")
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    out = prepare_run_dir(args, config)
    corpora = ensure_corpora(out, config)
    train_streams, val_streams = split_for_training(corpora, config)
    spec = config.arch.to_spec()
    model = HybridModel.initialize(spec, seed=config.train.init_seed)
    blend = config.blend_schedule()
    save_model(run_path(out, CHECKPOINT_DIR, "init.nhck"), model, {"tokens": 0})
    logger.info(f"🔄 Training {spec.pattern()} ({spec.n_layers} layers)")

    if config.train.compare_precision:
        writers = {m.value: RunLogWriter(run_path(out, LOG_DIR, TRAIN_LOG.format(mode=m.value)))
                   for m in PrecisionMode}
        outcome = compare_precision(model, config.train_config(), blend, train_streams, val_streams, writers)
        for mode, result in outcome["results"].items():
            name = "full.nhck" if mode == PrecisionMode.FULL.value else "fp8.nhck"
            save_model(run_path(out, CHECKPOINT_DIR, name), result.model, {"mode": mode})
        final = outcome["results"][PrecisionMode.FULL.value]
        write_json(run_path(out, REPORT_DIR, "loss_gap_summary.json"), outcome["summary"])
    else:
        tc = config.train_config()
        writer = RunLogWriter(run_path(out, LOG_DIR, TRAIN_LOG.format(mode=tc.precision_mode.value)))
        final = train(model, tc, blend, train_streams, val_streams, writer)

    save_model(run_path(out, CHECKPOINT_DIR, FINAL_CHECKPOINT), final.model,
               {"tokens": config.train.total_tokens, "final_val_loss": final.final_val_loss})
    logger.info(f"✅ Training complete (final val loss {final.final_val_loss})")
    return EXIT_OK


def cmd_bench(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    out = prepare_run_dir(args, config)
    model = load_model(resolve_checkpoint(args, out))
    memory = config.memory
    sampler = make_sampler(config.bench.sampler, config.bench.temperature, config.seed)
    report = throughput_bench(
        model, config.bench.prompt_len, config.bench.gen_len, config.bench.batch,
        None if memory.budget_bytes is None else int(memory.budget_bytes), config.seed, sampler,
        memory_seq=memory.seq, weight_bits=memory.weight_bits, kv_elem_bytes=memory.kv_elem_bytes,
        state_elem_bytes=memory.state_elem_bytes, overhead_fraction=memory.overhead_fraction,
        activation_reserve=memory.activation_reserve,
    )
    write_json(run_path(out, REPORT_DIR, BENCH_FILE), report)
    return EXIT_OK


def cmd_prune_search(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    out = prepare_run_dir(args, config)
    parent = load_model(resolve_checkpoint(args, out))
    corpora = ensure_corpora(out, config)
    train_streams, _ = split_for_training(corpora, config)
    mp = config.minipuzzle_config(args.workers)
    writer = RunLogWriter(run_path(out, LOG_DIR, CANDIDATE_LOG))

    li, ni, scored, benched, shortlist = search_candidates(parent, train_streams, held_out_corpora(corpora),
                                                           mp, writer)
    write_json(run_path(out, REPORT_DIR, "layer_importance.json"), li.to_dict())
    write_json(run_path(out, REPORT_DIR, "neuron_importance.json"), ni.to_dict())
    write_reports_jsonl(run_path(out, REPORT_DIR, CANDIDATES_FILE), scored)
    write_json(run_path(out, REPORT_DIR, BENCHMARKED_FILE), [r.to_dict() for r in benched])
    write_json(run_path(out, REPORT_DIR, SHORTLIST_FILE), [r.to_dict() for r in shortlist])
    write_json(run_path(out, REPORT_DIR, SEARCH_SUMMARY_FILE), search_summary(scored, benched))
    logger.info(f"✅ {len(scored)} feasible candidates, shortlist "
                f"{[r.candidate_id for r in shortlist]}")
    return EXIT_OK


def cmd_distill(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    out = prepare_run_dir(args, config)
    parent = load_model(resolve_checkpoint(args, out))
    shortlist_path = run_path(out, REPORT_DIR, SHORTLIST_FILE)
    neurons_path = run_path(out, REPORT_DIR, "neuron_importance.json")
    if not (os.path.exists(shortlist_path) and os.path.exists(neurons_path)):
        raise ConfigError("run prune-search before distill (shortlist or neuron importance missing)",
                          run_dir=out)
    shortlist = [CandidateReport.from_dict(d) for d in read_json(shortlist_path)]
    if not shortlist:
        raise ConfigError("shortlist is empty", path=shortlist_path)
    neurons = NeuronImportance.from_dict(read_json(neurons_path))
    corpora = ensure_corpora(out, config)
    train_streams, _ = split_for_training(corpora, config)
    held_out = held_out_corpora(corpora)
    mp = config.minipuzzle_config(args.workers)
    writer = RunLogWriter(run_path(out, LOG_DIR, DISTILL_LOG))

    updated, winner, final, rows, summary = distill_shortlist(parent, shortlist, neurons, train_streams,
                                                              held_out, mp, writer)
    write_json(shortlist_path, [r.to_dict() for r in updated])
    write_json(run_path(out, REPORT_DIR, DISTILL_TABLE_FILE), rows)
    write_json(run_path(out, REPORT_DIR, "distill_summary.json"), summary)
    save_model(run_path(out, CHECKPOINT_DIR, "winner.nhck"), final,
               {"candidate_id": winner.candidate_id, "phase": "extended"})

    if config.distill.merge_alphas:
        pruned = realize_pruned(parent, winner.kept_layer_ids, winner.ffn_width, neurons)
        sweep = merge_sweep(
            pruned, final, config.distill.merge_alphas,
            lambda m: benchmark_average(m, held_out, mp.calib_seq_len, mp.bench_windows, mp.seed),
        )
        write_json(run_path(out, REPORT_DIR, MERGE_SWEEP_FILE), sweep)

    for row in rows:
        logger.info(f"📊 {row['candidate_id']} [{row['phase']}] acc {row['next_token_accuracy']} | "
                    f"agree {row['parent_agreement']} | bench {row['benchmark_avg']}")
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    if not args.out or not os.path.isdir(args.out):
        raise ConfigError("report needs --out pointing at an existing run directory", out=args.out)
    build_reports(args.out)
    print_run_summary(args.out)
    return EXIT_OK


COMMANDS = {
    "gen-corpus": (cmd_gen_corpus, "Write deterministic synthetic corpora"),
    "train": (cmd_train, "Train a model (optionally FULL vs FP8 comparison)"),
    "bench": (cmd_bench, "Decode throughput, FLOPs/token and memory report"),
    "prune-search": (cmd_prune_search, "Importance, candidate search, scoring and shortlist"),
    "distill": (cmd_distill, "Short and extended distillation of the shortlist, merge sweep"),
    "report": (cmd_report, "Regenerate CSV and plot-ready tables for a run"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="Run config JSON (default: <out>/config.json)")
    common.add_argument("--seed", type=int, default=None, help="Override the config seed")
    common.add_argument("--workers", type=int, default=1, help="Parallel candidate scoring workers (default: 1)")
    common.add_argument("--out", help="Run directory (default: runs/<config hash>)")
    common.add_argument("--checkpoint", help="Input checkpoint (default: <out>/checkpoints/final.nhck)")

    parser = argparse.ArgumentParser(description="Desk-scale hybrid Mamba/attention workbench")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        sub.add_parser(name, parents=[common], help=help_text)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging()
    if args.workers < 1:
        args.workers = 1
    handler = COMMANDS[args.command][0]
    try:
        return handler(args)
    except KeyboardInterrupt:
        print("\n⚠️  Interrupted by user", file=sys.stderr)
        return EXIT_INTERRUPTED
    except WorkbenchError as e:
        logger.error(f"❌ {args.command} failed: {e.message}")
        sys.stdout.write(canonical_json(error_payload(e)))
        return EXIT_WORKBENCH_ERROR
    except Exception as e:
        logger.exception(f"❌ Unexpected error in {args.command}: {e}")
        sys.stdout.write(canonical_json(error_payload(e)))
        return EXIT_UNEXPECTED


if __name__ == "__main__":
    sys.exit(main())
