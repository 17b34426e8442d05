"""
corpus.py - Byte tokenizer and deterministic synthetic corpora

Stands in for real pre-training data at desk scale. Three categories give the
blend sampler distinguishable sources:
- arithmetic: "a+b=c" style equations that always evaluate true
- grammar: bracketed strings with balanced, properly nested brackets
- soup: Zipf-weighted word soup over a fixed word list

Held-out task corpora (same generators, different seed stream) back the
desk-scale "benchmark average" used by the pruning pipeline.

Files are plain UTF-8 text, one sample per line, written as
<dir>/<category>.txt so runs can be inspected with ordinary tools.
"""

import logging
import os
from typing import Dict, Iterable, List, Sequence

import numpy as np

from common import LOG_LEVEL, CorpusError

logger = logging.getLogger(__name__)
logger.setLevel(LOG_LEVEL)

CATEGORIES = ("arithmetic", "grammar", "soup")
TASK_PREFIX = "task_"

# Held-out corpora draw from a seed stream no training corpus uses
HELD_OUT_STREAM = 1_000_003

_BRACKETS = ("()", "[]", "{}", "<>")
_WORDS = (
    "the", "of", "and", "a", "to", "in", "is", "model", "state", "layer",
    "token", "memory", "cache", "scale", "value", "train", "loss", "step",
    "head", "group", "window", "chunk", "signal", "weight", "gradient",
    "prune", "width", "depth", "search", "budget", "teacher", "student",
)


class ByteTokenizer:
    """UTF-8 bytes as tokens 0..255 plus BOS/EOS specials."""

    BOS = 256
    EOS = 257
    vocab_size = 258

    def encode(self, text: str, add_bos: bool = False, add_eos: bool = False) -> np.ndarray:
        ids = list(text.encode("utf-8"))
        if add_bos:
            ids = [self.BOS] + ids
        if add_eos:
            ids.append(self.EOS)
        return np.asarray(ids, dtype=np.int64)

    def decode(self, ids: Iterable[int]) -> str:
        raw = bytes(int(i) for i in ids if 0 <= int(i) < 256)
        return raw.decode("utf-8", errors="replace")


TOKENIZER = ByteTokenizer()


# ===============================================
# GENERATORS
# ===============================================

def _arithmetic_line(rng: np.random.Generator) -> str:
    a, b = (int(v) for v in rng.integers(0, 100, size=2))
    op = str(rng.choice(["+", "-", "*"]))
    result = {"+": a + b, "-": a - b, "*": a * b}[op]
    return f"{a}{op}{b}={result}"


def _grammar_line(rng: np.random.Generator, max_depth: int = 4) -> str:
    def nest(depth: int) -> str:
        parts = []
        for _ in range(int(rng.integers(1, 3))):
            open_, close = _BRACKETS[int(rng.integers(len(_BRACKETS)))]
            inner = nest(depth + 1) if depth < max_depth and rng.random() < 0.5 else ""
            parts.append(open_ + inner + close)
        return "".join(parts)
    return nest(1)


def _soup_line(rng: np.random.Generator) -> str:
    ranks = np.arange(1, len(_WORDS) + 1)
    weights = 1.0 / ranks
    n = int(rng.integers(4, 12))
    picks = rng.choice(len(_WORDS), size=n, p=weights / weights.sum())
    return " ".join(_WORDS[i] for i in picks)


_GENERATORS = {
    "arithmetic": _arithmetic_line,
    "grammar": _grammar_line,
    "soup": _soup_line,
}


def generate_lines(category: str, seed: int, size: int, stream: int = 0) -> List[str]:
    """
    Deterministic sample lines for one category.

    Raises:
        CorpusError: If size < 1 or the category is unknown
    """
    if size < 1:
        raise CorpusError("corpus size must be at least 1", category=category, size=size)
    if category not in _GENERATORS:
        raise CorpusError(f"Unknown corpus category: {category}", known=list(CATEGORIES))
    rng = np.random.default_rng([seed, stream, CATEGORIES.index(category)])
    return [_GENERATORS[category](rng) for _ in range(size)]


def check_arithmetic_line(line: str) -> bool:
    """True when an arithmetic sample's equation holds."""
    lhs, _, rhs = line.partition("=")
    for op in "+*":
        if op in lhs:
            a, b = lhs.split(op)
            return int(rhs) == (int(a) + int(b) if op == "+" else int(a) * int(b))
    a, b = lhs.split("-", 1)
    return int(rhs) == int(a) - int(b)


def is_balanced(line: str) -> bool:
    closing = {close: open_ for open_, close in _BRACKETS}
    stack: List[str] = []
    for ch in line:
        if ch in closing:
            if not stack or stack.pop() != closing[ch]:
                return False
        else:
            stack.append(ch)
    return not stack


# ===============================================
# FILES
# ===============================================

def write_corpora(out_dir: str, seed: int, size: int,
                  categories: Sequence[str] = CATEGORIES,
                  held_out_size: int = 0) -> Dict[str, str]:
    """
    Write one <category>.txt per category (plus task_<category>.txt held-out
    files when held_out_size > 0).

    Returns:
        Mapping corpus name -> file path
    """
    if not categories:
        raise CorpusError("at least one category is required")
    os.makedirs(out_dir, exist_ok=True)
    paths: Dict[str, str] = {}
    jobs = [(c, c, size, 0) for c in categories]
    if held_out_size > 0:
        jobs += [(TASK_PREFIX + c, c, held_out_size, HELD_OUT_STREAM) for c in categories]
    for name, category, n, stream in jobs:
        lines = generate_lines(category, seed, n, stream)
        path = os.path.join(out_dir, f"{name}.txt")
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write("\n".join(lines) + "\n")
        paths[name] = path
        logger.info(f"Wrote {n} {category} samples to {path}")
    return paths


def lines_to_tokens(lines: Iterable[str]) -> np.ndarray:
    """Concatenate samples as BOS text EOS runs."""
    parts = [TOKENIZER.encode(line, add_bos=True, add_eos=True) for line in lines]
    if not parts:
        raise CorpusError("corpus has no samples")
    return np.concatenate(parts)


def load_corpora(corpus_dir: str, names: Sequence[str] = ()) -> Dict[str, np.ndarray]:
    """
    Load corpus files as token streams.

    Args:
        corpus_dir: Directory written by write_corpora
        names: Corpus names to load (every *.txt when empty)

    Raises:
        CorpusError: If the directory or a named corpus is missing or empty
    """
    if not os.path.isdir(corpus_dir):
        raise CorpusError(f"corpus directory not found: {corpus_dir}")
    if not names:
        names = sorted(f[:-4] for f in os.listdir(corpus_dir) if f.endswith(".txt"))
    corpora: Dict[str, np.ndarray] = {}
    for name in names:
        path = os.path.join(corpus_dir, f"{name}.txt")
        if not os.path.exists(path):
            raise CorpusError(f"missing corpus file: {path}", corpus=name)
        with open(path, "r", encoding="utf-8") as f:
            lines = [line for line in f.read().split("\n") if line]
        corpora[name] = lines_to_tokens(lines)
    return corpora


def split_corpora(corpora: Dict[str, np.ndarray], val_fraction: float = 0.1):
    """Split every stream into (train, validation) by a fixed tail fraction."""
    train, val = {}, {}
    for name, tokens in corpora.items():
        cut = len(tokens) - max(1, int(len(tokens) * val_fraction))
        train[name], val[name] = tokens[:cut], tokens[cut:]
    return train, val


def task_corpora(corpora: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
    return {k: v for k, v in corpora.items() if k.startswith(TASK_PREFIX)}


def training_corpora(corpora: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
    return {k: v for k, v in corpora.items() if not k.startswith(TASK_PREFIX)}
