import numpy as np
import pytest

from common import CorpusError
from corpus import (
    CATEGORIES,
    TOKENIZER,
    check_arithmetic_line,
    generate_lines,
    is_balanced,
    lines_to_tokens,
    load_corpora,
    split_corpora,
    task_corpora,
    training_corpora,
    write_corpora,
)


def test_tokenizer_round_trip_and_specials():
    ids = TOKENIZER.encode("héllo", add_bos=True, add_eos=True)
    assert ids[0] == TOKENIZER.BOS and ids[-1] == TOKENIZER.EOS
    assert TOKENIZER.decode(ids) == "héllo"
    assert TOKENIZER.vocab_size == 258


@pytest.mark.parametrize("category", CATEGORIES)
def test_generation_is_deterministic(category):
    assert generate_lines(category, 3, 50) == generate_lines(category, 3, 50)
    assert generate_lines(category, 3, 50) != generate_lines(category, 4, 50)


def test_held_out_stream_differs():
    assert generate_lines("soup", 0, 30) != generate_lines("soup", 0, 30, stream=1_000_003)


def test_arithmetic_lines_are_correct():
    lines = generate_lines("arithmetic", 0, 300)
    assert all(check_arithmetic_line(line) for line in lines)
    assert not check_arithmetic_line("2+2=5")
    assert check_arithmetic_line("3-10=-7")


def test_grammar_lines_are_balanced():
    assert all(is_balanced(line) for line in generate_lines("grammar", 0, 300))
    assert not is_balanced("([)]")
    assert not is_balanced("((")


def test_generation_errors():
    with pytest.raises(CorpusError):
        generate_lines("poetry", 0, 10)
    with pytest.raises(CorpusError):
        generate_lines("soup", 0, 0)
    with pytest.raises(CorpusError):
        lines_to_tokens([])


def test_write_and_load(tmp_path):
    paths = write_corpora(str(tmp_path), seed=1, size=20, held_out_size=5)
    assert sorted(paths) == sorted(list(CATEGORIES) + [f"task_{c}" for c in CATEGORIES])
    corpora = load_corpora(str(tmp_path))
    assert np.array_equal(corpora["grammar"], lines_to_tokens(generate_lines("grammar", 1, 20)))
    assert sorted(task_corpora(corpora)) == [f"task_{c}" for c in sorted(CATEGORIES)]
    assert sorted(training_corpora(corpora)) == sorted(CATEGORIES)
    assert np.sum(corpora["soup"] == TOKENIZER.BOS) == 20


def test_load_errors(tmp_path):
    with pytest.raises(CorpusError):
        load_corpora(str(tmp_path / "missing"))
    write_corpora(str(tmp_path), seed=0, size=5, categories=["soup"])
    with pytest.raises(CorpusError):
        load_corpora(str(tmp_path), ["grammar"])
    with pytest.raises(CorpusError):
        write_corpora(str(tmp_path), seed=0, size=5, categories=[])


def test_split_keeps_a_tail(corpora):
    train, val = split_corpora(corpora, 0.25)
    for name, tokens in corpora.items():
        assert len(train[name]) + len(val[name]) == len(tokens)
        assert np.array_equal(val[name], tokens[len(train[name]):])
        assert len(val[name]) == int(len(tokens) * 0.25)
