"""Toy language pairs, corpus generation, manifests, transcript corruption."""
import numpy as np
import pytest

from speechcot.data import (SPLITS, Task, TaskConfig, corrupt_transcript,
                            generate_direction, load_split, load_task_dir,
                            make_toy_language, read_manifest, swap_adjacent,
                            translate_oracle, write_manifest, write_task_dir)
from speechcot.errors import (InputError, OracleError, ParameterError,
                              ResolutionError)

SMALL_CFG = TaskConfig(vocab_size=12, n_train=40, n_dev=10, n_test=10)


# ------------------------------------------------------------- languages

def test_pair_vocabularies_are_disjoint_and_bijective():
    pair = make_toy_language(seed=0, vocab_size=20)
    assert not set(pair.source.words) & set(pair.target.words)
    assert len(pair.source.words) == len(pair.target.words) == 20
    assert sorted(pair.lexicon.values()) == sorted(pair.target.words)
    rev = pair.reverse()
    for w in pair.source.words:
        assert rev.lexicon[pair.lexicon[w]] == w, "reverse must invert the lexicon"
    assert pair.direction == "alpha-beta" and rev.direction == "beta-alpha"


def test_languages_are_pure_in_seed():
    a = make_toy_language(seed=7, vocab_size=15)
    b = make_toy_language(seed=7, vocab_size=15)
    c = make_toy_language(seed=8, vocab_size=15)
    assert a.source.words == b.source.words and a.lexicon == b.lexicon
    assert a.source.words != c.source.words


# ---------------------------------------------------------------- oracle

def test_oracle_substitutes_then_swaps_adjacent():
    pair = make_toy_language(seed=1, vocab_size=8)
    w = list(pair.source.words[:5])
    out = translate_oracle(" ".join(w), pair).split()
    lex = pair.lexicon
    assert out == [lex[w[1]], lex[w[0]], lex[w[3]], lex[w[2]], lex[w[4]]]
    assert swap_adjacent(["a", "b", "c"]) == ["b", "a", "c"]
    assert swap_adjacent(["a"]) == ["a"]
    # round trip: reverse direction undoes the pair swap and the lexicon
    back = translate_oracle(translate_oracle(" ".join(w), pair), pair.reverse())
    assert back == " ".join(w)
    with pytest.raises(OracleError):
        translate_oracle("", pair)
    with pytest.raises(OracleError):
        translate_oracle("notaword", pair)


# ------------------------------------------------------------ corruption

def test_corruption_rate_and_vocabulary():
    pair = make_toy_language(seed=2, vocab_size=30)
    rng = np.random.default_rng(0)
    words = [pair.source.words[i] for i in rng.integers(0, 30, 10_000)]
    text = " ".join(words)
    out = corrupt_transcript(text, 0.3, pair, seed=11).split()
    changed = sum(a != b for a, b in zip(words, out))
    assert len(out) == len(words)
    assert abs(changed / len(words) - 0.3) < 0.02
    assert all(w in pair.source.words for w in out)
    assert corrupt_transcript(text, 0.0, pair, seed=11) == text
    assert (corrupt_transcript(text, 0.3, pair, seed=11)
            == " ".join(out)), "same seed, same corruption"
    with pytest.raises(ParameterError):
        corrupt_transcript(text, 1.5, pair, seed=0)


# --------------------------------------------------------------- corpora

def test_generated_utterances_are_deterministic_and_in_range():
    task = Task(SMALL_CFG)
    utts = generate_direction(task, "alpha-beta", "train")
    again = generate_direction(task, "alpha-beta", "train")
    assert utts == again
    assert len(utts) == SMALL_CFG.n_train
    assert len({u.uid for u in utts}) == len(utts)
    for u in utts[:10]:
        n = len(u.source_text.split())
        assert SMALL_CFG.min_len <= n <= SMALL_CFG.max_len
        assert u.target_text == translate_oracle(u.source_text,
                                                 task.pair("alpha-beta"))
    dev = generate_direction(task, "alpha-beta", "dev")
    assert {u.source_text for u in dev} != {u.source_text for u in utts[:10]}


def test_task_exposes_forward_and_reverse_directions():
    task = Task(SMALL_CFG)
    assert set(task.directions) == {"alpha-beta", "beta-alpha",
                                    "alpha-gamma", "gamma-alpha"}
    with pytest.raises(ResolutionError):
        task.pair("alpha-delta")


# -------------------------------------------------------------- manifests

def test_manifest_round_trip_and_byte_determinism(tmp_path):
    task = Task(SMALL_CFG)
    utts = generate_direction(task, "alpha-beta", "dev")
    p1, p2 = tmp_path / "a.manifest", tmp_path / "b.manifest"
    write_manifest(p1, utts)
    write_manifest(p2, utts)
    assert p1.read_bytes() == p2.read_bytes()
    assert read_manifest(p1) == utts
    with pytest.raises(InputError):
        write_manifest(tmp_path / "dupes.manifest", [utts[0], utts[0]])
    with pytest.raises(ResolutionError):
        read_manifest(tmp_path / "missing.manifest")


def test_task_dir_round_trip(tmp_path):
    task = Task(SMALL_CFG)
    write_task_dir(task, tmp_path / "task")
    loaded = load_task_dir(tmp_path / "task")
    assert loaded.config == SMALL_CFG
    for split in SPLITS:
        assert (load_split(tmp_path / "task", "alpha-gamma", split)
                == generate_direction(task, "alpha-gamma", split))
    with pytest.raises(InputError):
        write_task_dir(task, tmp_path / "task")  # refuses non-empty dir
    write_task_dir(task, tmp_path / "task", force=True)


def test_config_validation():
    with pytest.raises(ParameterError):
        TaskConfig(vocab_size=3)
    with pytest.raises(ParameterError):
        TaskConfig(min_len=5, max_len=4)
    with pytest.raises(ParameterError):
        TaskConfig(pairs=(("Alpha", "Delta"),))
