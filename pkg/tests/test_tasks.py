import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stackformer import tasks as T
from stackformer.model import BOS, MASK, PAD

P = PAD


def tok(text):
    return T.tokenize(text)


@pytest.mark.parametrize("task, x, y", [
    ("rs", "abb", "bba"),
    ("rs", "aaaa", "aaaa"),
    ("rs", "abab", "baba"),
    ("sm", "b a b [POP] [PUSH a] [PUSH b]", "b a a b [PAD] [PAD] [PAD]"),
    ("sm", "a [POP]", "[PAD] [PAD] [PAD]"),
    ("sm", "a b [PUSH a]", "a b a [PAD]"),
    ("ma", "(1+2)·3 ≡", "4"),
    ("ma", "0 ≡", "0"),
    ("ma", "2−4 ≡", "3"),
    ("ma", "((4)·(−0)) ≡", "0"),
    ("ma", "1+2*3≡", "2"),
    ("ma", "--3≡", "3"),
    ("se", "(1+z)+2 ≡ 2", "4"),
    ("se", "z ≡ 3", "3"),
    ("se", "4−z ≡ 0", "4"),
    ("se", "z≡0", "0"),
    ("se", "-(z-1)≡1", "0"),
])
def test_oracle_examples(task, x, y):
    assert T.oracle(task, tok(x)) == tok(y)


@pytest.mark.parametrize("task, x, pos", [
    ("ma", "(1+2≡", 4),
    ("ma", "1+≡", 2),
    ("ma", "12≡", 1),
    ("ma", "1+2", 3),
    ("ma", "z≡", 0),
    ("se", "1+2≡3", 0),
    ("se", "z*2≡3", 1),
    ("se", "z+z≡1", 0),
    ("sm", "a [POP] b", 2),
    ("sm", "c", 0),
])
def test_oracle_parse_errors(task, x, pos):
    with pytest.raises(T.ParseError) as err:
        T.oracle(task, tok(x))
    assert err.value.position == pos


def test_alphabets():
    assert T.get_task("rs").input_alphabet == ("a", "b")
    assert T.get_task("sm").output_alphabet == ("a", "b", PAD)
    assert set(T.get_task("ma").input_alphabet) == set("01234+-*()≡")
    assert set(T.get_task("se").input_alphabet) == set("01234+-()≡z")
    with pytest.raises(KeyError):
        T.get_task("dyck")


def test_tokenize_keeps_bracketed_symbols():
    assert tok("b a [PUSH a][POP]") == ["b", "a", "[PUSH a]", "[POP]"]
    assert tok("(1−2)·3≡") == ["(", "1", "-", "2", ")", "*", "3", "≡"]
    assert T.tokenize(T.detokenize(["[PUSH b]", "a"])) == ["[PUSH b]", "a"]


@pytest.mark.parametrize("task", sorted(T.TASKS))
def test_generator_agrees_with_oracle(task):
    spec = T.get_task(task)
    rng = random.Random(f"agree-{task}")
    for _ in range(1500):
        n = rng.randint(spec.min_len, 30)
        inst = T.generate(task, n, rng)
        assert len(inst.x) == n
        assert len(inst.y) == spec.output_len(n)
        inst.verify()
        assert set(inst.x) <= set(spec.input_alphabet)
        assert set(inst.y) <= set(spec.output_alphabet)


@pytest.mark.parametrize("task, n", [("rs", 0), ("sm", 1), ("ma", 1), ("se", 2)])
def test_generator_rejects_short_lengths(task, n):
    with pytest.raises(ValueError):
        T.get_task(task).generate(n, random.Random(0))


def test_generation_is_deterministic():
    for task in T.TASKS:
        a = T.make_dataset(task, 50, 1, 12, seed=9)
        b = T.make_dataset(task, 50, 1, 12, seed=9)
        assert a == b
        assert a != T.make_dataset(task, 50, 1, 12, seed=10)


def test_outputs_near_uniform_for_arithmetic():
    for task in ("ma", "se"):
        data = T.make_dataset(task, 2000, 3, 16, seed=1)
        counts = [sum(i.y[0] == d for i in data) for d in T.DIGITS]
        assert min(counts) > 300 and max(counts) < 500


def test_dataset_round_trip(tmp_path):
    data = T.make_dataset("sm", 30, 2, 8, seed=3) + T.make_dataset("se", 30, 3, 9, seed=3)
    path = tmp_path / "d.tsv"
    assert T.write_dataset(path, data) == 60
    back = T.read_dataset(path)
    assert [(i.task, i.x, i.y) for i in back] == [(i.task, i.x, i.y) for i in data]
    assert "≡" in path.read_text(encoding="utf-8")


def test_read_dataset_rejects_wrong_targets(tmp_path):
    path = tmp_path / "bad.tsv"
    path.write_text("rs\ta b b\tb b b\n", encoding="utf-8")
    with pytest.raises(ValueError):
        T.read_dataset(path)


def test_score_examples():
    assert T.score(tok("bba"), tok("bba")) == 1.0
    assert T.score(tok("b a a b a a a"), tok("b a a b [PAD] [PAD] [PAD]")) == 1.0
    assert T.score(tok("bbb"), tok("bba")) == pytest.approx(2 / 3)
    assert T.score([P, P], [P, P]) is None
    with pytest.raises(ValueError):
        T.score(tok("bb"), tok("bba"))
    assert T.dataset_accuracy([1.0, None, 0.5]) == 0.75


def test_oracle_as_model_scores_one():
    data = T.make_dataset("sm", 200, 2, 10, seed=0)
    assert T.dataset_accuracy(T.score(T.oracle("sm", i.x), i.y) for i in data) == 1.0


def test_model_interfaces():
    inst = T.TaskInstance("rs", tuple("abb"), tuple("bba"))
    seq, positions, targets = T.make_mlm_input(inst)
    assert seq == [BOS, "a", "b", "b", MASK, MASK, MASK]
    assert positions == [4, 5, 6] and targets == list("bba")
    assert T.make_alm_episode(inst) == ([BOS, "a", "b", "b"], list("bba"), 3)
    sm = T.generate("sm", 6, random.Random(0))
    assert T.make_mlm_input(sm)[0].count(MASK) == 7
    assert T.make_alm_episode(sm)[2] == 7
    ma = T.generate("ma", 7, random.Random(0))
    assert T.make_mlm_input(ma)[0].count(MASK) == 1


def test_batches_share_a_length_and_respect_the_bound():
    stream = T.iter_batches("sm", 2, 8, 16, seed=0, forbid_above=8)
    lengths = set()
    for _ in range(50):
        batch = next(stream)
        assert len({len(b.x) for b in batch}) == 1
        lengths.add(len(batch[0].x))
    assert lengths <= set(range(2, 9)) and len(lengths) > 3
    with pytest.raises(AssertionError):
        next(T.iter_batches("rs", 1, 8, 4, seed=0, forbid_above=0))


def test_length_ranges():
    assert list(T.length_range("sm", 1, 4)) == [2, 3, 4]
    held_out = T.balanced_dataset("rs", 2, 9, 12, seed=0)
    assert sorted({len(i.x) for i in held_out}) == [9, 10, 11, 12]


@settings(max_examples=50, deadline=None)
@given(st.sampled_from(sorted(T.TASKS)), st.integers(3, 40), st.integers(0, 10**9))
def test_generated_strings_always_parse(task, n, seed):
    inst = T.generate(task, n, random.Random(seed))
    assert tuple(T.oracle(task, inst.x)) == inst.y
    assert T.tokenize(T.detokenize(inst.x)) == list(inst.x)
