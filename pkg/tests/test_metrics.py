import random

import pytest
from hypothesis import given
from hypothesis import strategies as st

from llmfilter.metrics import (
    Alignment,
    Mode,
    Op,
    align,
    align_ops,
    correction_quality,
    corpus_error_rate,
    error_rate,
    format_quality_report,
)

from .conftest import entry
from .oracles import edit_distance

seqs = st.lists(st.sampled_from("abcd"), max_size=9)


def test_align_identity():
    assert align(list("abc"), list("abc")) == Alignment(hits=3)


def test_align_word_example():
    al = align("nice to meet you".split(), "nice to meat you".split())
    assert al == Alignment(hits=3, subs=1, dels=0, ins=0)


def test_align_full_deletion_and_insertion():
    assert align(["a", "b"], []) == Alignment(dels=2)
    assert align([], ["a", "b"]) == Alignment(ins=2)
    assert align([], []) == Alignment()


def test_tie_break_prefers_substitution_then_deletion():
    # "ab" -> "b" could be del a + hit b (cost 1); only one optimum
    assert align(list("ab"), list("b")) == Alignment(hits=1, dels=1)
    # "ab" -> "ba": sub+sub or del+ins are both cost 2; substitution wins
    assert align(list("ab"), list("ba")) == Alignment(subs=2)
    # "a b" -> "c": sub+del and del+sub both cost 2; the backtrace runs from
    # the end and takes the diagonal first, so the last token is substituted
    ops = [op for op, _, _ in align_ops(list("ab"), list("c"))]
    assert ops == [Op.DEL, Op.SUB]


def test_align_ops_carry_tokens():
    ops = align_ops(["x", "y"], ["x", "z", "w"])
    assert ops[0] == (Op.HIT, "x", "x")
    assert sum(op is Op.INS for op, _, _ in ops) == 1
    assert all((r is None) == (op is Op.INS) for op, r, _ in ops)


@given(seqs, seqs)
def test_alignment_count_identities(a, b):
    al = align(a, b)
    assert al.hits + al.subs + al.dels == len(a)
    assert al.hits + al.subs + al.ins == len(b)
    assert al.errors == edit_distance(a, b)


@given(seqs, seqs, seqs)
def test_edit_distance_is_a_metric(x, y, z):
    d = lambda p, q: align(p, q).errors  # noqa: E731
    assert d(x, x) == 0
    assert d(x, y) == d(y, x)
    assert d(x, z) <= d(x, y) + d(y, z)


def test_random_pairs_against_oracle():
    rng = random.Random(7)
    for _ in range(200):
        a = [rng.choice("abcd") for _ in range(rng.randint(0, 12))]
        b = [rng.choice("abcd") for _ in range(rng.randint(0, 12))]
        assert align(a, b).errors == edit_distance(a, b)


def test_error_rate_examples():
    r = error_rate("rocket blasts delay", "rocket blas delay", Mode.WER)
    assert (r.errors, r.ref_len) == (1, 3)
    assert r.rate == pytest.approx(1 / 3)
    r = error_rate("打开 google", "打开 googel", Mode.MER)
    assert (r.errors, r.ref_len) == (1, 3)
    assert error_rate("nice to meet you", "nice to meat you", Mode.WER).rate == 0.25


def test_error_rate_modes_differ():
    # one wrong character inside one word
    assert error_rate("hello world", "hallo world", Mode.CER).rate == pytest.approx(1 / 10)
    assert error_rate("hello world", "hallo world", Mode.WER).rate == pytest.approx(1 / 2)
    # MER treats each Han character as a unit and a Latin word as one unit
    assert error_rate("我用google", "我用goggle", Mode.MER).rate == pytest.approx(1 / 3)
    assert error_rate("我用google", "我用goggle", Mode.CER).rate == pytest.approx(1 / 8)


def test_error_rate_normalizes_first():
    assert error_rate("Hello, World!", "hello world", Mode.WER).rate == 0.0


def test_empty_reference_convention():
    r = error_rate("", "", Mode.MER)
    assert (r.errors, r.ref_len, r.rate) == (0, 0, 0.0)
    r = error_rate("", "a b c", Mode.WER)
    assert (r.errors, r.ref_len, r.rate) == (3, 0, 1.0)


def test_rate_can_exceed_one():
    r = error_rate("a", "b c d", Mode.WER)
    assert r.errors == 3 and r.rate == 3.0


@given(st.text(), st.sampled_from(list(Mode)))
def test_rate_of_identity_is_zero(text, mode):
    assert error_rate(text, text, mode).rate == 0.0


def test_corpus_error_rate_pools_counts():
    r = corpus_error_rate([("a b", "a c"), ("a b c d", "a b c d")], Mode.WER)
    assert (r.errors, r.ref_len) == (1, 6)


def quality_fixture():
    return [
        # greedy exact, LLM exact
        entry("q1", ref_text="a b c d", greedy_text="a b c d", corrected_text="a b c d"),
        # LLM fixes the only error
        entry("q2", ref_text="a b c d", greedy_text="a b x d", corrected_text="a b c d"),
        # LLM changes an error but stays equally wrong
        entry("q3", ref_text="a b c d", greedy_text="a x y d", corrected_text="a z y d"),
        # LLM makes it worse
        entry("q4", ref_text="a b c d", greedy_text="a b c x", corrected_text="a y c x"),
    ]


def test_correction_quality_fixture():
    rep = correction_quality(quality_fixture(), Mode.WER)
    assert rep.n_utts == 4
    assert (rep.frac_greedy_exact, rep.frac_llm_exact, rep.frac_not_worse, rep.frac_more_accurate) == (
        0.25,
        0.5,
        0.75,
        0.25,
    )


def test_correction_quality_perfect():
    ents = [entry(f"p{i}", ref_text="x y", greedy_text="x y", corrected_text="x y") for i in range(3)]
    rep = correction_quality(ents)
    assert (rep.frac_greedy_exact, rep.frac_llm_exact, rep.frac_not_worse, rep.frac_more_accurate) == (
        1.0,
        1.0,
        1.0,
        0.0,
    )


def test_correction_quality_errors():
    with pytest.raises(ValueError, match="at least one"):
        correction_quality([])
    with pytest.raises(ValueError, match="q9: missing corrected_text"):
        correction_quality([entry("q9", ref_text="a", greedy_text="a")])


def test_quality_report_format():
    text = format_quality_report(correction_quality(quality_fixture(), Mode.WER), label="fixture")
    assert text.splitlines()[0].startswith("# fractions over all scored utterances")
    assert "fixture" in text and "75.0" in text and "25.0" in text
