import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from condctc.lexicon import build_vocab
from condctc.lm import LMFormatError, NGramLM

V = build_vocab(["a", "b"], ["x", "y"])
EOS = len(V)
OUTCOMES = list(V.real_ids) + [EOS]


def oracle_prob(corpus, w, ctx, order, k):
    """Recursive add-k-with-lower-order-prior estimate from raw n-gram counts."""
    events = [list(s) + [EOS] for s in corpus]
    ctx = tuple(ctx)[-(order - 1) :] if order > 1 else ()

    def counts(c):
        cnt = Counter()
        for ev in events:
            for pos in range(len(ev)):
                if pos >= len(c) and tuple(ev[pos - len(c) : pos]) == c:
                    cnt[ev[pos]] += 1
        return cnt

    def p(c):
        n = counts(c)
        if c and not n:
            return p(c[1:])
        prior = p(c[1:]) if c else 1.0 / len(OUTCOMES)
        return (n[w] + k * len(OUTCOMES) * prior) / (sum(n.values()) + k * len(OUTCOMES))

    return p(ctx)


CORPUS = [V.encode("a b x"), V.encode("a b"), V.encode("x y x y"), V.encode("b a x")]


@pytest.mark.parametrize("ctx", [(), (2,), (2, 3), (4, 5), (5, 4), (5, 2), (3, 2)])
def test_conditionals_match_count_oracle(ctx):
    lm = NGramLM(V, order=3, k=0.1).fit(CORPUS)
    logp = lm.log_distribution(ctx)
    for j, w in enumerate(OUTCOMES):
        assert math.exp(logp[j]) == pytest.approx(oracle_prob(CORPUS, w, ctx, 3, 0.1), rel=1e-12)


def test_hand_computed_unigram():
    lm = NGramLM(V, order=1, k=1.0).fit([V.encode("a a")])
    # counts a=2, eos=1 over 5 outcomes; prior uniform 1/5, kV=5
    p = np.exp(lm.log_distribution())
    np.testing.assert_allclose(p, [(2 + 1) / 8, 1 / 8, 1 / 8, 1 / 8, (1 + 1) / 8])


def test_unseen_context_backs_off_fully():
    lm = NGramLM(V, order=3).fit(CORPUS)
    # "y a" never occurs, "a" does
    np.testing.assert_array_equal(lm.log_distribution((5, 2)), lm.log_distribution((2,)))
    # "y" never occurs at all
    sparse = NGramLM(V, order=2).fit([V.encode("a b")])
    np.testing.assert_array_equal(sparse.log_distribution((5,)), sparse.log_distribution(()))


def test_backoff_factor_does_not_change_probabilities():
    a = NGramLM(V, backoff=0.4).fit(CORPUS)
    b = NGramLM(V, backoff=0.9).fit(CORPUS)
    for ctx in a.logdist_:
        np.testing.assert_array_equal(a.logdist_[ctx], b.logdist_[ctx])


def test_sequence_logprob_chains_steps():
    lm = NGramLM(V).fit(CORPUS)
    seq = V.encode("a b x")
    by_hand = sum(math.log(oracle_prob(CORPUS, w, seq[:i], 3, 0.1)) for i, w in enumerate(list(seq) + [EOS]))
    assert lm.sequence_logprob(seq) == pytest.approx(by_hand, rel=1e-12)


def test_state_keeps_last_order_minus_one_tokens():
    lm = NGramLM(V, order=3).fit(CORPUS)
    _, s = lm.score_step((2, 3), 5)
    assert s == (3, 5)
    _, s = NGramLM(V, order=1).fit(CORPUS).score_step((), 5)
    assert s == ()


def test_rejects_special_tokens_and_bad_params():
    lm = NGramLM(V).fit(CORPUS)
    with pytest.raises(ValueError, match="not an LM token"):
        lm.score_step((), V.null_id)
    with pytest.raises(ValueError):
        NGramLM(V).fit([(0, 2)])
    with pytest.raises(ValueError):
        NGramLM(V, order=0).fit(CORPUS)
    with pytest.raises(ValueError, match="empty"):
        NGramLM(V).fit([])


def test_save_load_roundtrip_is_exact(tmp_path):
    lm = NGramLM(V, order=3, k=0.2).fit(CORPUS)
    lm.save(tmp_path / "lm.txt")
    back = NGramLM.load(tmp_path / "lm.txt", V)
    assert back.serialize() == lm.serialize()
    for ctx, row in lm.logdist_.items():
        np.testing.assert_array_equal(back.logdist_[ctx], row)


def test_load_rejects_mismatched_or_incomplete_tables(tmp_path):
    lm = NGramLM(V).fit(CORPUS)
    p = tmp_path / "lm.txt"
    lm.save(p)
    other = build_vocab(["a", "b"], ["x", "z"])
    with pytest.raises(LMFormatError, match="hash"):
        NGramLM.load(p, other)
    lines = p.read_text().splitlines()
    (tmp_path / "cut.txt").write_text("\n".join(lines[:-1]) + "\n")
    with pytest.raises(LMFormatError, match="incomplete"):
        NGramLM.load(tmp_path / "cut.txt", V)


def test_same_corpus_identical_model_file():
    assert NGramLM(V).fit(CORPUS).serialize() == NGramLM(V).fit(list(CORPUS)).serialize()


@settings(max_examples=50, deadline=None)
@given(
    st.lists(st.lists(st.sampled_from(list(V.real_ids)), max_size=6), min_size=1, max_size=8),
    st.integers(1, 4),
    st.floats(0.01, 2.0),
    st.lists(st.sampled_from(list(V.real_ids)), max_size=4),
)
def test_every_conditional_is_normalized(corpus, order, k, ctx):
    lm = NGramLM(V, order=order, k=k).fit(corpus)
    assert np.exp(lm.log_distribution(tuple(ctx))).sum() == pytest.approx(1.0, abs=1e-9)
    for row in lm.logdist_.values():
        assert np.exp(row).sum() == pytest.approx(1.0, abs=1e-9)
