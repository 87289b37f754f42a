import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from condctc.ctc import (
    AlignmentError,
    collapse,
    ctc_lattice,
    ctc_loss,
    extend_target,
    forced_align,
    greedy_decode,
    min_frames,
)
from oracles import brute_ctc_logprob, brute_viterbi, central_difference, random_logp


def test_extend_target_interleaves_blanks():
    assert extend_target((3, 4)).tolist() == [0, 3, 0, 4, 0]
    assert extend_target(()).tolist() == [0]


def test_min_frames_counts_repeat_separators():
    assert min_frames((1, 2, 3)) == 3
    assert min_frames((1, 1, 2, 2)) == 6
    assert min_frames(()) == 0


def test_uniform_two_frames_single_label():
    # paths a-a, a-b, b-a over {blank, a}: 3 of 4 equally likely paths
    logp = np.log(np.full((2, 2), 0.5))
    nll, _ = ctc_loss(logp, (1,))
    assert nll == pytest.approx(-np.log(0.75), abs=1e-12)


@pytest.mark.parametrize("seed", range(30))
def test_loss_matches_enumeration(seed):
    rng = np.random.default_rng(seed)
    T, V = int(rng.integers(1, 6)), int(rng.integers(2, 5))
    logp = random_logp(rng, T, V)
    L = int(rng.integers(0, T + 1))
    y = tuple(int(v) for v in rng.integers(1, V, size=L))
    nll, _ = ctc_loss(logp, y)
    ref = brute_ctc_logprob(logp, y)
    if ref == -np.inf:
        assert nll == np.inf
    else:
        assert -nll == pytest.approx(ref, abs=1e-9)


def test_empty_target_is_all_blank():
    rng = np.random.default_rng(1)
    logp = random_logp(rng, 4, 3)
    nll, _ = ctc_loss(logp, ())
    assert nll == pytest.approx(-logp[:, 0].sum(), abs=1e-12)


def test_infeasible_target_gives_inf_and_zero_grad():
    logp = np.log(np.full((2, 3), 1 / 3))
    nll, grad = ctc_loss(logp, (1, 1))
    assert nll == np.inf
    assert not grad.any()


def test_blank_in_target_rejected():
    with pytest.raises(ValueError, match="blank"):
        ctc_loss(np.zeros((3, 3)), (0, 1))


def test_out_of_range_target_rejected():
    with pytest.raises(ValueError, match="outside"):
        ctc_loss(np.zeros((3, 3)), (5,))


@pytest.mark.parametrize("seed", range(10))
def test_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(100 + seed)
    T, V = 5, 4
    logp = random_logp(rng, T, V)
    y = tuple(int(v) for v in rng.integers(1, V, size=2))
    _, grad = ctc_loss(logp, y)
    for idx in [(t, v) for t in range(T) for v in range(V)]:
        num = central_difference(lambda z: ctc_loss(z, y)[0], logp, idx)
        assert grad[idx] == pytest.approx(num, rel=1e-4, abs=1e-7)


def test_gradient_is_negative_occupancy():
    rng = np.random.default_rng(7)
    logp = random_logp(rng, 6, 4)
    _, grad = ctc_loss(logp, (1, 2))
    # each frame's state occupancies sum to one
    np.testing.assert_allclose(-grad.sum(axis=1), 1.0, atol=1e-10)


def test_alpha_beta_agree_at_every_frame():
    rng = np.random.default_rng(8)
    logp = random_logp(rng, 7, 4)
    lat = ctc_lattice(logp, (1, 3, 3))
    # beta includes the emission at t, so remove one copy when combining
    per_frame = np.logaddexp.reduce(lat.alpha + lat.beta - logp[:, lat.ext], axis=1)
    np.testing.assert_allclose(per_frame, lat.logprob, atol=1e-10)


def test_collapse_merges_then_drops_blanks():
    assert collapse([0, 2, 2, 0, 2, 3, 3, 0]) == (2, 2, 3)
    assert collapse([1, 1, 2, 1], drop=(1,)) == (2,)
    assert collapse([]) == ()


def test_greedy_decode_ties_to_lowest_index():
    logp = np.log(np.array([[0.5, 0.5], [0.2, 0.8]]))
    assert greedy_decode(logp).tolist() == [0, 1]


@pytest.mark.parametrize("seed", range(15))
def test_forced_align_score_matches_best_path(seed):
    rng = np.random.default_rng(200 + seed)
    T, V = int(rng.integers(2, 6)), 3
    logp = random_logp(rng, T, V)
    y = tuple(int(v) for v in rng.integers(1, V, size=int(rng.integers(1, 3))))
    if min_frames(y) > T:
        with pytest.raises(AlignmentError):
            forced_align(logp, y)
        return
    ali = forced_align(logp, y)
    assert ali.logprob == pytest.approx(brute_viterbi(logp, y), abs=1e-10)
    assert collapse(ali.path) == y
    assert logp[np.arange(T), ali.path].sum() == pytest.approx(ali.logprob, abs=1e-10)


def test_forced_align_spans_are_ordered_and_cover_labels():
    rng = np.random.default_rng(3)
    logp = random_logp(rng, 10, 4)
    y = (1, 2, 2, 3)
    ali = forced_align(logp, y)
    assert len(ali.spans) == len(y)
    for (s, e), lab in zip(ali.spans, y):
        assert 0 <= s < e <= 10
        assert set(ali.path[s:e].tolist()) == {lab}
    starts = [s for s, _ in ali.spans]
    assert starts == sorted(starts)


def test_forced_align_prefers_early_emission_on_ties():
    logp = np.log(np.full((3, 2), 0.5))
    assert forced_align(logp, (1,)).path.tolist() == [1, 0, 0]


@settings(max_examples=40, deadline=None)
@given(
    st.integers(0, 2**31 - 1),
    st.integers(1, 6),
    st.lists(st.integers(1, 3), max_size=4),
)
def test_loss_is_nonnegative_and_bounded_by_best_path(seed, T, y):
    rng = np.random.default_rng(seed)
    logp = random_logp(rng, T, 4)
    y = tuple(y)
    nll, grad = ctc_loss(logp, y)
    assert nll >= 0 or np.isclose(nll, 0)
    if min_frames(y) <= T:
        assert np.isfinite(nll)
        # summing over alignments can only beat the single best one
        assert -nll >= forced_align(logp, y).logprob - 1e-9
    else:
        assert nll == np.inf
