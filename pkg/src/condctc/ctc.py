"""CTC loss, greedy decoding, collapse and forced alignment.

All lattice arithmetic is done in log space over the blank-interleaved
target ``[blank, y1, blank, y2, ..., yL, blank]``.
"""
from dataclasses import dataclass

import numba
import numpy as np

NEG_INF = -np.inf


class AlignmentError(ValueError):
    pass


@dataclass
class CtcLattice:
    ext: np.ndarray
    alpha: np.ndarray  # T x S, includes emission at t
    beta: np.ndarray  # T x S, includes emission at t
    logprob: float


def extend_target(y, blank=0):
    ext = np.full(2 * len(y) + 1, blank, dtype=np.int64)
    ext[1::2] = y
    return ext


def min_frames(y):
    """Shortest input that can carry ``y``: one frame per label plus a blank between repeats."""
    return len(y) + sum(1 for a, b in zip(y, y[1:]) if a == b)


def _check(logp, y, blank):
    logp = np.asarray(logp, dtype=np.float64)
    if logp.ndim != 2:
        raise ValueError(f"posteriorgram must be T x V, got shape {logp.shape}")
    v = logp.shape[1]
    for i in y:
        if i == blank:
            raise ValueError("target contains the blank symbol")
        if not 0 <= i < v:
            raise ValueError(f"target id {i} outside a {v}-way posteriorgram")
    return logp


@numba.njit(cache=True)
def _lae(a, b):
    if a == -np.inf:
        return b
    if b == -np.inf:
        return a
    if a > b:
        return a + np.log1p(np.exp(b - a))
    return b + np.log1p(np.exp(a - b))


@numba.njit(cache=True)
def _alpha_beta(logp, ext):
    T = logp.shape[0]
    S = ext.shape[0]
    alpha = np.full((T, S), -np.inf)
    beta = np.full((T, S), -np.inf)
    alpha[0, 0] = logp[0, ext[0]]
    if S > 1:
        alpha[0, 1] = logp[0, ext[1]]
    for t in range(1, T):
        for s in range(S):
            a = alpha[t - 1, s]
            if s >= 1:
                a = _lae(a, alpha[t - 1, s - 1])
            if s >= 2 and s % 2 == 1 and ext[s] != ext[s - 2]:
                a = _lae(a, alpha[t - 1, s - 2])
            if a != -np.inf:
                alpha[t, s] = a + logp[t, ext[s]]
    beta[T - 1, S - 1] = logp[T - 1, ext[S - 1]]
    if S > 1:
        beta[T - 1, S - 2] = logp[T - 1, ext[S - 2]]
    for t in range(T - 2, -1, -1):
        for s in range(S):
            b = beta[t + 1, s]
            if s + 1 < S:
                b = _lae(b, beta[t + 1, s + 1])
            if s + 2 < S and s % 2 == 1 and ext[s] != ext[s + 2]:
                b = _lae(b, beta[t + 1, s + 2])
            if b != -np.inf:
                beta[t, s] = b + logp[t, ext[s]]
    return alpha, beta


@numba.njit(cache=True)
def _occupancy_grad(logp, ext, alpha, beta, logprob):
    T, V = logp.shape
    S = ext.shape[0]
    acc = np.full((T, V), -np.inf)
    for t in range(T):
        for s in range(S):
            v = alpha[t, s] + beta[t, s]
            if v != -np.inf:
                k = ext[s]
                acc[t, k] = _lae(acc[t, k], v - logp[t, k])
    grad = np.zeros((T, V))
    for t in range(T):
        for k in range(V):
            if acc[t, k] != -np.inf:
                grad[t, k] = -np.exp(acc[t, k] - logprob)
    return grad


def ctc_lattice(logp, y, blank=0):
    logp = _check(logp, y, blank)
    ext = extend_target(y, blank)
    alpha, beta = _alpha_beta(np.ascontiguousarray(logp), ext)
    S = len(ext)
    tail = alpha[-1, S - 1] if S == 1 else np.logaddexp(alpha[-1, S - 1], alpha[-1, S - 2])
    return CtcLattice(ext, alpha, beta, float(tail))


def ctc_loss(logp, y, blank=0):
    """Negative log-likelihood of ``y`` and its gradient w.r.t. ``logp``.

    The gradient treats each log-posterior entry as a free input; chain it
    through a log-softmax to reach logits. Infeasible targets give ``inf``
    and a zero gradient.
    """
    logp = _check(logp, y, blank)
    if len(y) and min_frames(y) > logp.shape[0]:
        return np.inf, np.zeros_like(logp)
    lat = ctc_lattice(logp, y, blank)
    if lat.logprob == NEG_INF:
        return np.inf, np.zeros_like(logp)
    grad = _occupancy_grad(np.ascontiguousarray(logp), lat.ext, lat.alpha, lat.beta, lat.logprob)
    return -lat.logprob, grad


def greedy_decode(logp):
    """Per-frame argmax; ``np.argmax`` already breaks ties toward the lowest index."""
    return np.argmax(np.asarray(logp), axis=1)


def collapse(path, blank=0, drop=()):
    """Merge adjacent repeats, then delete blanks (and any ids in ``drop``)."""
    out = []
    prev = None
    for z in path:
        z = int(z)
        if z != prev and z != blank and z not in drop:
            out.append(z)
        prev = z
    return tuple(out)


@dataclass
class Alignment:
    path: np.ndarray
    spans: list  # (start, end) per label, end exclusive
    logprob: float


def forced_align(logp, y, blank=0):
    """Viterbi path through the CTC lattice of ``y``.

    Ties prefer staying in the current state, then the blank/previous state,
    so labels are emitted as early as possible.
    """
    logp = _check(logp, y, blank)
    T = logp.shape[0]
    if min_frames(y) > T:
        raise AlignmentError(f"{len(y)} labels cannot be aligned to {T} frames")
    ext = extend_target(y, blank)
    S = len(ext)
    emit = logp[:, ext]
    skip_ok = np.zeros(S, dtype=bool)
    skip_ok[3::2] = ext[3::2] != ext[1:-2:2]

    delta = np.full((T, S), NEG_INF)
    back = np.zeros((T, S), dtype=np.int8)
    delta[0, 0] = emit[0, 0]
    if S > 1:
        delta[0, 1] = emit[0, 1]
    for t in range(1, T):
        prev = delta[t - 1]
        stay = prev
        step = np.full(S, NEG_INF)
        step[1:] = prev[:-1]
        jump = np.full(S, NEG_INF)
        jump[2:] = prev[:-2]
        jump[~skip_ok] = NEG_INF
        cand = np.stack([stay, step, jump])
        choice = np.argmax(cand, axis=0)
        back[t] = choice
        delta[t] = cand[choice, np.arange(S)] + emit[t]

    ends = [S - 1] if S == 1 else [S - 1, S - 2]
    s = max(ends, key=lambda e: (delta[-1, e], e))
    best = delta[-1, s]
    if best == NEG_INF:
        raise AlignmentError("no alignment with non-zero probability")
    states = np.empty(T, dtype=np.int64)
    for t in range(T - 1, -1, -1):
        states[t] = s
        s -= back[t, s]
    path = ext[states]
    spans = []
    for lab in range(len(y)):
        frames = np.flatnonzero(states == 2 * lab + 1)
        spans.append((int(frames[0]), int(frames[-1]) + 1))
    return Alignment(path, spans, float(best))
