"""Posterior merging, CTC prefix beam search with LM shallow fusion, frame LID."""
import math
from collections import Counter
from dataclasses import dataclass, field, replace

import numpy as np

from .nnet import log_softmax

FLOOR_EPS = 1e-10
NEG_INF = -math.inf


@dataclass(frozen=True)
class MergeWeights:
    bi: float = 0.5
    l1: float = 0.25
    l2: float = 0.25

    def __post_init__(self):
        if min(self.bi, self.l1, self.l2) < 0:
            raise ValueError(f"merge weights must be non-negative: {self}")
        if abs(self.bi + self.l1 + self.l2 - 1.0) > 1e-9:
            raise ValueError(f"merge weights must sum to 1: {self}")


@dataclass(frozen=True)
class DecodeConfig:
    beam: int = 10
    lambda2: float = 0.8
    weights: MergeWeights = field(default_factory=MergeWeights)
    use_lm: bool = True
    use_bi: bool = True
    use_mono: bool = True
    nbest: int = 1
    merge: str = "linear"

    def __post_init__(self):
        if self.merge not in ("linear", "loglinear"):
            raise ValueError(f"unknown merge mode {self.merge!r}")
        if self.beam < 1:
            raise ValueError("beam must be >= 1")
        if self.nbest < 1:
            raise ValueError("nbest must be >= 1")
        if not 0.0 <= self.lambda2 <= 1.0:
            raise ValueError("lambda2 must lie in [0, 1]")
        if not (self.use_bi or self.use_mono):
            raise ValueError("at least one CTC source must be enabled")

    def effective_weights(self):
        """Merge weights with disabled sources zeroed and the rest renormalized."""
        w = self.weights
        bi = w.bi if self.use_bi else 0.0
        l1 = w.l1 if self.use_mono else 0.0
        l2 = w.l2 if self.use_mono else 0.0
        total = bi + l1 + l2
        if total <= 0:
            raise ValueError("enabled CTC sources all have zero weight")
        return MergeWeights(bi / total, l1 / total, l2 / total)

    def ablated(self, **flags):
        return replace(self, **flags)


def project_view(logp_mono, view, eps=FLOOR_EPS):
    """Lift a monolingual posteriorgram onto the full vocabulary.

    Tokens outside the view get probability ``eps`` before renormalizing.
    """
    logp_mono = np.asarray(logp_mono, dtype=np.float64)
    full = np.full((logp_mono.shape[0], view.vocab_size), math.log(eps))
    full[:, view.to_bi] = logp_mono
    return log_softmax(full)


def merge_posteriors(pg_bi, pg_l1, pg_l2, weights, views, eps=FLOOR_EPS, mode="linear"):
    """Weighted combination of the three CTC posteriorgrams, renormalized per frame.

    ``mode="linear"`` mixes probabilities; ``mode="loglinear"`` mixes
    log-probabilities (a product of experts).

    ``views`` is ``(l1_view, l2_view)``; sources with zero weight may be None.
    """
    if weights.bi == 1.0:
        return np.asarray(pg_bi, dtype=np.float64)
    lengths = {np.shape(p)[0] for p, g in ((pg_bi, weights.bi), (pg_l1, weights.l1), (pg_l2, weights.l2)) if g > 0}
    if len(lengths) != 1:
        raise ValueError(f"posteriorgrams disagree on length: {sorted(lengths)}")
    acc = None
    terms = (
        (weights.bi, None if weights.bi == 0 else np.asarray(pg_bi, dtype=np.float64)),
        (weights.l1, None if weights.l1 == 0 else project_view(pg_l1, views[0], eps)),
        (weights.l2, None if weights.l2 == 0 else project_view(pg_l2, views[1], eps)),
    )
    if mode == "loglinear":
        for g, lp in terms:
            if g > 0:
                acc = g * lp if acc is None else acc + g * lp
        return log_softmax(acc)
    if mode != "linear":
        raise ValueError(f"unknown merge mode {mode!r}")
    stacked = np.stack([lp + math.log(g) for g, lp in terms if g > 0])
    m = stacked.max(axis=0)
    acc = m + np.log(np.exp(stacked - m).sum(axis=0))
    return log_softmax(acc)


def _lae(a, b):
    if a == NEG_INF:
        return b
    if b == NEG_INF:
        return a
    if a > b:
        return a + math.log1p(math.exp(b - a))
    return b + math.log1p(math.exp(a - b))


def beam_search(logp, cfg=None, lm=None, blank=0, exclude=(1,)):
    """CTC prefix beam search ranked by ``lambda2*logP_ctc + (1-lambda2)*logP_lm``.

    Ids in ``exclude`` (the <NULL> token by default) are never proposed as
    extensions. Returns up to ``cfg.nbest`` ``(prefix, score)`` pairs, best
    first; the LM end-of-sequence score is added before the final ranking.
    """
    cfg = cfg or DecodeConfig()
    logp = np.asarray(logp, dtype=np.float64)
    use_lm = cfg.use_lm and cfg.lambda2 < 1.0
    if cfg.use_lm and lm is None:
        raise ValueError("use_lm is set but no language model was given")
    w_ctc, w_lm = cfg.lambda2, 1.0 - cfg.lambda2
    tokens = [i for i in range(logp.shape[1]) if i != blank and i not in exclude]

    beams = {(): (0.0, NEG_INF)}
    lm_cache = {(): (0.0, lm.initial_state() if use_lm else None)}

    def lm_score(prefix):
        hit = lm_cache.get(prefix)
        if hit is None:
            base, state = lm_score(prefix[:-1])
            lp, new_state = lm.score_step(state, prefix[-1])
            hit = lm_cache[prefix] = (base + lp, new_state)
        return hit

    for row in logp:
        lp_blank = float(row[blank])
        lp_tok = [float(row[c]) for c in tokens]
        nxt = {}
        for prefix, (pb, pnb) in beams.items():
            total = _lae(pb, pnb)
            last = prefix[-1] if prefix else None
            nb, nnb = nxt.get(prefix, (NEG_INF, NEG_INF))
            nb = _lae(nb, total + lp_blank)
            if last is not None:
                nnb = _lae(nnb, pnb + float(row[last]))
            nxt[prefix] = (nb, nnb)
            for c, lc in zip(tokens, lp_tok):
                src = pb if c == last else total
                if src == NEG_INF or lc == NEG_INF:
                    continue
                new = prefix + (c,)
                b2, nb2 = nxt.get(new, (NEG_INF, NEG_INF))
                nxt[new] = (b2, _lae(nb2, src + lc))

        def rank(item):
            prefix, (pb, pnb) = item
            s = w_ctc * _lae(pb, pnb)
            if use_lm:
                s += w_lm * lm_score(prefix)[0]
            return (-s, prefix)

        beams = dict(sorted(nxt.items(), key=rank)[: cfg.beam])

    final = []
    for prefix, (pb, pnb) in beams.items():
        s = w_ctc * _lae(pb, pnb)
        if use_lm:
            lm_lp, state = lm_score(prefix)
            s += w_lm * (lm_lp + lm.score_step(state, lm.eos)[0])
        final.append((prefix, s))
    final.sort(key=lambda ps: (-ps[1], ps[0]))
    return final[: cfg.nbest]


# -- frame-level language identity diagnostic --------------------------------

LID_L1 = "L1"
LID_L2 = "L2"
LID_BLANK = "BLANK"
LID_AMBIGUOUS = "AMBIGUOUS"


@dataclass
class FrameLID:
    decisions: list
    counts: dict
    spans: list  # (start, end, decision), end exclusive


def frame_lid(pg_l1, pg_l2):
    """Per-frame language decision from the two monolingual-view argmaxes.

    Monolingual indices: 0 is blank, 1 is <NULL>, the rest are real tokens.
    """
    pg_l1, pg_l2 = np.asarray(pg_l1), np.asarray(pg_l2)
    if pg_l1.shape[0] != pg_l2.shape[0]:
        raise ValueError(f"posteriorgrams disagree on length: {pg_l1.shape[0]} vs {pg_l2.shape[0]}")
    a1 = np.argmax(pg_l1, axis=1)
    a2 = np.argmax(pg_l2, axis=1)
    decisions = []
    for m, e in zip(a1, a2):
        if m >= 2 and e < 2:
            decisions.append(LID_L1)
        elif e >= 2 and m < 2:
            decisions.append(LID_L2)
        elif m == 0 and e == 0:
            decisions.append(LID_BLANK)
        else:
            decisions.append(LID_AMBIGUOUS)
    spans = []
    for t, d in enumerate(decisions):
        if spans and spans[-1][2] == d:
            spans[-1] = (spans[-1][0], t + 1, d)
        else:
            spans.append((t, t + 1, d))
    counts = Counter(decisions)
    return FrameLID(decisions, {k: counts.get(k, 0) for k in (LID_L1, LID_L2, LID_BLANK, LID_AMBIGUOUS)}, spans)
