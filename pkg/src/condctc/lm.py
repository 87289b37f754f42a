"""Token-level n-gram LM used for shallow fusion.

Seen contexts get add-k smoothing whose prior is the next-lower order,
``P(w|c) = (n(c,w) + k*V*P(w|c')) / (n(c) + k*V)``; unseen contexts back
off to ``c'`` outright. Every conditional is a normalized distribution over
the real tokens plus end-of-sequence.
"""
import math
from collections import Counter, defaultdict
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .synthdata import _atomic_write

EOS_TEXT = "</s>"


class LMFormatError(ValueError):
    pass


class NGramLM(BaseEstimator):
    def __init__(self, vocab=None, order=3, k=0.1, backoff=0.4):
        self.vocab = vocab
        self.order = order
        self.k = k
        self.backoff = backoff

    @property
    def eos(self):
        return len(self.vocab)

    def _outcomes(self):
        return list(self.vocab.real_ids) + [self.eos]

    def _validate(self):
        if self.vocab is None:
            raise ValueError("NGramLM needs a vocabulary")
        if self.order < 1:
            raise ValueError("order must be >= 1")
        if self.k <= 0:
            raise ValueError("k must be positive")

    def fit(self, X, y=None):
        """Count n-grams over label sequences ``X`` (tuples of bilingual ids)."""
        self._validate()
        X = [tuple(s) for s in X]
        if not X:
            raise ValueError("cannot train an LM on an empty corpus")
        outcomes = self._outcomes()
        col = {w: j for j, w in enumerate(outcomes)}
        counts = defaultdict(Counter)
        for seq in X:
            for i in seq:
                if i not in col or i == self.eos:
                    raise ValueError(f"token id {i} is not an LM token")
            events = list(seq) + [self.eos]
            for pos, w in enumerate(events):
                for m in range(min(pos, self.order - 1) + 1):
                    counts[tuple(events[pos - m : pos])][w] += 1
        V = len(outcomes)
        dist = {}
        for ctx in sorted(counts, key=lambda c: (len(c), c)):
            prior = dist[ctx[1:]] if ctx else np.full(V, 1.0 / V)
            c = counts[ctx]
            num = np.array([c.get(w, 0) for w in outcomes], dtype=np.float64)
            dist[ctx] = (num + self.k * V * prior) / (num.sum() + self.k * V)
        self.col_ = col
        self.logdist_ = {ctx: np.log(p) for ctx, p in dist.items()}
        return self

    def _check_fitted(self):
        if not hasattr(self, "logdist_"):
            raise NotFittedError("NGramLM is not fitted")

    def initial_state(self):
        return ()

    def _context(self, state):
        ctx = tuple(state)[-(self.order - 1) :] if self.order > 1 else ()
        while ctx not in self.logdist_:
            ctx = ctx[1:]
        return ctx

    def log_distribution(self, state=()):
        """Log-probabilities over ``list(vocab.real_ids) + [eos]``."""
        self._check_fitted()
        return self.logdist_[self._context(state)]

    def score_step(self, state, token):
        self._check_fitted()
        j = self.col_.get(token)
        if j is None:
            raise ValueError(f"token id {token} is not an LM token")
        lp = float(self.log_distribution(state)[j])
        if self.order == 1:
            return lp, ()
        return lp, (tuple(state) + (token,))[-(self.order - 1) :]

    def sequence_logprob(self, seq):
        state = self.initial_state()
        total = 0.0
        for tok in list(seq) + [self.eos]:
            lp, state = self.score_step(state, tok)
            total += lp
        return total

    # -- text table ----------------------------------------------------------

    def _name(self, w):
        return EOS_TEXT if w == self.eos else self.vocab.tokens[w]

    def serialize(self):
        self._check_fitted()
        header = f"#ngram order={self.order} k={self.k!r} backoff={self.backoff!r} vocab={self.vocab.hash}\n"
        lines = [header]
        outcomes = self._outcomes()
        for ctx in sorted(self.logdist_, key=lambda c: (len(c), c)):
            ctx_text = " ".join(self._name(w) for w in ctx)
            for w, lp in zip(outcomes, self.logdist_[ctx]):
                lines.append(f"{ctx_text} | {self._name(w)} | {float(lp)!r}\n")
        return "".join(lines)

    def save(self, path):
        _atomic_write(Path(path), self.serialize())

    @classmethod
    def load(cls, path, vocab):
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if not lines or not lines[0].startswith("#ngram "):
            raise LMFormatError(f"{path}: missing '#ngram' header")
        fields = dict(item.split("=", 1) for item in lines[0][len("#ngram ") :].split())
        if fields.get("vocab") != vocab.hash:
            raise LMFormatError(f"{path}: vocabulary hash mismatch")
        lm = cls(vocab, int(fields["order"]), float(fields["k"]), float(fields["backoff"]))
        outcomes = lm._outcomes()
        col = {w: j for j, w in enumerate(outcomes)}
        name_to_id = {lm._name(w): w for w in outcomes}
        table = {}
        for lineno, line in enumerate(lines[1:], 2):
            parts = line.split(" | ")
            if len(parts) != 3:
                raise LMFormatError(f"{path}:{lineno}: expected 'context | token | logprob'")
            try:
                ctx = tuple(name_to_id[t] for t in parts[0].split())
                w = name_to_id[parts[1]]
            except KeyError as e:
                raise LMFormatError(f"{path}:{lineno}: unknown token {e}") from None
            table.setdefault(ctx, np.full(len(outcomes), math.nan))[col[w]] = float(parts[2])
        if () not in table or any(np.isnan(v).any() for v in table.values()):
            raise LMFormatError(f"{path}: incomplete probability table")
        lm.col_ = col
        lm.logdist_ = table
        return lm
