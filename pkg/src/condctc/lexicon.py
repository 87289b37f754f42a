"""Bilingual token inventory and label-sequence helpers.

Layout is fixed: ``[<blk>, <NULL>, L1 tokens..., L2 tokens...]``.
Label sequences are plain tuples of token ids.
"""
import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

BLANK = "<blk>"
NULL = "<NULL>"

L1 = "L1"
L2 = "L2"
SPECIAL = "SPECIAL"
LANGS = (L1, L2)


class VocabError(ValueError):
    pass


def other_lang(lang):
    if lang not in LANGS:
        raise VocabError(f"unknown language {lang!r}")
    return L2 if lang == L1 else L1


@dataclass(frozen=True)
class Vocab:
    tokens: tuple
    n_l1: int

    blank_id = 0
    null_id = 1

    def __post_init__(self):
        if self.tokens[:2] != (BLANK, NULL):
            raise VocabError("first two tokens must be <blk> and <NULL>")
        if self.n_l1 < 1 or self.n_l2 < 1:
            raise VocabError("both languages need at least one token")
        if len(set(self.tokens)) != len(self.tokens):
            raise VocabError("duplicate token in vocabulary")
        object.__setattr__(self, "_index", {t: i for i, t in enumerate(self.tokens)})

    def __len__(self):
        return len(self.tokens)

    @property
    def n_l2(self):
        return len(self.tokens) - 2 - self.n_l1

    @property
    def l1_ids(self):
        return range(2, 2 + self.n_l1)

    @property
    def l2_ids(self):
        return range(2 + self.n_l1, len(self.tokens))

    @property
    def real_ids(self):
        """Ids of all non-special tokens, L1 block then L2 block."""
        return range(2, len(self.tokens))

    def ids_of(self, lang):
        if lang == L1:
            return self.l1_ids
        if lang == L2:
            return self.l2_ids
        raise VocabError(f"unknown language {lang!r}")

    def lang_of(self, i):
        if not 0 <= i < len(self.tokens):
            raise IndexError(f"token id {i} out of range")
        if i < 2:
            return SPECIAL
        return L1 if i < 2 + self.n_l1 else L2

    def langs(self, ids):
        return tuple(self.lang_of(i) for i in ids)

    def index(self, token):
        try:
            return self._index[token]
        except KeyError:
            raise VocabError(f"unknown token {token!r}") from None

    def encode(self, tokens):
        if isinstance(tokens, str):
            tokens = tokens.split()
        return tuple(self.index(t) for t in tokens)

    def decode(self, ids):
        return [self.tokens[i] for i in ids]

    def to_text(self, ids):
        return " ".join(self.decode(ids))

    def paired(self, i):
        """Cross-lingual partner of a real token (same offset in the other block)."""
        if self.n_l1 != self.n_l2:
            raise VocabError("token pairing needs equal-sized language blocks")
        lang = self.lang_of(i)
        if lang == L1:
            return i + self.n_l1
        if lang == L2:
            return i - self.n_l1
        raise VocabError(f"special token {i} has no partner")

    def serialize(self):
        return f"#L1={self.n_l1}\n" + "".join(t + "\n" for t in self.tokens)

    @property
    def hash(self):
        return hashlib.sha256(self.serialize().encode("utf-8")).hexdigest()[:16]

    def save(self, path):
        Path(path).write_text(self.serialize(), encoding="utf-8")

    @classmethod
    def load(cls, path):
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if not lines or not lines[0].startswith("#L1="):
            raise VocabError(f"{path}: missing '#L1=<count>' header")
        try:
            n_l1 = int(lines[0][4:])
        except ValueError:
            raise VocabError(f"{path}: bad header {lines[0]!r}") from None
        return cls(tuple(lines[1:]), n_l1)


def build_vocab(l1_tokens, l2_tokens):
    l1_tokens, l2_tokens = list(l1_tokens), list(l2_tokens)
    if not l1_tokens or not l2_tokens:
        raise VocabError("both token lists must be non-empty")
    seen = {BLANK, NULL}
    for tok in l1_tokens + l2_tokens:
        if not tok or any(c.isspace() for c in tok):
            raise VocabError(f"invalid token {tok!r}")
        if tok in seen:
            what = "reserved" if tok in (BLANK, NULL) else "duplicate or overlapping"
            raise VocabError(f"{what} token {tok!r}")
        seen.add(tok)
    return Vocab((BLANK, NULL, *l1_tokens, *l2_tokens), len(l1_tokens))


@dataclass(frozen=True)
class MonolingualView:
    """Compact per-language output space ``{blank, <NULL>, lang tokens}``.

    ``to_bi[j]`` is the bilingual id of monolingual index ``j``.
    """

    lang: str
    to_bi: np.ndarray
    vocab_size: int

    def __len__(self):
        return len(self.to_bi)

    def to_mono(self, i):
        if i < 2:
            return i
        j = i - int(self.to_bi[2]) + 2
        if not 2 <= j < len(self.to_bi):
            raise VocabError(f"token {i} is outside the {self.lang} view")
        return j

    def contains(self, i):
        return i < 2 or int(self.to_bi[2]) <= i <= int(self.to_bi[-1])

    def map_seq(self, ids):
        return tuple(self.to_mono(i) for i in ids)

    def unmap_seq(self, ids):
        return tuple(int(self.to_bi[j]) for j in ids)


def monolingual_view(vocab, lang):
    ids = list(vocab.ids_of(lang))
    to_bi = np.array([vocab.blank_id, vocab.null_id, *ids], dtype=np.int64)
    to_bi.setflags(write=False)
    return MonolingualView(lang, to_bi, len(vocab))


def language_spans(ids, vocab):
    """Maximal same-language runs as ``(start, end, lang)`` with ``end`` exclusive."""
    spans = []
    for pos, i in enumerate(ids):
        if i == vocab.blank_id:
            raise VocabError("label sequence contains blank")
        lang = vocab.lang_of(i)
        if spans and spans[-1][2] == lang:
            spans[-1] = (spans[-1][0], pos + 1, lang)
        else:
            spans.append((pos, pos + 1, lang))
    return spans
