"""Monolingual training targets: <NULL>-masked segmentation vs transliteration.

Targets are stored in bilingual token ids. A pseudo-labeler is any callable
mapping a ``T x D`` feature matrix to a monolingual-view log-posteriorgram.
"""
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .ctc import AlignmentError, collapse, forced_align, greedy_decode
from .lexicon import L1, L2, language_spans, monolingual_view, other_lang
from .synthdata import CS, MONO_L1, _atomic_write, category_of

log = logging.getLogger(__name__)

SEGMENTATION = "seg"
TRANSLITERATION = "tra"
SCHEMES = (SEGMENTATION, TRANSLITERATION)

# Constant <NULL> score used while aligning masked native targets: native
# frames beat it via their true token, foreign frames fall through to it.
FILLER_LOGPROB = float(np.log(0.1))


@dataclass(frozen=True)
class TargetPair:
    y_l1: tuple
    y_l2: tuple
    scheme: str

    def view(self, lang):
        return self.y_l1 if lang == L1 else self.y_l2


@dataclass
class TargetReport:
    empty: list = field(default_factory=list)  # (utt id, lang) with empty pseudo-labels
    skipped: list = field(default_factory=list)  # (utt id, reason)

    def summary(self):
        return f"{len(self.empty)} empty pseudo-labels, {len(self.skipped)} skipped utterances"


def _check_scheme(scheme):
    if scheme not in SCHEMES:
        raise ValueError(f"unknown target scheme {scheme!r}; expected one of {SCHEMES}")


def mask_view(y, vocab, lang):
    out = []
    for start, end, span_lang in language_spans(y, vocab):
        if span_lang == lang:
            out.extend(y[start:end])
        else:
            out.append(vocab.null_id)
    return tuple(out)


def mask_segmentation(y, vocab):
    """Replace every maximal foreign run with one <NULL> in each language view."""
    if vocab.null_id in y:
        raise ValueError("transcript already contains <NULL>")
    return TargetPair(mask_view(y, vocab, L1), mask_view(y, vocab, L2), SEGMENTATION)


def pseudolabel(pg_fn, x, view):
    """Greedy CTC transcript of ``x`` under a monolingual model, <NULL> removed."""
    logp = pg_fn(x)
    path = greedy_decode(logp)
    return view.unmap_seq(collapse(path, blank=0, drop=(1,)))


def stitch_view(y, x, vocab, lang, pg_native, pg_fn, filler_logprob=FILLER_LOGPROB):
    """Transliteration target for one view of a (possibly) code-switched utterance.

    Native tokens are kept; each foreign run is replaced by the pseudo-label
    of the frames its <NULL> placeholder occupies in a forced alignment of
    the masked native target.
    """
    view = monolingual_view(vocab, lang)
    masked = mask_view(y, vocab, lang)
    if vocab.null_id not in masked:
        return masked
    if masked == (vocab.null_id,):
        return pseudolabel(pg_fn, x, view)
    logp = np.array(pg_native, dtype=np.float64)
    if filler_logprob is not None:
        logp[:, 1] = filler_logprob
    align = forced_align(logp, view.map_seq(masked))
    x = np.asarray(x)
    out = []
    for tok, (start, end) in zip(masked, align.spans):
        if tok == vocab.null_id:
            out.extend(pseudolabel(pg_fn, x[start:end], view))
        else:
            out.append(tok)
    return tuple(out)


def stitch_cs_targets(y, x, vocab, pg_native, pg_fns, filler_logprob=FILLER_LOGPROB):
    """Both transliteration views; ``pg_native`` and ``pg_fns`` are keyed by language."""
    views = {
        lang: stitch_view(y, x, vocab, lang, pg_native[lang], pg_fns[lang], filler_logprob)
        for lang in (L1, L2)
    }
    return TargetPair(views[L1], views[L2], TRANSLITERATION)


def make_training_targets(utts, vocab, scheme, labelers=None, filler_logprob=FILLER_LOGPROB):
    """Per-utterance TargetPairs keyed by utterance id, plus a report.

    ``labelers`` maps each language to its pseudo-labeler and is required for
    transliteration. Utterances whose alignment fails are left out.
    """
    _check_scheme(scheme)
    report = TargetReport()
    out = {}
    if scheme == SEGMENTATION:
        for u in utts:
            out[u.id] = mask_segmentation(u.transcript, vocab)
        return out, report
    if not labelers or set(labelers) != {L1, L2}:
        raise ValueError("transliteration targets need pseudo-labelers for both languages")
    views = {lang: monolingual_view(vocab, lang) for lang in (L1, L2)}
    for u in utts:
        cat = category_of(u.transcript, vocab)
        if cat == CS:
            pg_native = {lang: labelers[lang](u.features) for lang in (L1, L2)}
            try:
                pair = stitch_cs_targets(u.transcript, u.features, vocab, pg_native, labelers, filler_logprob)
            except AlignmentError as e:
                log.warning("skipping %s: %s", u.id, e)
                report.skipped.append((u.id, str(e)))
                continue
        else:
            native = L1 if cat == MONO_L1 else L2
            foreign = other_lang(native)
            label = pseudolabel(labelers[foreign], u.features, views[foreign])
            pair = TargetPair(
                u.transcript if native == L1 else label,
                u.transcript if native == L2 else label,
                TRANSLITERATION,
            )
        for lang in (L1, L2):
            if not pair.view(lang):
                report.empty.append((u.id, lang))
        out[u.id] = pair
    if report.empty or report.skipped:
        log.info("transliteration targets: %s", report.summary())
    return out, report


def write_targets(targets, path, vocab):
    lines = [
        f"{uid}\t{p.scheme}\t{vocab.to_text(p.y_l1)}\t{vocab.to_text(p.y_l2)}\n" for uid, p in targets.items()
    ]
    _atomic_write(Path(path), "".join(lines))


def read_targets(path, vocab):
    out = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise ValueError(f"{path}:{lineno}: expected 4 tab-separated fields")
        uid, scheme, t1, t2 = parts
        _check_scheme(scheme)
        out[uid] = TargetPair(vocab.encode(t1), vocab.encode(t2), scheme)
    return out

