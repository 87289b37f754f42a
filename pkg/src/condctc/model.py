"""Conditional CTC, vanilla CTC and monolingual CTC estimators.

Conditional CTC runs two per-language encoders, a monolingual CTC head on
each, and a bilingual CTC head on the sum of the two latent sequences. It is
trained on ``lambda1 * L_bi + (1 - lambda1) * (L_l1 + L_l2) / 2``.
"""
import json
import logging
import math
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import nnet
from .ctc import ctc_loss
from .decode import DecodeConfig, beam_search, merge_posteriors
from .lexicon import L1, L2, monolingual_view
from .synthdata import _atomic_write
from .targets import SCHEMES, SEGMENTATION, TRANSLITERATION, TargetPair, make_training_targets, mask_segmentation
from .validation import check_labels, check_sequence, check_sequences

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


class ModelFormatError(ValueError):
    pass


def sub(params, prefix):
    """View of the ``prefix/...`` entries of a flat parameter dict."""
    p = prefix + "/"
    return {k[len(p) :]: v for k, v in params.items() if k.startswith(p)}


def _merge_into(out, prefix, grads):
    for k, v in grads.items():
        out[f"{prefix}/{k}"] = v


class _Batch:
    """Spliced, stacked frames of several utterances."""

    def __init__(self, xs, context, utt_context=False):
        self.lengths = [x.shape[0] for x in xs]
        self.offsets = np.concatenate(([0], np.cumsum(self.lengths)))
        self.inp = np.vstack([nnet.frame_inputs(x, context, utt_context) for x in xs])

    def slices(self):
        return [slice(a, b) for a, b in zip(self.offsets[:-1], self.offsets[1:])]


def forward_conditional(params, x, context=1, utt_context=False):
    """``(pg_l1, pg_l2, pg_bi)`` log-posteriorgrams for one utterance."""
    inp = nnet.frame_inputs(x, context, utt_context)
    h1, _ = nnet.mlp_forward(sub(params, "enc_l1"), inp)
    h2, _ = nnet.mlp_forward(sub(params, "enc_l2"), inp)
    pg1, _ = nnet.head_logprobs(sub(params, "head_l1"), h1)
    pg2, _ = nnet.head_logprobs(sub(params, "head_l2"), h2)
    pgb, _ = nnet.head_logprobs(sub(params, "head_bi"), h1 + h2)
    return pg1, pg2, pgb


def combine_losses(l_bi, l_l1, l_l2, lambda1):
    """Interpolated objective; infeasible (infinite) terms contribute nothing."""
    terms = ((lambda1, l_bi), ((1 - lambda1) / 2, l_l1), ((1 - lambda1) / 2, l_l2))
    return sum(w * l for w, l in terms if math.isfinite(l) and w != 0)


def conditional_batch_loss(params, xs, pairs, ys, lambda1, views, context=1, utt_context=False):
    """Summed multitask loss and summed gradients over a batch.

    Returns ``(loss, grads, components, n_used)`` where ``components`` is a
    list of per-utterance ``(l_bi, l_l1, l_l2)``.
    """
    batch = _Batch(xs, context, utt_context)
    enc1, enc2 = sub(params, "enc_l1"), sub(params, "enc_l2")
    h1, acts1 = nnet.mlp_forward(enc1, batch.inp)
    h2, acts2 = nnet.mlp_forward(enc2, batch.inp)
    heads = {name: sub(params, name) for name in ("head_l1", "head_l2", "head_bi")}
    pg1, c1 = nnet.head_logprobs(heads["head_l1"], h1)
    pg2, c2 = nnet.head_logprobs(heads["head_l2"], h2)
    pgb, cb = nnet.head_logprobs(heads["head_bi"], h1 + h2)

    g1, g2, gb = np.zeros_like(pg1), np.zeros_like(pg2), np.zeros_like(pgb)
    w_mono = (1 - lambda1) / 2
    total = 0.0
    components = []
    used = 0
    for sl, pair, y in zip(batch.slices(), pairs, ys):
        lb, db = ctc_loss(pgb[sl], y)
        l1, d1 = ctc_loss(pg1[sl], views[0].map_seq(pair.y_l1))
        l2, d2 = ctc_loss(pg2[sl], views[1].map_seq(pair.y_l2))
        components.append((lb, l1, l2))
        if not any(math.isfinite(v) for v in (lb, l1, l2)):
            continue
        used += 1
        total += combine_losses(lb, l1, l2, lambda1)
        gb[sl] = lambda1 * db
        g1[sl] = w_mono * d1
        g2[sl] = w_mono * d2

    grads = {}
    gh_b = None
    for name, cache, g in (("head_l1", c1, g1), ("head_l2", c2, g2), ("head_bi", cb, gb)):
        hg, gh = nnet.head_backward(heads[name], cache, g)
        _merge_into(grads, name, hg)
        if name == "head_l1":
            gh1 = gh
        elif name == "head_l2":
            gh2 = gh
        else:
            gh_b = gh
    eg1, _ = nnet.mlp_backward(enc1, acts1, gh1 + gh_b)
    eg2, _ = nnet.mlp_backward(enc2, acts2, gh2 + gh_b)
    _merge_into(grads, "enc_l1", eg1)
    _merge_into(grads, "enc_l2", eg2)
    return total, grads, components, used


def loss_multitask(params, x, pair, y_bi, lambda1, views, context=1, utt_context=False):
    """Single-utterance multitask loss, gradients and ``(l_bi, l_l1, l_l2)``."""
    loss, grads, comps, used = conditional_batch_loss(
        params, [x], [pair], [y_bi], lambda1, views, context, utt_context
    )
    if not used:
        raise TrainingError("all three CTC targets are infeasible for this utterance")
    return loss, grads, comps[0]


def single_batch_loss(params, xs, ys, context=1, utt_context=False):
    """Summed CTC loss and gradients for a one-encoder, one-head network."""
    batch = _Batch(xs, context, utt_context)
    enc, head = sub(params, "enc"), sub(params, "head")
    h, acts = nnet.mlp_forward(enc, batch.inp)
    pg, cache = nnet.head_logprobs(head, h)
    g = np.zeros_like(pg)
    total, used, losses = 0.0, 0, []
    for sl, y in zip(batch.slices(), ys):
        l, d = ctc_loss(pg[sl], y)
        losses.append(l)
        if math.isfinite(l):
            total += l
            g[sl] = d
            used += 1
    grads = {}
    hg, gh = nnet.head_backward(head, cache, g)
    _merge_into(grads, "head", hg)
    eg, _ = nnet.mlp_backward(enc, acts, gh)
    _merge_into(grads, "enc", eg)
    return total, grads, losses, used


class _CTCEstimator(BaseEstimator):
    kind = None

    def _views(self):
        return monolingual_view(self.vocab, L1), monolingual_view(self.vocab, L2)

    def _check_params(self):
        if self.vocab is None:
            raise ValueError(f"{type(self).__name__} needs a vocabulary")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")

    def _train(self, examples, loss_fn):
        """Shared minibatch Adam loop; ``examples`` are per-utterance tuples."""
        rng = np.random.default_rng(self.seed)
        params = self._init_params(rng)
        opt = nnet.Adam(lr=self.lr)
        curve = []
        n = len(examples)
        for epoch in range(self.epochs):
            order = rng.permutation(n)
            epoch_loss, epoch_used = 0.0, 0
            for start in range(0, n, self.batch_size):
                chunk = [examples[i] for i in order[start : start + self.batch_size]]
                loss, grads, used = loss_fn(params, chunk)
                if not math.isfinite(loss) or any(not np.all(np.isfinite(g)) for g in grads.values()):
                    raise TrainingError(
                        f"{type(self).__name__}: non-finite loss/gradient in epoch {epoch + 1} "
                        f"(batch starting at {start}, loss={loss})"
                    )
                if used == 0:
                    continue
                epoch_loss += loss
                epoch_used += used
                params = opt.step(params, {k: g / used for k, g in grads.items()})
            mean = epoch_loss / max(epoch_used, 1)
            curve.append(mean)
            log.debug("%s epoch %d loss %.4f", type(self).__name__, epoch + 1, mean)
        self.params_ = params
        self.loss_curve_ = curve
        return self

    def _init_params(self, rng):
        raise NotImplementedError

    # -- persistence -----------------------------------------------------------

    def _sidecar(self):
        skip = {"vocab", "lm", "pseudolabelers", "decode_config"}
        params = {k: v for k, v in self.get_params(deep=False).items() if k not in skip}
        return {
            "kind": self.kind,
            "params": params,
            "n_features": self.n_features_in_,
            "vocab_hash": self.vocab.hash,
            "loss_curve": [float(v) for v in getattr(self, "loss_curve_", [])],
        }

    def save(self, path):
        check_is_fitted(self, "params_")
        path = Path(path)
        nnet.write_checkpoint(path, self.params_)
        _atomic_write(sidecar_path(path), json.dumps(self._sidecar(), indent=2, sort_keys=True) + "\n")
        return path


def sidecar_path(path):
    path = Path(path)
    return path.with_name(path.name + ".json")


class VanillaCTC(_CTCEstimator):
    """Single encoder with a CTC head over the full bilingual vocabulary."""

    kind = "vanilla"

    def __init__(
        self,
        vocab=None,
        hidden=128,
        layers=2,
        context=1,
        utt_context=True,
        epochs=40,
        batch_size=16,
        lr=1e-3,
        seed=0,
        lm=None,
        decode_config=None,
    ):
        self.vocab = vocab
        self.hidden = hidden
        self.layers = layers
        self.context = context
        self.utt_context = utt_context
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.seed = seed
        self.lm = lm
        self.decode_config = decode_config

    def _out_dim(self):
        return len(self.vocab)

    def _target(self, y):
        return y

    def _init_params(self, rng):
        params = {}
        enc = nnet.init_encoder(
                rng, self.n_features_in_, self.hidden, self.layers, self.context, self.utt_context
            )
        _merge_into(params, "enc", enc)
        _merge_into(params, "head", nnet.init_head(rng, self.hidden, self._out_dim()))
        return params

    def fit(self, X, y):
        self._check_params()
        X = check_sequences(X)
        if len(X) != len(y):
            raise ValueError(f"{len(X)} feature sequences but {len(y)} transcripts")
        self.n_features_in_ = X[0].shape[1]
        examples = [(x, self._target(check_labels(t, self.vocab))) for x, t in zip(X, y)]

        def loss_fn(params, chunk):
            xs, ys = zip(*chunk)
            loss, grads, _, used = single_batch_loss(params, xs, ys, self.context, self.utt_context)
            return loss, grads, used

        return self._train(examples, loss_fn)

    def posteriorgram(self, x):
        check_is_fitted(self, "params_")
        x = check_sequence(x, self.n_features_in_)
        h, _ = nnet.encode(sub(self.params_, "enc"), x, self.context, self.utt_context)
        return nnet.head_logprobs(sub(self.params_, "head"), h)[0]

    def decode(self, X, cfg=None, lm=None):
        """N-best ``[(prefix, score), ...]`` per utterance."""
        cfg = cfg or self.decode_config or DecodeConfig()
        lm = lm if lm is not None else self.lm
        return [beam_search(self.posteriorgram(x), cfg, lm if cfg.use_lm else None) for x in check_sequences(X)]

    def predict(self, X):
        return [hyps[0][0] for hyps in self.decode(X)]


class MonolingualCTC(VanillaCTC):
    """Single encoder with a CTC head over one language's view.

    Used as the cross-lingual pseudo-labeler; ``predict`` returns greedy
    transcripts in bilingual ids.
    """

    kind = "mono"

    def __init__(
        self,
        vocab=None,
        lang=L1,
        hidden=128,
        layers=2,
        context=1,
        utt_context=True,
        epochs=40,
        batch_size=16,
        lr=1e-3,
        seed=0,
    ):
        self.vocab = vocab
        self.lang = lang
        self.hidden = hidden
        self.layers = layers
        self.context = context
        self.utt_context = utt_context
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.seed = seed

    @property
    def view(self):
        return monolingual_view(self.vocab, self.lang)

    def _out_dim(self):
        return len(self.view)

    def _target(self, y):
        return self.view.map_seq(y)

    def __call__(self, x):
        return self.posteriorgram(x)

    def predict(self, X):
        from .targets import pseudolabel

        return [pseudolabel(self.posteriorgram, x, self.view) for x in check_sequences(X)]

    def decode(self, X, cfg=None, lm=None):
        raise NotImplementedError("monolingual models are decoded greedily via predict()")


class ConditionalCTC(_CTCEstimator):
    """Two encoders, two monolingual CTC heads and a bilingual CTC head on their sum."""

    kind = "cond"

    def __init__(
        self,
        vocab=None,
        scheme=TRANSLITERATION,
        lambda1=0.7,
        pseudolabelers=None,
        hidden=128,
        layers=2,
        context=1,
        utt_context=True,
        epochs=40,
        batch_size=16,
        lr=1e-3,
        seed=0,
        lm=None,
        decode_config=None,
    ):
        self.vocab = vocab
        self.scheme = scheme
        self.lambda1 = lambda1
        self.pseudolabelers = pseudolabelers
        self.hidden = hidden
        self.layers = layers
        self.context = context
        self.utt_context = utt_context
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.seed = seed
        self.lm = lm
        self.decode_config = decode_config

    def _check_params(self):
        super()._check_params()
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if not 0.0 <= self.lambda1 <= 1.0:
            raise ValueError("lambda1 must lie in [0, 1]")

    def _init_params(self, rng):
        params = {}
        v1, v2 = self._views()
        for name in ("enc_l1", "enc_l2"):
            enc = nnet.init_encoder(
                rng, self.n_features_in_, self.hidden, self.layers, self.context, self.utt_context
            )
            _merge_into(params, name, enc)
        _merge_into(params, "head_l1", nnet.init_head(rng, self.hidden, len(v1)))
        _merge_into(params, "head_l2", nnet.init_head(rng, self.hidden, len(v2)))
        _merge_into(params, "head_bi", nnet.init_head(rng, self.hidden, len(self.vocab)))
        return params

    def make_targets(self, X, y):
        if self.scheme == SEGMENTATION:
            return [mask_segmentation(t, self.vocab) for t in y]
        if not self.pseudolabelers:
            raise ValueError("transliteration targets need pseudolabelers={L1: model, L2: model}")
        from .synthdata import Utterance, category_of

        utts = [Utterance(str(i), x, t, category_of(t, self.vocab)) for i, (x, t) in enumerate(zip(X, y))]
        labelers = {lang: m.posteriorgram for lang, m in self.pseudolabelers.items()}
        table, self.target_report_ = make_training_targets(utts, self.vocab, TRANSLITERATION, labelers)
        return [table.get(str(i)) for i in range(len(utts))]

    def fit(self, X, y, targets=None):
        """Train on features ``X`` and bilingual transcripts ``y``.

        ``targets`` (one TargetPair or None per utterance) overrides the
        monolingual targets derived from ``scheme``; None entries are skipped.
        """
        self._check_params()
        X = check_sequences(X)
        y = [check_labels(t, self.vocab) for t in y]
        if len(X) != len(y):
            raise ValueError(f"{len(X)} feature sequences but {len(y)} transcripts")
        self.n_features_in_ = X[0].shape[1]
        if targets is None:
            targets = self.make_targets(X, y)
        if len(targets) != len(X):
            raise ValueError("need one target pair per utterance")
        for p in targets:
            if p is not None and p.scheme != self.scheme:
                raise ValueError(f"target scheme {p.scheme!r} does not match model scheme {self.scheme!r}")
        examples = [(x, p, t) for x, p, t in zip(X, targets, y) if p is not None]
        views = self._views()

        def loss_fn(params, chunk):
            xs, pairs, ys = zip(*chunk)
            loss, grads, _, used = conditional_batch_loss(
                params, xs, pairs, ys, self.lambda1, views, self.context, self.utt_context
            )
            return loss, grads, used

        return self._train(examples, loss_fn)

    def posteriorgrams(self, x):
        """``(pg_l1, pg_l2, pg_bi)``; monolingual ones are in view indices."""
        check_is_fitted(self, "params_")
        return forward_conditional(
            self.params_, check_sequence(x, self.n_features_in_), self.context, self.utt_context
        )

    def merged_posteriorgram(self, x, cfg=None):
        cfg = cfg or self.decode_config or DecodeConfig()
        pg1, pg2, pgb = self.posteriorgrams(x)
        return merge_posteriors(pgb, pg1, pg2, cfg.effective_weights(), self._views(), mode=cfg.merge)

    def decode(self, X, cfg=None, lm=None):
        cfg = cfg or self.decode_config or DecodeConfig()
        lm = lm if lm is not None else self.lm
        out = []
        for x in check_sequences(X):
            out.append(beam_search(self.merged_posteriorgram(x, cfg), cfg, lm if cfg.use_lm else None))
        return out

    def predict(self, X):
        return [hyps[0][0] for hyps in self.decode(X)]


MODEL_KINDS = {cls.kind: cls for cls in (VanillaCTC, MonolingualCTC, ConditionalCTC)}


def load_model(path, vocab):
    """Rebuild a saved estimator; the vocabulary must hash to the recorded value."""
    path = Path(path)
    side = sidecar_path(path)
    if not side.exists():
        raise ModelFormatError(f"{path}: missing sidecar {side.name}")
    meta = json.loads(side.read_text(encoding="utf-8"))
    if meta.get("vocab_hash") != vocab.hash:
        raise ModelFormatError(f"{path}: vocabulary hash {vocab.hash} does not match {meta.get('vocab_hash')}")
    cls = MODEL_KINDS.get(meta.get("kind"))
    if cls is None:
        raise ModelFormatError(f"{path}: unknown model kind {meta.get('kind')!r}")
    try:
        tensors = nnet.read_checkpoint(path)
    except nnet.CheckpointError as e:
        raise ModelFormatError(str(e)) from None
    model = cls(vocab=vocab, **meta["params"])
    model.n_features_in_ = meta["n_features"]
    model.params_ = tensors
    model.loss_curve_ = meta.get("loss_curve", [])
    expected = model._init_params(np.random.default_rng(0))
    if {k: v.shape for k, v in expected.items()} != {k: v.shape for k, v in tensors.items()}:
        raise ModelFormatError(f"{path}: tensor table does not match a {cls.__name__} architecture")
    return model


__all__ = [
    "ConditionalCTC",
    "VanillaCTC",
    "MonolingualCTC",
    "TargetPair",
    "forward_conditional",
    "loss_multitask",
    "combine_losses",
    "load_model",
    "TrainingError",
]
