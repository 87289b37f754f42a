"""Seeded synthetic bilingual corpus and its on-disk formats.

Every L1 token ``i`` gets a random prototype ``mu_i``; its L2 partner sits at
``mu_i + delta * u_i`` with ``|u_i| = 1``, so the pair is acoustically
confusable when ``delta`` is small relative to ``noise_sigma``.
"""
import json
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .lexicon import L1, L2, Vocab, VocabError, build_vocab, language_spans

MONO_L1 = "MONO_L1"
MONO_L2 = "MONO_L2"
CS = "CS"
CATEGORIES = (MONO_L1, MONO_L2, CS)

FEATURE_MAGIC = b"CFCT"
FEATURE_VERSION = 1
_HEADER = struct.Struct("<4sIII")
MAX_FEATURE_ELEMENTS = 1 << 28


class FeatureFormatError(ValueError):
    pass


class BadMagicError(FeatureFormatError):
    pass


class TruncatedFeatureError(FeatureFormatError):
    pass


class FeatureDimensionError(FeatureFormatError):
    pass


class ManifestError(ValueError):
    def __init__(self, utt_id, reason):
        super().__init__(f"utterance {utt_id!r}: {reason}")
        self.utt_id = utt_id


@dataclass
class GenConfig:
    seed: int = 0
    n_tokens: int = 8  # per language; pairing needs equal counts
    dim: int = 16
    frames_per_token: tuple = (3, 6)
    noise_sigma: float = 0.3
    delta: float = 0.6
    lang_shared: float = 0.8  # in [0, 1]: weight of a language-wide offset direction
    bigram_alpha: float = 0.3  # Dirichlet concentration of each token-transition row
    mono_tokens: tuple = (4, 12)
    cs_segments: tuple = (2, 4)
    cs_segment_tokens: tuple = (2, 5)
    n_train_mono: int = 400  # per language
    n_train_cs: int = 400
    n_dev: int = 150  # per category

    def validate(self):
        ranges = {
            "frames_per_token": self.frames_per_token,
            "mono_tokens": self.mono_tokens,
            "cs_segments": self.cs_segments,
            "cs_segment_tokens": self.cs_segment_tokens,
        }
        for name, (lo, hi) in ranges.items():
            if not 1 <= lo <= hi:
                raise ValueError(f"{name} must be a non-empty range of positive ints, got {(lo, hi)}")
        if self.cs_segments[0] < 2:
            raise ValueError("code-switched utterances need at least 2 segments")
        if self.n_tokens < 1 or self.dim < 1:
            raise ValueError("n_tokens and dim must be positive")
        if not 0.0 <= self.lang_shared <= 1.0:
            raise ValueError("lang_shared must lie in [0, 1]")
        if not self.bigram_alpha > 0:
            raise ValueError("bigram_alpha must be positive")
        if self.noise_sigma < 0 or self.delta < 0:
            raise ValueError("noise_sigma and delta must be non-negative")
        for name in ("n_train_mono", "n_train_cs", "n_dev"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        return self

    def to_dict(self):
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown GenConfig keys: {sorted(unknown)}")
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**kw)


@dataclass
class Utterance:
    id: str
    features: np.ndarray
    transcript: tuple
    category: str

    @property
    def num_frames(self):
        return self.features.shape[0]


@dataclass
class Corpus:
    vocab: Vocab
    train_mono: list
    train_cs: list
    dev: list
    config: GenConfig = None
    prototypes: np.ndarray = field(default=None, repr=False)

    def split(self, name):
        return {"train_mono": self.train_mono, "train_cs": self.train_cs, "dev": self.dev}[name]


def category_of(ids, vocab):
    langs = {lang for _, _, lang in language_spans(ids, vocab)}
    if langs == {L1}:
        return MONO_L1
    if langs == {L2}:
        return MONO_L2
    if langs == {L1, L2}:
        return CS
    raise ValueError("transcript must contain only real tokens")


def default_vocab(n_tokens=8):
    return build_vocab([f"m{i}" for i in range(n_tokens)], [f"e{i}" for i in range(n_tokens)])


def _unit_rows(rng, n, dim):
    return _unit_rows_of(rng.standard_normal((n, dim)))


def _unit_rows_of(u):
    norms = np.linalg.norm(u, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    return u / norms


def generate_corpus(cfg=None):
    """Pure function of ``cfg``: same config gives an identical corpus."""
    cfg = (cfg or GenConfig()).validate()
    rng = np.random.default_rng(cfg.seed)
    vocab = default_vocab(cfg.n_tokens)
    n = cfg.n_tokens

    mu = rng.standard_normal((n, cfg.dim))
    shared = _unit_rows(rng, 1, cfg.dim)
    own = _unit_rows(rng, n, cfg.dim)
    rho = cfg.lang_shared
    offsets = cfg.delta * _unit_rows_of(rho * shared + np.sqrt(1.0 - rho**2) * own)
    # rows follow vocab ids; the two special rows are never rendered
    prototypes = np.zeros((len(vocab), cfg.dim))
    prototypes[2 : 2 + n] = mu
    prototypes[2 + n :] = mu + offsets

    # each language is a first-order Markov chain over its own tokens; small
    # alpha makes transitions peaked, so an n-gram LM has something to learn.
    # Self-transitions are excluded: back-to-back copies of a token render as
    # one unbroken run of frames that no CTC model could split.
    def chain():
        if n == 1:
            return np.ones((1, 1))
        t = np.zeros((n, n))
        off = ~np.eye(n, dtype=bool)
        t[off] = rng.dirichlet(np.full(n - 1, cfg.bigram_alpha), size=n).ravel()
        return t

    trans = {L1: chain(), L2: chain()}

    def draw_tokens(lang, count):
        base = 2 if lang == L1 else 2 + n
        t = int(rng.integers(0, n))
        out = [t]
        for _ in range(count - 1):
            t = int(rng.choice(n, p=trans[lang][t]))
            out.append(t)
        return [base + t for t in out]

    def render(ids):
        frames = []
        lo, hi = cfg.frames_per_token
        for i in ids:
            r = int(rng.integers(lo, hi + 1))
            noise = cfg.noise_sigma * rng.standard_normal((r, cfg.dim))
            frames.append(prototypes[i] + noise)
        return np.vstack(frames).astype(np.float32)

    def mono(lang, uid):
        lo, hi = cfg.mono_tokens
        ids = tuple(draw_tokens(lang, int(rng.integers(lo, hi + 1))))
        return Utterance(uid, render(ids), ids, MONO_L1 if lang == L1 else MONO_L2)

    def code_switched(uid):
        n_seg = int(rng.integers(cfg.cs_segments[0], cfg.cs_segments[1] + 1))
        lang = L1 if rng.random() < 0.5 else L2
        ids = []
        lo, hi = cfg.cs_segment_tokens
        for _ in range(n_seg):
            ids += draw_tokens(lang, int(rng.integers(lo, hi + 1)))
            lang = L2 if lang == L1 else L1
        ids = tuple(ids)
        return Utterance(uid, render(ids), ids, CS)

    train_mono = [mono(L1, f"train-l1-{k:04d}") for k in range(cfg.n_train_mono)]
    train_mono += [mono(L2, f"train-l2-{k:04d}") for k in range(cfg.n_train_mono)]
    train_cs = [code_switched(f"train-cs-{k:04d}") for k in range(cfg.n_train_cs)]
    dev = [mono(L1, f"dev-l1-{k:04d}") for k in range(cfg.n_dev)]
    dev += [mono(L2, f"dev-l2-{k:04d}") for k in range(cfg.n_dev)]
    dev += [code_switched(f"dev-cs-{k:04d}") for k in range(cfg.n_dev)]
    return Corpus(vocab, train_mono, train_cs, dev, cfg, prototypes)


# -- feature files -----------------------------------------------------------


def write_features(features, path):
    f = np.asarray(features)
    if f.ndim != 2 or f.shape[0] < 1 or f.shape[1] < 1:
        raise FeatureDimensionError(f"expected a non-empty T x D matrix, got shape {f.shape}")
    if not np.all(np.isfinite(f)):
        raise ValueError("features must be finite")
    payload = np.ascontiguousarray(f, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, f.shape[0], f.shape[1]))
        fh.write(payload)


def read_features(path):
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise BadMagicError(f"{path}: file too short for a feature header")
    magic, version, t, d = _HEADER.unpack_from(data)
    if magic != FEATURE_MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}")
    if version != FEATURE_VERSION:
        raise BadMagicError(f"{path}: unsupported version {version}")
    if t == 0 or d == 0 or t * d > MAX_FEATURE_ELEMENTS:
        raise FeatureDimensionError(f"{path}: implausible dimensions {t}x{d}")
    need = _HEADER.size + 4 * t * d
    if len(data) < need:
        raise TruncatedFeatureError(f"{path}: payload has {len(data) - _HEADER.size} bytes, need {4 * t * d}")
    if len(data) > need:
        raise FeatureFormatError(f"{path}: {len(data) - need} trailing bytes")
    return np.frombuffer(data, dtype="<f4", count=t * d, offset=_HEADER.size).reshape(t, d).astype(np.float32)


# -- manifests ---------------------------------------------------------------


def write_manifest(utts, path, vocab, feature_dir=None):
    """Write utterances (and their feature files) as a TSV manifest.

    Feature paths are stored relative to the manifest directory.
    """
    path = Path(path)
    root = path.parent
    feature_dir = Path(feature_dir) if feature_dir is not None else root / "feats"
    feature_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    for u in utts:
        fpath = feature_dir / f"{u.id}.cfct"
        write_features(u.features, fpath)
        rel = os.path.relpath(fpath, root)
        lines.append(f"{u.id}\t{rel}\t{u.category}\t{vocab.to_text(u.transcript)}\n")
    _atomic_write(path, "".join(lines))


def read_manifest(path, vocab):
    path = Path(path)
    utts = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise ManifestError(parts[0], f"line {lineno}: expected 4 tab-separated fields")
        uid, rel, category, text = parts
        if category not in CATEGORIES:
            raise ManifestError(uid, f"unknown category {category!r}")
        try:
            ids = vocab.encode(text)
        except VocabError as e:
            raise ManifestError(uid, str(e)) from None
        fpath = path.parent / rel
        if not fpath.exists():
            raise ManifestError(uid, f"missing feature file {fpath}")
        try:
            feats = read_features(fpath)
        except FeatureFormatError as e:
            raise ManifestError(uid, str(e)) from None
        utts.append(Utterance(uid, feats, ids, category))
    return utts


def _atomic_write(path, text):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


SPLITS = ("train_mono", "train_cs", "dev")


def write_corpus(corpus, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    corpus.vocab.save(out / "vocab.txt")
    for name in SPLITS:
        write_manifest(corpus.split(name), out / f"{name}.tsv", corpus.vocab, out / "feats")
    if corpus.config is not None:
        _atomic_write(out / "config.json", json.dumps(corpus.config.to_dict(), indent=2, sort_keys=True) + "\n")


def load_corpus(data_dir):
    root = Path(data_dir)
    vocab = Vocab.load(root / "vocab.txt")
    splits = {name: read_manifest(root / f"{name}.tsv", vocab) for name in SPLITS}
    cfg = None
    if (root / "config.json").exists():
        cfg = GenConfig.from_dict(json.loads((root / "config.json").read_text()))
    return Corpus(vocab, splits["train_mono"], splits["train_cs"], splits["dev"], cfg)
