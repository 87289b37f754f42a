"""MER scoring and the experiment tables (conditions A/B/C, ablations, CS-data sweep)."""
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .decode import DecodeConfig, frame_lid
from .lexicon import L1, L2
from .lm import NGramLM
from .model import ConditionalCTC, MonolingualCTC, VanillaCTC, load_model
from .synthdata import CS, MONO_L1, MONO_L2, _atomic_write
from .targets import SEGMENTATION, TRANSLITERATION, make_training_targets, read_targets, write_targets

log = logging.getLogger(__name__)

FULL = "FULL"
MONO = "MONO"
SPLITS = (FULL, CS, MONO, MONO_L1, MONO_L2)


# -- error rates -------------------------------------------------------------


def edit_ops(ref, hyp):
    """``(substitutions, deletions, insertions)`` of a minimum unit-cost alignment."""
    n, m = len(ref), len(hyp)
    d = np.zeros((n + 1, m + 1), dtype=np.int64)
    d[:, 0] = np.arange(n + 1)
    d[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            d[i, j] = min(d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]), d[i - 1, j] + 1, d[i, j - 1] + 1)
    i, j = n, m
    sub = dele = ins = 0
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i, j] == d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            sub += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif i > 0 and d[i, j] == d[i - 1, j] + 1:
            dele += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return int(sub), dele, ins


def mer(ref, hyp):
    """``(errors, reference length)``; every synthetic token is one scoring unit."""
    s, d, i = edit_ops(ref, hyp)
    return s + d + i, len(ref)


@dataclass
class ErrorCounts:
    sub: int = 0
    dele: int = 0
    ins: int = 0
    ref_len: int = 0
    utts: int = 0

    @property
    def errors(self):
        return self.sub + self.dele + self.ins

    @property
    def rate(self):
        """Percent error rate, pooled over the split."""
        return 100.0 * self.errors / self.ref_len if self.ref_len else 0.0

    def add(self, other):
        return ErrorCounts(*(a + b for a, b in zip(asdict(self).values(), asdict(other).values())))


@dataclass
class MerReport:
    counts: dict

    def rate(self, split=FULL):
        return self.counts[split].rate


def score_corpus(refs, hyps, categories):
    """Corpus-pooled MER per split; inputs are dicts keyed by utterance id."""
    if set(refs) != set(hyps) or set(refs) != set(categories):
        missing = sorted(set(refs) ^ set(hyps) | set(refs) ^ set(categories))
        raise ValueError(f"reference/hypothesis/category ids disagree, e.g. {missing[:3]}")
    per = {c: ErrorCounts() for c in (CS, MONO_L1, MONO_L2)}
    for uid in sorted(refs):
        s, d, i = edit_ops(refs[uid], hyps[uid])
        per[categories[uid]] = per[categories[uid]].add(ErrorCounts(s, d, i, len(refs[uid]), 1))
    counts = dict(per)
    counts[MONO] = per[MONO_L1].add(per[MONO_L2])
    counts[FULL] = counts[MONO].add(per[CS])
    return MerReport({k: counts[k] for k in SPLITS})


# -- experiment orchestration ------------------------------------------------

VANILLA = "vanilla"
COND_SEG = "cond-seg"
COND_TRA = "cond-tra"
MODEL_KINDS = (VANILLA, COND_SEG, COND_TRA)
ROW_NUMBER = {VANILLA: 1, COND_SEG: 2, COND_TRA: 3}

# condition -> (CS speech in ASR training, CS text in LM training)
CONDITIONS = {"A": (True, True), "B": (False, True), "C": (False, False)}


@dataclass(frozen=True)
class ExperimentSpec:
    condition: str
    model: str
    seeds: tuple = (0, 1, 2)
    decode: DecodeConfig = field(default_factory=DecodeConfig)

    def __post_init__(self):
        if self.condition not in CONDITIONS:
            raise ValueError(f"unknown condition {self.condition!r}")
        if self.model not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {self.model!r}")
        if not self.seeds:
            raise ValueError("need at least one seed")


@dataclass(frozen=True)
class TrainSettings:
    epochs: int = 40
    batch_size: int = 16
    lr: float = 1e-3
    lambda1: float = 0.7
    hidden: int = 128
    utt_context: bool = True
    lm_order: int = 3
    lm_k: float = 0.1


ABLATIONS = (
    ("full", "P_L1, P_L2, P_BI, LM", {}),
    ("-LM", "P_L1, P_L2, P_BI", {"use_lm": False}),
    ("-mono", "P_BI, LM", {"use_mono": False}),
    ("-mono -LM", "P_BI", {"use_mono": False, "use_lm": False}),
    ("-bi", "P_L1, P_L2, LM", {"use_bi": False}),
    ("-bi -LM", "P_L1, P_L2", {"use_bi": False, "use_lm": False}),
)

RESULT_COLUMNS = ("id", "condition", "model", "seed", "asr_data", "lm_data") + SPLITS + ("lid_L1", "lid_L2", "lid_ambig")


class Workbench:
    """Trains, caches and evaluates every model an experiment table needs.

    Models are keyed by ``(kind, seed, n_cs)`` where ``n_cs`` is the number of
    code-switched utterances added to the monolingual ASR training set. With
    ``work_dir`` set, checkpoints, targets and LMs are also kept on disk and
    reused.
    """

    def __init__(self, corpus, settings=None, work_dir=None):
        self.corpus = corpus
        self.vocab = corpus.vocab
        self.settings = settings or TrainSettings()
        self.work_dir = Path(work_dir) if work_dir is not None else None
        if self.work_dir is not None:
            self.work_dir.mkdir(parents=True, exist_ok=True)
        self._models = {}
        self._labelers = {}
        self._lms = {}
        self._hyps = {}
        self._lid = {}
        self.target_reports = {}

    # data routing

    def asr_train(self, n_cs=0):
        return list(self.corpus.train_mono) + list(self.corpus.train_cs[:n_cs])

    def n_cs_for(self, condition):
        return len(self.corpus.train_cs) if CONDITIONS[condition][0] else 0

    def lm_corpus(self, condition):
        """Utterances whose transcripts train the condition's LM (text only)."""
        with_cs = CONDITIONS[condition][1]
        return list(self.corpus.train_mono) + (list(self.corpus.train_cs) if with_cs else [])

    def lm(self, condition):
        with_cs = CONDITIONS[condition][1]
        if with_cs not in self._lms:
            utts = self.lm_corpus(condition)
            s = self.settings
            lm = NGramLM(self.vocab, order=s.lm_order, k=s.lm_k).fit([u.transcript for u in utts])
            if self.work_dir is not None:
                tag = "cs+mono" if with_cs else "mono"
                lm.save(self.work_dir / f"lm_{tag}.txt")
                _atomic_write(self.work_dir / f"lm_{tag}.ids", "".join(u.id + "\n" for u in utts))
            self._lms[with_cs] = lm
        return self._lms[with_cs]

    # models

    def _path(self, name):
        return None if self.work_dir is None else self.work_dir / name

    def _common(self, seed):
        s = self.settings
        return dict(
            vocab=self.vocab,
            hidden=s.hidden,
            utt_context=s.utt_context,
            epochs=s.epochs,
            batch_size=s.batch_size,
            lr=s.lr,
            seed=seed,
        )

    def _fit_or_load(self, name, build):
        path = self._path(name)
        if path is not None and path.exists():
            return load_model(path, self.vocab)
        model = build()
        if path is not None:
            model.save(path)
        return model

    def pseudolabelers(self, seed):
        if seed not in self._labelers:
            out = {}
            for lang, cat in ((L1, MONO_L1), (L2, MONO_L2)):
                utts = [u for u in self.corpus.train_mono if u.category == cat]

                def build(lang=lang, utts=utts):
                    m = MonolingualCTC(lang=lang, **self._common(seed))
                    return m.fit([u.features for u in utts], [u.transcript for u in utts])

                out[lang] = self._fit_or_load(f"mono_{lang}_s{seed}.cfck", build)
            self._labelers[seed] = out
        return self._labelers[seed]

    def targets(self, scheme, seed, n_cs):
        utts = self.asr_train(n_cs)
        if scheme == SEGMENTATION:
            table, report = make_training_targets(utts, self.vocab, SEGMENTATION)
            return table
        path = self._path(f"targets_tra_s{seed}_cs{n_cs}.tsv")
        if path is not None and path.exists():
            return read_targets(path, self.vocab)
        labelers = {lang: m.posteriorgram for lang, m in self.pseudolabelers(seed).items()}
        table, report = make_training_targets(utts, self.vocab, TRANSLITERATION, labelers)
        self.target_reports[(seed, n_cs)] = report
        if path is not None:
            write_targets(table, path, self.vocab)
        return table

    def model(self, kind, seed, n_cs=0):
        key = (kind, seed, n_cs)
        if key not in self._models:
            utts = self.asr_train(n_cs)
            X = [u.features for u in utts]
            y = [u.transcript for u in utts]

            def build():
                if kind == VANILLA:
                    return VanillaCTC(**self._common(seed)).fit(X, y)
                scheme = SEGMENTATION if kind == COND_SEG else TRANSLITERATION
                table = self.targets(scheme, seed, n_cs)
                m = ConditionalCTC(scheme=scheme, lambda1=self.settings.lambda1, **self._common(seed))
                return m.fit(X, y, targets=[table.get(u.id) for u in utts])

            log.info("training %s seed=%d n_cs=%d", kind, seed, n_cs)
            self._models[key] = self._fit_or_load(f"{kind}_s{seed}_cs{n_cs}.cfck", build)
        return self._models[key]

    # evaluation

    def hypotheses(self, kind, seed, n_cs, lm_condition, cfg):
        key = (kind, seed, n_cs, CONDITIONS[lm_condition][1], cfg)
        if key not in self._hyps:
            model = self.model(kind, seed, n_cs)
            if kind == VANILLA:
                cfg = replace(cfg, use_bi=True, use_mono=True)
            lm = self.lm(lm_condition) if cfg.use_lm else None
            dev = self.corpus.dev
            nbest = model.decode([u.features for u in dev], cfg, lm)
            self._hyps[key] = {u.id: hyps[0][0] for u, hyps in zip(dev, nbest)}
        return self._hyps[key]

    def report(self, kind, seed, n_cs, lm_condition, cfg):
        hyps = self.hypotheses(kind, seed, n_cs, lm_condition, cfg)
        dev = self.corpus.dev
        return score_corpus({u.id: u.transcript for u in dev}, hyps, {u.id: u.category for u in dev})

    def lid_profile(self, kind, seed, n_cs):
        """Share of frame-LID decisions (percent) over code-switched dev frames."""
        key = (kind, seed, n_cs)
        if key not in self._lid:
            model = self.model(kind, seed, n_cs)
            counts = {"L1": 0, "L2": 0, "BLANK": 0, "AMBIGUOUS": 0}
            for u in self.corpus.dev:
                if u.category != CS:
                    continue
                pg1, pg2, _ = model.posteriorgrams(u.features)
                for k, v in frame_lid(pg1, pg2).counts.items():
                    counts[k] += v
            total = max(sum(counts.values()), 1)
            self._lid[key] = {k: 100.0 * v / total for k, v in counts.items()}
        return self._lid[key]

    # tables

    def run_experiment(self, spec):
        """Per-seed rows plus a seed-mean row for one (condition, model) cell."""
        n_cs = self.n_cs_for(spec.condition)
        asr_cs, lm_cs = CONDITIONS[spec.condition]
        base = {
            "id": f"{spec.condition}{ROW_NUMBER[spec.model]}",
            "condition": spec.condition,
            "model": spec.model,
            "asr_data": "CS+M" if asr_cs else "M",
            "lm_data": "CS+M" if lm_cs else "M",
        }
        rows = []
        for seed in spec.seeds:
            rep = self.report(spec.model, seed, n_cs, spec.condition, spec.decode)
            row = dict(base, seed=str(seed), **{s: rep.rate(s) for s in SPLITS})
            if spec.model != VANILLA:
                lid = self.lid_profile(spec.model, seed, n_cs)
                row.update(lid_L1=lid["L1"], lid_L2=lid["L2"], lid_ambig=lid["AMBIGUOUS"])
            rows.append(row)
        rows.append(_mean_row(rows, base))
        return rows

    def run_ablation(self, seeds=(0, 1, 2), decode=None, condition="B"):
        """Decoding-source ablations of the transliteration model."""
        decode = decode or DecodeConfig()
        n_cs = self.n_cs_for(condition)
        rows = []
        for number, (name, sources, flags) in enumerate(ABLATIONS, 1):
            cfg = replace(decode, **flags)
            per_seed = [self.report(COND_TRA, s, n_cs, condition, cfg) for s in seeds]
            row = {"#": str(number), "ablation": name, "sources": sources}
            for split in (FULL, CS, MONO):
                row[split] = float(np.mean([r.rate(split) for r in per_seed]))
            rows.append(row)
        return rows

    def run_data_sweep(self, fractions=(0.0, 0.1, 0.25, 0.5, 1.0), seeds=(0, 1, 2), decode=None):
        """CS-split MER of both conditional variants as CS training data is added.

        Returns ``(rows, crossover)`` where ``crossover`` is the first
        fraction at which segmentation matches or beats transliteration.
        """
        decode = decode or DecodeConfig()
        total = len(self.corpus.train_cs)
        rows = []
        crossover = None
        for frac in fractions:
            if not 0.0 <= frac <= 1.0:
                raise ValueError(f"fraction {frac} outside [0, 1]")
            n_cs = int(round(frac * total))
            row = {"fraction": float(frac), "n_cs": str(n_cs)}
            for kind, col in ((COND_SEG, "seg"), (COND_TRA, "tra")):
                reps = [self.report(kind, s, n_cs, "A", decode) for s in seeds]
                row[f"{col}_CS"] = float(np.mean([r.rate(CS) for r in reps]))
                row[f"{col}_FULL"] = float(np.mean([r.rate(FULL) for r in reps]))
            if crossover is None and row["seg_CS"] <= row["tra_CS"]:
                crossover = float(frac)
            rows.append(row)
        return rows, crossover


def _mean_row(rows, base):
    out = dict(base, seed="mean")
    for col in SPLITS + ("lid_L1", "lid_L2", "lid_ambig"):
        vals = [r[col] for r in rows if col in r]
        if vals:
            out[col] = float(np.mean(vals))
    return out


ABLATION_COLUMNS = ("#", "ablation", "sources", FULL, CS, MONO)
SWEEP_COLUMNS = ("fraction", "n_cs", "seg_CS", "tra_CS", "seg_FULL", "tra_FULL")


def _fmt(v):
    if v is None:
        return "-"
    if isinstance(v, float):
        return f"{v:.2f}"
    return str(v)


def format_tsv(rows, columns):
    lines = ["\t".join(columns)]
    lines += ["\t".join(_fmt(r.get(c)) for c in columns) for r in rows]
    return "\n".join(lines) + "\n"


def format_table(rows, columns):
    """Fixed-width text rendering of the same cells as ``format_tsv``."""
    cells = [list(columns)] + [[_fmt(r.get(c)) for c in columns] for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(columns))]
    lines = []
    for k, row in enumerate(cells):
        lines.append("  ".join(cell.rjust(w) if k else cell.ljust(w) for cell, w in zip(row, widths)).rstrip())
        if k == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"
