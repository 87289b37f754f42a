"""``condctc`` command line: data generation, training, decoding, scoring, tables.

Exit codes: 2 for configuration problems, 3 for bad or missing data, 4 for
numerical failures during training or alignment. Flag values override the
``--config`` key=value file, which overrides ``CONDCTC_<NAME>`` environment
variables, which override built-in defaults.
"""
import functools
import logging
import os
import shutil
import sys
from dataclasses import fields
from pathlib import Path

import click
from click.core import ParameterSource

from . import harness
from .ctc import AlignmentError
from .decode import DecodeConfig, MergeWeights
from .lexicon import L1, L2, VocabError
from .lm import LMFormatError, NGramLM
from .model import ConditionalCTC, ModelFormatError, MonolingualCTC, TrainingError, VanillaCTC, load_model
from .nnet import CheckpointError
from .synthdata import (
    MONO_L1,
    MONO_L2,
    SPLITS,
    FeatureFormatError,
    GenConfig,
    ManifestError,
    _atomic_write,
    category_of,
    generate_corpus,
    load_corpus,
    read_manifest,
    write_corpus,
)
from .targets import SEGMENTATION, TRANSLITERATION, make_training_targets, read_targets, write_targets
from .lexicon import Vocab

ENV_PREFIX = "CONDCTC_"
EXIT_CONFIG, EXIT_DATA, EXIT_COMPUTE = 2, 3, 4


class ConfigError(Exception):
    pass


class DataError(Exception):
    pass


_DATA_ERRORS = (
    DataError,
    ManifestError,
    FeatureFormatError,
    VocabError,
    ModelFormatError,
    LMFormatError,
    CheckpointError,
    FileNotFoundError,
)
_COMPUTE_ERRORS = (TrainingError, AlignmentError)


def read_kv_file(path):
    """Flat ``key=value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _cast(param, ctx, raw):
    if param.multiple:
        raw = [s for s in raw.split(",") if s]
    try:
        return param.type_cast_value(ctx, raw)
    except click.BadParameter as e:
        raise ConfigError(f"{param.name}: {e.message}") from None


def resolve_params(ctx, extra_keys=()):
    """Apply the config-file and environment overlays to defaulted parameters.

    Returns ``(params, extras)`` where ``extras`` holds config/env values for
    ``extra_keys`` that are not command flags (raw strings).
    """
    params = dict(ctx.params)
    path = params.get("config")
    from_file = read_kv_file(path) if path else {}
    by_name = {p.name: p for p in ctx.command.params if p.name != "config"}
    unknown = set(from_file) - set(by_name) - set(extra_keys)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    for name, param in by_name.items():
        if ctx.get_parameter_source(name) not in (ParameterSource.DEFAULT, None):
            continue
        env = os.environ.get(ENV_PREFIX + name.upper())
        if name in from_file:
            params[name] = _cast(param, ctx, from_file[name])
        elif env is not None:
            params[name] = _cast(param, ctx, env)
    extras = {}
    for key in extra_keys:
        env = os.environ.get(ENV_PREFIX + key.upper())
        if key in from_file:
            extras[key] = from_file[key]
        elif env is not None:
            extras[key] = env
    params.pop("config", None)
    return params, extras


def command(extra_keys=()):
    """Wrap a subcommand body with overlay resolution and exit-code mapping."""

    def deco(f):
        @functools.wraps(f)
        def wrapper(**_):
            ctx = click.get_current_context()
            try:
                params, extras = resolve_params(ctx, extra_keys)
                if extra_keys:
                    params["extras"] = extras
                return f(**params)
            except ConfigError as e:
                _fail(ctx, EXIT_CONFIG, e)
            except _COMPUTE_ERRORS as e:
                _fail(ctx, EXIT_COMPUTE, e)
            except _DATA_ERRORS as e:
                _fail(ctx, EXIT_DATA, e)
            except ValueError as e:
                _fail(ctx, EXIT_DATA, e)

        return click.option(
            "--config",
            type=click.Path(exists=True, dir_okay=False),
            default=None,
            help="key=value file overlaying defaults and environment.",
        )(wrapper)

    return deco


def _fail(ctx, code, err):
    click.echo(f"error: {err}", err=True)
    ctx.exit(code)


def _write(path, text):
    if path is None or str(path) == "-":
        click.echo(text, nl=False)
    else:
        _atomic_write(Path(path), text)


def _vocab(data):
    path = Path(data) / "vocab.txt"
    if not path.exists():
        raise DataError(f"{data}: no vocab.txt; run gen-data first")
    return Vocab.load(path)


def _split(data, split, vocab):
    path = Path(data) / f"{split}.tsv"
    if not path.exists():
        raise DataError(f"{path}: manifest not found")
    return read_manifest(path, vocab)


def _parse_ints(text):
    try:
        out = tuple(int(s) for s in text.split(",") if s.strip())
    except ValueError:
        raise ConfigError(f"expected comma-separated integers, got {text!r}") from None
    if not out:
        raise ConfigError("need at least one value")
    return out


def _parse_floats(text):
    try:
        out = tuple(float(s) for s in text.split(",") if s.strip())
    except ValueError:
        raise ConfigError(f"expected comma-separated numbers, got {text!r}") from None
    if not out:
        raise ConfigError("need at least one value")
    return out


def train_options(f):
    for opt in reversed(
        [
            click.option("--epochs", type=click.IntRange(min=0), default=40, show_default=True),
            click.option("--batch-size", type=click.IntRange(min=1), default=16, show_default=True),
            click.option("--lr", type=click.FloatRange(min=0, min_open=True), default=1e-3, show_default=True),
            click.option("--hidden", type=click.IntRange(min=1), default=128, show_default=True),
            click.option("--utt-context/--no-utt-context", default=True, show_default=True),
        ]
    ):
        f = opt(f)
    return f


def decode_options(f):
    for opt in reversed(
        [
            click.option("--beam", type=click.IntRange(min=1), default=10, show_default=True),
            click.option("--lambda2", type=click.FloatRange(0, 1), default=0.8, show_default=True),
            click.option(
                "--weights",
                default="0.5,0.25,0.25",
                show_default=True,
                help="Merge weights for bilingual, L1 and L2 posteriors.",
            ),
            click.option("--merge", type=click.Choice(["linear", "loglinear"]), default="linear", show_default=True),
        ]
    ):
        f = opt(f)
    return f


def _decode_config(beam, lambda2, weights, merge, **flags):
    w = _parse_floats(weights)
    if len(w) != 3:
        raise ConfigError("--weights needs three values")
    try:
        return DecodeConfig(beam=beam, lambda2=lambda2, weights=MergeWeights(*w), merge=merge, **flags)
    except ValueError as e:
        raise ConfigError(str(e)) from None


@click.group()
@click.option("-v", "--verbose", count=True, help="Repeat for more logging.")
def main(verbose):
    """Conditional CTC for zero-shot code-switched recognition on synthetic data."""
    level = logging.WARNING - 10 * min(verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


# -- data --------------------------------------------------------------------

_GEN_KEYS = tuple(f.name for f in fields(GenConfig) if f.name != "seed")
_CORPUS_FILES = ("vocab.txt", "config.json") + tuple(f"{s}.tsv" for s in SPLITS)


def _gen_value(name, raw):
    default = getattr(GenConfig(), name)
    try:
        if isinstance(default, tuple):
            return tuple(int(s) for s in raw.split(","))
        return type(default)(raw)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r}") from None


@main.command("gen-data")
@click.option("--out", type=click.Path(file_okay=False), required=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--force", is_flag=True, help="Overwrite an existing corpus directory.")
@command(extra_keys=_GEN_KEYS)
def gen_data(out, seed, force, extras):
    """Write the synthetic corpus (vocab, features, manifests, config)."""
    out = Path(out)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise ConfigError(f"{out} is not empty; pass --force to overwrite")
        for name in _CORPUS_FILES:
            (out / name).unlink(missing_ok=True)
        shutil.rmtree(out / "feats", ignore_errors=True)
    try:
        cfg = GenConfig(seed=seed, **{k: _gen_value(k, v) for k, v in extras.items()}).validate()
    except ValueError as e:
        raise ConfigError(str(e)) from None
    corpus = generate_corpus(cfg)
    write_corpus(corpus, out)
    n = {s: len(corpus.split(s)) for s in SPLITS}
    click.echo(f"wrote {out}: " + ", ".join(f"{k}={v}" for k, v in n.items()), err=True)


# -- training ----------------------------------------------------------------


def _load_labelers(paths, vocab):
    if not paths:
        raise ConfigError("--scheme tra needs --pseudolabel-from with the L1 and L2 monolingual checkpoints")
    out = {}
    for p in paths:
        m = load_model(p, vocab)
        if not isinstance(m, MonolingualCTC):
            raise ConfigError(f"{p} is not a monolingual checkpoint")
        out[m.lang] = m
    missing = {L1, L2} - set(out)
    if missing:
        raise ConfigError(f"--pseudolabel-from lacks a checkpoint for {', '.join(sorted(missing))}")
    return out


def _asr_utts(data, vocab, cs_fraction):
    utts = _split(data, "train_mono", vocab)
    if cs_fraction > 0:
        cs = _split(data, "train_cs", vocab)
        utts += cs[: int(round(cs_fraction * len(cs)))]
    return utts


@main.command()
@click.option("--model", "kind", type=click.Choice(["vanilla", "cond", "mono"]), required=True)
@click.option("--scheme", type=click.Choice([SEGMENTATION, TRANSLITERATION]), default=SEGMENTATION, show_default=True)
@click.option("--lang", type=click.Choice([L1, L2]), default=None, help="Language of a mono model.")
@click.option("--lambda1", type=click.FloatRange(0, 1), default=0.7, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--data", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--out", type=click.Path(dir_okay=False), required=True)
@click.option("--cs-fraction", type=click.FloatRange(0, 1), default=0.0, show_default=True)
@click.option(
    "--pseudolabel-from", multiple=True, type=click.Path(exists=True, dir_okay=False), help="Mono checkpoint (repeat)."
)
@click.option("--targets", "targets_path", type=click.Path(exists=True, dir_okay=False), default=None)
@train_options
@command()
def train(kind, scheme, lang, lambda1, seed, data, out, cs_fraction, pseudolabel_from, targets_path, **opts):
    """Train a model and write its checkpoint plus a loss-curve TSV."""
    vocab = _vocab(data)
    common = dict(vocab=vocab, seed=seed, **opts)
    if kind == "mono":
        if lang is None:
            raise ConfigError("--model mono needs --lang")
        cat = MONO_L1 if lang == L1 else MONO_L2
        utts = [u for u in _split(data, "train_mono", vocab) if u.category == cat]
        model = MonolingualCTC(lang=lang, **common).fit([u.features for u in utts], [u.transcript for u in utts])
    else:
        utts = _asr_utts(data, vocab, cs_fraction)
        X, y = [u.features for u in utts], [u.transcript for u in utts]
        if kind == "vanilla":
            model = VanillaCTC(**common).fit(X, y)
        else:
            if targets_path is not None:
                table = read_targets(targets_path, vocab)
            elif scheme == TRANSLITERATION:
                labelers = _load_labelers(pseudolabel_from, vocab)
                table, _ = make_training_targets(
                    utts, vocab, scheme, {k: m.posteriorgram for k, m in labelers.items()}
                )
            else:
                table, _ = make_training_targets(utts, vocab, scheme)
            model = ConditionalCTC(scheme=scheme, lambda1=lambda1, **common)
            model.fit(X, y, targets=[table.get(u.id) for u in utts])
    model.save(out)
    curve = "".join(f"{i}\t{v!r}\n" for i, v in enumerate(model.loss_curve_, 1))
    _atomic_write(Path(str(out) + ".loss.tsv"), "epoch\tloss\n" + curve)


@main.command()
@click.option("--data", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--split", type=click.Choice(list(SPLITS)), default="train_mono", show_default=True)
@click.option("--cs-fraction", type=click.FloatRange(0, 1), default=0.0, show_default=True)
@click.option("--pseudolabel-from", multiple=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", default="-", show_default=True)
@command()
def pseudolabel(data, split, cs_fraction, pseudolabel_from, out):
    """Write transliteration targets (id, scheme, L1 view, L2 view) for a split.

    With ``--split train_mono`` and ``--cs-fraction`` the table covers the
    same utterances ``train`` would use.
    """
    vocab = _vocab(data)
    labelers = _load_labelers(pseudolabel_from, vocab)
    utts = _asr_utts(data, vocab, cs_fraction) if split == "train_mono" else _split(data, split, vocab)
    table, report = make_training_targets(
        utts, vocab, TRANSLITERATION, {k: m.posteriorgram for k, m in labelers.items()}
    )
    click.echo(report.summary(), err=True)
    if out == "-":
        for uid, p in table.items():
            click.echo(f"{uid}\t{p.scheme}\t{vocab.to_text(p.y_l1)}\t{vocab.to_text(p.y_l2)}")
    else:
        write_targets(table, out, vocab)


@main.command("train-lm")
@click.option("--data", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--text", type=click.Choice(["cs+mono", "mono"]), default="cs+mono", show_default=True)
@click.option("--order", type=click.IntRange(min=1), default=3, show_default=True)
@click.option("--k", type=click.FloatRange(min=0, min_open=True), default=0.1, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), required=True)
@command()
def train_lm(data, text, order, k, out):
    """Train the token n-gram LM on training transcripts."""
    vocab = _vocab(data)
    utts = _split(data, "train_mono", vocab)
    if text == "cs+mono":
        utts += _split(data, "train_cs", vocab)
    NGramLM(vocab, order=order, k=k).fit([u.transcript for u in utts]).save(out)


# -- decoding and scoring ----------------------------------------------------


@main.command()
@click.option("--model", "model_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--data", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--split", type=click.Choice(list(SPLITS)), default="dev", show_default=True)
@click.option("--lm", "lm_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--use-lm/--no-lm", default=True, show_default=True)
@click.option("--use-bi/--no-bi", default=True, show_default=True)
@click.option("--use-mono/--no-mono", default=True, show_default=True)
@click.option("--nbest", type=click.IntRange(min=1), default=1, show_default=True)
@click.option("--out", default="-", show_default=True)
@decode_options
@command()
def decode(model_path, data, split, lm_path, use_lm, use_bi, use_mono, nbest, out, **dec):
    """Beam-search decode a split: ``id<TAB>score<TAB>hyp`` (or ranked n-best)."""
    vocab = _vocab(data)
    cfg = _decode_config(use_lm=use_lm, use_bi=use_bi, use_mono=use_mono, nbest=nbest, **dec)
    if use_lm and lm_path is None:
        raise ConfigError("--lm is required unless --no-lm is given")
    lm = NGramLM.load(lm_path, vocab) if use_lm else None
    model = load_model(model_path, vocab)
    if isinstance(model, MonolingualCTC):
        raise ConfigError("monolingual checkpoints are not decodable; use pseudolabel")
    utts = _split(data, split, vocab)
    lines = []
    for u, hyps in zip(utts, model.decode([u.features for u in utts], cfg, lm)):
        for rank, (prefix, score) in enumerate(hyps, 1):
            head = f"{u.id}\t{rank}" if nbest > 1 else u.id
            lines.append(f"{head}\t{score!r}\t{vocab.to_text(prefix)}\n")
    _write(out, "".join(lines))


def read_hypotheses(path, vocab):
    """``id -> tokens`` from decode output (1-best lines, or rank 1 of n-best)."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) == 4 and parts[1].isdigit():
            if parts[1] != "1":
                continue
            parts = [parts[0]] + parts[2:]
        if len(parts) != 3:
            raise DataError(f"{path}:{lineno}: expected id, score and hypothesis")
        out[parts[0]] = vocab.encode(parts[2])
    return out


@main.command()
@click.option("--hyp", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--ref", type=click.Path(exists=True, dir_okay=False), default=None, help="Decode-format reference.")
@click.option("--data", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--split", type=click.Choice(list(SPLITS)), default="dev", show_default=True)
@click.option("--out", default="-", show_default=True)
@command()
def score(hyp, ref, data, split, out):
    """Pooled MER per split; references come from --ref or the split manifest."""
    vocab = _vocab(data)
    if ref is not None:
        refs = read_hypotheses(ref, vocab)
        cats = {uid: category_of(ids, vocab) for uid, ids in refs.items()}
    else:
        utts = _split(data, split, vocab)
        refs = {u.id: u.transcript for u in utts}
        cats = {u.id: u.category for u in utts}
    report = harness.score_corpus(refs, read_hypotheses(hyp, vocab), cats)
    lines = ["split\tMER\tsub\tdel\tins\tref_len\tutts\n"]
    for s in harness.SPLITS:
        c = report.counts[s]
        lines.append(f"{s}\t{c.rate:.2f}\t{c.sub}\t{c.dele}\t{c.ins}\t{c.ref_len}\t{c.utts}\n")
    _write(out, "".join(lines))


# -- experiment tables -------------------------------------------------------


def table_options(f):
    for opt in reversed(
        [
            click.option("--data", type=click.Path(exists=True, file_okay=False), required=True),
            click.option("--seeds", default="0,1,2", show_default=True),
            click.option("--lambda1", type=click.FloatRange(0, 1), default=0.7, show_default=True),
            click.option("--work-dir", type=click.Path(file_okay=False), default=None, help="Reuse/keep models."),
            click.option("--out", default=None, help="TSV destination; the text table goes to stdout."),
        ]
    ):
        f = opt(f)
    return f


def _workbench(data, work_dir, lambda1, opts):
    corpus = load_corpus(data)
    return harness.Workbench(corpus, harness.TrainSettings(lambda1=lambda1, **opts), work_dir)


def _emit(rows, columns, out, footer=""):
    if out is not None:
        _atomic_write(Path(out), harness.format_tsv(rows, columns))
    click.echo(harness.format_table(rows, columns) + footer, nl=False)


@main.command()
@click.option("--condition", type=click.Choice(sorted(harness.CONDITIONS)), required=True)
@click.option("--model", "kinds", type=click.Choice(list(harness.MODEL_KINDS)), multiple=True, required=True)
@table_options
@train_options
@decode_options
@command()
def experiment(condition, kinds, data, seeds, lambda1, work_dir, out, beam, lambda2, weights, merge, **opts):
    """Condition A/B/C rows: per-seed MER plus the seed mean."""
    wb = _workbench(data, work_dir, lambda1, opts)
    cfg = _decode_config(beam, lambda2, weights, merge)
    rows = []
    for kind in kinds:
        rows += wb.run_experiment(harness.ExperimentSpec(condition, kind, _parse_ints(seeds), cfg))
    _emit(rows, harness.RESULT_COLUMNS, out)


@main.command()
@table_options
@train_options
@decode_options
@command()
def ablate(data, seeds, lambda1, work_dir, out, beam, lambda2, weights, merge, **opts):
    """Decoding-source ablations of the transliteration model (condition B)."""
    wb = _workbench(data, work_dir, lambda1, opts)
    rows = wb.run_ablation(_parse_ints(seeds), _decode_config(beam, lambda2, weights, merge))
    _emit(rows, harness.ABLATION_COLUMNS, out)


@main.command()
@click.option("--fractions", default="0,0.25,1", show_default=True)
@table_options
@train_options
@decode_options
@command()
def sweep(fractions, data, seeds, lambda1, work_dir, out, beam, lambda2, weights, merge, **opts):
    """CS-split MER of both conditional schemes versus added CS training data."""
    wb = _workbench(data, work_dir, lambda1, opts)
    cfg = _decode_config(beam, lambda2, weights, merge)
    try:
        rows, crossover = wb.run_data_sweep(_parse_floats(fractions), _parse_ints(seeds), cfg)
    except ValueError as e:
        raise ConfigError(str(e)) from None
    footer = f"crossover: {'none' if crossover is None else f'{crossover:g}'}\n"
    _emit(rows, harness.SWEEP_COLUMNS, out, footer)


if __name__ == "__main__":
    main()
