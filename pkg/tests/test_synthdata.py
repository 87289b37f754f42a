import filecmp
import struct

import numpy as np
import pytest

from condctc.lexicon import L1, L2, language_spans
from condctc.synthdata import (
    CS,
    MONO_L1,
    MONO_L2,
    BadMagicError,
    FeatureDimensionError,
    GenConfig,
    ManifestError,
    TruncatedFeatureError,
    generate_corpus,
    load_corpus,
    read_features,
    read_manifest,
    write_corpus,
    write_features,
    write_manifest,
)


def test_defaults_describe_desk_scale_corpus():
    cfg = GenConfig()
    assert (cfg.n_tokens, cfg.dim, cfg.n_train_mono, cfg.n_train_cs, cfg.n_dev) == (8, 16, 400, 400, 150)


def test_categories_and_languages(tiny_corpus):
    v = tiny_corpus.vocab
    for u in tiny_corpus.train_mono + tiny_corpus.dev:
        langs = {lang for _, _, lang in language_spans(u.transcript, v)}
        assert langs == {MONO_L1: {L1}, MONO_L2: {L2}, CS: {L1, L2}}[u.category]
    assert {u.category for u in tiny_corpus.dev} == {MONO_L1, MONO_L2, CS}


def test_cs_segments_alternate_within_limits(tiny_corpus):
    cfg = tiny_corpus.config
    for u in tiny_corpus.train_cs:
        spans = language_spans(u.transcript, tiny_corpus.vocab)
        assert cfg.cs_segments[0] <= len(spans) <= cfg.cs_segments[1]
        for a, b in zip(spans, spans[1:]):
            assert a[2] != b[2]
        for s, e, _ in spans:
            assert cfg.cs_segment_tokens[0] <= e - s <= cfg.cs_segment_tokens[1]


def test_frame_counts_within_token_budget(tiny_corpus):
    lo, hi = tiny_corpus.config.frames_per_token
    for u in tiny_corpus.dev:
        assert lo * len(u.transcript) <= u.num_frames <= hi * len(u.transcript)


def test_pair_prototypes_sit_delta_apart():
    c = generate_corpus(GenConfig(n_train_mono=1, n_train_cs=0, n_dev=0, delta=0.7))
    v = c.vocab
    for i in v.l1_ids:
        assert np.linalg.norm(c.prototypes[v.paired(i)] - c.prototypes[i]) == pytest.approx(0.7)


def test_nearest_prototype_recovers_noiseless_tokens():
    # with zero noise every frame is exactly a prototype, so the nearest prototype
    # recovers the rendered transcript after merging repeated frames
    c = generate_corpus(GenConfig(noise_sigma=0.0, n_train_mono=5, n_train_cs=5, n_dev=0))
    real = np.array(list(c.vocab.real_ids))
    for u in c.train_mono + c.train_cs:
        d = ((u.features[:, None, :] - c.prototypes[real][None]) ** 2).sum(-1)
        frames = real[d.argmin(axis=1)]
        merged = [int(f) for k, f in enumerate(frames) if k == 0 or f != frames[k - 1]]
        ref = [t for k, t in enumerate(u.transcript) if k == 0 or t != u.transcript[k - 1]]
        assert merged == ref


def test_same_seed_same_corpus_different_seed_differs():
    a = generate_corpus(GenConfig(seed=5, n_train_mono=3, n_train_cs=3, n_dev=2))
    b = generate_corpus(GenConfig(seed=5, n_train_mono=3, n_train_cs=3, n_dev=2))
    c = generate_corpus(GenConfig(seed=6, n_train_mono=3, n_train_cs=3, n_dev=2))
    assert all(np.array_equal(x.features, y.features) for x, y in zip(a.dev, b.dev))
    assert not all(np.array_equal(x.features, y.features) for x, y in zip(a.dev, c.dev))


def test_written_corpus_is_byte_identical_and_reloads(tmp_path, tiny_corpus):
    write_corpus(tiny_corpus, tmp_path / "a")
    write_corpus(generate_corpus(tiny_corpus.config), tmp_path / "b")
    cmp = filecmp.dircmp(tmp_path / "a", tmp_path / "b")
    assert not cmp.diff_files and not cmp.left_only and not cmp.right_only
    assert not filecmp.dircmp(tmp_path / "a" / "feats", tmp_path / "b" / "feats").diff_files
    back = load_corpus(tmp_path / "a")
    assert back.config == tiny_corpus.config
    for u, w in zip(tiny_corpus.dev, back.dev):
        assert (u.id, u.transcript, u.category) == (w.id, w.transcript, w.category)
        np.testing.assert_array_equal(u.features, w.features)


@pytest.mark.parametrize(
    "bad",
    [dict(cs_segments=(1, 3)), dict(frames_per_token=(0, 2)), dict(lang_shared=1.5), dict(noise_sigma=-1.0), dict(bigram_alpha=0.0)],
)
def test_invalid_config_rejected(bad):
    with pytest.raises(ValueError):
        GenConfig(**bad).validate()


def test_from_dict_rejects_unknown_keys():
    with pytest.raises(ValueError, match="bogus"):
        GenConfig.from_dict({"bogus": 1})


def test_feature_roundtrip_and_corruption(tmp_path):
    x = np.arange(12, dtype=np.float32).reshape(3, 4)
    p = tmp_path / "f.cfct"
    write_features(x, p)
    np.testing.assert_array_equal(read_features(p), x)
    raw = p.read_bytes()
    (tmp_path / "magic").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(BadMagicError):
        read_features(tmp_path / "magic")
    (tmp_path / "trunc").write_bytes(raw[:-3])
    with pytest.raises(TruncatedFeatureError):
        read_features(tmp_path / "trunc")
    (tmp_path / "dims").write_bytes(raw[:4] + struct.pack("<III", 1, 0, 4) + raw[16:])
    with pytest.raises(FeatureDimensionError):
        read_features(tmp_path / "dims")
    with pytest.raises(FeatureDimensionError):
        write_features(np.zeros((0, 3)), tmp_path / "empty")


def test_manifest_errors_name_the_utterance(tmp_path, tiny_corpus):
    v = tiny_corpus.vocab
    m = tmp_path / "dev.tsv"
    write_manifest(tiny_corpus.dev[:2], m, v)
    lines = m.read_text().splitlines()
    uid = lines[0].split("\t")[0]
    m.write_text(lines[0].replace("\tMONO", "\tBOGUS") + "\n")
    with pytest.raises(ManifestError, match=uid):
        read_manifest(m, v)
    (tmp_path / "feats" / f"{uid}.cfct").unlink()
    m.write_text(lines[0] + "\n")
    with pytest.raises(ManifestError, match="missing feature file"):
        read_manifest(m, v)


def test_zero_noise_zero_offset_makes_pairs_identical():
    c = generate_corpus(GenConfig(noise_sigma=0.0, delta=0.0, n_train_mono=1, n_train_cs=0, n_dev=0))
    v = c.vocab
    for i in v.l1_ids:
        np.testing.assert_array_equal(c.prototypes[i], c.prototypes[v.paired(i)])


def test_one_by_one_and_empty_feature_files(tmp_path):
    write_features(np.array([[0.5]], dtype=np.float32), tmp_path / "one")
    np.testing.assert_array_equal(read_features(tmp_path / "one"), [[0.5]])
    (tmp_path / "empty").write_bytes(b"")
    with pytest.raises(BadMagicError):
        read_features(tmp_path / "empty")


def test_empty_manifest_roundtrip(tmp_path, tiny_corpus):
    write_manifest([], tmp_path / "m.tsv", tiny_corpus.vocab)
    assert read_manifest(tmp_path / "m.tsv", tiny_corpus.vocab) == []


def test_token_chains_never_repeat_and_are_predictable():
    c = generate_corpus(GenConfig(n_train_mono=200, n_train_cs=50, n_dev=0))
    utts = c.train_mono + c.train_cs
    assert not any(a == b for u in utts for a, b in zip(u.transcript, u.transcript[1:]))
    # a peaked chain concentrates successors: the most frequent follower of each
    # token is far above the 1/(n-1) share a uniform chain would give it
    n = c.config.n_tokens
    counts = np.zeros((len(c.vocab), len(c.vocab)))
    for u in c.train_mono:
        for a, b in zip(u.transcript, u.transcript[1:]):
            counts[a, b] += 1
    rows = counts[counts.sum(axis=1) > 0]
    top_share = (rows.max(axis=1) / rows.sum(axis=1)).mean()
    assert top_share > 2.0 / (n - 1)
