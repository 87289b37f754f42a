import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from condctc import harness
from condctc.decode import DecodeConfig
from condctc.harness import CS, FULL, MONO, MONO_L1, MONO_L2, ErrorCounts, edit_ops, mer, score_corpus
from oracles import edit_distance


def test_mer_trivial_cases():
    assert mer((1, 2, 3), (1, 2, 3)) == (0, 3)
    errors, n = mer((1, 2, 3, 4), (1, 9, 3, 4))
    assert 100 * errors / n == 25.0
    assert edit_ops((1, 2), ()) == (0, 2, 0)
    assert edit_ops((), (5,)) == (0, 0, 1)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(0, 3), max_size=7), st.lists(st.integers(0, 3), max_size=7))
def test_edit_ops_total_matches_recursive_oracle(a, b):
    s, d, i = edit_ops(a, b)
    assert s + d + i == edit_distance(tuple(a), tuple(b))
    # counts are consistent with the lengths
    assert len(a) - d + i == len(b)


@settings(max_examples=100, deadline=None)
@given(*(st.lists(st.integers(0, 2), max_size=5) for _ in range(3)))
def test_edit_distance_is_a_metric(a, b, c):
    d = lambda x, y: mer(x, y)[0]  # noqa: E731
    assert d(a, b) == d(b, a)
    assert d(a, c) <= d(a, b) + d(b, c)


def test_score_corpus_hand_example():
    refs = {"u1": (1, 2, 3, 4), "u2": (5, 6)}
    hyps = {"u1": (1, 2, 3, 4), "u2": (5, 7, 8)}
    cats = {"u1": MONO_L1, "u2": CS}
    rep = score_corpus(refs, hyps, cats)
    # u2: one substitution, one insertion; pooled over 6 reference tokens
    assert rep.rate(FULL) == pytest.approx(100 * 2 / 6)
    assert rep.rate(CS) == pytest.approx(100.0)
    assert rep.rate(MONO) == 0.0 and rep.rate(MONO_L2) == 0.0
    assert rep.counts[FULL].sub == 1 and rep.counts[FULL].ins == 1


def test_score_corpus_pools_rather_than_averages():
    refs = {"a": (1,), "b": (1, 2, 3, 4)}
    hyps = {"a": (), "b": (1, 2, 3, 4)}
    rep = score_corpus(refs, hyps, {"a": CS, "b": CS})
    assert rep.rate(CS) == pytest.approx(20.0)  # not the per-utterance mean of 50


def test_score_corpus_rejects_id_mismatch():
    with pytest.raises(ValueError, match="ids"):
        score_corpus({"a": (1,)}, {"b": (1,)}, {"a": CS})


@settings(max_examples=50, deadline=None)
@given(st.dictionaries(st.text("abc", min_size=1, max_size=3), st.tuples(st.lists(st.integers(1, 3), max_size=4), st.lists(st.integers(1, 3), max_size=4), st.sampled_from([CS, MONO_L1, MONO_L2])), min_size=1, max_size=6))
def test_full_counts_are_sum_of_splits(data):
    rep = score_corpus({k: tuple(v[0]) for k, v in data.items()}, {k: tuple(v[1]) for k, v in data.items()}, {k: v[2] for k, v in data.items()})
    total = ErrorCounts()
    for split in (CS, MONO_L1, MONO_L2):
        total = total.add(rep.counts[split])
    assert total == rep.counts[FULL]
    if total.ref_len:
        assert rep.rate(FULL) == pytest.approx(100 * total.errors / total.ref_len)


def test_experiment_spec_validates():
    with pytest.raises(ValueError):
        harness.ExperimentSpec("D", harness.VANILLA)
    with pytest.raises(ValueError):
        harness.ExperimentSpec("A", "bogus")


def test_format_tsv_and_table_share_cells():
    rows = [{"id": "B1", "FULL": 12.345}, {"id": "B2"}]
    tsv = harness.format_tsv(rows, ("id", "FULL"))
    assert tsv == "id\tFULL\nB1\t12.35\nB2\t-\n"
    table = harness.format_table(rows, ("id", "FULL")).splitlines()
    assert table[0].split() == ["id", "FULL"] and table[2].split() == ["B1", "12.35"]


@pytest.fixture(scope="module")
def bench(tiny_corpus, tmp_path_factory):
    settings_ = harness.TrainSettings(epochs=2, hidden=8, batch_size=4)
    return harness.Workbench(tiny_corpus, settings_, tmp_path_factory.mktemp("work"))


def test_lm_routing_per_condition(bench, tiny_corpus):
    cs_ids = {u.id for u in tiny_corpus.train_cs}
    assert not cs_ids & {u.id for u in bench.lm_corpus("C")}
    assert cs_ids <= {u.id for u in bench.lm_corpus("B")}
    bench.lm("C")
    manifest = (bench.work_dir / "lm_mono.ids").read_text().split()
    assert not cs_ids & set(manifest)


def test_asr_training_data_per_condition(bench, tiny_corpus):
    assert bench.n_cs_for("A") == len(tiny_corpus.train_cs)
    assert bench.n_cs_for("B") == bench.n_cs_for("C") == 0


def test_run_experiment_rows(bench):
    cfg = DecodeConfig(beam=3)
    rows = bench.run_experiment(harness.ExperimentSpec("B", harness.VANILLA, (0, 1), cfg))
    assert [r["seed"] for r in rows] == ["0", "1", "mean"]
    assert rows[0]["id"] == "B1"
    assert all("lid_L1" not in r for r in rows)
    assert rows[2][FULL] == pytest.approx((rows[0][FULL] + rows[1][FULL]) / 2)
    cond = bench.run_experiment(harness.ExperimentSpec("B", harness.COND_TRA, (0,), cfg))
    assert cond[0]["id"] == "B3" and "lid_L1" in cond[0]
    assert (bench.work_dir / "cond-tra_s0_cs0.cfck").exists()


def test_ablation_full_row_matches_experiment(bench):
    cfg = DecodeConfig(beam=3)
    rows = bench.run_ablation((0,), cfg)
    assert [r["ablation"] for r in rows] == [a[0] for a in harness.ABLATIONS]
    exp = bench.run_experiment(harness.ExperimentSpec("B", harness.COND_TRA, (0,), cfg))
    assert rows[0][FULL] == exp[-1][FULL]


def test_sweep_endpoints_match_conditions(bench):
    cfg = DecodeConfig(beam=3)
    rows, crossover = bench.run_data_sweep((0.0, 1.0), (0,), cfg)
    b = bench.run_experiment(harness.ExperimentSpec("B", harness.COND_SEG, (0,), cfg))[-1]
    a = bench.run_experiment(harness.ExperimentSpec("A", harness.COND_TRA, (0,), cfg))[-1]
    assert rows[0]["seg_CS"] == b[CS]
    assert rows[1]["tra_CS"] == a[CS]
    assert crossover is None or crossover in (0.0, 1.0)
    with pytest.raises(ValueError):
        bench.run_data_sweep((1.5,), (0,), cfg)


def test_workbench_reloads_from_disk(bench, tiny_corpus):
    again = harness.Workbench(tiny_corpus, bench.settings, bench.work_dir)
    a = bench.model(harness.COND_TRA, 0, 0)
    b = again.model(harness.COND_TRA, 0, 0)
    x = tiny_corpus.dev[0].features
    np.testing.assert_array_equal(a.posteriorgrams(x)[2], b.posteriorgrams(x)[2])
