import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nermqmrc import dataops
from nermqmrc.dataops import Heuristics, MqmrcRecord, SqmrcRecord


def test_to_mqmrc_groups_by_text():
    rows = [SqmrcRecord("T", "color", [(0, 0)]), SqmrcRecord("T", "material", [(1, 1)])]
    assert dataops.to_mqmrc(rows) == [MqmrcRecord("T", {"color": [(0, 0)], "material": [(1, 1)]})]


def test_to_mqmrc_merges_duplicates_and_keeps_first_occurrence_order():
    rows = [
        SqmrcRecord("b", "x", [(0, 0)]),
        SqmrcRecord("a", "x", []),
        SqmrcRecord("b", "x", [(0, 0), (2, 2)]),
    ]
    out = dataops.to_mqmrc(rows)
    assert [r.text for r in out] == ["b", "a"]
    assert out[0].entities == {"x": [(0, 0), (2, 2)]}


def test_to_mqmrc_without_grouping():
    rows = [SqmrcRecord("T", "color", [(0, 0)]), SqmrcRecord("T", "material", [])]
    out = dataops.to_mqmrc(rows, group_by="none")
    assert [r.entities for r in out] == [{"color": [(0, 0)]}, {"material": []}]
    with pytest.raises(ValueError):
        dataops.to_mqmrc(rows, group_by="sentence")


def test_to_sqmrc_expands_rows():
    rec = MqmrcRecord("a b c", {"x": [(0, 0)], "y": [], "z": [(2, 2)]})
    assert len(dataops.to_sqmrc([rec])) == 3


def test_reduction_pct():
    assert dataops.reduction_pct(981076, 290698) == 70.37
    assert dataops.reduction_pct(88460, 39888) == 54.91
    assert dataops.reduction_pct(11997, 3999) == 66.67
    assert dataops.reduction_pct(7, 7) == 0.0
    with pytest.raises(ValueError):
        dataops.reduction_pct(0, 0)
    # mean entities per text implied by the largest training set
    assert 981076 / 290698 == pytest.approx(3.375, abs=1e-3)


def test_entities_per_text_stats():
    recs = lambda ks: [MqmrcRecord("t", {f"e{i}": [] for i in range(k)}) for k in ks]  # noqa: E731
    assert dataops.entities_per_text_stats(recs([1, 2, 3])).median == 2
    stats = dataops.entities_per_text_stats(recs([2, 2, 4, 4]))
    assert stats.median == 2
    assert sum(stats.histogram.values()) == stats.count == 4


def test_elbow_gazetteer():
    assert dataops.elbow_cutoff([100, 95, 90, 5, 4, 3]) == 2
    assert dataops.elbow_cutoff([10, 1]) == 0
    assert dataops.elbow_cutoff([7]) == 0
    gaz = dataops.build_gazetteer({"color": {"red": 100, "blue": 95, "teal": 90, "puce": 5, "ecru": 4}})
    assert gaz["color"] == ["red", "blue", "teal"]


def test_distant_supervision_examples():
    assert dataops.distant_supervise("blue cotton shirt", "material", ["cotton"]) == [(1, 1)]
    h = Heuristics(lowercase=True, plural=True, possessive=True)
    assert dataops.distant_supervise("for men", "audience", ["Man"], h) == []
    with_table = Heuristics(lowercase=True, plural=True, possessive=True, irregular=True)
    assert dataops.distant_supervise("for men", "audience", ["Man"], with_table) == [(1, 1)]
    assert dataops.distant_supervise("red shirts", "item", ["shirt"], h) == [(1, 1)]
    assert dataops.distant_supervise("red shirts", "item", ["shirt"], Heuristics.none()) == []
    assert dataops.distant_supervise("men's boots", "audience", ["men"], h) == [(0, 0)]


def test_distant_supervision_prefers_longest_match():
    spans = dataops.distant_supervise("navy blue cap and blue scarf", "color", ["blue", "navy blue"])
    assert spans == [(0, 1), (4, 4)]


def test_tag_records_drops_untagged_texts():
    out = dataops.tag_records(["red cap", "nothing here"], {"color": ["red"], "item": ["cap"]})
    assert out == [MqmrcRecord("red cap", {"color": [(0, 0)], "item": [(1, 1)]})]


def test_jsonl_round_trip_and_format_detection(tmp_path):
    recs = dataops.generate_synthetic(dataops.SyntheticSpec(10, omit_rate=0.3, seed=1))
    dataops.write_mqmrc(tmp_path / "m.jsonl", recs)
    dataops.write_sqmrc(tmp_path / "s.jsonl", dataops.to_sqmrc(recs))
    assert dataops.read_mqmrc(tmp_path / "m.jsonl") == recs
    assert dataops.detect_format(tmp_path / "m.jsonl") == "mqmrc"
    assert dataops.detect_format(tmp_path / "s.jsonl") == "sqmrc"
    assert [s.gold for s in dataops.load_samples(tmp_path / "s.jsonl")] == [
        s.gold for s in dataops.load_samples(tmp_path / "m.jsonl")
    ]


def test_synthetic_generator():
    spec = dataops.SyntheticSpec(50, omit_rate=0.5, seed=9)
    a, b = dataops.generate_synthetic(spec), dataops.generate_synthetic(spec)
    assert [r.to_json() for r in a] == [r.to_json() for r in b]
    for rec in a:
        tokens = rec.text.split()
        assert rec.entities
        for name, spans in rec.entities.items():
            for s, e in spans:
                assert " ".join(tokens[s : e + 1]) in spec.pools[name]
    with pytest.raises(dataops.DataError):
        dataops.generate_synthetic(dataops.SyntheticSpec(1, templates=[["{size}"]]))


span_lists = st.lists(st.integers(0, 9), max_size=3, unique=True).map(lambda xs: sorted((x, x) for x in xs))
records = st.lists(
    st.builds(
        MqmrcRecord,
        st.text(alphabet="abcdefghij ", min_size=1, max_size=12),
        st.dictionaries(st.sampled_from(["color", "item", "size"]), span_lists, min_size=1),
    ),
    max_size=8,
    unique_by=lambda r: r.text,
)


@settings(max_examples=100, deadline=None)
@given(records)
def test_round_trip_on_canonical_corpora(recs):
    canon = dataops.canonical(recs)
    assert dataops.to_mqmrc(dataops.to_sqmrc(canon)) == canon
    counts = (len(dataops.to_sqmrc(canon)), len(canon))
    if counts[0]:
        assert dataops.reduction_pct(*counts) == round(100 * (1 - counts[1] / counts[0]), 2)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_no_answer_rate_binomial_bound(seed):
    from nermqmrc.packing import Sample
    from nermqmrc.training import add_no_answers

    universe = [f"e{i}" for i in range(101)]
    samples = [Sample(["w"], {"e0": [(0, 0)]}) for _ in range(100)]  # 100 absent slots each
    added = sum(s.k - 1 for s in add_no_answers(samples, 0.6, seed, universe))
    assert 5700 <= added <= 6300
    assert np.all([s.gold["e0"] == [(0, 0)] for s in samples])
