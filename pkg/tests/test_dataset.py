import io
import itertools
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from fecembed import dataset as ds
from conftest import make_record

E = ds.EmotionLabel


def test_emotion_vocabulary():
    assert len(E) == 30
    assert E.parse("amusement") is E.AMUSEMENT
    assert E.parse("  Surprise ") is E.SURPRISE
    with pytest.raises(ds.DataError):
        E.parse("smugness")


@pytest.mark.parametrize("votes, label, agreement", [
    ([1, 1, 1, 1, 2, 3], 1, ds.Agreement.STRONG),
    ([2, 2, 2, 2, 2, 2], 2, ds.Agreement.STRONG),
    ([3, 3, 3, 1, 1, 2], 3, ds.Agreement.WEAK),
    ([1, 1, 1, 2, 2, 2], None, ds.Agreement.NONE),
    ([1, 1, 2, 2, 3, 3], None, ds.Agreement.NONE),
    ([1, 1, 2, 3, 3, 2], None, ds.Agreement.NONE),
])
def test_aggregate_votes_six_raters(votes, label, agreement):
    assert ds.aggregate_votes(votes) == ds.ConsensusResult(label, agreement)


def test_aggregate_votes_odd_rater_count():
    # R=5: strong needs ceil(10/3)=4, weak needs ceil(5/2)=3
    assert ds.aggregate_votes([1, 1, 1, 1, 2]).agreement is ds.Agreement.STRONG
    assert ds.aggregate_votes([1, 1, 1, 2, 2]).agreement is ds.Agreement.WEAK
    assert ds.aggregate_votes([1, 1, 2, 2, 3]).agreement is ds.Agreement.NONE


def test_aggregate_votes_rejects_bad_input():
    with pytest.raises(ds.DataError):
        ds.aggregate_votes([])
    with pytest.raises(ds.DataError):
        ds.aggregate_votes([1, 4])


@given(st.lists(st.integers(1, 3), min_size=1, max_size=12))
def test_aggregate_votes_permutation_invariant(votes):
    base = ds.aggregate_votes(votes)
    assert ds.aggregate_votes(sorted(votes)) == base
    assert ds.aggregate_votes(votes[::-1]) == base
    if base.label is not None:
        m = votes.count(base.label)
        assert all(votes.count(c) < m for c in (1, 2, 3) if c != base.label)
        assert m >= math.ceil(len(votes) / 2)


@pytest.mark.parametrize("labels, expected", [
    (([0], [0], [0]), ds.TripletType.ONE_CLASS),
    (([0], [0], [1]), ds.TripletType.TWO_CLASS),
    (([0], [1], [2]), ds.TripletType.THREE_CLASS),
    (([0, 1], [1, 2], [2, 0]), ds.TripletType.OTHER),
    (([0, 1], [1], [1, 5]), ds.TripletType.ONE_CLASS),
])
def test_classify_triplet_type(labels, expected):
    assert ds.classify_triplet_type(*labels) is expected


def test_triplet_type_parse_aliases():
    assert ds.TripletType.parse("ONE_CLASS_TRIPLET") is ds.TripletType.ONE_CLASS
    assert ds.TripletType.parse("two-class") is ds.TripletType.TWO_CLASS
    with pytest.raises(ds.DataError):
        ds.TripletType.parse("four_class")


def test_face_record_validates_bbox():
    with pytest.raises(ds.DataError):
        ds.FaceRecord("x", "u", (0.5, 0.2, 0.0, 1.0))
    with pytest.raises(ds.DataError):
        ds.FaceRecord("x", "u", (0.0, 1.2, 0.0, 1.0))


def test_face_id_is_stable_and_bbox_sensitive():
    a = ds.face_id("http://x/1.jpg", (0.1, 0.5, 0.2, 0.6))
    assert a == ds.face_id("http://x/1.jpg", (0.1, 0.5, 0.2, 0.6))
    assert a != ds.face_id("http://x/1.jpg", (0.1, 0.5, 0.2, 0.7))
    assert len(a) == 16


def test_triplet_needs_distinct_faces():
    with pytest.raises(ds.DataError):
        make_record([[0], [0], [0]], [1] * 6, uris=("a", "a", "b"))


def _fec_row(uris, ttype, votes):
    cells = []
    for u in uris:
        cells += [u, "0.1", "0.9", "0.2", "0.8"]
    cells.append(ttype)
    for i, v in enumerate(votes):
        cells += [f"rater{i}", str(v)]
    return ",".join(cells)


def test_parse_fec_layout_and_roundtrip():
    text = "\n".join([
        _fec_row(["u1", "u2", "u3"], "ONE_CLASS_TRIPLET", [1, 1, 1, 1, 2, 3]),
        _fec_row(["u4", "u5", "u6"], "THREE_CLASS_TRIPLET", [2, 3, 2, 3, 1, 1]),
    ]) + "\n"
    recs = ds.parse_triplets(io.StringIO(text), ds.fec_schema())
    assert len(recs) == 2
    assert recs[0].declared_type is ds.TripletType.ONE_CLASS
    assert recs[0].faces[0].bbox == (0.1, 0.9, 0.2, 0.8)
    assert [v.choice for v in recs[1].votes] == [2, 3, 2, 3, 1, 1]
    buf = io.StringIO()
    ds.write_triplets(recs, buf)
    again = ds.parse_triplets(io.StringIO(buf.getvalue()))
    assert again == recs
    assert "\r" not in buf.getvalue()


def test_parse_error_names_row_and_field():
    bad = _fec_row(["u1", "u2", "u3"], "ONE_CLASS_TRIPLET", [1] * 6).replace("0.9", "wide", 1)
    good = _fec_row(["u1", "u2", "u3"], "ONE_CLASS_TRIPLET", [1] * 6)
    with pytest.raises(ds.ParseError, match=r"row 2 \(field 'face1_right'\)"):
        ds.parse_triplets(io.StringIO(good + "\n" + bad + "\n"), ds.fec_schema())


def test_vote_out_of_range_is_parse_error():
    row = _fec_row(["u1", "u2", "u3"], "", [1, 1, 4])
    with pytest.raises(ds.ParseError, match="field 'vote'"):
        ds.parse_triplets(io.StringIO(row), ds.fec_schema(3))


def test_header_schema_missing_column():
    with pytest.raises(ds.DataError, match="not found in header"):
        ds.parse_triplets(io.StringIO("face1_uri,x\n"))


def test_features_roundtrip(tmp_path):
    store = {"a": np.array([0.5, -1.25, 3.0]), "b": np.array([1.0, 2.0, 4.0])}
    for binary in (False, True):
        path = tmp_path / f"f{binary}"
        ds.write_features(store, path, binary=binary)
        back = ds.read_features(path)
        assert list(back) == ["a", "b"]
        for k in store:
            np.testing.assert_array_equal(back[k], store[k])


def test_features_dimension_mismatch(tmp_path):
    path = tmp_path / "f.txt"
    path.write_text("a,1,2\nb,1,2,3\n")
    with pytest.raises(ds.DataError, match="dimension mismatch"):
        ds.read_features(path)


def test_attach_features_reports_missing_face(small_world):
    _, faces, data = small_world
    store = data.feature_store()
    victim = data.triplets[0][0].faces[1].id
    del store[victim]
    with pytest.raises(ds.DataError, match=f"missing feature for {victim}"):
        ds.attach_features(data.triplets, store)


def test_triplet_arrays_ordered_puts_odd_last(small_world):
    _, _, data = small_world
    arr = ds.attach_features(data.triplets, data.feature_store())
    o = arr.ordered()
    for row, (idx, odd) in zip(o, zip(arr.index, arr.odd)):
        assert row[2] == idx[odd]
        assert sorted(row) == sorted(idx)


def test_filter_policies():
    recs = [make_record([[0], [0], [0]], v) for v in
            ([1] * 6, [1, 1, 1, 2, 2, 3], [1, 1, 2, 2, 3, 3])]
    items = ds.consensus_all(recs)
    assert len(ds.filter_by_agreement(items, ds.AgreementPolicy.STRONG_ONLY)) == 1
    assert len(ds.filter_by_agreement(items, ds.AgreementPolicy.STRONG_PLUS_WEAK)) == 2
    assert len(ds.filter_by_agreement(items, ds.AgreementPolicy.ALL)) == 3
    assert len(ds.filter_by_agreement(items, ds.AgreementPolicy.ALL, require_label=True)) == 2


def test_dataset_stats_counts():
    recs = [
        make_record([[0], [0], [0]], [1] * 6, ("a", "b", "c")),
        make_record([[0], [0], [1]], [1, 1, 1, 2, 2, 3], ("a", "b", "d")),
        make_record([[0], [1], [2]], [1, 1, 2, 2, 3, 3], ("e", "f", "g")),
    ]
    stats = ds.dataset_stats(ds.consensus_all(recs))
    c = stats["counts"]
    assert stats["faces"] == 7
    assert c[("strong", "one_class")] == 1 and c[("strong", "all")] == 1
    assert c[("strong+weak", "two_class")] == 1 and c[("strong+weak", "all")] == 2
    assert c[("all", "three_class")] == 1 and c[("all", "all")] == 3
    table = ds.format_stats_table(stats)
    assert table.splitlines()[1] == "Strong,1,0,0,1,7"


def test_exhaustive_consensus_small_count():
    # every 3-vote vector: strong needs 2 and uniqueness, weak is impossible (ceil(3/2)=2)
    for votes in itertools.product((1, 2, 3), repeat=3):
        res = ds.aggregate_votes(votes)
        top = max(votes.count(c) for c in (1, 2, 3))
        assert (res.agreement is ds.Agreement.STRONG) == (top >= 2)
