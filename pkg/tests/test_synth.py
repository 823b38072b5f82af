import numpy as np
import pytest

from fecembed import dataset as ds, metrics, synth


def test_oracle_is_seed_deterministic(tmp_path):
    a, b = synth.make_oracle(3), synth.make_oracle(3)
    np.testing.assert_array_equal(a.w1, b.w1)
    assert not np.array_equal(a.w1, synth.make_oracle(4).w1)
    assert a.w1.shape == (64, 32) and a.w2.shape == (32, 8)
    a.save(tmp_path / "o.npz")
    c = synth.PlantedOracle.load(tmp_path / "o.npz")
    x = np.random.default_rng(0).standard_normal((3, 64))
    np.testing.assert_array_equal(c(x), a(x))


def test_oracle_rejects_bad_dims():
    with pytest.raises(ds.DataError):
        synth.make_oracle(0, in_dim=4, emb_dim=1)
    with pytest.raises(ds.DataError):
        synth.make_oracle(0, in_dim=4, emb_dim=8)


def test_generate_faces_labels_and_ids():
    o = synth.make_oracle(0, in_dim=8, emb_dim=2)
    faces = synth.generate_faces(o, 20, 4, seed=1)
    assert [min(f.labels).value for f in faces[:5]] == [0, 1, 2, 3, 0]
    assert len({f.id for f in faces}) == 20
    other = synth.generate_faces(o, 20, 4, seed=2)
    assert not {f.id for f in faces} & {f.id for f in other}


def test_label_triplet_by_oracle_rejects_near_ties():
    o = synth.make_oracle(0, in_dim=4, emb_dim=2)
    x = np.zeros(4)
    assert synth.label_triplet_by_oracle(o, x, x, x, 0.01) is None
    far = np.full(4, 3.0)
    res = synth.label_triplet_by_oracle(o, x, x + 1e-3, far, 0.0)
    assert res == ds.ConsensusResult(3, ds.Agreement.STRONG)


def test_triplet_set_types_and_consensus(small_world):
    oracle, faces, data = small_world
    types = [t for _, _, t in data.triplets]
    assert [types.count(t) for t in ds.TYPED] == [40, 40, 40]
    for rec, cons, t in data.triplets:
        assert ds.classify_triplet_type(*(f.labels for f in rec.faces)) is t
        assert ds.aggregate_votes(rec.votes) == cons
    arr = ds.attach_features(data.triplets, data.feature_store())
    assert metrics.triplet_prediction_accuracy(oracle(arr.features), arr)[0] == 1.0


def test_odd_slot_is_not_positionally_biased(small_world):
    _, _, data = small_world
    labels = [c.label for _, c, _ in data.triplets]
    assert {1, 2, 3} <= set(labels)


def test_triplet_set_is_reproducible():
    o = synth.make_oracle(1, in_dim=8, emb_dim=2)
    faces = synth.generate_faces(o, 30, 3, seed=0)
    a = synth.generate_triplet_set(o, faces, [5, 5, 5], seed=9)
    b = synth.generate_triplet_set(o, faces, [5, 5, 5], seed=9)
    assert a.records == b.records and a.tau == b.tau


def test_impossible_type_raises():
    o = synth.make_oracle(1, in_dim=8, emb_dim=2)
    faces = synth.generate_faces(o, 10, 2, seed=0)
    with pytest.raises(ds.DataError):
        synth.generate_triplet_set(o, faces, [0, 0, 5])


def test_default_tau_scale():
    o = synth.make_oracle(1, in_dim=8, emb_dim=2)
    faces = synth.generate_faces(o, 200, 5, seed=0)
    g = o(np.array([f.feature for f in faces]))
    d = ((g[:, None] - g[None]) ** 2).sum(-1)[np.triu_indices(200, 1)]
    assert synth.default_tau(o, faces) == pytest.approx(0.1 * np.median(d), rel=0.05)


@pytest.mark.parametrize("n, c, sizes", [(30, 30, {1}), (100, 8, {12, 13})])
def test_faces_are_class_balanced(n, c, sizes):
    o = synth.make_oracle(0, in_dim=8, emb_dim=2)
    counts = np.bincount([min(f.labels).value for f in synth.generate_faces(o, n, c, seed=0)])
    assert set(counts) == sizes and all(f.feature.shape == (8,) for f in synth.generate_faces(o, n, c, 0))


def test_oracle_label_matches_bruteforce_argmin():
    o = synth.make_oracle(2, in_dim=6, emb_dim=3)
    rng = np.random.default_rng(0)
    for _ in range(200):
        f = rng.standard_normal((3, 6))
        g = o(f)
        d = {3: np.sum((g[0] - g[1]) ** 2), 2: np.sum((g[0] - g[2]) ** 2), 1: np.sum((g[1] - g[2]) ** 2)}
        assert synth.label_triplet_by_oracle(o, *f, tau=0.0).label == min(d, key=d.get)


def test_equilateral_oracle_triplet_rejected():
    # a linear oracle (tanh ~ identity near 0) keeps an equilateral input triangle almost equilateral
    o = synth.PlantedOracle(0, 2, 2, np.eye(2) * 1e-3, np.zeros(2), np.eye(2))
    pts = np.array([[0.0, 0.0], [1.0, 0.0], [0.5, np.sqrt(3) / 2]])
    assert synth.label_triplet_by_oracle(o, *pts, tau=1e-6) is None
