"""Planted-oracle synthetic data.

A frozen random two-layer tanh network ``g`` plays the part of the human
raters: the odd face of a triplet is the one outside the closest pair in
``g``-space. Faces are drawn around per-class anchors so the usual triplet
taxonomy (one/two/three-class) can be realised exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import (Agreement, ConsensusResult, DataError, EmotionLabel, FaceRecord, RaterVote,
                      TripletRecord, TripletType, TYPED, face_id)

N_SYNTH_RATERS = 6
DEFAULT_GAIN = 1.0
DEFAULT_SPREAD = 0.6


@dataclass(frozen=True)
class PlantedOracle:
    seed: int
    in_dim: int
    emb_dim: int
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return np.tanh(np.asarray(x, dtype=np.float64) @ self.w1 + self.b1) @ self.w2

    def save(self, path) -> None:
        np.savez(path, seed=self.seed, in_dim=self.in_dim, emb_dim=self.emb_dim,
                 w1=self.w1, b1=self.b1, w2=self.w2)

    @classmethod
    def load(cls, path) -> "PlantedOracle":
        z = np.load(path)
        return cls(int(z["seed"]), int(z["in_dim"]), int(z["emb_dim"]), z["w1"], z["b1"], z["w2"])


def make_oracle(seed: int, in_dim: int = 64, emb_dim: int = 8, gain: float = DEFAULT_GAIN) -> PlantedOracle:
    """Build the frozen map R^in_dim -> R^emb_dim with hidden width 4*emb_dim.

    ``gain`` scales first-layer pre-activations (unit-variance inputs give
    pre-activation std of about ``gain``), which sets how strongly tanh bends
    the map.
    """
    if emb_dim < 2:
        raise DataError("oracle emb_dim must be >= 2")
    if in_dim < emb_dim:
        raise DataError("oracle in_dim must be >= emb_dim")
    rng = np.random.default_rng([seed, 0x0AC1E])
    hidden = 4 * emb_dim
    w1 = rng.standard_normal((in_dim, hidden)) * (gain / np.sqrt(in_dim))
    b1 = rng.standard_normal(hidden) * 0.5
    w2 = rng.standard_normal((hidden, emb_dim)) / np.sqrt(hidden)
    return PlantedOracle(seed, in_dim, emb_dim, w1, b1, w2)


def class_anchors(oracle: PlantedOracle, n_classes: int) -> np.ndarray:
    """Class centres in input space; fixed by the oracle seed so splits share them."""
    rng = np.random.default_rng([oracle.seed, n_classes, 0xA5C])
    return rng.standard_normal((n_classes, oracle.in_dim))


def generate_faces(oracle: PlantedOracle, n: int, n_classes: int, seed: int,
                   spread: float = DEFAULT_SPREAD) -> list[FaceRecord]:
    """Draw ``n`` labelled faces, class ``i % n_classes`` for face ``i``.

    Features are ``anchor + spread * N(0, I)``; anchors are shared by every
    call with the same oracle and class count.
    """
    if not 1 <= n_classes <= len(EmotionLabel):
        raise DataError(f"n_classes must be in [1, {len(EmotionLabel)}]")
    if n < n_classes:
        raise DataError("need at least one face per class")
    anchors = class_anchors(oracle, n_classes)
    rng = np.random.default_rng([seed, 0xFACE])
    classes = np.arange(n) % n_classes
    feats = anchors[classes] + spread * rng.standard_normal((n, oracle.in_dim))
    faces = []
    for i in range(n):
        uri = f"synth://{oracle.seed}/{seed}/{i}"
        bbox = (0.0, 1.0, 0.0, 1.0)
        faces.append(FaceRecord(face_id(uri, bbox), uri, bbox,
                                frozenset({EmotionLabel(int(classes[i]))}), feats[i]))
    return faces


def _odd_and_gap(g1, g2, g3):
    d12 = np.sum((g1 - g2) ** 2, axis=-1)
    d13 = np.sum((g1 - g3) ** 2, axis=-1)
    d23 = np.sum((g2 - g3) ** 2, axis=-1)
    # closest pair (2,3) -> odd slot 1, (1,3) -> 2, (1,2) -> 3
    d = np.stack([d23, d13, d12], axis=-1)
    srt = np.sort(d, axis=-1)
    return np.argmin(d, axis=-1) + 1, srt[..., 1] - srt[..., 0]


def label_triplet_by_oracle(oracle: PlantedOracle, f1, f2, f3, tau: float) -> ConsensusResult | None:
    """Strong consensus from the oracle, or ``None`` (reject) for near ties.

    Distances are squared Euclidean in oracle space; the triplet is rejected
    when the two smallest pairwise distances differ by less than ``tau``.
    """
    if tau < 0:
        raise DataError("tau must be >= 0")
    label, gap = _odd_and_gap(oracle(f1), oracle(f2), oracle(f3))
    if gap < tau:
        return None
    return ConsensusResult(int(label), Agreement.STRONG)


def default_tau(oracle: PlantedOracle, faces, n_pairs: int = 20000, seed: int = 0) -> float:
    """0.1 x the median squared pairwise oracle distance over random face pairs."""
    g = oracle(np.array([f.feature for f in faces]))
    rng = np.random.default_rng([seed, 0x7A0])
    i = rng.integers(0, len(g), n_pairs)
    j = rng.integers(0, len(g), n_pairs)
    keep = i != j
    return 0.1 * float(np.median(np.sum((g[i[keep]] - g[j[keep]]) ** 2, axis=1)))


@dataclass
class SyntheticDataset:
    faces: list[FaceRecord]
    triplets: list[tuple[TripletRecord, ConsensusResult, TripletType]]
    tau: float

    def feature_store(self) -> dict[str, np.ndarray]:
        return {f.id: f.feature for f in self.faces}

    @property
    def records(self) -> list[TripletRecord]:
        return [t[0] for t in self.triplets]


def _draw_candidates(ttype, by_class, classes_ok, rng, m):
    """Draw ``m`` candidate slot triples (face indices) of the requested type."""
    n_cls = len(by_class)
    sizes = np.array([len(c) for c in by_class])
    out = np.empty((m, 3), dtype=np.int64)
    if ttype is TripletType.ONE_CLASS:
        cls = rng.choice(classes_ok, size=m)
        for r, c in enumerate(cls):
            out[r] = by_class[c][rng.choice(sizes[c], 3, replace=False)]
    elif ttype is TripletType.TWO_CLASS:
        cls = rng.choice(classes_ok, size=m)
        for r, c in enumerate(cls):
            other = rng.integers(0, n_cls - 1)
            other += other >= c
            pair = by_class[c][rng.choice(sizes[c], 2, replace=False)]
            out[r] = [pair[0], pair[1], by_class[other][rng.integers(sizes[other])]]
    else:
        for r in range(m):
            cs = rng.choice(n_cls, 3, replace=False)
            out[r] = [by_class[c][rng.integers(sizes[c])] for c in cs]
    # random slot order so the odd face is not positionally biased
    perm = np.argsort(rng.random((m, 3)), axis=1)
    return np.take_along_axis(out, perm, axis=1)


def generate_triplet_set(oracle: PlantedOracle, faces: list[FaceRecord], counts, tau: float | None = None,
                         seed: int = 0, max_rounds: int = 50) -> SyntheticDataset:
    """Sample oracle-labelled, type-balanced triplets.

    Args:
        oracle: the planted similarity map.
        faces: single-label faces with features.
        counts: mapping ``TripletType -> n`` or a 3-sequence for
            (one-class, two-class, three-class).
        tau: rejection gap on squared oracle distances; ``None`` uses
            :func:`default_tau`.
        seed: sampling seed.
        max_rounds: resampling rounds per type before giving up.

    Returns:
        A :class:`SyntheticDataset` whose triplets are all strong and carry
        six identical synthetic votes.
    """
    if not isinstance(counts, dict):
        counts = dict(zip(TYPED, counts))
    if tau is None:
        tau = default_tau(oracle, faces, seed=seed)
    labels = np.array([min(f.labels).value for f in faces])
    feats = np.array([f.feature for f in faces])
    g = oracle(feats)
    present = np.unique(labels)
    by_class = [np.flatnonzero(labels == c) for c in present]
    sizes = np.array([len(c) for c in by_class])
    rng = np.random.default_rng([seed, 0x791])

    triplets = []
    for ttype in TYPED:
        want = int(counts.get(ttype, 0))
        if want == 0:
            continue
        if ttype is TripletType.ONE_CLASS:
            ok = np.flatnonzero(sizes >= 3)
        elif ttype is TripletType.TWO_CLASS:
            ok = np.flatnonzero(sizes >= 2) if len(by_class) >= 2 else np.array([], dtype=int)
        else:
            ok = np.arange(len(by_class)) if len(by_class) >= 3 else np.array([], dtype=int)
        if ok.size == 0:
            raise DataError(f"cannot realise {ttype.value} triplets with the given face labels")
        got: list[np.ndarray] = []
        n_got = 0
        for _ in range(max_rounds):
            m = max(2 * (want - n_got), 16)
            cand = _draw_candidates(ttype, by_class, ok, rng, m)
            lab, gap = _odd_and_gap(g[cand[:, 0]], g[cand[:, 1]], g[cand[:, 2]])
            keep = gap >= tau
            acc = np.column_stack([cand[keep], lab[keep]])[: want - n_got]
            got.append(acc)
            n_got += len(acc)
            if n_got >= want:
                break
        if n_got < want:
            raise DataError(f"only {n_got}/{want} {ttype.value} triplets passed the tau={tau:.4g} filter")
        for i1, i2, i3, lab in np.concatenate(got):
            votes = tuple(RaterVote(f"synth-r{r + 1}", int(lab)) for r in range(N_SYNTH_RATERS))
            rec = TripletRecord((faces[i1], faces[i2], faces[i3]), votes, ttype)
            triplets.append((rec, ConsensusResult(int(lab), Agreement.STRONG), ttype))
    return SyntheticDataset(list(faces), triplets, float(tau))
