"""Distances and evaluation statistics."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy.spatial.distance import cdist
from scipy.stats import rankdata

from . import kernels
from .dataset import DataError, TripletArrays, TripletRecord, TYPED


class DistanceKind(Enum):
    L1 = "l1"
    L2 = "l2"
    COSINE = "cosine"

    @property
    def code(self) -> int:
        return {"l1": kernels.L1, "l2": kernels.L2, "cosine": kernels.COSINE}[self.value]

    @classmethod
    def parse(cls, text: "str | DistanceKind") -> "DistanceKind":
        if isinstance(text, cls):
            return text
        try:
            return cls(text.strip().lower())
        except ValueError:
            raise ValueError(f"unknown distance kind {text!r}") from None


_CDIST_METRIC = {DistanceKind.L1: "cityblock", DistanceKind.L2: "euclidean", DistanceKind.COSINE: "cosine"}


def distance(u, v, kind: DistanceKind | str = DistanceKind.L2) -> float:
    kind = DistanceKind.parse(kind)
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise ValueError(f"dimension mismatch {u.shape} vs {v.shape}")
    if kind is DistanceKind.L1:
        return float(np.sum(np.abs(u - v)))
    if kind is DistanceKind.L2:
        return float(np.linalg.norm(u - v))
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise ValueError("cosine distance is undefined for zero vectors")
    return float(1.0 - u @ v / (nu * nv))


def pairwise_distances(x, y=None, kind: DistanceKind | str = DistanceKind.L2) -> np.ndarray:
    """Distance matrix between the rows of ``x`` and ``y`` (default ``x``)."""
    kind = DistanceKind.parse(kind)
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = x if y is None else np.atleast_2d(np.asarray(y, dtype=np.float64))
    if x.shape[1] != y.shape[1]:
        raise ValueError(f"dimension mismatch {x.shape[1]} vs {y.shape[1]}")
    if kind is DistanceKind.COSINE and (np.any(~x.any(axis=1)) or np.any(~y.any(axis=1))):
        raise ValueError("cosine distance is undefined for zero vectors")
    # cdist works pair by pair, so identical rows give exactly 0
    return cdist(x, y, _CDIST_METRIC[kind])


# --------------------------------------------------------------------------
# triplet prediction accuracy
# --------------------------------------------------------------------------

def triplet_correctness(embeddings: np.ndarray, triplets: TripletArrays,
                        kind: DistanceKind | str = DistanceKind.L2) -> np.ndarray:
    """Per-triplet booleans: the annotated pair is strictly closer than both cross pairs."""
    kind = DistanceKind.parse(kind)
    if np.any(triplets.odd < 0):
        raise DataError("every triplet needs a consensus label; filter by agreement first")
    emb = np.ascontiguousarray(embeddings, dtype=np.float64)
    if emb.shape[0] != len(triplets.face_ids):
        raise ValueError(f"{emb.shape[0]} embeddings for {len(triplets.face_ids)} faces")
    if kind is DistanceKind.COSINE and np.any(np.linalg.norm(emb, axis=1) == 0):
        raise ValueError("cosine distance is undefined for zero vectors")
    o = triplets.ordered()
    return kernels.triplet_correct(emb[o[:, 0]], emb[o[:, 1]], emb[o[:, 2]], kind.code)


def triplet_prediction_accuracy(embeddings: np.ndarray, triplets: TripletArrays,
                                kind: DistanceKind | str = DistanceKind.L2):
    """Fraction of triplets predicted correctly, overall and per type.

    Ties count as incorrect. Returns ``(accuracy, {type_value: accuracy})``;
    types with no triplets are left out of the breakdown.
    """
    ok = triplet_correctness(embeddings, triplets, kind)
    if ok.size == 0:
        return float("nan"), {}
    codes = np.array([t.value for t in triplets.types])
    per_type = {}
    for t in TYPED:
        m = codes == t.value
        if m.any():
            per_type[t.value] = float(ok[m].mean())
    return float(ok.mean()), per_type


def per_rater_accuracy(records: list[TripletRecord]) -> dict[str, float]:
    """How often each rater's vote equals the triplet's unique top-voted label.

    Triplets without a unique top-voted label are left out of every rater's
    denominator; raters with nothing countable are omitted.
    """
    hits: dict[str, int] = {}
    totals: dict[str, int] = {}
    for rec in records:
        if not rec.votes:
            continue
        counts = [0, 0, 0]
        for v in rec.votes:
            counts[v.choice - 1] += 1
        top = max(counts)
        if counts.count(top) != 1:
            continue
        label = counts.index(top) + 1
        for v in rec.votes:
            totals[v.rater_id] = totals.get(v.rater_id, 0) + 1
            hits[v.rater_id] = hits.get(v.rater_id, 0) + (v.choice == label)
    return {r: hits[r] / totals[r] for r in sorted(totals)}


# --------------------------------------------------------------------------
# classification measures
# --------------------------------------------------------------------------

def auc_roc(scores, labels) -> float:
    """Area under the ROC curve as the Mann-Whitney statistic (midranks for ties)."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).astype(bool).ravel()
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs at least one positive and one negative")
    ranks = rankdata(scores, method="average")
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def macro_auc(scores, classes, n_classes: int | None = None) -> float:
    """One-vs-rest AUC averaged over classes present in ``classes``."""
    scores = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    classes = np.asarray(classes)
    n_classes = scores.shape[1] if n_classes is None else n_classes
    aucs = [auc_roc(scores[:, c], classes == c) for c in range(n_classes)
            if 0 < np.sum(classes == c) < classes.size]
    if not aucs:
        raise ValueError("macro AUC needs at least one class with positives and negatives")
    return float(np.mean(aucs))


def per_class_auc(scores, classes, n_classes: int | None = None) -> dict[int, float]:
    scores = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    classes = np.asarray(classes)
    n_classes = scores.shape[1] if n_classes is None else n_classes
    return {c: auc_roc(scores[:, c], classes == c) for c in range(n_classes)
            if 0 < np.sum(classes == c) < classes.size}


def f1_score(predictions, labels) -> float:
    """Mean over output columns of binary F1 (0 when precision + recall is 0)."""
    p = np.asarray(predictions).astype(bool)
    y = np.asarray(labels).astype(bool)
    if p.shape != y.shape:
        raise ValueError("predictions and labels must have the same shape")
    if p.ndim == 1:
        p, y = p[:, None], y[:, None]
    tp = np.sum(p & y, axis=0).astype(np.float64)
    fp = np.sum(p & ~y, axis=0)
    fn = np.sum(~p & y, axis=0)
    denom = 2 * tp + fp + fn
    f1 = np.divide(2 * tp, denom, out=np.zeros_like(tp), where=denom > 0)
    return float(f1.mean())


# --------------------------------------------------------------------------
# report
# --------------------------------------------------------------------------

@dataclass
class EvalReport:
    accuracy: float
    per_type: dict[str, float]
    per_rater: dict[str, float]
    counts: dict[str, int]
    distance: str
    model_digest: str | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "per_type": self.per_type,
            "per_rater": self.per_rater,
            "counts": self.counts,
            "distance": self.distance,
            "model_digest": self.model_digest,
            **({"extra": self.extra} if self.extra else {}),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def evaluate(embeddings: np.ndarray, triplets: TripletArrays, records: list[TripletRecord] | None = None,
             kind: DistanceKind | str = DistanceKind.L2, model_digest: str | None = None) -> EvalReport:
    kind = DistanceKind.parse(kind)
    acc, per_type = triplet_prediction_accuracy(embeddings, triplets, kind)
    codes = [t.value for t in triplets.types]
    counts = {"total": len(triplets)}
    counts.update({t.value: codes.count(t.value) for t in TYPED})
    per_rater = per_rater_accuracy(records) if records else {}
    return EvalReport(acc, per_type, per_rater, counts, kind.value, model_digest)

