"""Downstream uses of an expression embedding.

K-NN emotion classification, nearest-neighbour retrieval scored with the
rank-difference metric over pairwise human (or oracle) judgments, and album
summarization with complete-linkage agglomerative clustering.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import kernels
from .dataset import DataError
from .metrics import DistanceKind, pairwise_distances

DEFAULT_KNN_NEIGHBORS = 200
# wider neighbourhood for K-NN scores used as a validation signal while training classifiers
VALIDATION_KNN_NEIGHBORS = 800


# --------------------------------------------------------------------------
# K-NN classification
# --------------------------------------------------------------------------

def knn_classify(query, database, classes, k: int = DEFAULT_KNN_NEIGHBORS,
                 kind: DistanceKind | str = DistanceKind.L2, n_classes: int | None = None) -> np.ndarray:
    """Per-class vote fractions among the ``k`` nearest database entries.

    Distance ties at the k-th neighbour are broken by database order. A 2-d
    ``query`` returns one score row per query.
    """
    database = np.atleast_2d(np.asarray(database, dtype=np.float64))
    classes = np.asarray(classes, dtype=np.int64)
    if database.shape[0] == 0:
        raise DataError("K-NN database is empty")
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > database.shape[0]:
        raise ValueError(f"k={k} exceeds database size {database.shape[0]}")
    n_classes = int(classes.max()) + 1 if n_classes is None else n_classes
    q = np.asarray(query, dtype=np.float64)
    single = q.ndim == 1
    dist = pairwise_distances(np.atleast_2d(q), database, kind)
    order = np.argsort(dist, axis=1, kind="stable")[:, :k]
    scores = np.zeros((dist.shape[0], n_classes))
    for r in range(dist.shape[0]):
        scores[r] = np.bincount(classes[order[r]], minlength=n_classes) / k
    return scores[0] if single else scores


# --------------------------------------------------------------------------
# retrieval and rank difference
# --------------------------------------------------------------------------

def retrieve(query, database, ids: Sequence[str], n: int,
             kind: DistanceKind | str = DistanceKind.L2) -> list[str]:
    """Ids of the ``n`` nearest database entries, nearest first, ties by id."""
    database = np.atleast_2d(np.asarray(database, dtype=np.float64))
    if n < 0:
        raise ValueError("n must be >= 0")
    if n > database.shape[0]:
        raise ValueError(f"n={n} exceeds database size {database.shape[0]}")
    if n == 0:
        return []
    dist = pairwise_distances(np.asarray(query, dtype=np.float64)[None], database, kind)[0]
    order = np.lexsort((np.asarray(ids, dtype=object).astype(str), dist))
    return [ids[i] for i in order[:n]]


@dataclass
class RankingTable:
    """Pairwise-judgment scores and the derived ranking (rank 1 is best)."""

    items: list[str]
    scores: np.ndarray
    ranking: list[str]

    @property
    def totals(self) -> dict[str, int]:
        return {it: int(s) for it, s in zip(self.items, self.scores.sum(axis=1))}

    def rank_of(self, item: str) -> int:
        try:
            return self.ranking.index(item) + 1
        except ValueError:
            raise DataError(f"item {item!r} is not in the ranking") from None


def pairwise_to_ranking(items: Sequence[str], judgments) -> RankingTable:
    """Turn (i, j, outcome) judgments into totals and a global ranking.

    ``outcome`` is the winning item id or ``"tie"``. The winner scores +1 and
    the loser -1 per judgment; a tie scores zero for both. Items are ranked by
    total, descending, with ties kept in input order.
    """
    items = list(items)
    if len(set(items)) != len(items):
        raise DataError("ranking items must be distinct")
    pos = {it: p for p, it in enumerate(items)}
    scores = np.zeros((len(items), len(items)), dtype=np.int64)
    for i, j, outcome in judgments:
        if i not in pos or j not in pos:
            raise DataError(f"judgment references unknown item: {i!r} vs {j!r}")
        if i == j:
            raise DataError(f"judgment compares {i!r} with itself")
        a, b = pos[i], pos[j]
        if outcome == "tie":
            continue
        if outcome == i:
            scores[a, b] += 1
            scores[b, a] -= 1
        elif outcome == j:
            scores[b, a] += 1
            scores[a, b] -= 1
        else:
            raise DataError(f"judgment outcome {outcome!r} is neither item nor 'tie'")
    totals = scores.sum(axis=1)
    order = sorted(range(len(items)), key=lambda p: (-totals[p], p))
    return RankingTable(items, scores, [items[p] for p in order])


def rank_difference(candidate: Sequence[str], baseline: Sequence[str], ranking: RankingTable) -> float:
    """(mean baseline rank - mean candidate rank) / N.

    Positive when the candidate's retrievals sit higher (better) in the
    ranking. Ranges over [-1, 1] with the extremes at fully separated blocks.
    """
    n = len(candidate)
    if n == 0 or len(baseline) != n:
        raise ValueError("candidate and baseline sets must both have N >= 1 items")
    cand = np.mean([ranking.rank_of(c) for c in candidate])
    base = np.mean([ranking.rank_of(b) for b in baseline])
    return float((base - cand) / n)


def oracle_judgments(query, items: Sequence[str], embeddings, kind: DistanceKind | str = DistanceKind.L2):
    """Judge every item pair by which one is closer to ``query`` in a reference embedding."""
    emb = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    d = pairwise_distances(np.asarray(query, dtype=np.float64)[None], emb, kind)[0]
    out = []
    for a in range(len(items)):
        for b in range(a + 1, len(items)):
            if d[a] < d[b]:
                res = items[a]
            elif d[b] < d[a]:
                res = items[b]
            else:
                res = "tie"
            out.append((items[a], items[b], res))
    return out


def read_judgments(path) -> dict[str, list[tuple[str, str, str]]]:
    """Judgment file rows ``query_id,item_a,item_b,outcome`` with outcome a|b|tie.

    Returns judgments grouped by query with outcomes resolved to item ids.
    """
    out: dict[str, list] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row_no, row in enumerate(csv.reader(fh), start=1):
            if not row or row[0].strip().lower() == "query_id":
                continue
            if len(row) != 4:
                raise DataError(f"judgment row {row_no} needs 4 fields, got {len(row)}")
            q, a, b, res = (c.strip() for c in row)
            res = res.lower()
            if res not in ("a", "b", "tie"):
                raise DataError(f"judgment outcome must be a, b or tie at row {row_no}")
            out.setdefault(q, []).append((a, b, {"a": a, "b": b, "tie": "tie"}[res]))
    return out


def write_judgments(path, grouped: dict[str, list[tuple[str, str, str]]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["query_id", "item_a", "item_b", "outcome"])
        for q, rows in grouped.items():
            for a, b, res in rows:
                w.writerow([q, a, b, "tie" if res == "tie" else ("a" if res == a else "b")])


def rank_difference_report(candidate: dict[str, list[str]], baseline: dict[str, list[str]],
                           judgments: dict[str, list]) -> dict:
    """Per-query rank difference plus the mean over queries."""
    per_query = {}
    for q in sorted(candidate):
        if q not in baseline or q not in judgments:
            raise DataError(f"query {q!r} lacks baseline retrievals or judgments")
        cand, base = candidate[q], baseline[q]
        items = list(dict.fromkeys(list(cand) + list(base)))
        table = pairwise_to_ranking(items, judgments[q])
        per_query[q] = rank_difference(cand, base, table)
    vals = list(per_query.values())
    return {"mean": float(np.mean(vals)) if vals else float("nan"), "per_query": per_query}


# --------------------------------------------------------------------------
# clustering and summaries
# --------------------------------------------------------------------------

def agglomerative_cluster(points, k: int, kind: DistanceKind | str = DistanceKind.COSINE) -> np.ndarray:
    """Complete-linkage agglomerative clustering down to ``k`` clusters.

    At each step the pair of clusters with the smallest maximum pointwise
    distance merges; equal distances go to the pair with the smallest
    (first-member, first-member) indices. Labels are numbered by each
    cluster's first member.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if pts.shape[0] == 0:
        raise ValueError("cannot cluster an empty point set")
    if k < 1:
        raise ValueError("k must be >= 1")
    if k >= pts.shape[0]:
        return np.arange(pts.shape[0], dtype=np.int64)
    dist = np.ascontiguousarray(pairwise_distances(pts, None, kind))
    return kernels.complete_linkage(dist, int(k))


@dataclass
class Summary:
    medoids: list[str]
    sizes: list[int]

    def to_dict(self) -> dict:
        return {"medoids": [{"id": m, "cluster_size": s} for m, s in zip(self.medoids, self.sizes)]}


def summarize_album(embeddings, ids: Sequence[str], k: int = 10) -> Summary:
    """Pick one representative face per cluster.

    Clusters come from :func:`agglomerative_cluster` under cosine distance.
    The representative is the member most cosine-similar to the normalized
    cluster mean (ties by id); if the mean is (near) zero it is the member
    with the smallest summed cosine distance to the rest. Results are sorted
    by cluster size, largest first.
    """
    emb = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    ids = list(ids)
    if emb.shape[0] == 0:
        raise ValueError("album is empty")
    labels = agglomerative_cluster(emb, k, DistanceKind.COSINE)
    unit = emb / np.linalg.norm(emb, axis=1, keepdims=True)
    picks = []
    for c in range(int(labels.max()) + 1):
        members = np.flatnonzero(labels == c)
        mean = unit[members].mean(axis=0)
        norm = np.linalg.norm(mean)
        if norm > 1e-12:
            score = unit[members] @ (mean / norm)
        else:
            dist = 1.0 - unit[members] @ unit[members].T
            score = -dist.sum(axis=1)
        best = min(range(len(members)), key=lambda r: (-score[r], ids[members[r]]))
        picks.append((len(members), c, ids[members[best]]))
    picks.sort(key=lambda t: (-t[0], t[1]))
    return Summary([p[2] for p in picks], [p[0] for p in picks])


def write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
