"""Faces, triplets, rater votes and their aggregation.

A triplet names three faces and carries rater votes; each vote says which
slot (1, 2 or 3) holds the odd face, i.e. the other two form the most
similar pair. Votes are aggregated into a consensus label with an agreement
strength, and triplets are typed by how the faces' emotion labels overlap.
"""

from __future__ import annotations

import csv
import hashlib
import io
import struct
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from typing import Iterable, Mapping, Sequence, TextIO

import numpy as np


class DataError(ValueError):
    """Raised for malformed or inconsistent input data."""


class ParseError(DataError):
    def __init__(self, row: int, field_name: str, message: str):
        self.row = row
        self.field = field_name
        super().__init__(f"{message} at row {row} (field {field_name!r})")


class EmotionLabel(IntEnum):
    AMUSEMENT = 0
    ANGER = 1
    AWE = 2
    BOREDOM = 3
    CONCENTRATION = 4
    CONFUSION = 5
    CONTEMPLATION = 6
    CONTEMPT = 7
    CONTENTMENT = 8
    DESIRE = 9
    DISAPPOINTMENT = 10
    DISGUST = 11
    DISTRESS = 12
    DOUBT = 13
    ECSTASY = 14
    ELATION = 15
    EMBARRASSMENT = 16
    FEAR = 17
    INTEREST = 18
    LOVE = 19
    NEUTRAL = 20
    PAIN = 21
    PRIDE = 22
    REALIZATION = 23
    RELIEF = 24
    SADNESS = 25
    SHAME = 26
    SURPRISE = 27
    SYMPATHY = 28
    TRIUMPH = 29

    @classmethod
    def parse(cls, name: str) -> "EmotionLabel":
        key = name.strip().upper()
        try:
            return cls[key]
        except KeyError:
            raise DataError(f"unknown emotion label {name!r}") from None

    @property
    def title(self) -> str:
        return self.name.capitalize()


class TripletType(Enum):
    ONE_CLASS = "one_class"
    TWO_CLASS = "two_class"
    THREE_CLASS = "three_class"
    OTHER = "other"

    @classmethod
    def parse(cls, text: str) -> "TripletType":
        key = text.strip().lower().replace("-", "_").replace(" ", "_")
        key = key.removesuffix("_triplet")
        aliases = {
            "one_class": cls.ONE_CLASS, "oneclass": cls.ONE_CLASS,
            "two_class": cls.TWO_CLASS, "twoclass": cls.TWO_CLASS,
            "three_class": cls.THREE_CLASS, "threeclass": cls.THREE_CLASS,
            "other": cls.OTHER,
        }
        if key not in aliases:
            raise DataError(f"unknown triplet type {text!r}")
        return aliases[key]


TYPED = (TripletType.ONE_CLASS, TripletType.TWO_CLASS, TripletType.THREE_CLASS)


class Agreement(Enum):
    STRONG = "strong"
    WEAK = "weak"
    NONE = "none"


class AgreementPolicy(Enum):
    STRONG_ONLY = "strong"
    STRONG_PLUS_WEAK = "strong+weak"
    ALL = "all"

    @classmethod
    def parse(cls, text: str) -> "AgreementPolicy":
        for p in cls:
            if p.value == text.strip().lower():
                return p
        raise DataError(f"unknown agreement policy {text!r}")


BBox = tuple[float, float, float, float]


@dataclass(frozen=True)
class FaceRecord:
    """A face crop: ``bbox`` is (left, right, top, bottom) as image fractions."""

    id: str
    source_uri: str | None = None
    bbox: BBox | None = None
    labels: frozenset[EmotionLabel] = frozenset()
    feature: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        if not self.id:
            raise DataError("face id must be non-empty")
        if self.bbox is not None:
            left, right, top, bottom = self.bbox
            if not all(0.0 <= v <= 1.0 for v in self.bbox):
                raise DataError(f"bbox of {self.id} outside [0, 1]: {self.bbox}")
            if not (left < right and top < bottom):
                raise DataError(f"degenerate bbox for {self.id}: {self.bbox}")


def face_id(uri: str, bbox: BBox | None) -> str:
    """Stable id for a crop; identical (uri, bbox) pairs map to the same id."""
    box = "" if bbox is None else ",".join(f"{v:.6f}" for v in bbox)
    return hashlib.sha1(f"{uri}|{box}".encode()).hexdigest()[:16]


@dataclass(frozen=True)
class RaterVote:
    rater_id: str
    choice: int

    def __post_init__(self):
        if self.choice not in (1, 2, 3):
            raise DataError(f"vote choice must be 1, 2 or 3, got {self.choice}")


@dataclass(frozen=True)
class TripletRecord:
    faces: tuple[FaceRecord, FaceRecord, FaceRecord]
    votes: tuple[RaterVote, ...] = ()
    declared_type: TripletType | None = None

    def __post_init__(self):
        ids = [f.id for f in self.faces]
        if len(ids) != 3 or len(set(ids)) != 3:
            raise DataError(f"triplet faces must be three distinct ids, got {ids}")

    @property
    def face_ids(self) -> tuple[str, str, str]:
        return tuple(f.id for f in self.faces)


@dataclass(frozen=True)
class ConsensusResult:
    label: int | None
    agreement: Agreement

    def __post_init__(self):
        if (self.label is None) != (self.agreement is Agreement.NONE):
            raise DataError("consensus label must be present iff agreement is not NONE")


# --------------------------------------------------------------------------
# aggregation and typing
# --------------------------------------------------------------------------

def aggregate_votes(votes: Sequence[RaterVote] | Sequence[int]) -> ConsensusResult:
    """Aggregate odd-one-out votes into a consensus label.

    With ``R`` votes and ``m`` the top vote count: strong when
    ``m >= ceil(2R/3)`` and the top choice is unique; weak when not strong,
    unique, and ``m >= ceil(R/2)``; otherwise no consensus. For six raters
    these thresholds are 4 and 3.
    """
    choices = [v.choice if isinstance(v, RaterVote) else int(v) for v in votes]
    if not choices:
        raise DataError("cannot aggregate an empty vote sequence")
    counts = [0, 0, 0]
    for c in choices:
        if c not in (1, 2, 3):
            raise DataError(f"vote choice must be 1, 2 or 3, got {c}")
        counts[c - 1] += 1
    r = len(choices)
    m = max(counts)
    if counts.count(m) != 1:
        return ConsensusResult(None, Agreement.NONE)
    label = counts.index(m) + 1
    if m >= -(-2 * r // 3):
        return ConsensusResult(label, Agreement.STRONG)
    if m >= -(-r // 2):
        return ConsensusResult(label, Agreement.WEAK)
    return ConsensusResult(None, Agreement.NONE)


def classify_triplet_type(labels1: Iterable, labels2: Iterable, labels3: Iterable) -> TripletType:
    s1, s2, s3 = set(labels1), set(labels2), set(labels3)
    if s1 & s2 & s3:
        return TripletType.ONE_CLASS
    shared = [bool(s1 & s2), bool(s1 & s3), bool(s2 & s3)]
    n_shared = sum(shared)
    if n_shared == 1:
        return TripletType.TWO_CLASS
    if n_shared == 0:
        return TripletType.THREE_CLASS
    return TripletType.OTHER


def triplet_type(record: TripletRecord) -> TripletType:
    """Declared type if the source carried one, otherwise typed from face labels."""
    if record.declared_type is not None:
        return record.declared_type
    return classify_triplet_type(*(f.labels for f in record.faces))


def _keeps(agreement: Agreement, policy: AgreementPolicy, require_label: bool) -> bool:
    if policy is AgreementPolicy.STRONG_ONLY:
        return agreement is Agreement.STRONG
    if policy is AgreementPolicy.STRONG_PLUS_WEAK:
        return agreement in (Agreement.STRONG, Agreement.WEAK)
    return not require_label or agreement is not Agreement.NONE


def filter_by_agreement(items, policy: AgreementPolicy, require_label: bool = False) -> list:
    """Keep ``(record, consensus, ...)`` tuples allowed by ``policy``, in order.

    ``AgreementPolicy.ALL`` keeps everything unless ``require_label`` is set,
    in which case triplets without consensus are dropped.
    """
    return [item for item in items if _keeps(item[1].agreement, policy, require_label)]


# --------------------------------------------------------------------------
# triplet CSV ingestion
# --------------------------------------------------------------------------

_BOX_KEYS = ("left", "right", "top", "bottom")


def canonical_schema(n_votes: int = 6) -> dict:
    """Schema for the toolkit's own triplet file (header names)."""
    schema = {"header": True}
    for i in (1, 2, 3):
        schema[f"face{i}_uri"] = f"face{i}_uri"
        for k in _BOX_KEYS:
            schema[f"face{i}_{k}"] = f"face{i}_{k}"
    schema["type"] = "type"
    schema["votes"] = [[f"rater{j}", f"vote{j}"] for j in range(1, n_votes + 1)]
    return schema


def fec_schema(n_votes: int = 6) -> dict:
    """Positional schema for the released FEC CSV layout (no header row).

    Columns per face are uri, left, right, top, bottom; then the triplet type
    and ``n_votes`` (rater id, vote) pairs.
    """
    schema: dict = {"header": False}
    col = 0
    for i in (1, 2, 3):
        schema[f"face{i}_uri"] = col
        for k_i, k in enumerate(_BOX_KEYS):
            schema[f"face{i}_{k}"] = col + 1 + k_i
        col += 5
    schema["type"] = col
    schema["votes"] = [[col + 1 + 2 * j, col + 2 + 2 * j] for j in range(n_votes)]
    return schema


def _required_fields() -> list[str]:
    out = []
    for i in (1, 2, 3):
        out.append(f"face{i}_uri")
        out.extend(f"face{i}_{k}" for k in _BOX_KEYS)
    return out


def _resolve_schema(schema: Mapping, header: list[str] | None) -> dict:
    def pos(name, ref):
        if isinstance(ref, int):
            return ref
        if header is None:
            raise DataError(f"schema field {name!r} uses a column name but the input has no header")
        try:
            return header.index(ref)
        except ValueError:
            raise DataError(f"column {ref!r} for schema field {name!r} not found in header") from None

    missing = [f for f in _required_fields() if f not in schema]
    if missing:
        raise DataError(f"schema is missing field(s): {', '.join(missing)}")
    resolved = {f: pos(f, schema[f]) for f in _required_fields()}
    resolved["type"] = pos("type", schema["type"]) if schema.get("type") is not None else None
    resolved["votes"] = [(pos("rater", r), pos("vote", v)) for r, v in schema.get("votes", [])]
    return resolved


def parse_triplets(stream: TextIO, schema: Mapping | None = None) -> list[TripletRecord]:
    """Parse delimiter-separated triplet rows.

    Args:
        stream: text stream of comma-separated rows.
        schema: maps logical fields (``face{i}_uri``, ``face{i}_left`` ...,
            ``type``, ``votes``) to column positions or header names. Defaults
            to :func:`canonical_schema`.

    Returns:
        One :class:`TripletRecord` per data row, in file order. Rater/vote
        pairs with an empty vote cell are skipped.
    """
    schema = canonical_schema() if schema is None else schema
    reader = csv.reader(stream, delimiter=schema.get("delimiter", ","))
    header = None
    if schema.get("header", False):
        header = next(reader, None)
        if header is None:
            return []
        header = [h.strip() for h in header]
    cols = _resolve_schema(schema, header)
    n_cols_needed = 1 + max(v for k, v in cols.items() if k not in ("votes", "type"))
    if cols["type"] is not None:
        n_cols_needed = max(n_cols_needed, cols["type"] + 1)

    records = []
    for row_no, row in enumerate(reader, start=1):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) < n_cols_needed:
            raise ParseError(row_no, "row", f"expected at least {n_cols_needed} columns, got {len(row)}")
        faces = []
        for i in (1, 2, 3):
            uri = row[cols[f"face{i}_uri"]].strip()
            box = []
            for k in _BOX_KEYS:
                name = f"face{i}_{k}"
                try:
                    box.append(float(row[cols[name]]))
                except ValueError:
                    raise ParseError(row_no, name, f"non-numeric bbox value {row[cols[name]]!r}") from None
            bbox = tuple(box)
            try:
                faces.append(FaceRecord(id=face_id(uri, bbox), source_uri=uri, bbox=bbox))
            except DataError as exc:
                raise ParseError(row_no, f"face{i}_bbox", str(exc)) from None
        declared = None
        if cols["type"] is not None and cols["type"] < len(row) and row[cols["type"]].strip():
            try:
                declared = TripletType.parse(row[cols["type"]])
            except DataError as exc:
                raise ParseError(row_no, "type", str(exc)) from None
        votes = []
        for r_col, v_col in cols["votes"]:
            if v_col >= len(row) or not row[v_col].strip():
                continue
            raw = row[v_col].strip()
            try:
                choice = int(raw)
            except ValueError:
                raise ParseError(row_no, "vote", f"non-integer vote {raw!r}") from None
            if choice not in (1, 2, 3):
                raise ParseError(row_no, "vote", "vote out of range")
            rater = row[r_col].strip() if r_col < len(row) else ""
            votes.append(RaterVote(rater, choice))
        try:
            records.append(TripletRecord(tuple(faces), tuple(votes), declared))
        except DataError as exc:
            raise ParseError(row_no, "faces", str(exc)) from None
    return records


def write_triplets(records: Sequence[TripletRecord], stream: TextIO) -> None:
    """Write records in the canonical triplet format (header + rows, LF endings)."""
    n_votes = max((len(r.votes) for r in records), default=0)
    schema = canonical_schema(n_votes)
    header = _required_fields() + ["type"]
    for r_name, v_name in schema["votes"]:
        header += [r_name, v_name]
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(header)
    for rec in records:
        row = []
        for face in rec.faces:
            row.append(face.source_uri or face.id)
            box = face.bbox if face.bbox is not None else (0.0, 1.0, 0.0, 1.0)
            row.extend(repr(float(v)) for v in box)
        row.append(rec.declared_type.value if rec.declared_type else "")
        for vote in rec.votes:
            row += [vote.rater_id, str(vote.choice)]
        row += [""] * (2 * (n_votes - len(rec.votes)))
        writer.writerow(row)


def read_triplet_file(path, schema: Mapping | None = None) -> list[TripletRecord]:
    with open(path, newline="", encoding="utf-8") as fh:
        return parse_triplets(fh, schema)


def write_triplet_file(records: Sequence[TripletRecord], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        write_triplets(records, fh)


# --------------------------------------------------------------------------
# feature files
# --------------------------------------------------------------------------

FEATURE_MAGIC = b"TRIF"


def write_features(store: Mapping[str, np.ndarray], path, binary: bool = False) -> None:
    """Write an id -> vector map as text rows (``id,v1,...``) or the TRIF binary."""
    dims = {np.asarray(v).shape[0] for v in store.values()}
    if len(dims) > 1:
        raise DataError(f"feature dimension mismatch: {sorted(dims)}")
    dim = dims.pop() if dims else 0
    if binary:
        with open(path, "wb") as fh:
            fh.write(FEATURE_MAGIC + struct.pack("<II", 1, dim))
            for key, vec in store.items():
                raw = key.encode("utf-8")
                fh.write(struct.pack("<H", len(raw)) + raw)
                fh.write(np.asarray(vec, dtype="<f4").tobytes())
    else:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            for key, vec in store.items():
                fh.write(key + "," + ",".join(repr(float(x)) for x in vec) + "\n")


def read_features(path) -> dict[str, np.ndarray]:
    """Read a feature file; the binary layout is detected by its magic bytes."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] == FEATURE_MAGIC:
        return _read_binary_features(data)
    store: dict[str, np.ndarray] = {}
    dim = None
    for line_no, line in enumerate(data.decode("utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        key, *vals = line.split(",")
        try:
            vec = np.array([float(v) for v in vals])
        except ValueError:
            raise ParseError(line_no, "feature", "non-numeric feature value") from None
        if dim is None:
            dim = vec.shape[0]
        elif vec.shape[0] != dim:
            raise DataError(f"feature dimension mismatch at row {line_no}: {vec.shape[0]} != {dim}")
        store[key.strip()] = vec
    return store


def _read_binary_features(data: bytes) -> dict[str, np.ndarray]:
    version, dim = struct.unpack_from("<II", data, 4)
    if version != 1:
        raise DataError(f"unsupported feature file version {version}")
    store = {}
    off = 12
    while off < len(data):
        (n,) = struct.unpack_from("<H", data, off)
        off += 2
        key = data[off:off + n].decode("utf-8")
        off += n
        vec = np.frombuffer(data, dtype="<f4", count=dim, offset=off).astype(np.float64)
        off += 4 * dim
        store[key] = vec
    return store


# --------------------------------------------------------------------------
# resolved arrays for training/evaluation
# --------------------------------------------------------------------------

@dataclass
class TripletArrays:
    """Triplets resolved against a feature store, as index arrays.

    ``index[i]`` holds row numbers into ``features`` for the three slots;
    ``odd[i]`` is the consensus odd slot (0, 1 or 2), -1 if there is none.
    """

    face_ids: list[str]
    features: np.ndarray
    index: np.ndarray
    odd: np.ndarray
    types: list[TripletType]
    agreements: list[Agreement]

    def __len__(self) -> int:
        return self.index.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def ordered(self) -> np.ndarray:
        """Index rows reordered to (pair a, pair b, odd c)."""
        if np.any(self.odd < 0):
            raise DataError("triplets without a consensus label cannot be ordered; filter first")
        perm = np.array([[1, 2, 0], [0, 2, 1], [0, 1, 2]])[self.odd]
        return np.take_along_axis(self.index, perm, axis=1)

    def subset(self, mask) -> "TripletArrays":
        sel = np.flatnonzero(mask)
        return TripletArrays(self.face_ids, self.features, self.index[sel], self.odd[sel],
                             [self.types[i] for i in sel], [self.agreements[i] for i in sel])

    def type_pools(self) -> dict[TripletType, np.ndarray]:
        codes = np.array([t.value for t in self.types], dtype=object)
        return {t: np.flatnonzero(codes == t.value) for t in TYPED}


def attach_features(items, store: Mapping[str, np.ndarray]) -> TripletArrays:
    """Resolve ``(record, consensus[, type])`` tuples (or bare records) against a feature store."""
    ids: dict[str, int] = {}
    index, odd, types, agreements = [], [], [], []
    dim = None
    for item in items:
        if isinstance(item, TripletRecord):
            rec, cons, ttype = item, aggregate_votes(item.votes) if item.votes else ConsensusResult(None, Agreement.NONE), None
        else:
            rec, cons = item[0], item[1]
            ttype = item[2] if len(item) > 2 else None
        row = []
        for fid in rec.face_ids:
            if fid not in ids:
                if fid not in store:
                    raise DataError(f"missing feature for {fid}")
                vec = np.asarray(store[fid])
                if dim is None:
                    dim = vec.shape[0]
                elif vec.shape[0] != dim:
                    raise DataError(f"feature dimension mismatch for {fid}: {vec.shape[0]} != {dim}")
                ids[fid] = len(ids)
            row.append(ids[fid])
        index.append(row)
        odd.append(cons.label - 1 if cons.label is not None else -1)
        types.append(ttype if ttype is not None else triplet_type(rec))
        agreements.append(cons.agreement)
    face_ids = list(ids)
    feats = np.array([np.asarray(store[f], dtype=np.float64) for f in face_ids]) if face_ids \
        else np.zeros((0, 0))
    return TripletArrays(face_ids, feats, np.array(index, dtype=np.int64).reshape(-1, 3),
                         np.array(odd, dtype=np.int64), types, agreements)


# --------------------------------------------------------------------------
# statistics
# --------------------------------------------------------------------------

def dataset_stats(items) -> dict:
    """Counts in the {agreement policy} x {triplet type} grid plus distinct faces.

    ``items`` are ``(record, consensus[, type])`` tuples. Untyped (OTHER)
    triplets count only towards the "all" type column.
    """
    table: dict[tuple[str, str], int] = {}
    for policy in AgreementPolicy:
        for col in [t.value for t in TYPED] + ["all"]:
            table[(policy.value, col)] = 0
    faces = set()
    for item in items:
        rec, cons = item[0], item[1]
        ttype = item[2] if len(item) > 2 else triplet_type(rec)
        faces.update(rec.face_ids)
        for policy in AgreementPolicy:
            if _keeps(cons.agreement, policy, require_label=False):
                table[(policy.value, "all")] += 1
                if ttype in TYPED:
                    table[(policy.value, ttype.value)] += 1
    return {"counts": table, "faces": len(faces)}


def format_stats_table(stats: dict) -> str:
    cols = ["One-class", "Two-class", "Three-class", "All"]
    keys = [t.value for t in TYPED] + ["all"]
    rows = {"strong": "Strong", "strong+weak": "Strong + Weak", "all": "All"}
    out = io.StringIO()
    out.write("Rater agreement," + ",".join(cols) + ",Faces\n")
    for i, (pkey, pname) in enumerate(rows.items()):
        vals = [str(stats["counts"][(pkey, k)]) for k in keys]
        faces = str(stats["faces"]) if i == 0 else ""
        out.write(f"{pname}," + ",".join(vals) + f",{faces}\n")
    return out.getvalue()


def consensus_all(records: Sequence[TripletRecord]) -> list[tuple[TripletRecord, ConsensusResult, TripletType]]:
    out = []
    for rec in records:
        cons = aggregate_votes(rec.votes) if rec.votes else ConsensusResult(None, Agreement.NONE)
        out.append((rec, cons, triplet_type(rec)))
    return out


def vote_counts(votes: Sequence[RaterVote]) -> Counter:
    return Counter(v.choice for v in votes)
