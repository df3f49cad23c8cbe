"""Sample tables, their CSV interchange formats and dataset manifests.

Class convention: 0 = normal (negative), 1 = abnormal (positive).

Feature file::

    sample_id,label,f0,f1,...,f{D-1}

Prediction file::

    sample_id,label,score0,score1,predicted

Tables are immutable once constructed; every constructor validates the
table invariants, so a table that exists is a valid table.
"""
from __future__ import annotations

import csv
import io
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from shoulderx._io import atomic_write_text

IMAGE_SIZE = (320, 320, 3)


class DataError(ValueError):
    """Input data violates a format or table invariant."""


@dataclass(frozen=True)
class SampleRef:
    sample_id: str
    label: int

    def __post_init__(self):
        if not self.sample_id:
            raise DataError("sample_id must be non-empty")
        if self.label not in (0, 1):
            raise DataError(f"label must be 0 or 1, got {self.label!r}")


def _check_ids_labels(ids: Sequence[str], labels: np.ndarray) -> None:
    if len(ids) != len(labels):
        raise DataError("ids and labels differ in length")
    seen = set()
    for sid in ids:
        if not sid:
            raise DataError("empty sample_id")
        if sid in seen:
            raise DataError(f"duplicate sample_id {sid!r}")
        seen.add(sid)
    if labels.size and not np.isin(labels, (0, 1)).all():
        raise DataError("labels must be 0 or 1")


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class FeatureTable:
    """Per-sample feature vectors of a fixed dimensionality."""

    dim: int
    ids: tuple[str, ...]
    labels: np.ndarray
    features: np.ndarray

    def __post_init__(self):
        if self.dim <= 0:
            raise DataError("feature dim must be positive")
        ids = tuple(self.ids)
        labels = _frozen(np.asarray(self.labels, dtype=np.int64).reshape(-1))
        feats = _frozen(np.asarray(self.features, dtype=np.float64).reshape(len(ids), self.dim))
        _check_ids_labels(ids, labels)
        if not np.isfinite(feats).all():
            raise DataError("non-finite feature value")
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "features", feats)

    def __len__(self) -> int:
        return len(self.ids)

    def __eq__(self, other):
        if not isinstance(other, FeatureTable):
            return NotImplemented
        return (self.dim == other.dim and self.ids == other.ids
                and np.array_equal(self.labels, other.labels)
                and np.array_equal(self.features, other.features))

    @property
    def rows(self) -> list[tuple[SampleRef, np.ndarray]]:
        return [(SampleRef(i, int(l)), f) for i, l, f in zip(self.ids, self.labels, self.features)]

    def take(self, order: Sequence[int]) -> "FeatureTable":
        order = list(order)
        return FeatureTable(self.dim, tuple(self.ids[i] for i in order),
                            self.labels[order], self.features[order])


def predicted_from_scores(scores: np.ndarray) -> np.ndarray:
    """argmax over the two class scores, ties going to class 0."""
    scores = np.asarray(scores)
    return (scores[:, 1] > scores[:, 0]).astype(np.int64)


@dataclass(frozen=True, eq=False)
class PredictionTable:
    """Per-sample class scores and predicted labels.

    Scores are held as float32 so that the 9-significant-digit text form
    round-trips exactly.
    """

    ids: tuple[str, ...]
    labels: np.ndarray
    scores: np.ndarray
    predicted: np.ndarray

    def __post_init__(self):
        ids = tuple(self.ids)
        labels = _frozen(np.asarray(self.labels, dtype=np.int64).reshape(-1))
        scores = _frozen(np.asarray(self.scores, dtype=np.float32).reshape(len(ids), 2))
        pred = _frozen(np.asarray(self.predicted, dtype=np.int64).reshape(-1))
        _check_ids_labels(ids, labels)
        if len(pred) != len(ids):
            raise DataError("predicted column length mismatch")
        if not np.isfinite(scores).all() or (scores < 0).any() or (scores > 1).any():
            raise DataError("scores must be finite and within [0, 1]")
        bad = np.flatnonzero(pred != predicted_from_scores(scores))
        if bad.size:
            raise DataError(f"predicted label is not argmax of scores (tie -> 0) for {ids[bad[0]]!r}")
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "predicted", pred)

    @classmethod
    def from_scores(cls, ids: Sequence[str], labels, scores) -> "PredictionTable":
        scores = np.asarray(scores, dtype=np.float32).reshape(-1, 2)
        return cls(tuple(ids), labels, scores, predicted_from_scores(scores))

    def __len__(self) -> int:
        return len(self.ids)

    def __eq__(self, other):
        if not isinstance(other, PredictionTable):
            return NotImplemented
        return (self.ids == other.ids and np.array_equal(self.labels, other.labels)
                and np.array_equal(self.scores, other.scores)
                and np.array_equal(self.predicted, other.predicted))

    def take(self, order: Sequence[int]) -> "PredictionTable":
        order = list(order)
        return PredictionTable(tuple(self.ids[i] for i in order), self.labels[order],
                               self.scores[order], self.predicted[order])


# -- CSV I/O ---------------------------------------------------------------

def _parse_label(tok: str, where: str) -> int:
    if tok.strip() not in ("0", "1"):
        raise DataError(f"{where}: label must be 0 or 1, got {tok!r}")
    return int(tok)


def _parse_float(tok: str, where: str) -> float:
    try:
        x = float(tok)
    except ValueError:
        raise DataError(f"{where}: not a number: {tok!r}") from None
    if not math.isfinite(x):
        raise DataError(f"{where}: non-finite value {tok!r}")
    return x


def _open_rows(path: str | os.PathLike) -> tuple[list[str], Iterable[list[str]]]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"no such file: {path}")
    text = path.read_text(encoding="utf-8")
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise DataError(f"{path}: empty file (missing header)") from None
    return [h.strip() for h in header], reader


def load_feature_table(path: str | os.PathLike) -> FeatureTable:
    header, reader = _open_rows(path)
    if header[:2] != ["sample_id", "label"]:
        raise DataError(f"{path}: header must start with sample_id,label")
    dim = len(header) - 2
    if dim <= 0:
        raise DataError(f"{path}: no feature columns")
    if header[2:] != [f"f{i}" for i in range(dim)]:
        raise DataError(f"{path}: feature columns must be f0..f{dim - 1}")
    ids, labels, rows = [], [], []
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        where = f"{path}:{lineno}"
        if len(row) != dim + 2:
            raise DataError(f"{where}: expected {dim + 2} fields, got {len(row)}")
        ids.append(row[0])
        labels.append(_parse_label(row[1], where))
        rows.append([_parse_float(t, where) for t in row[2:]])
    feats = np.array(rows, dtype=np.float64).reshape(len(rows), dim)
    return FeatureTable(dim, tuple(ids), np.array(labels, dtype=np.int64), feats)


def format_feature_table(table: FeatureTable) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["sample_id", "label"] + [f"f{i}" for i in range(table.dim)])
    for sid, lab, vec in zip(table.ids, table.labels, table.features):
        w.writerow([sid, int(lab)] + [repr(float(x)) for x in vec])
    return buf.getvalue()


def write_feature_table(table: FeatureTable, path: str | os.PathLike) -> None:
    atomic_write_text(path, format_feature_table(table))


PREDICTION_HEADER = ["sample_id", "label", "score0", "score1", "predicted"]


def format_prediction_table(table: PredictionTable) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(PREDICTION_HEADER)
    for sid, lab, (s0, s1), p in zip(table.ids, table.labels, table.scores, table.predicted):
        w.writerow([sid, int(lab), f"{float(s0):.9g}", f"{float(s1):.9g}", int(p)])
    return buf.getvalue()


def write_prediction_table(table: PredictionTable, path: str | os.PathLike) -> None:
    atomic_write_text(path, format_prediction_table(table))


def load_prediction_table(path: str | os.PathLike) -> PredictionTable:
    header, reader = _open_rows(path)
    if header != PREDICTION_HEADER:
        raise DataError(f"{path}: header must be {','.join(PREDICTION_HEADER)}")
    ids, labels, scores, pred = [], [], [], []
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        where = f"{path}:{lineno}"
        if len(row) != 5:
            raise DataError(f"{where}: expected 5 fields, got {len(row)}")
        ids.append(row[0])
        labels.append(_parse_label(row[1], where))
        scores.append((_parse_float(row[2], where), _parse_float(row[3], where)))
        pred.append(_parse_label(row[4], where))
    return PredictionTable(tuple(ids), np.array(labels, dtype=np.int64),
                           np.array(scores, dtype=np.float32).reshape(-1, 2),
                           np.array(pred, dtype=np.int64))


# -- manifests -------------------------------------------------------------

@dataclass(frozen=True)
class DatasetManifest:
    split: str
    count_class0: int
    count_class1: int
    image_size: tuple[int, int, int] = IMAGE_SIZE

    def __post_init__(self):
        if self.split not in ("train", "test"):
            raise DataError(f"split must be train or test, got {self.split!r}")
        if self.count_class0 < 0 or self.count_class1 < 0:
            raise DataError("manifest counts must be non-negative")
        if tuple(self.image_size) != IMAGE_SIZE:
            raise DataError(f"image size must be {IMAGE_SIZE}, got {tuple(self.image_size)}")

    @property
    def total(self) -> int:
        return self.count_class0 + self.count_class1


_MANIFEST_KEYS = ("split", "count_class0", "count_class1", "image_h", "image_w", "image_c")


def load_manifest(path: str | os.PathLike) -> DatasetManifest:
    """Read a ``key = value`` manifest (``#`` starts a comment)."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"no such file: {path}")
    kv = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        sep = "=" if "=" in line else ":"
        if sep not in line:
            raise DataError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split(sep, 1))
        if key not in _MANIFEST_KEYS:
            raise DataError(f"{path}:{lineno}: unknown key {key!r}")
        kv[key] = value
    missing = [k for k in _MANIFEST_KEYS if k not in kv]
    if missing:
        raise DataError(f"{path}: missing keys {missing}")
    try:
        ints = {k: int(kv[k]) for k in _MANIFEST_KEYS[1:]}
    except ValueError as e:
        raise DataError(f"{path}: {e}") from None
    return DatasetManifest(kv["split"], ints["count_class0"], ints["count_class1"],
                           (ints["image_h"], ints["image_w"], ints["image_c"]))


def format_manifest(m: DatasetManifest) -> str:
    h, w, c = m.image_size
    return (f"split = {m.split}\ncount_class0 = {m.count_class0}\n"
            f"count_class1 = {m.count_class1}\nimage_h = {h}\nimage_w = {w}\nimage_c = {c}\n")


@dataclass
class ValidationReport:
    passed: bool
    expected: dict[int, int]
    observed: dict[int, int]
    deltas: dict[int, int] = field(default_factory=dict)
    failures: list[str] = field(default_factory=list)

    def __str__(self) -> str:
        lines = [f"manifest check: {'PASS' if self.passed else 'FAIL'}"]
        for c in (0, 1):
            lines.append(f"  class {c}: expected {self.expected[c]}, observed {self.observed[c]}"
                         f" (delta {self.deltas[c]:+d})")
        return "\n".join(lines)


def validate_manifest(manifest: DatasetManifest,
                      table: FeatureTable | PredictionTable) -> ValidationReport:
    """Compare per-class sample counts in ``table`` with the manifest."""
    labels = np.asarray(table.labels)
    observed = {0: int((labels == 0).sum()), 1: int((labels == 1).sum())}
    expected = {0: manifest.count_class0, 1: manifest.count_class1}
    deltas = {c: observed[c] - expected[c] for c in (0, 1)}
    failures = [f"class {c}: observed {observed[c]} != expected {expected[c]} ({deltas[c]:+d})"
                for c in (0, 1) if deltas[c]]
    return ValidationReport(not failures, expected, observed, deltas, failures)


# -- joining ---------------------------------------------------------------

@dataclass(frozen=True)
class AlignedRows:
    """Several prediction tables reindexed onto one common sample order."""

    ids: tuple[str, ...]
    labels: np.ndarray
    tables: tuple[PredictionTable, ...]

    def __len__(self) -> int:
        return len(self.ids)


def _align_order(ref_ids: Sequence[str], ref_labels, tables) -> list[list[int]]:
    ref = set(ref_ids)
    orders = []
    for k, t in enumerate(tables):
        pos = {sid: i for i, sid in enumerate(t.ids)}
        missing = sorted(ref - pos.keys())
        extra = sorted(pos.keys() - ref)
        if missing or extra:
            what = []
            if missing:
                what.append(f"table {k} lacks ids {missing[:5]}")
            if extra:
                what.append(f"table {k} has ids absent elsewhere {extra[:5]}")
            raise DataError("sample id sets differ: " + "; ".join(what))
        order = [pos[sid] for sid in ref_ids]
        diff = np.flatnonzero(np.asarray(t.labels)[order] != ref_labels)
        if diff.size:
            raise DataError(f"label disagreement for sample {ref_ids[diff[0]]!r} in table {k}")
        orders.append(order)
    return orders


def join_by_sample(tables: Sequence[PredictionTable]) -> AlignedRows:
    """Inner-join prediction tables on sample_id (first table's order wins).

    Every table must carry exactly the same id set with matching labels.
    """
    if len(tables) < 2:
        raise DataError("join needs at least two tables")
    ref = tables[0]
    orders = _align_order(ref.ids, np.asarray(ref.labels), tables)
    aligned = tuple(t.take(o) for t, o in zip(tables, orders))
    return AlignedRows(ref.ids, ref.labels, aligned)


def align_feature_tables(tables: Sequence[FeatureTable]) -> tuple[FeatureTable, ...]:
    """Reorder feature tables onto the first table's sample order."""
    if not tables:
        raise DataError("no tables to align")
    ref = tables[0]
    orders = _align_order(ref.ids, np.asarray(ref.labels), tables)
    return tuple(t.take(o) for t, o in zip(tables, orders))
