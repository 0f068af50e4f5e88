"""Multi-annotator binary datasets.

Labels are stored as an ``N x J`` int8 matrix where ``MISSING`` (-1) marks an
annotator who did not label a sample. Missing entries are never imputed.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

MISSING = -1


class DataValidationError(ValueError):
    """Raised when a dataset violates an AnnotationSet invariant."""

    def __init__(self, message, path=None, line=None, sample_id=None):
        self.path = path
        self.line = line
        self.sample_id = sample_id
        where = []
        if path is not None:
            where.append(str(path))
        if line is not None:
            where.append(f"line {line}")
        if sample_id is not None:
            where.append(f"sample {sample_id!r}")
        prefix = ", ".join(where)
        super().__init__(f"{prefix}: {message}" if prefix else message)


class DataParseError(DataValidationError):
    """Raised for rows that cannot be parsed at all."""


@dataclass(frozen=True)
class Sample:
    id: str
    features: np.ndarray


@dataclass(frozen=True, eq=False)
class AnnotationSet:
    ids: tuple
    features: np.ndarray
    annotator_ids: tuple
    labels: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        feats = np.array(self.features, dtype=np.float64, copy=True)
        labels = np.array(self.labels, dtype=np.int8, copy=True)
        if feats.ndim != 2 or feats.shape[1] < 1:
            raise DataValidationError("features must be an N x d matrix with d >= 1")
        n, _ = feats.shape
        if n < 1:
            raise DataValidationError("dataset needs at least one sample")
        if len(self.ids) != n:
            raise DataValidationError("ids and features disagree on N")
        if labels.shape != (n, len(self.annotator_ids)):
            raise DataValidationError("labels must be N x J")
        if len(self.annotator_ids) < 2:
            raise DataValidationError("need at least two annotators")
        if len(set(self.annotator_ids)) != len(self.annotator_ids):
            raise DataValidationError("duplicate annotator ids")
        bad = ~np.isfinite(feats).all(axis=1)
        if bad.any():
            raise DataValidationError("non-finite feature value", sample_id=self.ids[int(np.argmax(bad))])
        if not np.isin(labels, (MISSING, 0, 1)).all():
            raise DataValidationError("labels must be 0, 1 or missing")
        empty = (labels == MISSING).all(axis=1)
        if empty.any():
            raise DataValidationError(
                "sample has no labels", sample_id=self.ids[int(np.argmax(empty))]
            )
        if self.weights is None:
            weights = np.ones(labels.shape)
        else:
            weights = np.array(self.weights, dtype=np.float64, copy=True)
        if weights.shape != labels.shape:
            raise DataValidationError("weights must be N x J")
        present = labels != MISSING
        if ((weights[present] <= 0) | (weights[present] > 1)).any():
            raise DataValidationError("weights must lie in (0, 1]")
        for arr in (feats, labels, weights):
            arr.flags.writeable = False
        object.__setattr__(self, "ids", tuple(str(i) for i in self.ids))
        object.__setattr__(self, "annotator_ids", tuple(str(a) for a in self.annotator_ids))
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "weights", weights)

    @classmethod
    def from_arrays(cls, features, labels, ids=None, annotator_ids=None, weights=None):
        labels = np.asarray(labels)
        if ids is None:
            ids = [str(i) for i in range(labels.shape[0])]
        if annotator_ids is None:
            annotator_ids = [f"a{j + 1}" for j in range(labels.shape[1])]
        return cls(tuple(ids), features, tuple(annotator_ids), labels, weights)

    @property
    def n_samples(self) -> int:
        return self.labels.shape[0]

    @property
    def n_annotators(self) -> int:
        return self.labels.shape[1]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def present(self) -> np.ndarray:
        return self.labels != MISSING

    @property
    def samples(self) -> list[Sample]:
        return [Sample(i, f) for i, f in zip(self.ids, self.features)]

    def subset(self, index: Sequence[int]) -> "AnnotationSet":
        """Rows ``index`` as a new set. Annotators keep their columns even if emptied."""
        index = np.asarray(index, dtype=np.int64)
        return AnnotationSet(
            tuple(self.ids[i] for i in index),
            self.features[index],
            self.annotator_ids,
            self.labels[index],
            self.weights[index],
        )


def agreement_targets(a: AnnotationSet) -> np.ndarray:
    """Per-sample agreement toward the positive class.

    Average of ``w * r`` over the annotators present on each sample, i.e. the
    positive fraction when all weights are 1.
    """
    present = a.present
    pos = np.where(present, a.weights * (a.labels == 1), 0.0)
    return pos.sum(axis=1) / present.sum(axis=1)


def majority_vote(a: AnnotationSet, tie_break: str = "negative") -> np.ndarray:
    if tie_break not in ("positive", "negative"):
        raise ValueError(f"tie_break must be 'positive' or 'negative', got {tie_break!r}")
    present = a.present
    pos = ((a.labels == 1) & present).sum(axis=1)
    neg = ((a.labels == 0) & present).sum(axis=1)
    vote = (pos > neg).astype(np.int8)
    ties = pos == neg
    vote[ties] = 1 if tie_break == "positive" else 0
    return vote


def annotator_class_counts(a: AnnotationSet, j: int) -> tuple[int, int, int]:
    """``(n_pos, n_neg, n_labelled)`` over annotator ``j``'s present labels."""
    if not 0 <= j < a.n_annotators:
        raise IndexError(f"annotator index {j} out of range for J={a.n_annotators}")
    col = a.labels[:, j]
    n_pos = int((col == 1).sum())
    n_neg = int((col == 0).sum())
    return n_pos, n_neg, n_pos + n_neg


# --- file formats ---------------------------------------------------------------


def _parse_label(value, path, line, sid):
    if value is None or value == "":
        return MISSING
    if isinstance(value, bool):
        raise DataValidationError(f"label {value!r} is not 0/1", path, line, sid)
    if isinstance(value, str):
        try:
            value = float(value)
        except ValueError:
            raise DataValidationError(f"label {value!r} is not 0/1", path, line, sid) from None
    if isinstance(value, (int, float)) and value in (0, 1):
        return int(value)
    raise DataValidationError(f"label {value!r} is not 0/1", path, line, sid)


def _assemble(rows, annotators, path):
    """rows: list of (line, id, features, {annotator: label})."""
    if not rows:
        raise DataValidationError("no samples", path)
    dims = {len(r[2]) for r in rows}
    if len(dims) != 1:
        line, sid = next((r[0], r[1]) for r in rows if len(r[2]) != len(rows[0][2]))
        raise DataValidationError("feature dimensionality differs from first row", path, line, sid)
    col = {a: j for j, a in enumerate(annotators)}
    labels = np.full((len(rows), len(annotators)), MISSING, dtype=np.int8)
    for i, (line, sid, feats, labs) in enumerate(rows):
        if not all(math.isfinite(f) for f in feats):
            raise DataValidationError("non-finite feature value", path, line, sid)
        for ann, lab in labs.items():
            labels[i, col[ann]] = lab
        if (labels[i] == MISSING).all():
            raise DataValidationError("sample has no labels", path, line, sid)
    try:
        return AnnotationSet(
            tuple(r[1] for r in rows),
            np.array([r[2] for r in rows], dtype=np.float64),
            tuple(annotators),
            labels,
            None,
        )
    except DataValidationError as exc:
        raise DataValidationError(str(exc), path) from None


def _read_jsonl(path: Path) -> AnnotationSet:
    rows = []
    annotators: dict[str, None] = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                obj = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise DataParseError(f"invalid JSON ({exc.msg})", path, line_no) from None
            if not isinstance(obj, dict) or not {"id", "features"} <= obj.keys():
                raise DataParseError("expected an object with 'id' and 'features'", path, line_no)
            sid = str(obj["id"])
            feats = obj["features"]
            if not isinstance(feats, list) or not feats:
                raise DataParseError("'features' must be a non-empty list", path, line_no, sid)
            try:
                feats = [float(f) for f in feats]
            except (TypeError, ValueError):
                raise DataParseError("non-numeric feature", path, line_no, sid) from None
            raw_labels = obj.get("labels", {}) or {}
            if not isinstance(raw_labels, dict):
                raise DataParseError("'labels' must be an object", path, line_no, sid)
            labs = {}
            for ann, val in raw_labels.items():
                annotators.setdefault(str(ann))
                lab = _parse_label(val, path, line_no, sid)
                if lab != MISSING:
                    labs[str(ann)] = lab
            rows.append((line_no, sid, feats, labs))
    return _assemble(rows, list(annotators), path)


def _read_csv(path: Path) -> AnnotationSet:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataParseError("empty file", path, 1) from None
        if not header or header[0] != "id":
            raise DataParseError("header must start with 'id'", path, 1)
        feat_cols = [k for k, h in enumerate(header) if k > 0 and not h.startswith("ann:")]
        ann_cols = [k for k, h in enumerate(header) if h.startswith("ann:")]
        if not ann_cols or (feat_cols and max(feat_cols) > min(ann_cols)):
            raise DataParseError("expected header id,f1..fd,ann:<id>...", path, 1)
        annotators = [header[k][4:] for k in ann_cols]
        rows = []
        for line_no, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != len(header):
                raise DataParseError(
                    f"expected {len(header)} fields, got {len(rec)}", path, line_no, rec[0]
                )
            sid = rec[0]
            try:
                feats = [float(rec[k]) for k in feat_cols]
            except ValueError:
                raise DataParseError("non-numeric feature", path, line_no, sid) from None
            labs = {}
            for ann, k in zip(annotators, ann_cols):
                lab = _parse_label(rec[k].strip(), path, line_no, sid)
                if lab != MISSING:
                    labs[ann] = lab
            rows.append((line_no, sid, feats, labs))
    return _assemble(rows, annotators, path)


def load_annotations(path, format: str | None = None) -> AnnotationSet:
    path = Path(path)
    if format is None:
        format = "csv" if path.suffix.lower() == ".csv" else "jsonl"
    if format == "jsonl":
        return _read_jsonl(path)
    if format == "csv":
        return _read_csv(path)
    raise ValueError(f"unknown format {format!r}")


def _label_out(v):
    return None if v == MISSING else int(v)


def save_jsonl(a: AnnotationSet, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for i, sid in enumerate(a.ids):
            obj = {
                "id": sid,
                "features": [float(f) for f in a.features[i]],
                "labels": {ann: _label_out(a.labels[i, j]) for j, ann in enumerate(a.annotator_ids)},
            }
            fh.write(json.dumps(obj) + "\n")


def save_csv(a: AnnotationSet, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["id"] + [f"f{k + 1}" for k in range(a.dim)] + [f"ann:{x}" for x in a.annotator_ids]
        )
        for i, sid in enumerate(a.ids):
            labs = ["" if v == MISSING else str(int(v)) for v in a.labels[i]]
            writer.writerow([sid] + [repr(float(f)) for f in a.features[i]] + labs)

