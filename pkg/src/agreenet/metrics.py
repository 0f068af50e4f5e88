"""Agreement metrics between raters: Cohen's kappa and the agreement ratio."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from .dataset import MISSING, AnnotationSet


class NoOverlapError(ValueError):
    pass


def sigmoid(x):
    """Logistic ``1 / (1 + e^-x)``, overflow-free for large ``|x|``."""
    x = np.asarray(x, dtype=np.float64)
    with np.errstate(over="ignore", invalid="ignore"):
        return np.where(x >= 0, 1.0 / (1.0 + np.exp(-x)), np.exp(x) / (1.0 + np.exp(x)))


def _as_labels(x) -> np.ndarray:
    """Float view with NaN for missing (``None``, NaN or ``MISSING``)."""
    arr = np.array([np.nan if v is None else v for v in x] if isinstance(x, list) else x, dtype=np.float64)
    arr = arr.ravel().copy()
    arr[arr == MISSING] = np.nan
    return arr


def confusion_matrix(a, b, n_classes: int = 2) -> np.ndarray:
    """Counts ``c[x, y]`` over pairs where both raters are present."""
    a, b = _as_labels(a), _as_labels(b)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.size} vs {b.size}")
    both = ~np.isnan(a) & ~np.isnan(b)
    if not both.any():
        raise NoOverlapError("no overlapping labelled pairs")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (a[both].astype(int), b[both].astype(int)), 1)
    return cm


def _weighted_kappa_from_cm(cm: np.ndarray, weights: np.ndarray) -> float:
    total = cm.sum()
    obs = cm / total
    exp = np.outer(cm.sum(axis=1), cm.sum(axis=0)) / total**2
    d_exp = float((weights * exp).sum())
    d_obs = float((weights * obs).sum())
    if d_exp == 0.0:
        # Both raters constant on the same class.
        return 1.0 if d_obs == 0.0 else 0.0
    return 1.0 - d_obs / d_exp


def cohens_kappa(a, b) -> float:
    """Cohen's kappa on the pairs where both raters gave a label.

    When chance agreement is 1 (both raters constant and identical) the
    result is 1 for identical vectors and 0 otherwise.
    """
    cm = confusion_matrix(a, b)
    total = cm.sum()
    p_o = np.trace(cm) / total
    p_e = float(cm.sum(axis=1) @ cm.sum(axis=0)) / total**2
    if p_e == 1.0:
        return 1.0 if p_o == 1.0 else 0.0
    return float((p_o - p_e) / (1.0 - p_e))


def linear_weighted_kappa(a, b, n_classes: int = 2) -> float:
    """Weighted kappa with disagreement weight ``|x - y| / (K - 1)``."""
    cm = confusion_matrix(a, b, n_classes)
    k = np.arange(n_classes)
    weights = np.abs(k[:, None] - k[None, :]) / (n_classes - 1)
    return _weighted_kappa_from_cm(cm, weights)


@dataclass
class EvalReport:
    delta: float
    per_annotator_kappa: dict
    inter_annotator_kappa: dict
    n_eval: int
    excluded_pairs: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "delta": self.delta,
            "per_annotator_kappa": dict(self.per_annotator_kappa),
            "inter_annotator_kappa": dict(self.inter_annotator_kappa),
            "n_eval": self.n_eval,
        }

    def to_json(self, **kwargs) -> str:
        kwargs.setdefault("indent", 2)
        kwargs.setdefault("sort_keys", True)
        return json.dumps(self.to_dict(), **kwargs)

    def recompute_delta(self) -> float:
        num = np.mean([sigmoid(k) for k in self.per_annotator_kappa.values()])
        den = np.mean([sigmoid(k) for k in self.inter_annotator_kappa.values()])
        return float(num / den)


def pair_key(a: str, b: str) -> str:
    return f"{a}|{b}"


def _delta(predictions, label_cols, names) -> EvalReport:
    per = {}
    for name, col in zip(names, label_cols):
        try:
            per[name] = cohens_kappa(predictions, col)
        except NoOverlapError:
            continue
    if not per:
        raise NoOverlapError("predictions share no labelled samples with any annotator")
    inter, excluded = {}, []
    for (na, ca), (nb, cb) in combinations(zip(names, label_cols), 2):
        try:
            inter[pair_key(na, nb)] = cohens_kappa(ca, cb)
        except NoOverlapError:
            excluded.append(pair_key(na, nb))
    if not inter:
        raise NoOverlapError("no annotator pair has overlapping labels")
    num = sum(float(sigmoid(k)) for k in per.values()) / len(per)
    den = sum(float(sigmoid(k)) for k in inter.values()) / len(inter)
    return EvalReport(
        delta=num / den,
        per_annotator_kappa=per,
        inter_annotator_kappa=inter,
        n_eval=len(np.asarray(predictions)),
        excluded_pairs=excluded,
    )


def agreement_ratio(predictions, a: AnnotationSet) -> EvalReport:
    """Mean model-annotator sigmoid(kappa) over mean annotator-pair sigmoid(kappa).

    Annotator pairs are unordered; pairs without overlapping labels are
    dropped from the denominator's average.
    """
    predictions = np.asarray(predictions)
    if predictions.shape != (a.n_samples,):
        raise ValueError(f"expected {a.n_samples} predictions, got shape {predictions.shape}")
    if not np.isin(predictions, (0, 1)).all():
        raise ValueError("predictions must be binary")
    cols = [a.labels[:, j] for j in range(a.n_annotators)]
    return _delta(predictions, cols, a.annotator_ids)


def annotator_vs_rest(a: AnnotationSet, j: int) -> EvalReport:
    """Agreement ratio of annotator ``j`` treated as a model against the others.

    Only samples labelled by ``j`` are scored.
    """
    if not 0 <= j < a.n_annotators:
        raise IndexError(f"annotator index {j} out of range for J={a.n_annotators}")
    rest = [k for k in range(a.n_annotators) if k != j]
    cols = [a.labels[:, k] for k in rest]
    names = [a.annotator_ids[k] for k in rest]
    report = _delta(a.labels[:, j], cols, names)
    report.n_eval = int((a.labels[:, j] != MISSING).sum())
    return report
