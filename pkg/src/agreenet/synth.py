"""Synthetic multi-annotator benchmark.

Features come from two overlapping Gaussian clusters. Annotator 1 reports
the latent class exactly; every further annotator flips those reference
labels at a per-class rate found by bisection so that its Cohen's kappa
against the reference hits a requested value.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from itertools import combinations
from pathlib import Path

import numpy as np

from .dataset import MISSING, AnnotationSet, save_jsonl
from .metrics import cohens_kappa

KAPPA_TOLERANCE = 0.02
CALIBRATION_TOLERANCE = 0.01
MAX_BISECTIONS = 40
MAX_FLIP_RATE = 0.5


class CalibrationError(RuntimeError):
    def __init__(self, message, achieved_kappa=None):
        self.achieved_kappa = achieved_kappa
        super().__init__(message)


@dataclass(frozen=True)
class AnnotatorSpec:
    target_kappa: float = 1.0
    flip_bias: float = 0.0

    def __post_init__(self):
        if not 0 < self.target_kappa <= 1:
            raise ValueError("target_kappa must lie in (0, 1]")
        if not 0 <= self.flip_bias <= 1:
            raise ValueError("flip_bias must lie in [0, 1]")


@dataclass(frozen=True)
class SynthSpec:
    """Benchmark description.

    ``annotators`` lists the annotators *after* the reference annotator, so
    the generated set has ``len(annotators) + 1`` columns.
    """

    n_samples: int
    feature_dim: int
    seed: int
    annotators: tuple = field(default_factory=lambda: (AnnotatorSpec(0.8), AnnotatorSpec(0.75)))
    class_balance: float = 0.5
    boundary_noise: float = 1.0
    missing_rate: float = 0.0

    def __post_init__(self):
        anns = tuple(a if isinstance(a, AnnotatorSpec) else AnnotatorSpec(**a) for a in self.annotators)
        object.__setattr__(self, "annotators", anns)
        if self.n_samples < 2 or self.feature_dim < 1:
            raise ValueError("need n_samples >= 2 and feature_dim >= 1")
        if not anns:
            raise ValueError("need at least one annotator besides the reference")
        if not 0 < self.class_balance < 1:
            raise ValueError("class_balance must lie in (0, 1)")
        if self.boundary_noise < 0:
            raise ValueError("boundary_noise must be >= 0")
        if not 0 <= self.missing_rate < 1:
            raise ValueError("missing_rate must lie in [0, 1)")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        if "seed" not in d:
            raise ValueError("synth spec requires a 'seed'")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["annotators"] = [asdict(a) for a in self.annotators]
        return d


def _class_rates(flip_rate: float, flip_bias: float) -> np.ndarray:
    """Per-class flip probabilities ``[negatives, positives]``.

    ``flip_bias`` moves flips from negatives onto positives; at 1 only
    positive labels are flipped (at twice the base rate).
    """
    return np.array([flip_rate * (1.0 - flip_bias), flip_rate * (1.0 + flip_bias)])


def apply_flips(reference, uniforms, flip_rate, flip_bias=0.0) -> np.ndarray:
    flips = uniforms < _class_rates(flip_rate, flip_bias)[reference]
    return np.where(flips, 1 - reference, reference).astype(np.int8)


def _bisect_flip_rate(reference, uniforms, target, flip_bias, tol=CALIBRATION_TOLERANCE):
    """Flip rate whose realized kappa on these draws is within ``tol`` of ``target``.

    The uniforms are held fixed across probes, so realized kappa is a
    monotone step function of the rate.
    """
    if target >= 1.0:
        return 0.0, 1.0

    def realized(rate):
        return cohens_kappa(reference, apply_flips(reference, uniforms, rate, flip_bias))

    k_hi = realized(MAX_FLIP_RATE)
    if k_hi > target:
        raise CalibrationError(
            f"target kappa {target} not bracketed: kappa at the maximal flip rate is {k_hi:.4f}",
            k_hi,
        )
    lo, hi = 0.0, MAX_FLIP_RATE
    best_rate, best_k = MAX_FLIP_RATE, k_hi
    for _ in range(MAX_BISECTIONS):
        mid = 0.5 * (lo + hi)
        k = realized(mid)
        if abs(k - target) < abs(best_k - target):
            best_rate, best_k = mid, k
        if abs(k - target) <= tol:
            return mid, k
        if k > target:
            lo = mid
        else:
            hi = mid
    return best_rate, best_k


def calibrate_flip_rate(target_kappa, class_balance, n, seed, flip_bias=0.0) -> float:
    """Bisection for the flip rate giving ``target_kappa`` against a Bernoulli reference.

    Kappa at each probe is estimated by Monte Carlo on ``n`` draws.
    """
    if not 0 < target_kappa <= 1:
        raise ValueError("target_kappa must lie in (0, 1]")
    rng = np.random.default_rng(seed)
    reference = (rng.random(n) < class_balance).astype(np.int8)
    uniforms = rng.random(n)
    rate, _ = _bisect_flip_rate(reference, uniforms, target_kappa, flip_bias)
    return rate


@dataclass
class SynthResult:
    data: AnnotationSet
    latent: np.ndarray
    flip_rates: list
    reference_kappas: list
    spec: SynthSpec

    def sidecar(self) -> dict:
        """Realized kappas: each annotator vs the reference (before masking) and
        every annotator pair on their overlap (after masking)."""
        a = self.data
        pairwise = {}
        for j, k in combinations(range(a.n_annotators), 2):
            try:
                kap = cohens_kappa(a.labels[:, j], a.labels[:, k])
            except ValueError:
                kap = None
            pairwise[f"{a.annotator_ids[j]}|{a.annotator_ids[k]}"] = kap
        return {
            "spec": self.spec.to_dict(),
            "reference_annotator": a.annotator_ids[0],
            "kappa_vs_reference": dict(zip(a.annotator_ids, self.reference_kappas)),
            "flip_rates": dict(zip(a.annotator_ids, self.flip_rates)),
            "pairwise_kappa": pairwise,
            "missing_fraction": float((a.labels == MISSING).mean()),
        }


def _missing_mask(rng, n, j, rate):
    mask = rng.random((n, j)) < rate
    while True:
        empty = mask.all(axis=1)
        if not empty.any():
            return mask
        mask[empty] = rng.random((int(empty.sum()), j)) < rate


def generate(spec: SynthSpec) -> SynthResult:
    root = np.random.SeedSequence(spec.seed)
    feat_ss, ann_ss, mask_ss = root.spawn(3)
    rng = np.random.default_rng(feat_ss)
    n, d = spec.n_samples, spec.feature_dim
    latent = (rng.random(n) < spec.class_balance).astype(np.int8)
    # random unit direction separating the two cluster means at +-1
    direction = rng.standard_normal(d)
    direction /= np.linalg.norm(direction)
    features = np.outer(2.0 * latent - 1.0, direction) + spec.boundary_noise * rng.standard_normal((n, d))

    columns = [latent.copy()]
    rates, kappas = [0.0], [1.0]
    for ann, ss in zip(spec.annotators, ann_ss.spawn(len(spec.annotators))):
        uniforms = np.random.default_rng(ss).random(n)
        rate, k = _bisect_flip_rate(latent, uniforms, ann.target_kappa, ann.flip_bias)
        if abs(k - ann.target_kappa) > KAPPA_TOLERANCE:
            raise CalibrationError(
                f"could not reach kappa {ann.target_kappa} (achieved {k:.4f})", k
            )
        columns.append(apply_flips(latent, uniforms, rate, ann.flip_bias))
        rates.append(rate)
        kappas.append(k)
    labels = np.stack(columns, axis=1)
    if spec.missing_rate > 0:
        mask = _missing_mask(np.random.default_rng(mask_ss), n, labels.shape[1], spec.missing_rate)
        labels = np.where(mask, MISSING, labels)
    data = AnnotationSet.from_arrays(
        features,
        labels,
        ids=[f"s{i:06d}" for i in range(n)],
        annotator_ids=[f"a{j + 1}" for j in range(labels.shape[1])],
    )
    return SynthResult(data, latent, rates, kappas, spec)


def write_dataset(result: SynthResult, out_dir, stem: str = "dataset") -> dict:
    """Write ``<stem>.jsonl``, ``<stem>.sidecar.json`` and the diagnostic latent labels."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "dataset": out_dir / f"{stem}.jsonl",
        "sidecar": out_dir / f"{stem}.sidecar.json",
        "latent": out_dir / f"{stem}.latent.diagnostic.json",
    }
    save_jsonl(result.data, paths["dataset"])
    with open(paths["sidecar"], "w", encoding="utf-8") as fh:
        json.dump(result.sidecar(), fh, indent=2, sort_keys=True)
    with open(paths["latent"], "w", encoding="utf-8") as fh:
        json.dump(
            {
                "note": "diagnostic only; never used for training or evaluation",
                "labels": dict(zip(result.data.ids, result.latent.tolist())),
            },
            fh,
            sort_keys=True,
        )
    return paths
