"""Training losses with analytic gradients.

Every loss returns ``(value, grad)`` where ``grad`` is the derivative with
respect to the probability (or agreement) input. Element-wise losses accept
scalars or arrays and return arrays of the same shape.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, asdict

import numpy as np

from .dataset import MISSING
from .metrics import sigmoid

log = logging.getLogger(__name__)

EPS = 1e-7
KAPPA_EPS = 1e-7
DEGENERATE_GAMMA = 2.0

CLASSIFIER_LOSSES = ("focal_ce", "wkl")
AGREEMENT_LOSSES = ("ar", "rmse")


@dataclass(frozen=True)
class LossConfig:
    """Loss selection for both streams.

    ``gamma`` is either ``"auto"`` (per-annotator focusing parameter from the
    effective number of samples) or a fixed non-negative float; a fixed 0
    gives plain cross-entropy.
    """

    classifier_loss: str = "focal_ce"
    agreement_loss: str | None = "ar"
    gamma: float | str = "auto"
    stream_weight: float = 1.0

    def __post_init__(self):
        if self.classifier_loss not in CLASSIFIER_LOSSES:
            raise ValueError(f"classifier_loss must be one of {CLASSIFIER_LOSSES}")
        if self.agreement_loss is not None and self.agreement_loss not in AGREEMENT_LOSSES:
            raise ValueError(f"agreement_loss must be one of {AGREEMENT_LOSSES} or null")
        if self.gamma != "auto":
            g = float(self.gamma)
            if not np.isfinite(g) or g < 0:
                raise ValueError("fixed gamma must be finite and >= 0")
        if not np.isfinite(self.stream_weight) or self.stream_weight < 0:
            raise ValueError("stream_weight must be finite and non-negative")

    @property
    def auto_gamma(self) -> bool:
        return self.gamma == "auto"

    def to_dict(self) -> dict:
        return asdict(self)


def _check_unit(name, x):
    x = np.asarray(x, dtype=np.float64)
    if np.any((x < 0) | (x > 1)) or not np.all(np.isfinite(x)):
        raise ValueError(f"{name} must lie in [0, 1]")
    return x


# --- agreement stream ------------------------------------------------------------


def ar_loss(y_hat, alpha):
    """Agreement regression: pinball loss whose quantile is the target itself.

    ``max(alpha * (y_hat - alpha), (alpha - 1) * (y_hat - alpha))``. The
    subgradient at ``y_hat == alpha`` is taken as 0.
    """
    y_hat = _check_unit("y_hat", y_hat)
    alpha = _check_unit("alpha", alpha)
    diff = y_hat - alpha
    value = np.maximum(alpha * diff, (alpha - 1.0) * diff)
    grad = np.where(diff > 0, alpha, np.where(diff < 0, alpha - 1.0, 0.0))
    return value, grad


def rmse_loss(y_hat, alpha):
    y_hat = _check_unit("y_hat", np.atleast_1d(y_hat))
    alpha = _check_unit("alpha", np.atleast_1d(alpha))
    if y_hat.shape != alpha.shape:
        raise ValueError(f"length mismatch: {y_hat.shape} vs {alpha.shape}")
    diff = y_hat - alpha
    value = float(np.sqrt(np.mean(diff**2)))
    if value == 0.0:
        return 0.0, np.zeros_like(diff)
    return value, diff / (diff.size * value)


def agreement_loss(kind: str, y_hat, alpha):
    """Batch-level agreement loss; AR is averaged over the batch."""
    if kind == "ar":
        v, g = ar_loss(y_hat, alpha)
        return float(v.mean()), g / g.size
    if kind == "rmse":
        return rmse_loss(y_hat, alpha)
    raise ValueError(f"unknown agreement loss {kind!r}")


# --- classifier stream -----------------------------------------------------------


def focal_loss(p, g, gamma):
    """Focal loss ``-|g - p|^gamma * (g log p + (1 - g) log(1 - p))``.

    ``p`` is clamped to ``[EPS, 1 - EPS]``; the gradient is zero where the
    clamp is active.
    """
    gamma = float(gamma)
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    p_raw = np.asarray(p, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    p = np.clip(p_raw, EPS, 1.0 - EPS)
    m = np.abs(g - p)
    ce = g * np.log(p) + (1.0 - g) * np.log1p(-p)
    dce = g / p - (1.0 - g) / (1.0 - p)
    mod = m**gamma
    value = -mod * ce
    if gamma == 0.0:
        dmod = np.zeros_like(m)
    else:
        # d|g - p|/dp = sign(p - g); m > 0 after clamping
        dmod = gamma * m ** (gamma - 1.0) * np.sign(p - g)
    grad = -(dmod * ce + mod * dce)
    grad = np.where((p_raw < EPS) | (p_raw > 1.0 - EPS), 0.0, grad)
    return value, grad


def gamma_effective_number(n_majority: int, n_total: int) -> float:
    """Focusing parameter from the effective numbers of the two classes.

    ``beta = (N - 1) / N`` and ``gamma = (1 - beta**n_maj) / (1 - beta**(N - n_maj))``.
    """
    if n_total < 2 or not 0 < n_majority < n_total:
        raise ValueError(
            f"need 0 < n_majority < N_j with N_j >= 2 (got n_majority={n_majority}, N_j={n_total})"
        )
    beta = (n_total - 1) / n_total
    return float((1.0 - beta**n_majority) / (1.0 - beta ** (n_total - n_majority)))


def annotator_gammas(labels: np.ndarray) -> np.ndarray:
    """Per-column gamma for an ``N x J`` tri-state label matrix.

    Columns with a single class (or fewer than two labels) fall back to
    ``DEGENERATE_GAMMA``.
    """
    labels = np.asarray(labels)
    out = np.empty(labels.shape[1])
    for j in range(labels.shape[1]):
        col = labels[:, j]
        n_pos = int((col == 1).sum())
        n_tot = n_pos + int((col == 0).sum())
        n_maj = max(n_pos, n_tot - n_pos)
        if n_tot < 2 or n_maj == n_tot:
            log.warning("annotator column %d has a single class; gamma=%.1f", j, DEGENERATE_GAMMA)
            out[j] = DEGENERATE_GAMMA
        else:
            out[j] = gamma_effective_number(n_maj, n_tot)
    return out


def soft_kappa(p, labels):
    """Kappa between soft predictions and hard labels, with its gradient.

    The soft confusion matrix credits sample ``i`` with ``p_i`` in the
    predicted-positive row and ``1 - p_i`` in the predicted-negative row. For
    two classes the linear weighting reduces to plain disagreement.
    """
    p = np.asarray(p, dtype=np.float64)
    t = np.asarray(labels, dtype=np.float64)
    b = p.size
    t1 = t.mean()
    p1 = p.mean()
    d_obs = np.mean(p * (1.0 - t) + (1.0 - p) * t)
    d_exp = p1 * (1.0 - t1) + (1.0 - p1) * t1
    kappa = 1.0 - d_obs / d_exp
    dd_obs = (1.0 - 2.0 * t) / b
    dd_exp = (1.0 - 2.0 * t1) / b
    dkappa = -(dd_obs * d_exp - d_obs * dd_exp) / d_exp**2
    return float(kappa), dkappa


def wkl_loss(p, labels):
    """Weighted kappa loss ``log(1 - kappa)`` over one annotator's batch.

    Returns the raw value in ``(-inf, log 2]``; callers squash it with a
    sigmoid before averaging across annotators. Kappa is clamped at
    ``1 - KAPPA_EPS``. Returns ``None`` for a single-class label vector,
    where kappa is undefined.
    """
    p = np.asarray(p, dtype=np.float64)
    labels = np.asarray(labels)
    if p.size < 2:
        raise ValueError("weighted kappa loss needs at least two samples")
    if p.shape != labels.shape:
        raise ValueError("length mismatch")
    if labels.min() == labels.max():
        return None
    kappa, dkappa = soft_kappa(p, labels)
    if kappa > 1.0 - KAPPA_EPS:
        return float(np.log(KAPPA_EPS)), np.zeros_like(p)
    value = float(np.log1p(-kappa))
    return value, -dkappa / (1.0 - kappa)


def multi_annotator_loss(p, labels, gammas=None, inner: str = "focal", stats=None):
    """Classifier loss averaged over annotators, each over its own labels.

    ``labels`` is a ``B x J`` matrix using ``MISSING`` for absent labels.
    Annotators with no label in the batch are skipped and the average is
    taken over the rest. With ``inner="wkl"`` each annotator contributes one
    batch-level ``sigmoid(log(1 - kappa))`` term instead of a per-sample mean.
    Skipped single-class WKL terms are tallied in ``stats["wkl_skipped"]``.
    """
    p = np.asarray(p, dtype=np.float64)
    labels = np.asarray(labels)
    if labels.ndim == 1:
        labels = labels[:, None]
    if labels.shape[0] != p.shape[0]:
        raise ValueError("labels and predictions disagree on batch size")
    present = labels != MISSING
    counts = present.sum(axis=0)
    if not counts.any():
        raise ValueError("no annotator has a label in this batch")
    total = 0.0
    grad = np.zeros_like(p)
    used = 0
    for j in np.flatnonzero(counts):
        idx = present[:, j]
        r = labels[idx, j]
        if inner == "focal":
            gamma = 0.0 if gammas is None else gammas[j]
            v, g = focal_loss(p[idx], r, gamma)
            total += v.sum() / counts[j]
            grad[idx] += g / counts[j]
        elif inner == "wkl":
            if counts[j] < 2:
                continue
            res = wkl_loss(p[idx], r)
            if res is None:
                if stats is not None:
                    stats["wkl_skipped"] = stats.get("wkl_skipped", 0) + 1
                continue
            raw, g = res
            s = float(sigmoid(raw))
            total += s
            grad[idx] += s * (1.0 - s) * g
        else:
            raise ValueError(f"unknown inner loss {inner!r}")
        used += 1
    if used == 0:
        return 0.0, grad
    return total / used, grad / used
