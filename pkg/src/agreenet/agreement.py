"""Agreement-learning stream.

Two variants share one interface:

* ``distributional`` -- backbone features are projected to ``n + 1`` logits,
  normalised into a distribution over the agreement levels
  ``0, 1/n, ..., 1``. Its expectation is the predicted agreement ``y_hat``;
  the full probability vector goes through a small ReLU -> logistic
  network to give the indicator ``y_tilde``.
* ``linear`` -- one logistic unit; ``y_tilde`` is ``y_hat``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .metrics import sigmoid

VARIANTS = ("distributional", "linear")


def bin_values(n: int) -> np.ndarray:
    if n < 2:
        raise ValueError("need at least 2 bins (n >= 2)")
    return np.arange(n + 1) / n


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass(frozen=True)
class AgreementDistribution:
    bin_values: np.ndarray
    probabilities: np.ndarray

    def __post_init__(self):
        bins = np.asarray(self.bin_values, dtype=np.float64)
        probs = np.asarray(self.probabilities, dtype=np.float64)
        n = bins.size - 1
        if n < 2 or probs.shape[-1] != bins.size:
            raise ValueError("need n + 1 >= 3 bins and matching probability length")
        if not np.allclose(bins, np.arange(n + 1) / n, rtol=0, atol=1e-12):
            raise ValueError("bin values must be uniform on [0, 1] with step 1/n")
        if np.any(probs < 0) or np.any(probs > 1):
            raise ValueError("probabilities must lie in [0, 1]")
        if np.any(np.abs(probs.sum(axis=-1) - 1.0) > 1e-9):
            raise ValueError("probabilities must sum to 1")
        object.__setattr__(self, "bin_values", bins)
        object.__setattr__(self, "probabilities", probs)

    @classmethod
    def from_probabilities(cls, probabilities) -> "AgreementDistribution":
        probabilities = np.asarray(probabilities, dtype=np.float64)
        return cls(bin_values(probabilities.shape[-1] - 1), probabilities)

    @property
    def n(self) -> int:
        return self.bin_values.size - 1


def distribution_readout(dist: AgreementDistribution):
    """Expected agreement level under the distribution."""
    return dist.probabilities @ dist.bin_values


@dataclass
class AgreementHeadParams:
    """Agreement-head weights; arrays may be views into a model's parameter store.

    Shapes, with ``H`` the backbone width and ``K`` the indicator width:
    distributional -- ``proj_W (H, n+1)``, ``proj_b (n+1,)``,
    ``ind_W1 (n+1, K)``, ``ind_b1 (K,)``, ``ind_w2 (K,)``, ``ind_b2 ()``;
    linear -- ``lin_w (H,)``, ``lin_b ()``.
    """

    variant: str
    n_bins: int | None = None
    proj_W: np.ndarray | None = None
    proj_b: np.ndarray | None = None
    ind_W1: np.ndarray | None = None
    ind_b1: np.ndarray | None = None
    ind_w2: np.ndarray | None = None
    ind_b2: np.ndarray | None = None
    lin_w: np.ndarray | None = None
    lin_b: np.ndarray | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")


def _require(params: AgreementHeadParams, variant: str):
    if params.variant != variant:
        raise ValueError(f"{variant} operation called on a {params.variant} head")


def indicator(dist, params: AgreementHeadParams):
    """Agreement indicator from the whole probability vector.

    ``logistic(w2 . relu(W1^T G + b1) + b2)``; works on a single
    distribution or a batch of them (``(..., n+1)``).
    """
    _require(params, "distributional")
    probs = dist.probabilities if isinstance(dist, AgreementDistribution) else np.asarray(dist)
    hidden = np.maximum(probs @ params.ind_W1 + params.ind_b1, 0.0)
    return sigmoid(hidden @ params.ind_w2 + params.ind_b2)


def linear_indicator(features, params: AgreementHeadParams):
    _require(params, "linear")
    y_hat = sigmoid(np.asarray(features) @ params.lin_w + params.lin_b)
    return y_hat, y_hat


def head_forward(h: np.ndarray, params: AgreementHeadParams):
    """Batch forward from backbone features ``h (B, H)``.

    Returns ``(y_hat, y_tilde, cache)``.
    """
    if params.variant == "linear":
        y_hat, y_tilde = linear_indicator(h, params)
        return y_hat, y_tilde, {"h": h, "y_hat": y_hat}
    bins = bin_values(params.n_bins)
    probs = softmax(h @ params.proj_W + params.proj_b)
    pre = probs @ params.ind_W1 + params.ind_b1
    hidden = np.maximum(pre, 0.0)
    y_tilde = sigmoid(hidden @ params.ind_w2 + params.ind_b2)
    y_hat = probs @ bins
    cache = {"h": h, "probs": probs, "pre": pre, "hidden": hidden, "y_tilde": y_tilde, "bins": bins}
    return y_hat, y_tilde, cache


def head_backward(cache, params: AgreementHeadParams, d_y_hat, d_y_tilde):
    """Gradients of the head parameters and of the backbone features.

    Returns ``(grads, d_h)`` with ``grads`` keyed like the
    AgreementHeadParams fields.
    """
    h = cache["h"]
    if params.variant == "linear":
        y = cache["y_hat"]
        dz = (d_y_hat + d_y_tilde) * y * (1.0 - y)
        grads = {"lin_w": h.T @ dz, "lin_b": np.asarray(dz.sum())}
        return grads, np.outer(dz, params.lin_w)
    probs, hidden, y_tilde = cache["probs"], cache["hidden"], cache["y_tilde"]
    dv = d_y_tilde * y_tilde * (1.0 - y_tilde)
    grads = {"ind_w2": hidden.T @ dv, "ind_b2": np.asarray(dv.sum())}
    d_pre = np.outer(dv, params.ind_w2) * (cache["pre"] > 0)
    grads["ind_W1"] = probs.T @ d_pre
    grads["ind_b1"] = d_pre.sum(axis=0)
    d_probs = d_pre @ params.ind_W1.T + np.outer(d_y_hat, cache["bins"])
    d_logits = probs * (d_probs - (d_probs * probs).sum(axis=1, keepdims=True))
    grads["proj_W"] = h.T @ d_logits
    grads["proj_b"] = d_logits.sum(axis=0)
    return grads, d_logits @ params.proj_W.T
