"""Two-stream model: MLP backbone, classifier head and agreement head.

The classifier's positive-class probability ``p_hat`` is pulled toward the
class favoured by the agreement indicator ``y_tilde``::

    p_tilde = p_hat e^{lam (y - 0.5)} / (p_hat e^{lam (y - 0.5)} + (1 - p_hat) e^{lam (0.5 - y)})

which is evaluated as ``logit(p_tilde) = logit(p_hat) + lam (2 y - 1)``.
Backpropagation is written out by hand; ``grad_check`` compares it against
central finite differences.
"""

from __future__ import annotations

import json
from collections import OrderedDict
from dataclasses import asdict, dataclass, field

import numpy as np

from . import agreement as agr
from .dataset import MISSING
from .losses import LossConfig, agreement_loss, annotator_gammas, multi_annotator_loss
from .metrics import sigmoid

CHECKPOINT_VERSION = 1
PARADIGMS = ("majority_voting", "learn_from_all", "learn2agree")


# --- the regularization map --------------------------------------------------------


def _check_lam(lam):
    if np.any(np.asarray(lam) < 0):
        raise ValueError("lambda must be >= 0")


def regularize(p_hat, y_tilde, lam):
    """Regularized probability, computed in logit space."""
    _check_lam(lam)
    p_hat = np.asarray(p_hat, dtype=np.float64)
    with np.errstate(divide="ignore"):
        logit = np.log(p_hat) - np.log1p(-p_hat)
    return sigmoid(logit + lam * (2.0 * np.asarray(y_tilde) - 1.0))


def regularize_literal(p_hat, y_tilde, lam):
    """Same map written as the weighted two-class normalisation."""
    _check_lam(lam)
    p_hat = np.asarray(p_hat, dtype=np.float64)
    up = p_hat * np.exp(lam * (y_tilde - 0.5))
    down = (1.0 - p_hat) * np.exp(lam * (0.5 - y_tilde))
    return up / (up + down)


def regularize_grad(p_hat, y_tilde, lam):
    """``(d p_tilde / d p_hat, d p_tilde / d y_tilde)``."""
    p_tilde = regularize(p_hat, y_tilde, lam)
    s = p_tilde * (1.0 - p_tilde)
    return s / (p_hat * (1.0 - p_hat)), 2.0 * lam * s


# --- model -------------------------------------------------------------------


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int
    hidden: tuple = (64, 64)
    variant: str = "distributional"
    n_bins: int = 10
    indicator_hidden: int = 16
    lam: float = 3.0
    detach_indicator: bool = False
    zero_heads: bool = False

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.input_dim < 1:
            raise ValueError("input_dim must be >= 1")
        if self.variant not in agr.VARIANTS:
            raise ValueError(f"variant must be one of {agr.VARIANTS}")
        if self.variant == "distributional" and self.n_bins < 2:
            raise ValueError("n_bins must be >= 2")
        _check_lam(self.lam)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


@dataclass
class Forward:
    p_hat: np.ndarray
    p_tilde: np.ndarray
    y_hat: np.ndarray
    y_tilde: np.ndarray
    cache: dict = field(repr=False)


class StaleCacheError(RuntimeError):
    pass


class TwoStreamModel:
    def __init__(self, config: ModelConfig, seed: int | np.random.Generator = 0):
        self.config = config
        self.params: OrderedDict[str, np.ndarray] = OrderedDict()
        self.version = 0
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        width = config.input_dim
        for l, out in enumerate(config.hidden):
            self._add_affine(rng, f"backbone.{l}.W", f"backbone.{l}.b", width, out)
            width = out
        self.feature_dim = width
        self._add_affine(rng, "classifier.W", "classifier.b", width, 2, zero=config.zero_heads)
        if config.variant == "distributional":
            n1 = config.n_bins + 1
            k = config.indicator_hidden
            self._add_affine(rng, "agreement.proj_W", "agreement.proj_b", width, n1)
            self._add_affine(rng, "agreement.ind_W1", "agreement.ind_b1", n1, k)
            self._add_affine(rng, "agreement.ind_w2", "agreement.ind_b2", k, None, zero=config.zero_heads)
        else:
            self._add_affine(rng, "agreement.lin_w", "agreement.lin_b", width, None, zero=config.zero_heads)

    def _add_affine(self, rng, wname, bname, fan_in, fan_out, zero=False):
        shape = (fan_in,) if fan_out is None else (fan_in, fan_out)
        bound = 1.0 / np.sqrt(fan_in)
        self.params[wname] = np.zeros(shape) if zero else rng.uniform(-bound, bound, size=shape)
        self.params[bname] = np.zeros(()) if fan_out is None else np.zeros(fan_out)

    @property
    def lam(self) -> float:
        return self.config.lam

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def touch(self) -> None:
        """Mark parameters as modified; invalidates earlier forward caches."""
        self.version += 1

    def head_params(self) -> agr.AgreementHeadParams:
        kw = {k.split(".", 1)[1]: v for k, v in self.params.items() if k.startswith("agreement.")}
        return agr.AgreementHeadParams(self.config.variant, self.config.n_bins, **kw)

    def copy(self) -> "TwoStreamModel":
        other = TwoStreamModel.__new__(TwoStreamModel)
        other.config = self.config
        other.params = OrderedDict((k, v.copy()) for k, v in self.params.items())
        other.version = 0
        other.feature_dim = self.feature_dim
        return other

    # -- checkpoints --

    def to_checkpoint(self, extra: dict | None = None) -> dict:
        return {
            "version": CHECKPOINT_VERSION,
            "config": self.config.to_dict(),
            "layers": {k: list(v.shape) for k, v in self.params.items()},
            "params": {k: v.ravel().tolist() for k, v in self.params.items()},
            **({"extra": extra} if extra else {}),
        }

    def save(self, path, extra: dict | None = None) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_checkpoint(extra), fh, indent=1, sort_keys=True)

    @classmethod
    def from_checkpoint(cls, ckpt: dict) -> "TwoStreamModel":
        if ckpt.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {ckpt.get('version')!r}")
        model = cls(ModelConfig(**ckpt["config"]), seed=0)
        for name, shape in ckpt["layers"].items():
            if name not in model.params or list(model.params[name].shape) != shape:
                raise ValueError(f"checkpoint layer {name} {shape} does not match config")
            model.params[name] = np.array(ckpt["params"][name], dtype=np.float64).reshape(shape)
        return model

    @classmethod
    def load(cls, path) -> "TwoStreamModel":
        with open(path, encoding="utf-8") as fh:
            return cls.from_checkpoint(json.load(fh))


def forward(model: TwoStreamModel, x) -> Forward:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.config.input_dim:
        raise ValueError(f"expected a (B, {model.config.input_dim}) batch, got {x.shape}")
    P = model.params
    acts, pres = [x], []
    a = x
    for l in range(len(model.config.hidden)):
        z = a @ P[f"backbone.{l}.W"] + P[f"backbone.{l}.b"]
        a = np.maximum(z, 0.0)
        pres.append(z)
        acts.append(a)
    logits = a @ P["classifier.W"] + P["classifier.b"]
    logit_p = logits[:, 1] - logits[:, 0]
    p_hat = sigmoid(logit_p)
    head = model.head_params()
    y_hat, y_tilde, head_cache = agr.head_forward(a, head)
    p_tilde = sigmoid(logit_p + model.lam * (2.0 * y_tilde - 1.0))
    cache = {
        "version": model.version,
        "acts": acts,
        "pres": pres,
        "head": head_cache,
        "p_hat": p_hat,
        "p_tilde": p_tilde,
    }
    return Forward(p_hat, p_tilde, y_hat, y_tilde, cache)


def backward(model: TwoStreamModel, cache: dict, d_p_tilde=None, d_p_hat=None, d_y_hat=None):
    """Parameter gradients given loss gradients w.r.t. the model outputs.

    Any of the three output gradients may be omitted. With
    ``config.detach_indicator`` the path from ``p_tilde`` into the agreement
    head is cut.
    """
    if cache.get("version") != model.version:
        raise StaleCacheError("forward cache predates the latest parameter update")
    P = model.params
    p_hat, p_tilde = cache["p_hat"], cache["p_tilde"]
    zeros = np.zeros_like(p_hat)
    d_p_tilde = zeros if d_p_tilde is None else d_p_tilde
    d_p_hat = zeros if d_p_hat is None else d_p_hat
    d_y_hat = zeros if d_y_hat is None else d_y_hat

    d_s = d_p_tilde * p_tilde * (1.0 - p_tilde)
    d_logit = d_s + d_p_hat * p_hat * (1.0 - p_hat)
    d_y_tilde = zeros if model.config.detach_indicator else d_s * 2.0 * model.lam

    grads: dict[str, np.ndarray] = {}
    feats = cache["acts"][-1]
    d_logits = np.stack([-d_logit, d_logit], axis=1)
    grads["classifier.W"] = feats.T @ d_logits
    grads["classifier.b"] = d_logits.sum(axis=0)
    head_grads, d_feats = agr.head_backward(cache["head"], model.head_params(), d_y_hat, d_y_tilde)
    for k, v in head_grads.items():
        grads[f"agreement.{k}"] = v
    da = d_feats + d_logits @ P["classifier.W"].T
    for l in reversed(range(len(model.config.hidden))):
        dz = da * (cache["pres"][l] > 0)
        grads[f"backbone.{l}.W"] = cache["acts"][l].T @ dz
        grads[f"backbone.{l}.b"] = dz.sum(axis=0)
        if l > 0:
            da = dz @ P[f"backbone.{l}.W"].T
    return OrderedDict((k, grads[k]) for k in P)


# --- joint objective -------------------------------------------------------------


@dataclass
class LossValues:
    classifier: float
    agreement: float
    total: float


def batch_alpha(labels: np.ndarray) -> np.ndarray:
    present = labels != MISSING
    return ((labels == 1) & present).sum(axis=1) / present.sum(axis=1)


def joint_loss(
    model: TwoStreamModel,
    x,
    labels,
    loss: LossConfig,
    paradigm: str = "learn2agree",
    alpha=None,
    gammas=None,
    stats=None,
):
    """Total loss and parameter gradients on one batch.

    ``labels`` is ``B x J`` tri-state (for majority voting, pass the voted
    column). Under ``learn2agree`` the classifier loss is taken on the
    regularized probability and the agreement loss, scaled by
    ``loss.stream_weight``, on ``y_hat``; otherwise only the classifier loss
    on ``p_hat`` is used.
    """
    if paradigm not in PARADIGMS:
        raise ValueError(f"paradigm must be one of {PARADIGMS}")
    labels = np.asarray(labels)
    if labels.ndim == 1:
        labels = labels[:, None]
    out = forward(model, x)
    if loss.classifier_loss == "wkl":
        inner, gam = "wkl", None
    else:
        inner = "focal"
        if gammas is not None:
            gam = np.asarray(gammas, dtype=np.float64)
        elif loss.auto_gamma:
            gam = annotator_gammas(labels)
        else:
            gam = np.full(labels.shape[1], float(loss.gamma))
    l2a = paradigm == "learn2agree"
    p = out.p_tilde if l2a else out.p_hat
    cls_value, d_p = multi_annotator_loss(p, labels, gam, inner=inner, stats=stats)
    agr_value, d_y_hat = 0.0, None
    if l2a and loss.agreement_loss is not None:
        if alpha is None:
            alpha = batch_alpha(labels)
        agr_value, d_y_hat = agreement_loss(loss.agreement_loss, out.y_hat, alpha)
        d_y_hat = loss.stream_weight * d_y_hat
    total = cls_value + loss.stream_weight * agr_value
    if l2a:
        grads = backward(model, out.cache, d_p_tilde=d_p, d_y_hat=d_y_hat)
    else:
        grads = backward(model, out.cache, d_p_hat=d_p)
    return LossValues(cls_value, agr_value, total), grads


@dataclass
class GradCheckReport:
    errors: dict
    tolerance: float

    @property
    def passed(self) -> bool:
        return all(e < self.tolerance for e in self.errors.values())

    @property
    def failed_blocks(self) -> list:
        return [k for k, e in self.errors.items() if not e < self.tolerance]

    @property
    def max_error(self) -> float:
        return max(self.errors.values())


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """``||a - n|| / max(||a||, ||n||)``; absolute when both norms are below ``floor``."""
    diff = float(np.linalg.norm(analytic - numeric))
    scale = max(float(np.linalg.norm(analytic)), float(np.linalg.norm(numeric)))
    return diff / scale if scale > floor else diff


def grad_check(
    model: TwoStreamModel,
    x,
    labels,
    loss: LossConfig,
    tolerance: float = 1e-4,
    paradigm: str = "learn2agree",
    h: float = 1e-5,
    grads=None,
) -> GradCheckReport:
    """Compare analytic gradients with central differences of the total loss.

    ``grads`` overrides the analytic gradients (negative controls).
    """
    labels = np.asarray(labels)
    if labels.ndim == 1:
        labels = labels[:, None]
    alpha = batch_alpha(labels)
    gammas = None
    if loss.classifier_loss == "focal_ce" and loss.auto_gamma:
        gammas = annotator_gammas(labels)
    if grads is None:
        _, grads = joint_loss(model, x, labels, loss, paradigm, alpha=alpha, gammas=gammas)
    probe = model.copy()

    def total():
        return joint_loss(probe, x, labels, loss, paradigm, alpha=alpha, gammas=gammas)[0].total

    errors = {}
    for name, param in probe.params.items():
        numeric = np.zeros_like(param)
        flat, nflat = param.reshape(-1), numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            probe.touch()
            up = total()
            flat[i] = orig - h
            probe.touch()
            down = total()
            flat[i] = orig
            nflat[i] = (up - down) / (2 * h)
        probe.touch()
        errors[name] = relative_error(np.asarray(grads[name]), numeric)
    return GradCheckReport(errors, tolerance)
