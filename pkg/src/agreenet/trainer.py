"""Joint training of both streams and evaluation by agreement ratio."""

from __future__ import annotations

import io
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .dataset import AnnotationSet, agreement_targets, majority_vote
from .losses import LossConfig, annotator_gammas
from .metrics import EvalReport, NoOverlapError, agreement_ratio
from .model import PARADIGMS, TwoStreamModel, forward, joint_loss

log = logging.getLogger(__name__)

SEED_STREAMS = {"data": 0, "init": 1, "shuffle": 2, "split": 3}
MONITORS = ("total_loss", "val_delta")
HISTORY_COLUMNS = ("epoch", "classifier_loss", "agreement_loss", "total_loss", "lr", "delta")


class ConfigError(ValueError):
    pass


def sub_rng(seed: int, stream: str) -> np.random.Generator:
    """Independent generator for one named randomness stream of a run."""
    return np.random.default_rng([int(seed), SEED_STREAMS[stream]])


def sub_seed(seed: int, stream: str) -> int:
    return int(sub_rng(seed, stream).integers(2**31 - 1))


@dataclass(frozen=True)
class TrainConfig:
    paradigm: str = "learn2agree"
    loss: LossConfig = field(default_factory=LossConfig)
    epochs: int = 50
    learning_rate: float = 1e-4
    lr_patience: int = 10
    lr_factor: float = 0.1
    batch_size: int = 32
    seed: int = 0
    eval_split: float | list = 0.2
    monitor: str = "total_loss"
    tie_break: str = "negative"
    threshold: float = 0.5

    def __post_init__(self):
        if self.paradigm not in PARADIGMS:
            raise ConfigError(f"paradigm must be one of {PARADIGMS}")
        if self.paradigm == "learn2agree" and self.loss.agreement_loss is None:
            raise ConfigError("learn2agree needs an agreement_loss ('ar' or 'rmse')")
        if self.paradigm != "learn2agree" and self.loss.agreement_loss is not None:
            raise ConfigError(
                f"agreement_loss={self.loss.agreement_loss!r} is only valid with paradigm learn2agree"
            )
        if self.epochs < 1 or self.batch_size < 1 or self.lr_patience < 1:
            raise ConfigError("epochs, batch_size and lr_patience must be >= 1")
        if not self.learning_rate > 0 or not 0 < self.lr_factor < 1:
            raise ConfigError("learning_rate must be > 0 and lr_factor in (0, 1)")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")
        if isinstance(self.eval_split, (int, float)) and not 0 <= self.eval_split < 1:
            raise ConfigError("eval_split fraction must lie in [0, 1)")
        if self.monitor not in MONITORS:
            raise ConfigError(f"monitor must be one of {MONITORS}")
        if not 0 < self.threshold < 1:
            raise ConfigError("threshold must lie in (0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss"] = self.loss.to_dict()
        return d


class Adam:
    """Adam with bias-corrected moment estimates."""

    def __init__(self, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, g in grads.items():
            if name not in self.m:
                self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            m = self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            v = self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            params[name] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class PlateauSchedule:
    """Multiply the learning rate by ``factor`` after ``patience`` epochs without improvement."""

    def __init__(self, patience=10, factor=0.1, mode="min"):
        self.patience = patience
        self.factor = factor
        self.mode = mode
        self.best = math.inf if mode == "min" else -math.inf
        self.wait = 0

    def step(self, value: float, lr: float) -> float:
        if not math.isfinite(value):
            improved = False
        elif self.mode == "min":
            improved = value < self.best
        else:
            improved = value > self.best
        if improved:
            self.best = value
            self.wait = 0
            return lr
        self.wait += 1
        if self.wait >= self.patience:
            self.wait = 0
            return lr * self.factor
        return lr


@dataclass
class History:
    rows: list = field(default_factory=list)
    train_index: np.ndarray | None = None
    eval_index: np.ndarray | None = None

    def column(self, name: str) -> list:
        return [r[name] for r in self.rows]

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(",".join(HISTORY_COLUMNS) + "\n")
        for r in self.rows:
            cells = []
            for c in HISTORY_COLUMNS:
                v = r[c]
                cells.append("" if isinstance(v, float) and math.isnan(v) else repr(v))
            buf.write(",".join(cells) + "\n")
        return buf.getvalue()

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(self.to_csv())


def split_indices(data: AnnotationSet, cfg: TrainConfig):
    n = data.n_samples
    if isinstance(cfg.eval_split, (list, tuple)):
        wanted = set(map(str, cfg.eval_split))
        unknown = wanted - set(data.ids)
        if unknown:
            raise ConfigError(f"eval_split names unknown sample ids: {sorted(unknown)[:5]}")
        mask = np.array([i in wanted for i in data.ids])
        return np.flatnonzero(~mask), np.flatnonzero(mask)
    n_eval = int(round(cfg.eval_split * n))
    perm = sub_rng(cfg.seed, "split").permutation(n)
    return np.sort(perm[n_eval:]), np.sort(perm[:n_eval])


def evaluate(model: TwoStreamModel, data: AnnotationSet, threshold: float = 0.5,
             use_regularized: bool = True) -> EvalReport:
    """Agreement ratio of thresholded predictions (``p >= threshold``)."""
    out = forward(model, data.features)
    p = out.p_tilde if use_regularized else out.p_hat
    return agreement_ratio((p >= threshold).astype(np.int8), data)


def _training_labels(data: AnnotationSet, cfg: TrainConfig) -> np.ndarray:
    if cfg.paradigm == "majority_voting":
        return majority_vote(data, cfg.tie_break)[:, None]
    return np.asarray(data.labels)


def train(model: TwoStreamModel, data: AnnotationSet, cfg: TrainConfig):
    """Train in place; returns ``(model, history)``.

    The model's ``lam`` is ignored outside ``learn2agree``, where the
    classifier is trained and evaluated on ``p_hat`` directly.
    """
    if model.config.input_dim != data.dim:
        raise ConfigError(f"model expects d={model.config.input_dim}, data has d={data.dim}")
    train_idx, eval_idx = split_indices(data, cfg)
    if train_idx.size == 0:
        raise ConfigError("empty training split")
    train_set = data.subset(train_idx)
    eval_set = data.subset(eval_idx) if eval_idx.size else None
    x = train_set.features
    labels = _training_labels(train_set, cfg)
    alpha = agreement_targets(train_set)
    gammas = None
    if cfg.loss.classifier_loss == "focal_ce":
        if cfg.loss.auto_gamma:
            gammas = annotator_gammas(labels)
        else:
            gammas = np.full(labels.shape[1], float(cfg.loss.gamma))
    l2a = cfg.paradigm == "learn2agree"

    opt = Adam(cfg.learning_rate)
    sched = PlateauSchedule(cfg.lr_patience, cfg.lr_factor, "min" if cfg.monitor == "total_loss" else "max")
    shuffle = sub_rng(cfg.seed, "shuffle")
    history = History(train_index=train_idx, eval_index=eval_idx)
    n = x.shape[0]
    for epoch in range(1, cfg.epochs + 1):
        perm = shuffle.permutation(n)
        sums = np.zeros(3)
        n_batches = 0
        stats: dict = {}
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            values, grads = joint_loss(
                model, x[idx], labels[idx], cfg.loss, cfg.paradigm,
                alpha=alpha[idx], gammas=gammas, stats=stats,
            )
            opt.step(model.params, grads)
            model.touch()
            sums += (values.classifier, values.agreement, values.total)
            n_batches += 1
        if stats.get("wkl_skipped"):
            log.warning("epoch %d: %d single-class annotator batches skipped in WKL",
                        epoch, stats["wkl_skipped"])
        means = sums / n_batches
        delta = math.nan
        if eval_set is not None:
            try:
                delta = evaluate(model, eval_set, cfg.threshold, use_regularized=l2a).delta
            except NoOverlapError as exc:
                log.warning("epoch %d: agreement ratio undefined (%s)", epoch, exc)
        lr = opt.lr
        history.rows.append({
            "epoch": epoch,
            "classifier_loss": float(means[0]),
            "agreement_loss": float(means[1]),
            "total_loss": float(means[2]),
            "lr": lr,
            "delta": float(delta),
        })
        monitored = means[2] if cfg.monitor == "total_loss" else delta
        opt.lr = sched.step(float(monitored), lr)
    return model, history
