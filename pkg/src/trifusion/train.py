"""Mini-batch training: Adam on categorical cross-entropy, early stopping.

``fit`` shuffles with a generator seeded from the config, drops ragged
trailing batches in training (batch-norm needs at least two rows) but keeps
them in evaluation, tracks per-epoch curves, and restores the parameters of
the epoch with the best validation loss. With all ensemble branches frozen
it trains on cached fused features, which is exactly equivalent and much
faster.

Reported ``train_loss`` is the mean of the optimized batch losses;
``train_accuracy`` is measured at epoch end in evaluation mode, so the
record is deterministic under a fixed seed.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .ensemble import EnsembleModel, FeatureCache
from .errors import ContractError, NumericError
from .layers import Module
from .tensor import Array, Parameter, Tape, Tensor, record_op


# ---------------------------------------------------------------------------
# Loss functions
# ---------------------------------------------------------------------------

def one_hot(labels: np.ndarray, num_classes: int) -> Tensor:
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ContractError(f"labels outside [0, {num_classes})")
    table = np.zeros((labels.size, num_classes))
    table[np.arange(labels.size), labels] = 1.0
    return Tensor(table)


def _check_one_hot(y: Array) -> None:
    if y.ndim != 2 or not np.all((y == 0.0) | (y == 1.0)) \
            or not np.all(y.sum(axis=1) == 1.0):
        raise ContractError("labels must be one-hot rows")


def cross_entropy(probs: Tensor, labels: Tensor) -> Tensor:
    """Mean over the batch of -sum(y*log p). Prefer the fused
    :func:`softmax_cross_entropy` when logits are available."""
    _check_one_hot(labels.data)
    if probs.shape != labels.shape:
        raise ContractError(
            f"probs {probs.shape} and labels {labels.shape} disagree")
    y = labels.data
    b = probs.shape[0]
    with np.errstate(divide="ignore"):
        logp = np.where(y > 0, np.log(probs.data), 0.0)
    loss = -logp.sum() / b
    p = probs.data

    def backward(g: Array):
        scale = g.reshape(())
        with np.errstate(divide="ignore"):
            d = np.where(y > 0, -1.0 / (p * b), 0.0)
        return (scale * d, None)

    return record_op((probs, labels), np.asarray(loss), backward)


def softmax_cross_entropy(logits: Tensor, labels: Tensor,
                          class_weights: Optional[np.ndarray] = None) -> Tensor:
    """Fused softmax + cross-entropy from logits (log-sum-exp form).

    Gradient w.r.t. the logits is (softmax - y) / batch, scaled by the
    optional per-class weights (normalized by their batch total).
    """
    _check_one_hot(labels.data)
    if logits.shape != labels.shape:
        raise ContractError(
            f"logits {logits.shape} and labels {labels.shape} disagree")
    x, y = logits.data, labels.data
    m = x.max(axis=1, keepdims=True)
    lse = m + np.log(np.exp(x - m).sum(axis=1, keepdims=True))
    per_sample = (lse.reshape(-1) - (y * x).sum(axis=1))
    if class_weights is None:
        w = np.ones(x.shape[0])
    else:
        w = np.asarray(class_weights, dtype=np.float64)[y.argmax(axis=1)]
    total_w = w.sum()
    loss = (w * per_sample).sum() / total_w
    probs = np.exp(x - lse)

    def backward(g: Array):
        scale = g.reshape(())
        return (scale * (w[:, None] * (probs - y)) / total_w, None)

    return record_op((logits, labels), np.asarray(loss), backward)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    """First/second moment buffers plus the shared step counter."""

    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def for_params(cls, params: Sequence[Parameter]) -> "AdamState":
        return cls(m=[np.zeros_like(p.data) for p in params],
                   v=[np.zeros_like(p.data) for p in params])


def adam_step(params: Sequence[Parameter], grads: Sequence[Optional[Array]],
              state: AdamState, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One Adam update. A NaN in any gradient aborts before mutating state."""
    if len(params) != len(grads):
        raise ContractError("params and grads lengths differ")
    for p, g in zip(params, grads):
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ContractError(
                f"gradient shape {g.shape} != parameter shape {p.data.shape}")
        if np.isnan(g).any():
            raise NumericError("adam_step: NaN gradient, step aborted")
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            continue
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


class Adam:
    """Holds the moment state for a parameter list and applies steps."""

    def __init__(self, params: Sequence[Parameter], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.state = AdamState.for_params(self.params)

    def step(self) -> None:
        grads = [p.grad for p in self.params]
        adam_step(self.params, grads, self.state, self.lr,
                  self.beta1, self.beta2, self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


# ---------------------------------------------------------------------------
# Fit loop
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    batch_size: int = 32
    learning_rate: float = 1e-4
    max_epochs: int = 20
    early_stop_patience: int = 3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    seed: int = 0
    class_weight: str = "none"  # or "inverse"
    stop_at_train_accuracy: Optional[float] = None

    def validate(self) -> "TrainConfig":
        if self.batch_size < 2:
            raise ContractError("batch_size must be >= 2 (batch norm)")
        if self.early_stop_patience < 1:
            raise ContractError("early_stop_patience must be >= 1")
        if self.class_weight not in ("none", "inverse"):
            raise ContractError(
                f"class_weight must be 'none' or 'inverse', got "
                f"{self.class_weight!r}")
        return self

    def to_dict(self) -> dict:
        return {
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "max_epochs": self.max_epochs,
            "early_stop_patience": self.early_stop_patience,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "epsilon": self.epsilon,
            "seed": self.seed,
            "class_weight": self.class_weight,
            "stop_at_train_accuracy": self.stop_at_train_accuracy,
        }


@dataclass
class TrainRecord:
    train_loss: list[float] = field(default_factory=list)
    train_accuracy: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_accuracy: list[float] = field(default_factory=list)
    stopped_epoch: int = 0
    best_epoch: int = 0

    CSV_HEADER = "epoch,train_loss,train_acc,val_loss,val_acc"

    def csv_row(self, epoch: int) -> str:
        i = epoch - 1
        return (f"{epoch},{self.train_loss[i]!r},{self.train_accuracy[i]!r},"
                f"{self.val_loss[i]!r},{self.val_accuracy[i]!r}")

    def to_csv(self) -> str:
        lines = [self.CSV_HEADER]
        lines += [self.csv_row(e) for e in range(1, self.stopped_epoch + 1)]
        return "\n".join(lines) + "\n"


def _as_arrays(split) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(split, tuple):
        images, labels = split
        return np.asarray(images, dtype=np.float64), np.asarray(labels)
    return split.stacked()


def _snapshot(model: Module) -> dict[str, np.ndarray]:
    return {name: t.data.copy() for name, t in model.named_state()}


def _restore(model: Module, snap: dict[str, np.ndarray]) -> None:
    for name, t in model.named_state():
        t.data[...] = snap[name]


class _Batcher:
    """Forward paths for either raw images or cached fused features."""

    def __init__(self, model: Module, images: np.ndarray,
                 cache: Optional[FeatureCache]):
        self.model = model
        if cache is not None:
            self.inputs = cache.features_for(model, images)
            self._logits = lambda x, mode: model.head_logits(x, mode)
        else:
            self.inputs = images
            self._logits = lambda x, mode: model.forward_logits(x, mode)

    def logits(self, idx: np.ndarray, mode: str) -> Tensor:
        return self._logits(Tensor(self.inputs[idx]), mode)


def _eval_loss_acc(batcher: _Batcher, labels: np.ndarray, num_classes: int,
                   batch_size: int,
                   class_weights: Optional[np.ndarray]) -> tuple[float, float]:
    n = labels.size
    losses, hits = [], 0
    for start in range(0, n, batch_size):
        idx = np.arange(start, min(start + batch_size, n))
        logits = batcher.logits(idx, "eval")
        loss = softmax_cross_entropy(logits, one_hot(labels[idx], num_classes),
                                     class_weights)
        losses.append(loss.item() * idx.size)
        hits += int((logits.data.argmax(axis=1) == labels[idx]).sum())
    return sum(losses) / n, hits / n


def fit(model: Module, train_split, val_split, config: TrainConfig,
        curve_path: Optional[str] = None,
        progress: Optional[Callable[[str], None]] = print,
        feature_cache: Optional[FeatureCache] = None,
        use_feature_cache: bool = True):
    """Train ``model``, returning (TrainRecord, best parameter snapshot).

    Stops when the validation loss has not improved for
    ``early_stop_patience`` consecutive epochs, or at ``max_epochs``, or —
    when ``stop_at_train_accuracy`` is set — as soon as the epoch-end train
    accuracy reaches the target (in that case the current parameters are
    kept instead of restoring the best-validation snapshot).
    """
    config.validate()
    train_images, train_labels = _as_arrays(train_split)
    val_images, val_labels = _as_arrays(val_split)
    if train_labels.size == 0 or val_labels.size == 0:
        raise ContractError("fit: empty train or validation split")
    if train_labels.size < config.batch_size:
        raise ContractError(
            f"fit: train split ({train_labels.size}) smaller than one batch "
            f"({config.batch_size})")
    num_classes = getattr(model, "num_classes")

    class_weights = None
    if config.class_weight == "inverse":
        counts = np.bincount(train_labels, minlength=num_classes)
        class_weights = train_labels.size / (num_classes *
                                             np.maximum(counts, 1))

    cache = None
    if (use_feature_cache and isinstance(model, EnsembleModel)
            and model.branches_frozen):
        cache = feature_cache or FeatureCache("fit-local")
    train_batcher = _Batcher(model, train_images, cache)
    val_batcher = _Batcher(model, val_images, cache)

    named = model.trainable_parameters() if isinstance(model, EnsembleModel) \
        else [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    optimizer = Adam([p for _, p in named], config.learning_rate,
                     config.beta1, config.beta2, config.epsilon)

    rng = np.random.default_rng(config.seed)
    record = TrainRecord()
    best_val = np.inf
    best_snap = _snapshot(model)
    bad_streak = 0
    n = train_labels.size
    usable = n - n % config.batch_size
    curve_file = open(curve_path, "w") if curve_path else None
    if curve_file:
        curve_file.write(TrainRecord.CSV_HEADER + "\n")
    hit_accuracy_target = False
    try:
        for epoch in range(1, config.max_epochs + 1):
            start_time = time.perf_counter()
            order = rng.permutation(n)[:usable]
            batch_losses = []
            for start in range(0, usable, config.batch_size):
                idx = order[start:start + config.batch_size]
                with Tape() as tape:
                    logits = train_batcher.logits(idx, "train")
                    loss = softmax_cross_entropy(
                        logits, one_hot(train_labels[idx], num_classes),
                        class_weights)
                    tape.backward(loss)
                optimizer.step()
                optimizer.zero_grad()
                batch_losses.append(loss.item())

            train_loss = float(np.mean(batch_losses))
            _, train_acc = _eval_loss_acc(train_batcher, train_labels,
                                          num_classes, config.batch_size,
                                          class_weights)
            val_loss, val_acc = _eval_loss_acc(val_batcher, val_labels,
                                               num_classes, config.batch_size,
                                               class_weights)
            record.train_loss.append(train_loss)
            record.train_accuracy.append(train_acc)
            record.val_loss.append(val_loss)
            record.val_accuracy.append(val_acc)
            record.stopped_epoch = epoch
            if curve_file:
                curve_file.write(record.csv_row(epoch) + "\n")
                curve_file.flush()
            if progress:
                progress(f"epoch {epoch}/{config.max_epochs} "
                         f"train_loss={train_loss:.4f} train_acc={train_acc:.4f} "
                         f"val_loss={val_loss:.4f} val_acc={val_acc:.4f} "
                         f"({time.perf_counter() - start_time:.1f}s)")

            if val_loss < best_val:
                best_val = val_loss
                record.best_epoch = epoch
                best_snap = _snapshot(model)
                bad_streak = 0
            else:
                bad_streak += 1

            if (config.stop_at_train_accuracy is not None
                    and train_acc >= config.stop_at_train_accuracy):
                hit_accuracy_target = True
                break
            if bad_streak >= config.early_stop_patience:
                break
    finally:
        if curve_file:
            curve_file.close()

    if not hit_accuracy_target:
        _restore(model, best_snap)
    else:
        best_snap = _snapshot(model)
    return record, best_snap
