"""Supervised training: cross-entropy, Adam, stratified splits, early stopping."""

import copy
import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 16
    max_epochs: int = 200
    patience: int = 20
    seed: int = 0
    split: tuple = (0.8, 0.1, 0.1)
    shuffle: bool = True

    def __post_init__(self):
        self.split = tuple(float(f) for f in self.split)
        if len(self.split) != 3 or any(f < 0 for f in self.split):
            raise ValueError("split needs three non-negative fractions")
        if abs(sum(self.split) - 1.0) > 1e-9:
            raise ValueError(f"split fractions must sum to 1, got {self.split}")
        if self.patience < 1:
            raise ValueError("patience must be at least 1")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be positive")


@dataclass
class Metrics:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    val_acc: list = field(default_factory=list)
    best_epoch: int = -1
    test_accuracy: float = float("nan")
    test_loss: float = float("nan")
    stopped_epoch: int = 0

    @property
    def best_val_loss(self):
        return self.val_loss[self.best_epoch - 1] if self.best_epoch > 0 else float("inf")

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "val_loss", "val_acc"])
            for i, row in enumerate(zip(self.train_loss, self.val_loss, self.val_acc), start=1):
                w.writerow([i, *(repr(float(x)) for x in row)])


def cross_entropy(logits, labels):
    """Mean negative log-likelihood and its gradient with respect to logits."""
    logits = np.asarray(logits)
    labels = np.asarray(labels, dtype=np.int64)
    B, C = logits.shape
    if labels.shape != (B,):
        raise ValueError(f"labels shape {labels.shape} does not match batch {B}")
    if B and (labels.min() < 0 or labels.max() >= C):
        raise ValueError(f"labels must lie in [0, {C})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logsum
    loss = -logp[np.arange(B), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(B), labels] -= 1.0
    return float(loss), grad / B


class Adam:
    def __init__(self, params, cfg):
        self.cfg = cfg
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params, grads):
        """Update ``params`` in place; keys are visited in sorted order."""
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.beta1**self.t
        bc2 = 1.0 - c.beta2**self.t
        for k in sorted(params):
            g = grads[k]
            if g.shape != params[k].shape:
                raise ValueError(f"gradient for {k} has shape {g.shape}, expected {params[k].shape}")
            m, v = self.m[k], self.v[k]
            m *= c.beta1
            m += (1 - c.beta1) * g
            v *= c.beta2
            v += (1 - c.beta2) * g * g
            update = c.lr * (m / bc1) / (np.sqrt(v / bc2) + c.eps)
            params[k] -= update.astype(params[k].dtype)


def adam_step(params, grads, state, cfg):
    """Functional wrapper: returns the (mutated) params and optimizer state."""
    if state is None:
        state = Adam(params, cfg)
    state.step(params, grads)
    return params, state


def _apportion(total, counts, rng):
    """Split ``total`` across classes proportionally to ``counts`` (largest remainder)."""
    exact = total * counts / counts.sum()
    alloc = np.floor(exact).astype(np.int64)
    remainder = exact - alloc
    # random tie-break, then largest remainder first
    order = np.lexsort((rng.random(len(counts)), -remainder))
    alloc[order[: total - alloc.sum()]] += 1
    return alloc


def stratified_split(y, fractions=(0.8, 0.1, 0.1), seed=0):
    """Train/val/test indices with class proportions preserved.

    Validation and test sizes are ``floor(n * fraction)`` (at least one when
    the fraction is positive); each is spread over classes by largest
    remainder, so every class is within one sample of its exact share. All
    leftovers go to train.
    """
    y = np.asarray(y)
    rng = np.random.default_rng(seed)
    classes, counts = np.unique(y, return_counts=True)
    if (counts < 3).any():
        bad = classes[counts < 3][0]
        raise ValueError(f"class {bad} has {counts[classes == bad][0]} instances; at least 3 are needed")
    n = len(y)
    sizes = []
    for f in fractions[1:]:
        k = int(math.floor(n * f + 1e-9))
        sizes.append(max(k, 1) if f > 0 else 0)
    val_per = _apportion(sizes[0], counts, rng)
    test_per = _apportion(sizes[1], counts, rng)
    parts = ([], [], [])
    for cls, nv, nt in zip(classes, val_per, test_per):
        idx = rng.permutation(np.flatnonzero(y == cls))
        parts[1].append(idx[:nv])
        parts[2].append(idx[nv : nv + nt])
        parts[0].append(idx[nv + nt :])
    return tuple(np.sort(np.concatenate(p)).astype(np.int64) for p in parts)


def stratified_subsample(y, fraction, seed=0):
    """Sorted indices of a class-proportional subsample of ``floor(n * fraction)`` items."""
    if not 0 < fraction <= 1:
        raise ValueError(f"subsample fraction must lie in (0, 1], got {fraction}")
    if fraction == 1:
        return np.arange(len(y), dtype=np.int64)
    y = np.asarray(y)
    rng = np.random.default_rng(seed)
    classes, counts = np.unique(y, return_counts=True)
    per = _apportion(max(int(math.floor(len(y) * fraction + 1e-9)), 1), counts, rng)
    picked = [rng.permutation(np.flatnonzero(y == c))[:k] for c, k in zip(classes, per)]
    return np.sort(np.concatenate(picked)).astype(np.int64)


def evaluate(model, X, y, batch_size=64):
    logits = model.predict(X, batch_size=batch_size)
    loss, _ = cross_entropy(logits, y)
    acc = float((logits.argmax(axis=1) == y).mean())
    return loss, acc


def train_loop(model, dataset, cfg, splits=None, on_epoch=None):
    """Train with early stopping on validation loss.

    Returns ``(metrics, best_params)``; the model is left holding the best
    parameters and the test accuracy is measured with them.
    """
    if splits is None:
        splits = stratified_split(dataset.y, cfg.split, cfg.seed)
    train_idx, val_idx, test_idx = splits
    for name, idx in zip(("train", "validation", "test"), splits):
        if len(idx) == 0:
            raise ValueError(f"{name} split is empty")
    dtype = np.dtype(model.cfg.dtype)
    X = dataset.X.astype(dtype)
    y = dataset.y
    Xv, yv = X[val_idx], y[val_idx]

    rng = np.random.default_rng(cfg.seed)
    opt = Adam(model.params, cfg)
    metrics = Metrics()
    best_params = copy.deepcopy(model.params)
    wait = 0
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(train_idx) if cfg.shuffle else train_idx
        total, seen = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            logits, cache = model.forward(X[batch], return_cache=True)
            loss, dlogits = cross_entropy(logits, y[batch])
            if not math.isfinite(loss):
                raise TrainingDiverged(f"non-finite training loss at epoch {epoch}, step {start // cfg.batch_size}")
            grads = model.backward(dlogits.astype(dtype), cache)
            opt.step(model.params, grads)
            total += loss * len(batch)
            seen += len(batch)
        val_loss, val_acc = evaluate(model, Xv, yv)
        if not math.isfinite(val_loss):
            raise TrainingDiverged(f"non-finite validation loss at epoch {epoch}")
        metrics.train_loss.append(total / seen)
        metrics.val_loss.append(val_loss)
        metrics.val_acc.append(val_acc)
        metrics.stopped_epoch = epoch
        if val_loss < metrics.best_val_loss:
            metrics.best_epoch = epoch
            best_params = copy.deepcopy(model.params)
            wait = 0
        else:
            wait += 1
        log.info("epoch %d train %.4f val %.4f acc %.3f", epoch, total / seen, val_loss, val_acc)
        if on_epoch is not None:
            on_epoch(epoch, metrics)
        if wait >= cfg.patience:
            break

    model.params = best_params
    metrics.test_loss, metrics.test_accuracy = evaluate(model, X[test_idx], y[test_idx])
    return metrics, best_params


def run_summary(metrics, train_cfg, model_cfg, splits, extra=None):
    out = {
        "schema": "krontime-run-summary/1",
        "train_config": asdict(train_cfg),
        "model_config": model_cfg.to_dict(),
        "split_sizes": [int(len(s)) for s in splits],
        "epochs_run": metrics.stopped_epoch,
        "best_epoch": metrics.best_epoch,
        "best_val_loss": metrics.best_val_loss,
        "best_val_accuracy": metrics.val_acc[metrics.best_epoch - 1],
        "test_loss": metrics.test_loss,
        "test_accuracy": metrics.test_accuracy,
    }
    out["train_config"]["split"] = list(train_cfg.split)
    if extra:
        out.update(extra)
    return out


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
