"""Data splits, Adam with cosine annealing, the training loop and evaluation metrics."""
from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from . import autodiff as ad
from .autodiff import ShapeMismatch, Tensor
from .layers import stream
from .model import Model, TrainConfig
from .molgraph import DatasetRecord
from .text_encoder import Vocabulary

log = logging.getLogger(__name__)

BETA1, BETA2, ADAM_EPS = 0.9, 0.999, 1e-8


class TooFewRecords(ValueError):
    pass


class SingleClassInput(ValueError):
    pass


class LengthMismatch(ValueError):
    pass


class NonFiniteLoss(RuntimeError):
    pass


# ---------------------------------------------------------------------- splits


def split_indices(targets: Sequence, task_kind: str, seed: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    n = len(targets)
    if n < 10:
        raise TooFewRecords(f"need at least 10 records, got {n}")
    rng = stream(seed, "split")
    if task_kind == "classification":
        labels = np.asarray(targets, dtype=np.int64)
        groups = [np.flatnonzero(labels == c) for c in np.unique(labels)]
    else:
        groups = [np.arange(n)]
    train, valid, test = [], [], []
    for idx in groups:
        idx = rng.permutation(idx)
        k = len(idx) // 10
        test.append(idx[:k])
        valid.append(idx[k:2 * k])
        train.append(idx[2 * k:])
    return tuple(np.concatenate(part).astype(np.int64) for part in (train, valid, test))


def split_dataset(records: Sequence[DatasetRecord], seed: int, task_kind: str | None = None):
    """80/10/10 train/valid/test; stratified by class for classification."""
    if task_kind is None:
        task_kind = "classification" if all(isinstance(r.target, (int, np.integer)) for r in records) else "regression"
    tr, va, te = split_indices([r.target for r in records], task_kind, seed)
    return [records[i] for i in tr], [records[i] for i in va], [records[i] for i in te]


# ------------------------------------------------------------------ optimizer


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState,
              lr: float, weight_decay: float) -> None:
    """Decoupled weight decay followed by a bias-corrected Adam update, in place."""
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.value)
        if g.shape != p.value.shape:
            raise ShapeMismatch(f"gradient for {name}: {g.shape} vs {p.value.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.value)
            state.v[name] = np.zeros_like(p.value)
        m = state.m[name] = BETA1 * state.m[name] + (1 - BETA1) * g
        v = state.v[name] = BETA2 * state.v[name] + (1 - BETA2) * g * g
        m_hat = m / (1 - BETA1 ** t)
        v_hat = v / (1 - BETA2 ** t)
        value = p.value
        if weight_decay:
            value = value - lr * weight_decay * value
        p.value = value - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)


def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    if total_steps <= 0:
        return lr0
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return 0.5 * lr0 * (1.0 + math.cos(math.pi * step / total_steps))


# --------------------------------------------------------------------- metrics


def roc_auc(scores, labels) -> float:
    """Mann-Whitney statistic: P(score_pos > score_neg), ties counting 1/2."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise LengthMismatch("scores and labels differ in length")
    pos = labels == 1
    n_pos, n_neg = int(pos.sum()), int((labels == 0).sum())
    if n_pos + n_neg != len(labels):
        raise ValueError("labels must be 0 or 1")
    if n_pos == 0 or n_neg == 0:
        raise SingleClassInput("ROC-AUC needs at least one positive and one negative")
    ranks = rankdata(scores)  # average ranks for ties
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def rmse(preds, targets) -> float:
    preds = np.asarray(preds, dtype=float)
    targets = np.asarray(targets, dtype=float)
    if preds.shape != targets.shape or preds.size == 0:
        raise LengthMismatch(f"{preds.shape} vs {targets.shape}")
    return float(np.sqrt(np.mean((targets - preds) ** 2)))


@dataclass
class EvalReport:
    metric: float
    metric_name: str
    targets: np.ndarray
    predictions: np.ndarray  # positive-class probability or regression value

    def rows(self):
        for i, (t, p) in enumerate(zip(self.targets, self.predictions)):
            yield i, t, p


def evaluate(model: Model, records: Sequence[DatasetRecord], task_kind: str | None = None) -> EvalReport:
    task_kind = task_kind or model.config.task_kind
    if not records:
        raise ValueError("cannot evaluate an empty split")
    values = model.predict_values(records)
    targets = np.array([r.target for r in records], dtype=float)
    if task_kind == "classification":
        scores = values[:, 1]
        return EvalReport(roc_auc(scores, targets.astype(int)), "roc_auc", targets, scores)
    return EvalReport(rmse(values, targets), "rmse", targets, values)


# -------------------------------------------------------------------- training


@dataclass
class TrainResult:
    model: Model
    history: list[dict] = field(default_factory=list)
    best_epoch: int | None = None
    splits: tuple = ()


def _threads() -> int:
    try:
        return max(0, int(os.environ.get("PROTOMOL_THREADS", "0")))
    except ValueError:
        return 0


def batch_gradients(model: Model, records: Sequence[DatasetRecord], names: list[str],
                    threads: int = 0) -> tuple[float, list[np.ndarray], dict[str, float]]:
    """Loss value and gradients for one batch.

    With ``threads > 0`` the per-sample terms are split into chunks evaluated
    on independent tapes and the gradients summed in chunk order.
    """
    params = model.named_tensors()
    leaves = [params[n] for n in names]
    if threads <= 1 or len(records) < 2 * threads:
        loss, info = model.batch_loss(model.make_batch(records))
        return loss.item(), ad.gradients(loss, leaves), info

    weights = model.config.effective_weights()
    n = len(records)
    bounds = np.linspace(0, n, threads + 1).astype(int)

    def chunk(lo_hi):
        lo, hi = lo_hi
        batch = model.make_batch(records[lo:hi])
        out = model.forward(batch)
        pred, align = model.sample_losses(out, batch)
        part = ad.mul(ad.add(ad.mul(ad.sum(pred), weights.pred), ad.mul(ad.sum(align), weights.align)), 1.0 / n)
        return part.item(), ad.gradients(part, leaves), ad.sum(pred).item(), ad.sum(align).item()

    with ThreadPoolExecutor(max_workers=threads) as pool:
        results = list(pool.map(chunk, zip(bounds[:-1], bounds[1:])))
    proto = ad.mul(model.proto_loss(), weights.proto)
    total = proto.item()
    grads = ad.gradients(proto, leaves)
    pred_sum = align_sum = 0.0
    for value, g, ps, as_ in results:
        total += value
        grads = [a + b for a, b in zip(grads, g)]
        pred_sum += ps
        align_sum += as_
    info = {"align": align_sum / n, "pred": pred_sum / n, "proto": model.proto_loss().item()}
    return total, grads, info


def _better(new: float, best: float | None, task_kind: str) -> bool:
    if np.isnan(new):
        return best is None
    if best is None or np.isnan(best):
        return True
    # ties go to the later epoch
    return new >= best if task_kind == "classification" else new <= best


def train(config: TrainConfig, records: Sequence[DatasetRecord], splits=None) -> TrainResult:
    """Train on the 80% split, select the epoch with the best validation metric."""
    if splits is None:
        splits = split_dataset(records, config.seed, config.task_kind)
    train_set, valid_set, test_set = splits
    vocab = Vocabulary.build(r.description for r in train_set)
    model = Model.init(config, vocab)
    if config.task_kind == "regression" and config.standardize_targets:
        y = np.array([r.target for r in train_set], dtype=float)
        model.target_mean = float(y.mean())
        model.target_std = float(y.std()) if y.std() > 0 else 1.0

    params = model.named_tensors()
    names = list(params)
    state = AdamState()
    shuffle_rng = stream(config.seed, "shuffle")
    batches_per_epoch = math.ceil(len(train_set) / config.batch_size)
    total_steps = config.epochs * batches_per_epoch
    threads = _threads()
    history: list[dict] = []
    best_metric, best_epoch = None, None
    best_values = {n: p.value.copy() for n, p in params.items()}
    step = 0
    for epoch in range(1, config.epochs + 1):
        order = shuffle_rng.permutation(len(train_set))
        losses, sizes = [], []
        lr_t = config.lr
        for b in range(batches_per_epoch):
            idx = order[b * config.batch_size:(b + 1) * config.batch_size]
            batch_records = [train_set[i] for i in idx]
            value, grads, _ = batch_gradients(model, batch_records, names, threads)
            if not np.isfinite(value):
                raise NonFiniteLoss(f"non-finite loss at epoch {epoch}, batch {b}")
            lr_t = cosine_lr(step, total_steps, config.lr)
            adam_step(params, dict(zip(names, grads)), state, lr_t, config.weight_decay)
            step += 1
            losses.append(value)
            sizes.append(len(idx))
        train_loss = float(np.average(losses, weights=sizes))
        try:
            val_metric = evaluate(model, valid_set).metric if valid_set else float("nan")
        except SingleClassInput:
            val_metric = float("nan")
        history.append({"epoch": epoch, "train_loss": train_loss, "val_metric": val_metric, "lr": lr_t})
        log.info("epoch %d loss %.6f val %.6f", epoch, train_loss, val_metric)
        if _better(val_metric, best_metric, config.task_kind):
            best_metric, best_epoch = val_metric, epoch
            best_values = {n: p.value.copy() for n, p in params.items()}
    for n, p in params.items():
        p.value = best_values[n]
    return TrainResult(model, history, best_epoch, (train_set, valid_set, test_set))
