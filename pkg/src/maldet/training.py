"""Loss, optimizer, training loop, evaluation metrics, and grid search."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import NonFiniteLoss, NumericError, ShapeMismatch
from .network import (
    PROB_EPS,
    TRAIN,
    ModelBundle,
    ModelConfig,
    forward,
    init_params,
    param_shapes,
    predict_proba,
)
from .tensor import Rng, Tensor
from .textprep import EncodedDataset, Vocabulary, split_indices

log = logging.getLogger(__name__)

DEFAULT_EPOCHS = 10
DEFAULT_BATCH_SIZE = 32
DEFAULT_LR = 0.001

HISTORY_HEADER = "epoch,loss,train_acc,seconds"


def bce_loss(p: Tensor, y) -> Tensor:
    """Mean binary cross-entropy; probabilities are clamped to
    [1e-12, 1 - 1e-12] before the logs."""
    y = np.asarray(y, dtype=np.float64)
    if p.shape != y.shape:
        raise ShapeMismatch(f"bce: predictions {p.shape} vs labels {y.shape}")
    p = T.clip(p, PROB_EPS, 1.0 - PROB_EPS)
    yk = Tensor(y)
    term = T.add(T.mul(yk, T.log(p)), T.mul(1.0 - yk, T.log(1.0 - p)))
    return T.mean(T.mul(term, -1.0))


@dataclass
class AdamState:
    """First/second moment estimates per parameter plus the step counter."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    lr: float = DEFAULT_LR
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: dict[str, Tensor], lr: float = DEFAULT_LR) -> "AdamState":
        return cls(m={k: np.zeros_like(p.data) for k, p in params.items()},
                   v={k: np.zeros_like(p.data) for k, p in params.items()},
                   lr=lr)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
              state: AdamState) -> AdamState:
    """Bias-corrected Adam update, applied to the parameters in place.

    p -= lr * m_hat / (sqrt(v_hat) + eps), with the epsilon outside the
    square root so the very first step is ~lr * sign(g) for any |g| >> eps.
    """
    state.t += 1
    t = state.t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.data.shape:
            raise ShapeMismatch(f"adam: gradient for {name} has shape {g.shape}")
        state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * g * g
        m_hat = state.m[name] / (1.0 - state.beta1 ** t)
        v_hat = state.v[name] / (1.0 - state.beta2 ** t)
        p.data -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return state


@dataclass
class TrainHistory:
    """Per-epoch training loss, end-of-epoch train accuracy, wall-clock seconds."""

    epochs: list[dict] = field(default_factory=list)

    def append(self, epoch: int, loss: float, train_acc: float, seconds: float) -> None:
        self.epochs.append({"epoch": epoch, "loss": loss,
                            "train_acc": train_acc, "seconds": seconds})

    def __len__(self) -> int:
        return len(self.epochs)

    def write_csv(self, path: str | Path) -> None:
        lines = [HISTORY_HEADER]
        for row in self.epochs:
            lines.append(f"{row['epoch']},{row['loss']!r},{row['train_acc']!r},"
                         f"{row['seconds']!r}")
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _accuracy(bundle: ModelBundle, data: EncodedDataset) -> float:
    probs = predict_proba(bundle, data.ids)
    return float(((probs >= 0.5).astype(np.int64) == data.labels).mean())


def train(config: ModelConfig, train_data: EncodedDataset, vocab: Vocabulary,
          epochs: int = DEFAULT_EPOCHS, batch_size: int = DEFAULT_BATCH_SIZE,
          seed: int = 0, lr: float = DEFAULT_LR) -> tuple[ModelBundle, TrainHistory]:
    """Mini-batch training; deterministic for a fixed seed.

    One RNG stream drives initialization, per-epoch batch shuffles, and
    dropout masks, in that order. The last partial batch is kept. Train
    accuracy is re-evaluated on the full training set after each epoch.
    """
    if len(train_data) == 0:
        raise ValueError("training data is empty")
    if train_data.n != config.n:
        raise ShapeMismatch(f"data encoded at n={train_data.n}, config expects {config.n}")
    rng = Rng(seed)
    params = init_params(config, vocab.size, rng)
    bundle = ModelBundle(1, config, vocab, params)
    state = AdamState.for_params(params, lr=lr)
    history = TrainHistory()
    total = len(train_data)
    labels = train_data.labels.astype(np.float64)

    for epoch in range(epochs):
        start = time.perf_counter()
        order = rng.permutation(total)
        loss_sum = 0.0
        for lo in range(0, total, batch_size):
            batch = order[lo:lo + batch_size]
            try:
                probs = forward(bundle, train_data.ids[batch], TRAIN, rng)
                loss = bce_loss(probs, labels[batch])
                grads = T.backward(loss, params)
            except NumericError as exc:
                raise NonFiniteLoss(
                    f"epoch {epoch}, batch at {lo}: {exc}") from None
            adam_step(params, grads, state)
            loss_sum += loss.item() * len(batch)
        train_acc = _accuracy(bundle, train_data)
        seconds = time.perf_counter() - start
        history.append(epoch, loss_sum / total, train_acc, seconds)
        log.info("epoch %d: loss=%.6f train_acc=%.4f (%.2fs)",
                 epoch, loss_sum / total, train_acc, seconds)
    return bundle, history


@dataclass
class EvalMetrics:
    """Confusion counts (malware = positive) and per-class derived rates."""

    tp: int
    tn: int
    fp: int
    fn: int
    per_class: dict[str, dict[str, float]]
    accuracy: float

    def to_dict(self) -> dict:
        return {"tp": self.tp, "tn": self.tn, "fp": self.fp, "fn": self.fn,
                "per_class": self.per_class, "accuracy": self.accuracy}

    def write_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n",
                              encoding="utf-8")


def _rates(tp: int, fp: int, fn: int) -> dict[str, float]:
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2.0 * precision * recall / (precision + recall) if precision + recall else 0.0
    return {"p": precision, "r": recall, "f1": f1}


def metrics_from_counts(tp: int, tn: int, fp: int, fn: int) -> EvalMetrics:
    total = tp + tn + fp + fn
    return EvalMetrics(
        tp=tp, tn=tn, fp=fp, fn=fn,
        per_class={
            # benign metrics treat benign as the positive class
            "benign": _rates(tn, fn, fp),
            "malware": _rates(tp, fp, fn),
        },
        accuracy=(tp + tn) / total if total else 0.0,
    )


def evaluate(bundle: ModelBundle, test_data: EncodedDataset) -> EvalMetrics:
    """Threshold predictions at 0.5 (>= 0.5 means malware) and score them."""
    if len(test_data) == 0:
        raise ValueError("evaluation data is empty")
    probs = predict_proba(bundle, test_data.ids)
    predicted = (probs >= 0.5).astype(np.int64)
    labels = test_data.labels
    tp = int(((predicted == 1) & (labels == 1)).sum())
    tn = int(((predicted == 0) & (labels == 0)).sum())
    fp = int(((predicted == 1) & (labels == 0)).sum())
    fn = int(((predicted == 0) & (labels == 1)).sum())
    return metrics_from_counts(tp, tn, fp, fn)


def _count_params(config: ModelConfig, vocab_size: int) -> int:
    return int(np.sum([np.prod(s) for s in param_shapes(config, vocab_size).values()]))


def grid_configs(base_config: ModelConfig, grid: dict[str, list[int]]) -> list[ModelConfig]:
    """One candidate per (filters, kernel) cell, in lexicographic cell order.

    The filter count applies to the first conv block; later blocks keep the
    base config's taper by halving (minimum 1). Every block gets the
    candidate kernel.
    """
    filters = sorted(grid.get("filters", [base_config.conv_blocks[0].filters]))
    kernels = sorted(grid.get("kernel", [base_config.conv_blocks[0].kernel]))
    unknown = set(grid) - {"filters", "kernel"}
    if unknown:
        raise ValueError(f"unknown grid key: {sorted(unknown)[0]}")
    if not filters or not kernels:
        raise ValueError("grid must list at least one filters and kernel value")
    configs = []
    for f in filters:
        for k in kernels:
            blocks = []
            for i, blk in enumerate(base_config.conv_blocks):
                blocks.append(replace(blk, filters=max(1, f >> i), kernel=k))
            configs.append(replace(base_config, conv_blocks=tuple(blocks)))
    return configs


def grid_search(base_config: ModelConfig, grid: dict[str, list[int]],
                data: EncodedDataset, vocab: Vocabulary, seed: int = 0,
                epochs: int = DEFAULT_EPOCHS, batch_size: int = DEFAULT_BATCH_SIZE,
                lr: float = DEFAULT_LR) -> tuple[ModelConfig, list[dict]]:
    """Train every grid cell on an internal 80/20 carve-out of the training
    split and keep the best validation accuracy.

    Ties prefer fewer parameters, then earlier (lexicographic) cell order.
    Cell i trains with seed ``seed + i``.
    """
    candidates = grid_configs(base_config, grid)
    fit_idx, val_idx = split_indices(data.labels, 0.8, Rng(seed))
    fit_data, val_data = data.subset(fit_idx), data.subset(val_idx)
    table = []
    for i, config in enumerate(candidates):
        bundle, _ = train(config, fit_data, vocab, epochs=epochs,
                          batch_size=batch_size, seed=seed + i, lr=lr)
        acc = _accuracy(bundle, val_data)
        row = {
            "filters": config.conv_blocks[0].filters,
            "kernel": config.conv_blocks[0].kernel,
            "val_accuracy": acc,
            "n_params": _count_params(config, vocab.size),
        }
        table.append(row)
        log.info("grid cell filters=%d kernel=%d: val_acc=%.4f",
                 row["filters"], row["kernel"], acc)
    best_index = min(range(len(table)),
                     key=lambda i: (-table[i]["val_accuracy"], table[i]["n_params"], i))
    return candidates[best_index], table


def write_grid_table(table: list[dict], path: str | Path) -> None:
    lines = ["filters,kernel,val_accuracy,n_params"]
    for row in table:
        lines.append(f"{row['filters']},{row['kernel']},{row['val_accuracy']!r},"
                     f"{row['n_params']}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
