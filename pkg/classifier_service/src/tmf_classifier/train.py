"""Cross-validated fine-tuning with best-fold selection.

One model is trained per fold; the fold whose validation F1 (predictions
thresholded at 0.5) is highest supplies the exported model. The seed fixes
fold assignment, shuffling, and weight updates, so runs are reproducible.
"""

from __future__ import annotations

import logging
import random
from dataclasses import dataclass

import numpy as np
import torch

from tmf_classifier.data import LabeledDataset
from tmf_classifier.model import Classifier, ModelConfig, bce_loss, build_model

logger = logging.getLogger(__name__)


class DatasetTooSmall(ValueError):
    pass


class InputTooLong(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 8
    learning_rate: float = 2e-5
    weight_decay: float = 0.01
    folds: int = 5
    seed: int = 0
    max_sequence_length: int = 4096

    def __post_init__(self):
        if self.folds < 2:
            raise ValueError("folds must be >= 2")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass(frozen=True)
class FoldMetrics:
    fold: int
    precision: float
    recall: float
    f1: float
    train_losses: tuple[float, ...]  # full-train-split loss after each epoch


@dataclass(frozen=True)
class TrainResult:
    classifier: Classifier
    selected_fold: int
    fold_metrics: tuple[FoldMetrics, ...]


def fold_assignments(n_items: int, folds: int, seed: int) -> list[list[int]]:
    """Disjoint, covering folds whose sizes differ by at most one."""
    indices = list(range(n_items))
    random.Random(seed).shuffle(indices)
    return [indices[f::folds] for f in range(folds)]


def _binary_f1(y_true: np.ndarray, y_pred: np.ndarray) -> tuple[float, float, float]:
    tp = float(np.sum((y_pred == 1) & (y_true == 1)))
    fp = float(np.sum((y_pred == 1) & (y_true == 0)))
    fn = float(np.sum((y_pred == 0) & (y_true == 1)))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = (
        2 * precision * recall / (precision + recall)
        if precision + recall
        else 0.0
    )
    return precision, recall, f1


def _check_lengths(dataset: LabeledDataset, model, cfg: TrainConfig) -> None:
    longest_id, longest = "", 0
    for item in dataset.items:
        n = model.token_count(item.text)
        if n > longest:
            longest_id, longest = item.flow_id, n
    if longest > cfg.max_sequence_length:
        raise InputTooLong(
            f"flow {longest_id!r} is {longest} tokens; raise max_sequence_length "
            f"(currently {cfg.max_sequence_length})"
        )


def _train_one(
    dataset: LabeledDataset,
    train_idx: list[int],
    cfg: TrainConfig,
    model_cfg: ModelConfig,
    fold: int,
) -> tuple[torch.nn.Module, tuple[float, ...]]:
    torch.manual_seed(cfg.seed + fold)
    model = build_model(model_cfg, dataset.n_labels)
    optimizer = torch.optim.AdamW(
        model.parameters(), lr=cfg.learning_rate, weight_decay=cfg.weight_decay
    )
    texts = [dataset.items[i].text for i in train_idx]
    labels = torch.from_numpy(
        np.stack([dataset.items[i].labels for i in train_idx])
    )
    order_rng = random.Random(cfg.seed * 7919 + fold)
    epoch_losses = []
    for _ in range(cfg.epochs):
        model.train()
        order = list(range(len(texts)))
        order_rng.shuffle(order)
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            optimizer.zero_grad()
            probabilities = model([texts[i] for i in batch])
            loss = bce_loss(labels[batch], probabilities)
            loss.backward()
            optimizer.step()
        model.eval()
        with torch.no_grad():
            epoch_losses.append(float(bce_loss(labels, model(texts))))
    return model, tuple(epoch_losses)


def _evaluate(model, dataset: LabeledDataset, indices: list[int],
              threshold: float = 0.5) -> tuple[float, float, float]:
    model.eval()
    texts = [dataset.items[i].text for i in indices]
    truth = np.stack([dataset.items[i].labels for i in indices])
    with torch.no_grad():
        scores = model(texts).numpy()
    predicted = (scores >= threshold).astype(np.float32)
    return _binary_f1(truth, predicted)


def train(
    dataset: LabeledDataset,
    cfg: TrainConfig | None = None,
    model_cfg: ModelConfig | None = None,
) -> TrainResult:
    """Train one model per fold and keep the one with the best validation F1.

    Ties go to the lowest fold index so the selection is deterministic.
    """
    cfg = cfg or TrainConfig()
    model_cfg = model_cfg or ModelConfig()
    if len(dataset) < cfg.folds:
        raise DatasetTooSmall(
            f"{len(dataset)} items cannot fill {cfg.folds} folds"
        )
    if dataset.n_labels < 1:
        raise ValueError("the label space is empty")
    _check_lengths(dataset, build_model(model_cfg, dataset.n_labels), cfg)

    folds = fold_assignments(len(dataset), cfg.folds, cfg.seed)
    metrics: list[FoldMetrics] = []
    models: list[torch.nn.Module] = []
    for fold, val_idx in enumerate(folds):
        train_idx = [i for f, fold_idx in enumerate(folds) if f != fold for i in fold_idx]
        model, losses = _train_one(dataset, train_idx, cfg, model_cfg, fold)
        precision, recall, f1 = _evaluate(model, dataset, val_idx)
        logger.info("fold %d: precision=%.3f recall=%.3f f1=%.3f", fold, precision, recall, f1)
        metrics.append(
            FoldMetrics(fold=fold, precision=precision, recall=recall, f1=f1,
                        train_losses=losses)
        )
        models.append(model)

    selected = max(range(len(metrics)), key=lambda f: (metrics[f].f1, -f))
    classifier = Classifier(
        model=models[selected], label_space=dataset.label_space, config=model_cfg
    )
    return TrainResult(
        classifier=classifier,
        selected_fold=selected,
        fold_metrics=tuple(metrics),
    )
