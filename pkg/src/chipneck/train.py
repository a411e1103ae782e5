"""Minibatch SGD training and evaluation of a graph."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from chipneck import engine
from chipneck.data import Dataset, batch_iter
from chipneck.errors import TrainingError
from chipneck.graph import NetworkGraph

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    lr: float = 0.05
    momentum: float = 0.9
    seed: int = 42


def train(graph: NetworkGraph, dataset: Dataset, cfg: TrainConfig = TrainConfig()) -> list[float]:
    """Train in place; returns the mean loss of each epoch."""
    opt = engine.SGD(graph.parameters(), cfg.lr, cfg.momentum)
    history = []
    step = 0
    for epoch in range(cfg.epochs):
        total, count = 0.0, 0
        for xb, yb in batch_iter(dataset, cfg.batch_size, cfg.seed, epoch):
            opt.zero_grad()
            logits = graph.forward(xb, train=True)
            loss = engine.softmax_cross_entropy(logits, yb)
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingError(f"non-finite loss {value} at step {step}", step=step)
            engine.backward(loss)
            try:
                opt.step()
            except TrainingError as exc:
                raise TrainingError(f"{exc} at step {step}", step=step) from None
            total += value * len(yb)
            count += len(yb)
            step += 1
        history.append(total / count)
        log.debug("epoch %d loss %.4f", epoch, history[-1])
    return history


def predict(graph: NetworkGraph, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    preds = []
    with engine.no_grad():
        for i in range(0, len(images), batch_size):
            logits = graph.forward(images[i:i + batch_size], train=False).data
            preds.append(logits.reshape(logits.shape[0], -1).argmax(axis=1))
    return np.concatenate(preds)


def evaluate(graph: NetworkGraph, dataset: Dataset, batch_size: int = 256) -> float:
    """Top-1 accuracy in [0, 1]."""
    return float((predict(graph, dataset.images, batch_size) == dataset.labels).mean())
