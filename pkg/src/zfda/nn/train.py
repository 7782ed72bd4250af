"""Minibatch SGD training loops."""

from __future__ import annotations

import logging

import numpy as np

from zfda.nn.model import Autoencoder, NonFiniteError, forward, loss_and_grads, loss_mse, sgd_step
from zfda.rng import Rng

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss; ``model`` holds the last finite state."""

    def __init__(self, message: str, model: Autoencoder | None = None):
        super().__init__(message)
        self.model = model


def batches(n: int, batch_size: int, rng: Rng):
    """Shuffled index batches; the last incomplete batch is kept."""
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def evaluate_mse(model: Autoencoder, images: np.ndarray, targets: np.ndarray | None = None,
                 batch_size: int = 256) -> float:
    """MSE over ``images`` (reconstruction unless ``targets``), fixed-order reduction."""
    if len(images) == 0:
        raise ValueError("cannot evaluate on an empty set")
    targets = images if targets is None else targets
    total = 0.0
    for start in range(0, len(images), batch_size):
        t = targets[start:start + batch_size]
        total += loss_mse(forward(model, images[start:start + batch_size]).outcome, t) * t.size
    return total / targets.size


def fit(model: Autoencoder, images: np.ndarray, epochs: int, lr: float, batch_size: int,
        seed: int, trainable: list[bool] | None = None,
        targets: np.ndarray | None = None) -> tuple[Autoencoder, list[float]]:
    """Trains a copy of ``model`` to reconstruct ``images``.

    ``trainable`` optionally freezes layers (False entries keep their exact
    parameters). Returns the trained copy and the per-epoch mean batch loss.
    """
    if len(images) == 0:
        raise ValueError("empty dataset")
    if epochs < 0:
        raise ValueError("epochs must be >= 0")
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    model = model.copy()
    rng = Rng(seed)
    history = []
    for epoch in range(epochs):
        total = 0.0
        for idx in batches(len(images), batch_size, rng):
            try:
                loss, grads = loss_and_grads(model, images[idx], None if targets is None else targets[idx])
                if not np.isfinite(loss):
                    raise NonFiniteError("loss")
                if trainable is not None:
                    grads = [g if t else np.zeros_like(g) for g, t in zip(grads, trainable)]
                params = sgd_step(model.params, grads, lr)
            except NonFiniteError as exc:
                raise DivergenceError(f"training diverged in epoch {epoch}: {exc}", model) from exc
            model.params = params
            total += loss * len(idx)
        history.append(total / len(images))
        log.debug("epoch %d loss %.6g", epoch, history[-1])
    return model, history


def pretrain(model: Autoencoder, images: np.ndarray, epochs: int, lr: float,
             batch_size: int = 32, seed: int = 0) -> tuple[Autoencoder, list[float]]:
    """Joint encoder/decoder training on the knowledge-base dataset."""
    if epochs < 1:
        raise ValueError("pretraining needs at least one epoch")
    return fit(model, images, epochs, lr, batch_size, seed)
