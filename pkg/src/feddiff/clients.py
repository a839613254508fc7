"""Client-side state, local SGD training, and evaluation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import evaluate as record_eval
from .autodiff import value_and_grad
from .exceptions import DataError, LayoutError, NumericError
from .models import ModelSpec


@dataclass
class LocalUpdateConfig:
    epochs: int = 2
    batch_size: int = 50
    lr: float = 0.01
    momentum: float = 0.0  # off by default; plain mini-batch SGD

    def validate(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")


@dataclass
class ClientState:
    """One client: private data shards, model layout, current parameters, RNG."""

    id: int
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    model: ModelSpec
    params: np.ndarray
    rng: np.random.Generator = field(repr=False, default=None)

    @property
    def sample_count(self) -> int:
        return int(self.train_y.shape[0])

    def check_params(self, params: np.ndarray) -> np.ndarray:
        params = np.asarray(params)
        if params.shape != (self.model.n_params,):
            raise LayoutError(
                f"client {self.id}: parameter length {params.shape} "
                f"!= layout total {self.model.n_params}")
        return params


def local_update(client: ClientState, init: np.ndarray,
                 cfg: LocalUpdateConfig) -> np.ndarray:
    """Run cfg.epochs passes of mini-batch SGD from `init`; store and return
    the final parameters.  Mini-batch order reshuffles each epoch using the
    client's own stream."""
    cfg.validate()
    init = client.check_params(init)
    n = client.sample_count
    if n == 0:
        raise DataError(f"client {client.id} has no training data")
    if cfg.batch_size > n:
        raise ValueError(f"batch_size {cfg.batch_size} > {n} training examples")

    params = init.copy()
    lr = np.asarray(cfg.lr, dtype=params.dtype)
    velocity = np.zeros_like(params) if cfg.momentum else None
    record = client.model.loss_record
    for _ in range(cfg.epochs):
        order = client.rng.permutation(n)
        # trailing partial batch included, per one-pass-over-D_i semantics
        for bi, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            loss, grads = value_and_grad(
                record, params,
                {"x": client.train_x[idx], "y": client.train_y[idx]})
            if not math.isfinite(loss):
                raise NumericError(
                    f"non-finite loss during local update "
                    f"(client {client.id}, batch {bi})",
                    client_id=client.id, batch_index=bi)
            if velocity is None:
                params = params - lr * grads
            else:
                velocity = cfg.momentum * velocity + grads
                params = params - lr * velocity
    client.params = params
    return params


def evaluate(client: ClientState, params: np.ndarray) -> tuple[float, float]:
    """(accuracy, mean cross-entropy loss) on the client's test split.

    Deterministic: argmax breaks ties toward the lowest class index."""
    params = client.check_params(params)
    if client.test_y.shape[0] == 0:
        raise DataError(f"client {client.id} has no test data")
    logits = record_eval(client.model.logits_record, params,
                         {"x": client.test_x})
    pred = logits.argmax(axis=-1)
    acc = float((pred == client.test_y).mean())
    z = logits - logits.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    mean_loss = float(-logp[np.arange(len(client.test_y)),
                            client.test_y].mean())
    return acc, mean_loss


def loss_gradient(client: ClientState, params: np.ndarray,
                  batch: tuple[np.ndarray, np.ndarray]) -> np.ndarray:
    """Gradient of the batch log-likelihood (negative cross-entropy gradient)."""
    params = client.check_params(params)
    x, y = batch
    _, grads = value_and_grad(client.model.loss_record, params,
                              {"x": x, "y": y})
    return -grads
