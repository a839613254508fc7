"""Reference classifier architectures used by clients.

Three named layouts: mlp-tiny for property tests and the synthetic fixtures,
cnn-small / cnn-med for image-shaped data.  Each model is a pair of records
sharing one parameter layout: a logits record (input "x") and a loss record
(inputs "x", "y") ending in softmax cross-entropy.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .autodiff import ComputationRecord
from .codec import Layout
from .exceptions import LayoutError


@dataclass
class ModelSpec:
    name: str
    input_shape: tuple[int, ...]
    n_classes: int
    logits_record: ComputationRecord
    loss_record: ComputationRecord

    @property
    def layout(self) -> Layout:
        return self.loss_record.layout

    @property
    def n_params(self) -> int:
        return self.loss_record.n_params

    def init_params(self, rng: np.random.Generator,
                    dtype=np.float32) -> np.ndarray:
        return self.loss_record.init_params(rng, dtype=dtype)


def _fc(rec, x, name, n_in, n_out, last=False):
    w = rec.add_param(f"{name}.w", (n_in, n_out), init=("he", n_in))
    b = rec.add_param(f"{name}.b", (n_out,), init=("zeros",))
    h = rec.affine(x, w, b)
    return h if last else rec.relu(h)


def _conv_block(rec, x, name, c_in, c_out, stride):
    w = rec.add_param(f"{name}.w", (c_out, c_in, 3, 3), init=("he", c_in * 9))
    b = rec.add_param(f"{name}.b", (c_out,), init=("zeros",))
    return rec.relu(rec.conv2d(x, w, b, stride=stride, pad=1))


def _mlp_tiny_graph(rec, input_dim, n_classes, hidden):
    x = rec.add_input("x")
    h = _fc(rec, x, "fc1", input_dim, hidden)
    return _fc(rec, h, "fc2", hidden, n_classes, last=True)


def _cnn_graph(rec, input_shape, n_classes, channels, fc_hidden):
    c, h, w = input_shape
    x = rec.add_input("x")
    cur = x
    c_in = c
    for i, c_out in enumerate(channels):
        cur = _conv_block(rec, cur, f"conv{i + 1}", c_in, c_out, stride=2)
        h = (h + 2 - 3) // 2 + 1
        w = (w + 2 - 3) // 2 + 1
        c_in = c_out
    flat = c_in * h * w
    cur = rec.reshape(cur, (-1, flat))
    cur = _fc(rec, cur, "fc1", flat, fc_hidden)
    return _fc(rec, cur, "fc2", fc_hidden, n_classes, last=True)


def _build(name, input_shape, n_classes, graph: Callable) -> ModelSpec:
    logits = ComputationRecord()
    logits.set_output(graph(logits))
    loss = ComputationRecord()
    out = graph(loss)
    y = loss.add_input("y")
    loss.set_output(loss.softmax_xent(out, y))
    if logits.layout != loss.layout:
        raise LayoutError("logits/loss records disagree on layout")
    return ModelSpec(name=name, input_shape=input_shape, n_classes=n_classes,
                     logits_record=logits, loss_record=loss)


def build_mlp_tiny(input_dim: int, n_classes: int, hidden: int = 32) -> ModelSpec:
    return _build("mlp-tiny", (input_dim,), n_classes,
                  lambda rec: _mlp_tiny_graph(rec, input_dim, n_classes, hidden))


def build_cnn_small(input_shape: tuple[int, int, int], n_classes: int,
                    channels=(8, 16), fc_hidden: int = 32) -> ModelSpec:
    return _build("cnn-small", tuple(input_shape), n_classes,
                  lambda rec: _cnn_graph(rec, input_shape, n_classes,
                                         tuple(channels), fc_hidden))


def build_cnn_med(input_shape: tuple[int, int, int], n_classes: int,
                  channels=(16, 32, 64), fc_hidden: int = 64) -> ModelSpec:
    return _build("cnn-med", tuple(input_shape), n_classes,
                  lambda rec: _cnn_graph(rec, input_shape, n_classes,
                                         tuple(channels), fc_hidden))


def build_model(name: str, input_shape, n_classes: int, **kw) -> ModelSpec:
    if name == "mlp-tiny":
        if len(input_shape) != 1:
            input_shape = (int(np.prod(input_shape)),)
        return build_mlp_tiny(input_shape[0], n_classes, **kw)
    if name == "cnn-small":
        return build_cnn_small(tuple(input_shape), n_classes, **kw)
    if name == "cnn-med":
        return build_cnn_med(tuple(input_shape), n_classes, **kw)
    raise LayoutError(f"unknown model {name!r}")
