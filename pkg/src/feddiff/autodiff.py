"""Minimal reverse-mode differentiation over fixed computation records.

A ComputationRecord is a static DAG of primitive ops whose leaves are named
batch inputs, flat-parameter segments, and baked-in constants.  Replaying the
record forward is bit-exact for identical inputs; value_and_grad replays it
forward and then walks the op list in reverse accumulating gradients in a
fixed order, so results are identical no matter how callers schedule work.

The primitive set is deliberately small: affine, 1-D/2-D convolution,
ReLU/GeLU/SiLU, layer norm, softmax cross-entropy, mean/sum reductions,
elementwise add/mul, plus the structural ops (reshape, slice_last,
upsample1d) needed to wire convolutional estimators.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .codec import Layout
from .exceptions import LayoutError, NumericError

_GELU_C = math.sqrt(2.0 / math.pi)


@dataclass(frozen=True)
class Op:
    kind: str
    inputs: tuple[int, ...]
    attrs: tuple[tuple[str, object], ...] = ()

    def attr(self, name):
        for k, v in self.attrs:
            if k == name:
                return v
        raise KeyError(name)


@dataclass(frozen=True)
class ParamSpec:
    name: str
    shape: tuple[int, ...]
    init: tuple


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _unbroadcast(g, shape):
    """Sum a gradient down to the shape it was broadcast from."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, (gs, ss) in enumerate(zip(g.shape, shape)):
        if ss == 1 and gs != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def _conv1d_bounds(L, K, stride, pad):
    Lout = (L + 2 * pad - K) // stride + 1
    if Lout < 1:
        raise LayoutError(f"conv1d output empty: L={L} K={K} stride={stride} pad={pad}")
    return Lout


# ---------------------------------------------------------------------------
# forward evaluation per primitive


def _fwd_affine(x, w, b):
    return x @ w + b


def _fwd_conv1d(x, w, b, stride, pad):
    B, Cin, L = x.shape
    Cout, _, K = w.shape
    Lout = _conv1d_bounds(L, K, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad))) if pad else x
    y = np.zeros((B, Cout, Lout), dtype=x.dtype)
    for k in range(K):
        seg = xp[:, :, k:k + stride * (Lout - 1) + 1:stride]
        y += np.einsum("bcl,oc->bol", seg, w[:, :, k])
    return y + b[None, :, None]


def _fwd_conv2d(x, w, b, stride, pad):
    B, Cin, H, W = x.shape
    Cout, _, KH, KW = w.shape
    Hout = _conv1d_bounds(H, KH, stride, pad)
    Wout = _conv1d_bounds(W, KW, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    y = np.zeros((B, Cout, Hout, Wout), dtype=x.dtype)
    for kh in range(KH):
        for kw in range(KW):
            seg = xp[:, :, kh:kh + stride * (Hout - 1) + 1:stride,
                     kw:kw + stride * (Wout - 1) + 1:stride]
            y += np.einsum("bchw,oc->bohw", seg, w[:, :, kh, kw])
    return y + b[None, :, None, None]


def _layer_norm_parts(x, eps):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.dtype))
    return xc * inv, inv


def _fwd_softmax_xent(logits, labels):
    B = logits.shape[0]
    z = logits - logits.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    return -logp[np.arange(B), labels].mean()


# ---------------------------------------------------------------------------
# record


class ComputationRecord:
    """Static op list over named inputs, flat parameters, and constants."""

    def __init__(self):
        # node := ("input", name) | ("param", idx) | ("const", idx) | ("op", Op)
        self._nodes: list[tuple] = []
        self.input_names: list[str] = []
        self.params: list[ParamSpec] = []
        self.consts: list[np.ndarray] = []
        self.output: int | None = None

    # -- construction -------------------------------------------------------

    def _append(self, node) -> int:
        self._nodes.append(node)
        return len(self._nodes) - 1

    def add_input(self, name: str) -> int:
        if name in self.input_names:
            raise LayoutError(f"duplicate input {name!r}")
        self.input_names.append(name)
        return self._append(("input", name))

    def add_param(self, name: str, shape, init=("zeros",)) -> int:
        if any(p.name == name for p in self.params):
            raise LayoutError(f"duplicate parameter {name!r}")
        spec = ParamSpec(name, tuple(int(d) for d in shape), tuple(init))
        self.params.append(spec)
        return self._append(("param", len(self.params) - 1))

    def add_const(self, value) -> int:
        self.consts.append(np.asarray(value))
        return self._append(("const", len(self.consts) - 1))

    def _op(self, kind: str, inputs, **attrs) -> int:
        for i in inputs:
            if not (0 <= i < len(self._nodes)):
                raise LayoutError(f"op {kind} references unknown node {i}")
        return self._append(("op", Op(kind, tuple(inputs), tuple(attrs.items()))))

    def affine(self, x, w, b):
        return self._op("affine", (x, w, b))

    def conv1d(self, x, w, b, stride=1, pad=0):
        return self._op("conv1d", (x, w, b), stride=stride, pad=pad)

    def conv2d(self, x, w, b, stride=1, pad=0):
        return self._op("conv2d", (x, w, b), stride=stride, pad=pad)

    def relu(self, x):
        return self._op("relu", (x,))

    def gelu(self, x):
        return self._op("gelu", (x,))

    def silu(self, x):
        return self._op("silu", (x,))

    def layer_norm(self, x, gamma, beta, eps=1e-5):
        return self._op("layer_norm", (x, gamma, beta), eps=eps)

    def softmax_xent(self, logits, labels):
        return self._op("softmax_xent", (logits, labels))

    def mean(self, x, axis=None):
        return self._op("mean", (x,), axis=axis)

    def sum(self, x, axis=None):
        return self._op("sum", (x,), axis=axis)

    def add(self, a, b):
        return self._op("add", (a, b))

    def mul(self, a, b):
        return self._op("mul", (a, b))

    def reshape(self, x, shape):
        return self._op("reshape", (x,), shape=tuple(shape))

    def slice_last(self, x, n):
        return self._op("slice_last", (x,), n=int(n))

    def upsample1d(self, x, factor):
        return self._op("upsample1d", (x,), factor=int(factor))

    def set_output(self, node: int) -> None:
        self.output = node

    # -- layout ---------------------------------------------------------------

    @property
    def layout(self) -> Layout:
        return Layout.from_shapes((p.name, p.shape) for p in self.params)

    @property
    def n_params(self) -> int:
        return sum(int(np.prod(p.shape, dtype=np.int64)) if p.shape else 1
                   for p in self.params)

    def init_params(self, rng: np.random.Generator,
                    dtype=np.float32) -> np.ndarray:
        """Draw a fresh flat parameter vector per each ParamSpec's init rule."""
        parts = []
        for p in self.params:
            kind = p.init[0]
            if kind == "zeros":
                arr = np.zeros(p.shape)
            elif kind == "ones":
                arr = np.ones(p.shape)
            elif kind == "he":
                fan_in = p.init[1]
                arr = rng.standard_normal(p.shape) * math.sqrt(2.0 / fan_in)
            elif kind == "glorot":
                fan_in, fan_out = p.init[1], p.init[2]
                lim = math.sqrt(6.0 / (fan_in + fan_out))
                arr = rng.uniform(-lim, lim, p.shape)
            elif kind == "normal":
                arr = rng.standard_normal(p.shape) * p.init[1]
            elif kind == "identity":
                if len(p.shape) != 2 or p.shape[0] != p.shape[1]:
                    raise LayoutError(f"identity init needs square weight, got {p.shape}")
                arr = np.eye(p.shape[0])
            else:
                raise LayoutError(f"unknown init rule {kind!r}")
            parts.append(np.asarray(arr).reshape(-1))
        vec = np.concatenate(parts) if parts else np.zeros(0)
        return vec.astype(dtype)

    # -- evaluation -----------------------------------------------------------

    def _forward(self, theta: np.ndarray, feeds: Mapping[str, np.ndarray]):
        if theta.ndim != 1 or theta.shape[0] != self.n_params:
            raise LayoutError(f"parameter vector length {theta.shape} "
                              f"!= record total {self.n_params}")
        dtype = theta.dtype
        layout = self.layout
        vals: list = [None] * len(self._nodes)
        for nid, node in enumerate(self._nodes):
            tag = node[0]
            if tag == "input":
                name = node[1]
                if name not in feeds:
                    raise LayoutError(f"missing input {name!r}")
                arr = np.asarray(feeds[name])
                if np.issubdtype(arr.dtype, np.floating):
                    arr = arr.astype(dtype, copy=False)
                vals[nid] = arr
            elif tag == "param":
                spec = self.params[node[1]]
                sl = layout.slice(spec.name)
                vals[nid] = theta[sl].reshape(spec.shape)
            elif tag == "const":
                arr = self.consts[node[1]]
                if np.issubdtype(arr.dtype, np.floating):
                    arr = arr.astype(dtype, copy=False)
                vals[nid] = arr
            else:
                op: Op = node[1]
                vals[nid] = np.asarray(self._eval(op, [vals[i] for i in op.inputs]))
        return vals

    @staticmethod
    def _eval(op: Op, x: list) -> np.ndarray:
        k = op.kind
        if k == "affine":
            return _fwd_affine(*x)
        if k == "conv1d":
            return _fwd_conv1d(*x, op.attr("stride"), op.attr("pad"))
        if k == "conv2d":
            return _fwd_conv2d(*x, op.attr("stride"), op.attr("pad"))
        if k == "relu":
            return np.maximum(x[0], 0)
        if k == "gelu":
            v = x[0]
            u = np.tanh(_GELU_C * (v + 0.044715 * v ** 3))
            return 0.5 * v * (1.0 + u)
        if k == "silu":
            return x[0] * _sigmoid(x[0])
        if k == "layer_norm":
            xhat, _ = _layer_norm_parts(x[0], op.attr("eps"))
            return xhat * x[1] + x[2]
        if k == "softmax_xent":
            return _fwd_softmax_xent(x[0], x[1])
        if k == "mean":
            return np.mean(x[0], axis=op.attr("axis"))
        if k == "sum":
            return np.sum(x[0], axis=op.attr("axis"))
        if k == "add":
            return x[0] + x[1]
        if k == "mul":
            return x[0] * x[1]
        if k == "reshape":
            return np.reshape(x[0], op.attr("shape"))
        if k == "slice_last":
            return x[0][..., :op.attr("n")]
        if k == "upsample1d":
            return np.repeat(x[0], op.attr("factor"), axis=-1)
        raise LayoutError(f"unknown op kind {k!r}")

    @staticmethod
    def _grads(op: Op, gy: np.ndarray, x: list) -> list:
        k = op.kind
        if k == "affine":
            xx, w, _ = x
            return [gy @ w.T, xx.T @ gy, gy.sum(axis=0)]
        if k == "conv1d":
            xx, w, _ = x
            stride, pad = op.attr("stride"), op.attr("pad")
            B, Cin, L = xx.shape
            Cout, _, K = w.shape
            Lout = gy.shape[-1]
            xp = np.pad(xx, ((0, 0), (0, 0), (pad, pad))) if pad else xx
            dxp = np.zeros_like(xp)
            dw = np.zeros_like(w)
            for kk in range(K):
                sl = slice(kk, kk + stride * (Lout - 1) + 1, stride)
                dw[:, :, kk] = np.einsum("bol,bcl->oc", gy, xp[:, :, sl])
                dxp[:, :, sl] += np.einsum("bol,oc->bcl", gy, w[:, :, kk])
            dx = dxp[:, :, pad:pad + L] if pad else dxp
            return [dx, dw, gy.sum(axis=(0, 2))]
        if k == "conv2d":
            xx, w, _ = x
            stride, pad = op.attr("stride"), op.attr("pad")
            B, Cin, H, W = xx.shape
            Cout, _, KH, KW = w.shape
            Hout, Wout = gy.shape[-2], gy.shape[-1]
            xp = (np.pad(xx, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
                  if pad else xx)
            dxp = np.zeros_like(xp)
            dw = np.zeros_like(w)
            for kh in range(KH):
                slh = slice(kh, kh + stride * (Hout - 1) + 1, stride)
                for kw in range(KW):
                    slw = slice(kw, kw + stride * (Wout - 1) + 1, stride)
                    seg = xp[:, :, slh, slw]
                    dw[:, :, kh, kw] = np.einsum("bohw,bchw->oc", gy, seg)
                    dxp[:, :, slh, slw] += np.einsum("bohw,oc->bchw",
                                                     gy, w[:, :, kh, kw])
            dx = dxp[:, :, pad:pad + H, pad:pad + W] if pad else dxp
            return [dx, dw, gy.sum(axis=(0, 2, 3))]
        if k == "relu":
            return [gy * (x[0] > 0)]
        if k == "gelu":
            v = x[0]
            u = _GELU_C * (v + 0.044715 * v ** 3)
            t = np.tanh(u)
            du = _GELU_C * (1.0 + 3 * 0.044715 * v * v)
            return [gy * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)]
        if k == "silu":
            s = _sigmoid(x[0])
            return [gy * s * (1.0 + x[0] * (1.0 - s))]
        if k == "layer_norm":
            xx, gamma, _ = x
            xhat, inv = _layer_norm_parts(xx, op.attr("eps"))
            dxhat = gy * gamma
            dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
            lead = tuple(range(gy.ndim - 1))
            return [dx, (gy * xhat).sum(axis=lead), gy.sum(axis=lead)]
        if k == "softmax_xent":
            logits, labels = x
            B = logits.shape[0]
            z = logits - logits.max(axis=-1, keepdims=True)
            p = np.exp(z)
            p /= p.sum(axis=-1, keepdims=True)
            p[np.arange(B), labels] -= 1.0
            return [gy * p / B, None]
        if k == "mean":
            axis = op.attr("axis")
            if axis is None:
                return [np.full(x[0].shape, gy / x[0].size, dtype=x[0].dtype)]
            g = np.expand_dims(gy, axis)
            return [(g / x[0].shape[axis]) * np.ones_like(x[0])]
        if k == "sum":
            axis = op.attr("axis")
            if axis is None:
                return [np.full(x[0].shape, gy, dtype=x[0].dtype)]
            return [np.expand_dims(gy, axis) * np.ones_like(x[0])]
        if k == "add":
            return [_unbroadcast(gy, x[0].shape), _unbroadcast(gy, x[1].shape)]
        if k == "mul":
            return [_unbroadcast(gy * x[1], x[0].shape),
                    _unbroadcast(gy * x[0], x[1].shape)]
        if k == "reshape":
            return [gy.reshape(x[0].shape)]
        if k == "slice_last":
            dx = np.zeros_like(x[0])
            dx[..., :op.attr("n")] = gy
            return [dx]
        if k == "upsample1d":
            f = op.attr("factor")
            return [gy.reshape(*x[0].shape, f).sum(axis=-1)]
        raise LayoutError(f"unknown op kind {k!r}")


def evaluate(record: ComputationRecord, params: np.ndarray,
             feeds: Mapping[str, np.ndarray]) -> np.ndarray:
    """Forward replay; returns the output node's value."""
    if record.output is None:
        raise LayoutError("record has no output")
    vals = record._forward(np.asarray(params), feeds)
    return np.asarray(vals[record.output])


def value_and_grad(record: ComputationRecord, params: np.ndarray,
                   feeds: Mapping[str, np.ndarray]) -> tuple[float, np.ndarray]:
    """Scalar loss plus its gradient w.r.t. the flat parameter vector."""
    if record.output is None:
        raise LayoutError("record has no output")
    params = np.asarray(params)
    vals = record._forward(params, feeds)
    out = np.asarray(vals[record.output])
    if out.size != 1:
        raise LayoutError(f"output is not scalar (shape {out.shape})")
    loss = float(out)
    if not math.isfinite(loss):
        for nid, node in enumerate(record._nodes):
            if node[0] == "op" and not np.all(np.isfinite(vals[nid])):
                raise NumericError(
                    f"non-finite value at op {nid} ({node[1].kind})",
                    op_index=nid)
        raise NumericError("non-finite loss", op_index=record.output)

    grads: list = [None] * len(record._nodes)
    grads[record.output] = np.ones_like(out)
    for nid in range(len(record._nodes) - 1, -1, -1):
        node = record._nodes[nid]
        if node[0] != "op" or grads[nid] is None:
            continue
        op: Op = node[1]
        gin = record._grads(op, grads[nid], [vals[i] for i in op.inputs])
        for src, g in zip(op.inputs, gin):
            if g is None:
                continue
            if grads[src] is None:
                grads[src] = g
            else:
                grads[src] = grads[src] + g

    layout = record.layout
    gvec = np.zeros(record.n_params, dtype=params.dtype)
    for nid, node in enumerate(record._nodes):
        if node[0] == "param" and grads[nid] is not None:
            spec = record.params[node[1]]
            gvec[layout.slice(spec.name)] = grads[nid].reshape(-1)
    return loss, gvec


def sgd_step(params: np.ndarray, grads: np.ndarray, lr: float) -> np.ndarray:
    """One plain gradient-descent step: params - lr * grads."""
    params = np.asarray(params)
    grads = np.asarray(grads)
    if params.shape != grads.shape:
        raise LayoutError(f"shape mismatch {params.shape} vs {grads.shape}")
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    return (params - np.asarray(lr, dtype=params.dtype) * grads).astype(
        params.dtype, copy=False)
