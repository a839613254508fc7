"""Trainable noise estimators: an MLP for small vectors and a 1-D
convolutional U-Net (stride-2 downsampling, nearest-neighbour upsampling,
additive skips) for large ones.  Timestep conditioning is a sinusoidal
embedding passed through a learned projection and added per block.

Both architectures predict a residual on top of the fixed baseline
sqrt(1 - alpha_bar_t) * x_t, which is the exact optimum when the training
vectors are standardized Gaussian.  A zero-initialized network therefore
starts as a proper denoiser (the reverse chain contracts by sqrt(alpha_t)
per step) and training only has to learn the structure beyond Gaussianity."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import ComputationRecord, evaluate, value_and_grad
from .exceptions import LayoutError


def sinusoidal_time_embedding(t, dim: int, dtype=np.float32) -> np.ndarray:
    """(B, dim) embedding of integer timesteps; half sines, half cosines."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half - 1, 1))
    ang = t[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)
    if emb.shape[-1] < dim:
        emb = np.pad(emb, ((0, 0), (0, dim - emb.shape[-1])))
    return emb.astype(dtype)


@dataclass
class NoiseEstimator:
    """eps_phi(x_t, t) wrapper holding the record pair and flat parameters."""

    kind: str
    dim: int
    time_dim: int
    pad_to: int
    eps_record: ComputationRecord
    loss_record: ComputationRecord
    params: np.ndarray
    skip_table: np.ndarray  # sqrt(1 - alpha_bar_t), indexed t-1
    arch: dict = field(default_factory=dict)
    loss_trace: list = field(default_factory=list)
    _cast_cache: dict = field(default_factory=dict, repr=False)

    @property
    def n_params(self) -> int:
        return self.eps_record.n_params

    def _params_as(self, dtype) -> np.ndarray:
        if self.params.dtype == dtype:
            return self.params
        key = (id(self.params), np.dtype(dtype).str)
        hit = self._cast_cache.get(key)
        if hit is None:
            self._cast_cache.clear()
            hit = self.params.astype(dtype)
            self._cast_cache[key] = hit
        return hit

    def _pad(self, x: np.ndarray) -> np.ndarray:
        if x.shape[-1] == self.pad_to:
            return x
        return np.pad(x, ((0, 0), (0, self.pad_to - x.shape[-1])))

    def _feeds(self, xb: np.ndarray, tb: np.ndarray, dtype) -> dict:
        temb = sinusoidal_time_embedding(tb, self.time_dim, dtype=dtype)
        coef = self.skip_table[np.asarray(tb, dtype=np.int64) - 1]
        return {"x": self._pad(xb), "temb": temb,
                "skip_coef": coef.reshape(-1, 1).astype(dtype)}

    def eps(self, x: np.ndarray, t) -> np.ndarray:
        """Noise prediction; computed in x's dtype, output shaped like x."""
        x = np.asarray(x)
        squeeze = x.ndim == 1
        xb = np.atleast_2d(x)
        if xb.shape[-1] != self.dim:
            raise LayoutError(f"estimator dim {self.dim} != input {xb.shape[-1]}")
        tb = np.full(xb.shape[0], int(t)) if np.ndim(t) == 0 else np.asarray(t)
        out = evaluate(self.eps_record, self._params_as(x.dtype),
                       self._feeds(xb, tb, x.dtype))
        return out[0] if squeeze else out

    def loss_and_grad(self, x_t: np.ndarray, t: np.ndarray,
                      eps_target: np.ndarray) -> tuple[float, np.ndarray]:
        feeds = self._feeds(np.atleast_2d(x_t), np.asarray(t),
                            self.params.dtype)
        feeds["target"] = np.atleast_2d(eps_target)
        return value_and_grad(self.loss_record, self.params, feeds)


def _append_mse(rec: ComputationRecord, pred: int) -> None:
    target = rec.add_input("target")
    neg = rec.add_const(np.asarray(-1.0))
    diff = rec.add(pred, rec.mul(target, neg))
    per_example = rec.sum(rec.mul(diff, diff), axis=-1)
    rec.set_output(rec.mean(per_example))


def _time_proj(rec, temb, name, time_dim, width):
    w = rec.add_param(f"{name}.w", (time_dim, width), init=("he", time_dim))
    b = rec.add_param(f"{name}.b", (width,), init=("zeros",))
    return rec.affine(temb, w, b)


def _gaussian_skip(rec, x, net_out, dim, pad_to):
    """net_out + skip_coef * x: the analytic optimum for standardized data."""
    coef = rec.add_input("skip_coef")
    raw = rec.slice_last(x, dim) if pad_to != dim else x
    return rec.add(net_out, rec.mul(raw, coef))


def _mlp_graph(rec, dim, hidden, depth, time_dim):
    x = rec.add_input("x")
    temb = rec.add_input("temb")
    w = rec.add_param("in.w", (dim, hidden), init=("he", dim))
    b = rec.add_param("in.b", (hidden,), init=("zeros",))
    h = rec.affine(x, w, b)
    for i in range(depth):
        tp = _time_proj(rec, temb, f"block{i}.t", time_dim, hidden)
        g = rec.add_param(f"block{i}.ln.g", (hidden,), init=("ones",))
        be = rec.add_param(f"block{i}.ln.b", (hidden,), init=("zeros",))
        h = rec.silu(rec.layer_norm(rec.add(h, tp), g, be))
        w = rec.add_param(f"block{i}.w", (hidden, hidden), init=("he", hidden))
        b = rec.add_param(f"block{i}.b", (hidden,), init=("zeros",))
        h = rec.affine(h, w, b)
    wo = rec.add_param("out.w", (hidden, dim), init=("zeros",))
    bo = rec.add_param("out.b", (dim,), init=("zeros",))
    return _gaussian_skip(rec, x, rec.affine(h, wo, bo), dim, dim)


def _conv(rec, x, name, c_in, c_out, stride=1, init="he"):
    rule = ("zeros",) if init == "zeros" else ("he", c_in * 3)
    w = rec.add_param(f"{name}.w", (c_out, c_in, 3), init=rule)
    b = rec.add_param(f"{name}.b", (c_out,), init=("zeros",))
    return rec.conv1d(x, w, b, stride=stride, pad=1)


def _inject_time(rec, h, temb, name, time_dim, channels):
    tp = _time_proj(rec, temb, name, time_dim, channels)
    return rec.add(h, rec.reshape(tp, (-1, channels, 1)))


def _unet1d_graph(rec, dim, pad_to, base, time_dim):
    x = rec.add_input("x")
    temb = rec.add_input("temb")
    img = rec.reshape(x, (-1, 1, pad_to))
    h0 = rec.silu(_inject_time(rec, _conv(rec, img, "stem", 1, base),
                               temb, "stem.t", time_dim, base))
    d1 = rec.silu(_inject_time(rec, _conv(rec, h0, "down1", base, 2 * base, stride=2),
                               temb, "down1.t", time_dim, 2 * base))
    d2 = rec.silu(_inject_time(rec, _conv(rec, d1, "down2", 2 * base, 4 * base, stride=2),
                               temb, "down2.t", time_dim, 4 * base))
    mid = rec.silu(_inject_time(rec, _conv(rec, d2, "mid", 4 * base, 4 * base),
                                temb, "mid.t", time_dim, 4 * base))
    u1 = rec.silu(rec.add(_conv(rec, rec.upsample1d(mid, 2), "up1",
                                4 * base, 2 * base), d1))
    u0 = rec.silu(rec.add(_conv(rec, rec.upsample1d(u1, 2), "up0",
                                2 * base, base), h0))
    out = _conv(rec, u0, "out", base, 1, init="zeros")
    net = rec.slice_last(rec.reshape(out, (-1, pad_to)), dim)
    return _gaussian_skip(rec, x, net, dim, pad_to)


def _skip_table(schedule) -> np.ndarray:
    return np.sqrt(1.0 - schedule.alpha_bar)


def build_mlp_estimator(dim: int, schedule, hidden: int = 256, depth: int = 3,
                        time_dim: int = 64,
                        rng: np.random.Generator | None = None) -> NoiseEstimator:
    if rng is None:
        rng = np.random.default_rng(0)

    def graph(rec):
        return _mlp_graph(rec, dim, hidden, depth, time_dim)

    eps_rec = ComputationRecord()
    eps_rec.set_output(graph(eps_rec))
    loss_rec = ComputationRecord()
    _append_mse(loss_rec, graph(loss_rec))
    arch = {"kind": "mlp", "dim": dim, "hidden": hidden, "depth": depth,
            "time_dim": time_dim}
    return NoiseEstimator(kind="mlp", dim=dim, time_dim=time_dim, pad_to=dim,
                          eps_record=eps_rec, loss_record=loss_rec,
                          params=eps_rec.init_params(rng, dtype=np.float32),
                          skip_table=_skip_table(schedule), arch=arch)


def build_unet1d_estimator(dim: int, schedule, base_channels: int = 32,
                           time_dim: int = 64,
                           rng: np.random.Generator | None = None) -> NoiseEstimator:
    if rng is None:
        rng = np.random.default_rng(0)
    pad_to = max(4, -(-dim // 4) * 4)  # two stride-2 levels need a multiple of 4

    def graph(rec):
        return _unet1d_graph(rec, dim, pad_to, base_channels, time_dim)

    eps_rec = ComputationRecord()
    eps_rec.set_output(graph(eps_rec))
    loss_rec = ComputationRecord()
    _append_mse(loss_rec, graph(loss_rec))
    arch = {"kind": "unet1d", "dim": dim, "base_channels": base_channels,
            "time_dim": time_dim}
    return NoiseEstimator(kind="unet1d", dim=dim, time_dim=time_dim,
                          pad_to=pad_to, eps_record=eps_rec,
                          loss_record=loss_rec,
                          params=eps_rec.init_params(rng, dtype=np.float32),
                          skip_table=_skip_table(schedule), arch=arch)


def make_estimator(dim: int, cfg, schedule,
                   rng: np.random.Generator) -> NoiseEstimator:
    """Pick the architecture by vector size: MLP up to cfg.unet_threshold,
    1-D U-Net above."""
    if dim <= cfg.unet_threshold:
        return build_mlp_estimator(dim, schedule, hidden=cfg.hidden,
                                   depth=cfg.depth, time_dim=cfg.time_dim,
                                   rng=rng)
    return build_unet1d_estimator(dim, schedule, time_dim=cfg.time_dim,
                                  rng=rng)
