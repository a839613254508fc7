"""Optional latent stage: a 1-D convolutional (or linear) autoencoder over
parameter vectors, trained with noise augmentation on both the inputs and
the latent representations.

Off by default for small vectors so the inversion round-trip properties stay
exact in raw space; enabled above the size threshold to cut denoiser cost.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import ComputationRecord, evaluate, value_and_grad
from .exceptions import LayoutError, NumericError
from .optim import make_optimizer


@dataclass
class AutoencoderConfig:
    latent_dim: int = 64
    kind: str = "conv"           # conv | linear
    base_channels: int = 16
    identity_init: bool = False  # linear only; requires latent_dim == input dim
    augment_sigma_input: float = 1e-3   # relative to per-dimension data std
    augment_sigma_latent: float = 1e-3
    steps: int = 2000
    batch_size: int = 32
    lr: float = 1e-3
    optimizer: str = "adam"
    divergence_factor: float = 10.0
    divergence_patience: int = 100


@dataclass
class AutoencoderPair:
    """Encoder/decoder records sharing one flat parameter vector.

    Conv encoders see inputs zero-padded to pad_to (a multiple of 8); the
    decoder slices its output back to input_dim, so encode/decode take and
    return raw-width vectors."""

    input_dim: int
    latent_dim: int
    kind: str
    pad_to: int
    enc_record: ComputationRecord
    dec_record: ComputationRecord
    train_record: ComputationRecord
    params: np.ndarray
    augment_sigma_input: float
    augment_sigma_latent: float
    loss_trace: list = field(default_factory=list)

    def _check(self, vec, dim, what):
        vec = np.asarray(vec)
        if vec.shape[-1] != dim:
            raise LayoutError(f"{what} dimension {vec.shape[-1]} != {dim}")
        return vec

    def _pad(self, x: np.ndarray) -> np.ndarray:
        if x.shape[-1] == self.pad_to:
            return x
        return np.pad(x, ((0, 0), (0, self.pad_to - x.shape[-1])))


def encode(ae: AutoencoderPair, vec: np.ndarray,
           rng: np.random.Generator | None = None,
           augment: bool = False) -> np.ndarray:
    """Deterministic latent unless augment is on, which adds Gaussian noise
    of augment_sigma_latent from the supplied stream."""
    vec = ae._check(vec, ae.input_dim, "input")
    squeeze = vec.ndim == 1
    z = evaluate(ae.enc_record, ae.params.astype(vec.dtype),
                 {"x": ae._pad(np.atleast_2d(vec))})
    if augment:
        if rng is None:
            raise ValueError("augmented encode needs an rng")
        z = z + ae.augment_sigma_latent * rng.standard_normal(z.shape).astype(z.dtype)
    return z[0] if squeeze else z


def decode(ae: AutoencoderPair, latent: np.ndarray) -> np.ndarray:
    latent = ae._check(latent, ae.latent_dim, "latent")
    squeeze = latent.ndim == 1
    out = evaluate(ae.dec_record, ae.params.astype(latent.dtype),
                   {"z": np.atleast_2d(latent)})
    return out[0] if squeeze else out


def _linear_graphs(dim, latent_dim, identity_init):
    if identity_init and latent_dim != dim:
        raise LayoutError("identity init requires latent_dim == input dim")
    w_init = ("identity",) if identity_init else ("glorot", dim, latent_dim)
    wd_init = ("identity",) if identity_init else ("glorot", latent_dim, dim)

    def declare(rec):
        return {
            "enc.w": rec.add_param("enc.w", (dim, latent_dim), init=w_init),
            "enc.b": rec.add_param("enc.b", (latent_dim,), init=("zeros",)),
            "dec.w": rec.add_param("dec.w", (latent_dim, dim), init=wd_init),
            "dec.b": rec.add_param("dec.b", (dim,), init=("zeros",)),
        }

    def enc(rec, p, x):
        return rec.affine(x, p["enc.w"], p["enc.b"])

    def dec(rec, p, z):
        return rec.affine(z, p["dec.w"], p["dec.b"])

    return declare, enc, dec, dim


def _conv_graphs(dim, latent_dim, base):
    # three stride-2 conv blocks -> flatten -> affine bottleneck; the decoder
    # mirrors them with nearest upsampling and slices back to dim
    pad_to = max(8, -(-dim // 8) * 8)
    l3 = pad_to // 8
    chans = [(1, base), (base, 2 * base), (2 * base, 4 * base)]
    flat = 4 * base * l3

    def declare(rec):
        p = {}
        for i, (ci, co) in enumerate(chans):
            p[f"enc{i}.w"] = rec.add_param(f"enc{i}.w", (co, ci, 3),
                                           init=("he", ci * 3))
            p[f"enc{i}.b"] = rec.add_param(f"enc{i}.b", (co,), init=("zeros",))
        p["bott.w"] = rec.add_param("bott.w", (flat, latent_dim),
                                    init=("glorot", flat, latent_dim))
        p["bott.b"] = rec.add_param("bott.b", (latent_dim,), init=("zeros",))
        p["unbott.w"] = rec.add_param("unbott.w", (latent_dim, flat),
                                      init=("glorot", latent_dim, flat))
        p["unbott.b"] = rec.add_param("unbott.b", (flat,), init=("zeros",))
        for i, (ci, co) in enumerate(reversed(chans)):
            p[f"dec{i}.w"] = rec.add_param(f"dec{i}.w", (ci, co, 3),
                                           init=("he", co * 3))
            p[f"dec{i}.b"] = rec.add_param(f"dec{i}.b", (ci,), init=("zeros",))
        return p

    def enc(rec, p, x):
        h = rec.reshape(x, (-1, 1, pad_to))
        for i in range(3):
            h = rec.silu(rec.conv1d(h, p[f"enc{i}.w"], p[f"enc{i}.b"],
                                    stride=2, pad=1))
        h = rec.reshape(h, (-1, flat))
        return rec.affine(h, p["bott.w"], p["bott.b"])

    def dec(rec, p, z):
        h = rec.affine(z, p["unbott.w"], p["unbott.b"])
        h = rec.reshape(h, (-1, 4 * base, l3))
        for i in range(3):
            h = rec.upsample1d(h, 2)
            h = rec.conv1d(h, p[f"dec{i}.w"], p[f"dec{i}.b"], stride=1, pad=1)
            if i < 2:
                h = rec.silu(h)
        return rec.slice_last(rec.reshape(h, (-1, pad_to)), dim)

    return declare, enc, dec, pad_to


def build_autoencoder(input_dim: int, cfg: AutoencoderConfig,
                      rng: np.random.Generator) -> AutoencoderPair:
    if cfg.latent_dim > input_dim:
        raise LayoutError(f"latent_dim {cfg.latent_dim} exceeds input {input_dim}")
    if cfg.kind == "linear":
        declare, enc, dec, pad_to = _linear_graphs(input_dim, cfg.latent_dim,
                                                   cfg.identity_init)
    elif cfg.kind == "conv":
        declare, enc, dec, pad_to = _conv_graphs(input_dim, cfg.latent_dim,
                                                 cfg.base_channels)
    else:
        raise LayoutError(f"unknown autoencoder kind {cfg.kind!r}")

    enc_rec = ComputationRecord()
    p = declare(enc_rec)
    x = enc_rec.add_input("x")
    enc_rec.set_output(enc(enc_rec, p, x))

    dec_rec = ComputationRecord()
    p = declare(dec_rec)
    z = dec_rec.add_input("z")
    dec_rec.set_output(dec(dec_rec, p, z))

    # training graph: x_aug -> encode -> +latent noise -> decode -> MSE
    # against the clean (unpadded) target
    tr = ComputationRecord()
    p = declare(tr)
    x = tr.add_input("x")                 # padded, noise already added
    nlat = tr.add_input("noise_latent")   # pre-scaled latent noise
    target = tr.add_input("target")       # clean, raw width
    zed = enc(tr, p, x)
    xhat = dec(tr, p, tr.add(zed, nlat))
    neg = tr.add_const(np.asarray(-1.0))
    diff = tr.add(xhat, tr.mul(target, neg))
    tr.set_output(tr.mean(tr.sum(tr.mul(diff, diff), axis=-1)))

    if not (enc_rec.layout == dec_rec.layout == tr.layout):
        raise LayoutError("autoencoder records disagree on layout")
    return AutoencoderPair(input_dim=input_dim, latent_dim=cfg.latent_dim,
                           kind=cfg.kind, pad_to=pad_to, enc_record=enc_rec,
                           dec_record=dec_rec, train_record=tr,
                           params=tr.init_params(rng, dtype=np.float32),
                           augment_sigma_input=cfg.augment_sigma_input,
                           augment_sigma_latent=cfg.augment_sigma_latent)


def train_autoencoder(vectors: np.ndarray, cfg: AutoencoderConfig,
                      rng: np.random.Generator) -> AutoencoderPair:
    """Minimize reconstruction MSE with noise augmentation; the augment
    sigmas are interpreted relative to the per-dimension data std."""
    data = np.atleast_2d(np.asarray(vectors, dtype=np.float32))
    if data.shape[0] < 2:
        raise ValueError("autoencoder training needs at least 2 vectors")
    ae = build_autoencoder(data.shape[1], cfg, rng)
    opt = make_optimizer(cfg.optimizer, cfg.lr)
    data_std = np.maximum(data.std(axis=0), 1e-12).astype(np.float32)
    sig_in = cfg.augment_sigma_input * data_std
    initial = None
    bad = 0
    for k in range(cfg.steps):
        bs = min(cfg.batch_size, data.shape[0])
        idx = rng.integers(0, data.shape[0], size=bs)
        x = data[idx]
        x_aug = x
        if cfg.augment_sigma_input > 0:
            x_aug = x + (sig_in * rng.standard_normal(x.shape)).astype(np.float32)
        nlat = np.zeros((bs, cfg.latent_dim), dtype=np.float32)
        if cfg.augment_sigma_latent > 0:
            nlat = (cfg.augment_sigma_latent
                    * rng.standard_normal(nlat.shape)).astype(np.float32)
        loss, grads = value_and_grad(ae.train_record, ae.params,
                                     {"x": ae._pad(x_aug),
                                      "noise_latent": nlat, "target": x})
        if not math.isfinite(loss):
            raise NumericError(f"non-finite autoencoder loss at step {k}", step=k)
        if initial is None:
            initial = max(loss, 1e-12)
        if loss > cfg.divergence_factor * initial:
            bad += 1
            if bad >= cfg.divergence_patience:
                raise NumericError(
                    f"autoencoder training diverged at step {k} "
                    f"(loss {loss:.3g} vs initial {initial:.3g})", step=k)
        else:
            bad = 0
        ae.params = opt.update(ae.params, grads)
        ae.loss_trace.append((k, loss))
    return ae
