"""Noise schedule, forward diffusion, DDPM training loss, and ancestral
reverse sampling.

Timesteps are 1-based (t in 1..T) to match the usual chain notation;
schedule tables are stored 0-indexed so beta[t-1] is the step-t variance.
alpha_bar_prev(1) := 1, which forces sigma_1 = 0 and makes the final
reverse step deterministic.

The symbol T here always means diffusion steps; communication rounds are
named rounds_t in the federation config.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from .exceptions import NumericError
from .optim import make_optimizer


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta: np.ndarray        # (T,) float64
    alpha: np.ndarray       # 1 - beta
    alpha_bar: np.ndarray   # cumulative product of alpha
    alpha_bar_prev: np.ndarray  # shifted, with alpha_bar_prev[0] = 1
    sigma: np.ndarray       # posterior std; sigma[0] = 0
    kind: str = "linear"
    schedule_id: str = ""

    def check_t(self, t: int) -> int:
        t = int(t)
        if not 1 <= t <= self.T:
            raise ValueError(f"timestep {t} outside 1..{self.T}")
        return t


def schedule_from_betas(beta: np.ndarray, kind: str = "custom") -> NoiseSchedule:
    """Derive all schedule tables from an explicit beta sequence."""
    beta = np.asarray(beta, dtype=np.float64).copy()
    T = len(beta)
    if T < 1 or np.any(beta <= 0) or np.any(beta >= 1):
        raise ValueError("betas must be a non-empty sequence in (0, 1)")
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    alpha_bar_prev = np.concatenate([[1.0], alpha_bar[:-1]])
    sigma = np.sqrt((1.0 - alpha_bar_prev) / (1.0 - alpha_bar) * beta)
    sid = hashlib.sha256(
        np.ascontiguousarray(beta).tobytes() + T.to_bytes(8, "little")
    ).hexdigest()[:16]
    for arr in (beta, alpha, alpha_bar, alpha_bar_prev, sigma):
        arr.setflags(write=False)
    return NoiseSchedule(T=T, beta=beta, alpha=alpha, alpha_bar=alpha_bar,
                         alpha_bar_prev=alpha_bar_prev, sigma=sigma,
                         kind=kind, schedule_id=sid)


def make_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02,
                  kind: str = "linear") -> NoiseSchedule:
    """Build the variance schedule plus its derived tables."""
    if T < 1:
        raise ValueError("T must be >= 1")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError(f"betas out of range: ({beta_start}, {beta_end})")
    if kind == "linear":
        beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    elif kind == "cosine":
        s = 0.008
        ts = np.arange(T + 1, dtype=np.float64) / T
        f = np.cos((ts + s) / (1 + s) * np.pi / 2.0) ** 2
        abar = f / f[0]
        beta = np.clip(1.0 - abar[1:] / abar[:-1], 1e-8, 0.999)
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    return schedule_from_betas(beta, kind=kind)


def default_schedule(T: int) -> NoiseSchedule:
    """Linear 1e-4..0.02 at T=1000, rescaled so total noise injected is
    preserved at other step counts."""
    scale = 1000.0 / T
    return make_schedule(T, min(1e-4 * scale, 0.5), min(0.02 * scale, 0.8))


def _gather(table: np.ndarray, t, like: np.ndarray) -> np.ndarray:
    """Schedule entry for step(s) t, broadcastable against `like`."""
    t = np.asarray(t)
    if np.any(t < 1) or np.any(t > len(table)):
        raise ValueError(f"timestep out of range 1..{len(table)}")
    vals = table[t - 1]
    if t.ndim == 0:
        return np.asarray(vals, dtype=like.dtype)
    return vals.reshape((-1,) + (1,) * (like.ndim - 1)).astype(like.dtype)


def forward_marginal(x0: np.ndarray, t, eps: np.ndarray,
                     s: NoiseSchedule) -> np.ndarray:
    """Closed-form q(x_t | x_0):  sqrt(abar_t) x0 + sqrt(1-abar_t) eps."""
    x0 = np.asarray(x0)
    ab = _gather(s.alpha_bar, t, x0)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * np.asarray(eps, dtype=x0.dtype)


def forward_step(x_prev: np.ndarray, t, z: np.ndarray,
                 s: NoiseSchedule) -> np.ndarray:
    """One forward kernel application:  sqrt(1-beta_t) x_{t-1} + sqrt(beta_t) z."""
    x_prev = np.asarray(x_prev)
    b = _gather(s.beta, t, x_prev)
    return np.sqrt(1.0 - b) * x_prev + np.sqrt(b) * np.asarray(z, dtype=x_prev.dtype)


def reverse_mean(eps_out: np.ndarray, x_t: np.ndarray, t: int,
                 s: NoiseSchedule) -> np.ndarray:
    """Posterior mean estimate mu(x_t, t) given a noise prediction."""
    t = s.check_t(t)
    b = x_t.dtype.type(s.beta[t - 1])
    a = x_t.dtype.type(s.alpha[t - 1])
    ab = x_t.dtype.type(s.alpha_bar[t - 1])
    return (x_t - b / np.sqrt(1.0 - ab) * eps_out) / np.sqrt(a)


def reverse_step(est, x_t: np.ndarray, t: int, z: np.ndarray,
                 s: NoiseSchedule) -> np.ndarray:
    """Ancestral sampling step: mu(x_t, t) + sigma_t z."""
    x_t = np.asarray(x_t)
    t = s.check_t(t)
    mu = reverse_mean(est.eps(x_t, t), x_t, t, s)
    sig = x_t.dtype.type(s.sigma[t - 1])
    return mu + sig * np.asarray(z, dtype=x_t.dtype)


def sample(est, s: NoiseSchedule, rng: np.random.Generator, n: int,
           dim: int | None = None) -> np.ndarray:
    """Run the reverse chain from x_T ~ N(0, I) for n independent samples."""
    d = est.dim if dim is None else dim
    x = rng.standard_normal((n, d))
    for t in range(s.T, 0, -1):
        z = rng.standard_normal((n, d)) if t > 1 else np.zeros((n, d))
        x = reverse_step(est, x, t, z, s)
    return x


def score_from_eps(eps_out: np.ndarray, t, s: NoiseSchedule) -> np.ndarray:
    """Score-function view of a noise prediction: -eps / sqrt(1-abar_t)."""
    eps_out = np.asarray(eps_out)
    ab = _gather(s.alpha_bar, t, eps_out)
    return -eps_out / np.sqrt(1.0 - ab)


def ddpm_loss(est, batch_x0: np.ndarray, s: NoiseSchedule,
              rng: np.random.Generator) -> float:
    """Monte Carlo denoising loss: mean_batch ||eps - eps_hat(x_t, t)||^2
    with t uniform on 1..T."""
    x0 = np.atleast_2d(np.asarray(batch_x0))
    if x0.shape[0] == 0:
        raise ValueError("empty batch")
    B = x0.shape[0]
    t = rng.integers(1, s.T + 1, size=B)
    eps = rng.standard_normal(x0.shape)
    x_t = forward_marginal(x0, t, eps, s)
    diff = eps.astype(x_t.dtype) - est.eps(x_t, t)
    loss = float((diff * diff).sum(axis=-1).mean())
    if not math.isfinite(loss):
        raise NumericError("non-finite denoising loss")
    return loss


@dataclass
class DiffusionTrainConfig:
    steps: int = 2000
    batch_size: int = 64
    lr: float = 1e-4
    optimizer: str = "adam"  # adam | sgd
    momentum: float = 0.9
    hidden: int = 256
    depth: int = 3
    time_dim: int = 64
    unet_threshold: int = 4096  # above this dim, use the 1-D conv U-Net
    augment_sigma: float = 0.0  # corpus noise augmentation, in training space
    divergence_factor: float = 10.0
    divergence_patience: int = 100


class DiffusionTrainer:
    """Owns an estimator plus persistent optimizer state across train calls."""

    def __init__(self, dim: int, cfg: DiffusionTrainConfig, s: NoiseSchedule,
                 rng: np.random.Generator):
        from .estimators import make_estimator
        self.cfg = cfg
        self.sched = s
        self.est = make_estimator(dim, cfg, s, rng)
        self.opt = make_optimizer(cfg.optimizer, cfg.lr, cfg.momentum)
        self.loss_trace: list[tuple[int, float]] = []
        self._initial_loss: float | None = None
        self._bad_streak = 0

    def train(self, dataset: np.ndarray, steps: int,
              rng: np.random.Generator) -> None:
        data = np.atleast_2d(np.asarray(dataset, dtype=np.float32))
        if data.shape[0] < 2:
            raise ValueError("diffusion training needs at least 2 vectors")
        step0 = len(self.loss_trace)
        for k in range(steps):
            bs = min(self.cfg.batch_size, data.shape[0])
            idx = rng.integers(0, data.shape[0], size=bs)
            x0 = data[idx]
            if self.cfg.augment_sigma > 0:
                x0 = x0 + (self.cfg.augment_sigma
                           * rng.standard_normal(x0.shape).astype(x0.dtype))
            t = rng.integers(1, self.sched.T + 1, size=bs)
            eps = rng.standard_normal(x0.shape).astype(np.float32)
            x_t = forward_marginal(x0, t, eps, self.sched)
            loss, grads = self.est.loss_and_grad(x_t, t, eps)
            if not math.isfinite(loss):
                raise NumericError(f"non-finite diffusion loss at step {step0 + k}",
                                   step=step0 + k)
            if self._initial_loss is None:
                self._initial_loss = max(loss, 1e-12)
            if loss > self.cfg.divergence_factor * self._initial_loss:
                self._bad_streak += 1
                if self._bad_streak >= self.cfg.divergence_patience:
                    raise NumericError(
                        f"diffusion training diverged: loss {loss:.3g} > "
                        f"{self.cfg.divergence_factor}x initial "
                        f"{self._initial_loss:.3g} for "
                        f"{self._bad_streak} consecutive steps "
                        f"(step {step0 + k})", step=step0 + k)
            else:
                self._bad_streak = 0
            self.est.params = self.opt.update(self.est.params, grads)
            self.loss_trace.append((step0 + k, loss))


def train_diffusion(dataset: np.ndarray, cfg: DiffusionTrainConfig,
                    s: NoiseSchedule, rng: np.random.Generator):
    """One-shot training entry point; returns the estimator with its loss
    trace attached."""
    data = np.atleast_2d(np.asarray(dataset))
    trainer = DiffusionTrainer(data.shape[1], cfg, s, rng)
    trainer.train(data, cfg.steps, rng)
    trainer.est.loss_trace = list(trainer.loss_trace)
    return trainer.est
