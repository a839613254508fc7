"""Classifier-guided denoising and the new-client initialization loop.

The guidance signal is the client's own local-update direction: after a
local pass, delta = theta_before - theta_after stands in for the
log-likelihood gradient, and the guided noise estimate

    eps_guided(theta, t) = eps_phi(theta, t) - (1 + omega) * delta

steers denoising sampling toward parameters that fit the client's data.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .clients import ClientState, LocalUpdateConfig, evaluate, local_update
from .diffusion import NoiseSchedule, forward_marginal, reverse_mean
from .exceptions import NumericError


@dataclass
class GuidanceConfig:
    omega: float = 0.5            # guidance strength
    init_rounds: int = 5          # I: guided initialization rounds
    denoise_steps: int = 10       # s: reverse steps per round
    start_step: int | None = None  # diffusion step guided denoising starts at
    delta_scale: str = "raw"      # raw | per-lr

    def resolved_start(self) -> int:
        return self.denoise_steps if self.start_step is None else self.start_step

    def validate(self, diffusion_t: int) -> None:
        if self.omega < -1.0:
            raise ValueError("omega must be >= -1")
        if self.init_rounds < 0:
            raise ValueError("init_rounds must be >= 0")
        if not 1 <= self.denoise_steps <= diffusion_t:
            raise ValueError("denoise_steps must lie in 1..diffusion_T")
        start = self.resolved_start()
        if not self.denoise_steps <= start <= diffusion_t:
            raise ValueError("start_step must lie in denoise_steps..diffusion_T")
        if self.delta_scale not in ("raw", "per-lr"):
            raise ValueError(f"unknown delta_scale {self.delta_scale!r}")


def guided_eps(est, theta: np.ndarray, t: int, delta: np.ndarray,
               omega: float) -> np.ndarray:
    """eps_phi(theta, t) - (1 + omega) * delta."""
    theta = np.asarray(theta)
    delta = np.asarray(delta, dtype=theta.dtype)
    if delta.shape != theta.shape:
        raise ValueError(f"delta shape {delta.shape} != theta {theta.shape}")
    return est.eps(theta, t) - (1.0 + omega) * delta


class _GuidedEps:
    """Adapter that substitutes the guided estimate for the raw estimator."""

    def __init__(self, est, delta, omega):
        self.est = est
        self.delta = delta
        self.omega = omega
        self.dim = est.dim

    def eps(self, x, t):
        return guided_eps(self.est, x, t, self.delta, self.omega)


def guided_denoise(est, x: np.ndarray, start_step: int, steps: int,
                   delta: np.ndarray, omega: float, s: NoiseSchedule,
                   rng: np.random.Generator) -> np.ndarray:
    """Run `steps` reverse steps from diffusion step start_step, using the
    guided noise estimate throughout.  The round's delta is reused at every
    step."""
    proxy = _GuidedEps(est, delta, omega)
    theta = np.asarray(x, dtype=np.float64)
    for t in range(start_step, start_step - steps, -1):
        s.check_t(t)
        eps_out = np.asarray(proxy.eps(theta, t), dtype=np.float64)
        mu = reverse_mean(eps_out, theta, t, s)
        sig = s.sigma[t - 1]
        z = rng.standard_normal(theta.shape) if sig > 0 else 0.0
        theta = mu + sig * z
        if not np.all(np.isfinite(theta)):
            raise NumericError(f"non-finite state in guided denoise at t={t}",
                               step=t)
    return theta


def initialize_new_client(server, client: ClientState, gcfg: GuidanceConfig,
                          lcfg: LocalUpdateConfig,
                          rng: np.random.Generator,
                          metrics: list | None = None) -> np.ndarray:
    """Fast-initialize a joining client against a trained server.

    For each of gcfg.init_rounds rounds: local-update, form the update delta,
    diffuse the generated-layer subvector to start_step, run denoise_steps
    guided reverse steps, and hand the result back; finish with one more
    local update.  init_rounds=0 degenerates to a single plain local update.

    `server` must expose estimator / schedule and the project_params /
    unproject_params mapping into the denoiser's training space (see
    harness.ServerState).  Appends (round, accuracy, loss) to `metrics` if
    given."""
    gcfg.validate(server.schedule.T)
    if server.estimator is None:
        raise NumericError("server estimator is not trained")

    theta_hat = client.check_params(client.params).copy()
    theta_prev = theta_hat
    start = gcfg.resolved_start()
    for round_idx in range(1, gcfg.init_rounds + 1):
        theta_l = local_update(client, theta_hat, lcfg)
        if metrics is not None:
            acc, loss = evaluate(client, theta_l)
            metrics.append((round_idx, acc, loss))
        z_prev, _ = server.project_params(theta_prev)
        z_l, retained = server.project_params(theta_l)
        delta_z = z_prev - z_l
        if gcfg.delta_scale == "per-lr":
            delta_z = delta_z / lcfg.lr
        noise = rng.standard_normal(z_l.shape)
        diffused = forward_marginal(z_l, start, noise, server.schedule)
        denoised = guided_denoise(server.estimator, diffused, start,
                                  gcfg.denoise_steps, delta_z, gcfg.omega,
                                  server.schedule, rng)
        if not np.all(np.isfinite(denoised)):
            raise NumericError(f"non-finite init state in round {round_idx}")
        theta_hat = server.unproject_params(denoised, retained).astype(
            client.params.dtype)
        theta_prev = theta_l
    final = local_update(client, theta_hat, lcfg)
    if metrics is not None:
        acc, loss = evaluate(client, final)
        metrics.append((gcfg.init_rounds + 1, acc, loss))
    return final
