"""Parameter inversion: extract a stepwise latent code from a vector,
reconstruct it exactly, and generate a new vector by substituting the
latent's noises for the sampler's random draws.

All latent algebra runs in float64: the reconstruction recurrence divides by
sqrt(1-beta_t) at every step, amplifying round-off by roughly
1/sqrt(alpha_bar_T) over a full chain, which is what makes 32-bit
round-trips loose.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffusion import NoiseSchedule, reverse_mean
from .exceptions import NumericError


@dataclass
class LatentCode:
    """(theta_T, eps_tilde_T..eps_tilde_1) for one source vector.

    eps_tilde is stored step-indexed: eps_tilde[t-1] is the noise recorded at
    forward step t.  schedule_id ties the code to the schedule that produced
    it."""

    theta_T: np.ndarray
    eps_tilde: np.ndarray  # (T, dim) float64
    schedule_id: str

    @property
    def T(self) -> int:
        return int(self.eps_tilde.shape[0])

    @property
    def dim(self) -> int:
        return int(self.theta_T.shape[0])

    def check_schedule(self, s: NoiseSchedule) -> None:
        if self.schedule_id != s.schedule_id or self.T != s.T:
            raise ValueError(
                f"latent code built for schedule {self.schedule_id} (T={self.T}), "
                f"got {s.schedule_id} (T={s.T})")


def extract_latent(theta0: np.ndarray, s: NoiseSchedule,
                   rng: np.random.Generator) -> LatentCode:
    """Run the stochastic forward chain theta_0 -> ... -> theta_T and record
    each step's injected noise.

    The recorded eps_tilde_t is algebraically
    (theta_t - sqrt(1-beta_t) theta_{t-1}) / sqrt(beta_t), i.e. exactly the
    draw that produced the step, so it is stored directly (bit-exact)."""
    theta = np.asarray(theta0, dtype=np.float64)
    if not np.all(np.isfinite(theta)):
        raise NumericError("non-finite input to extract_latent")
    d = theta.shape[0]
    eps_tilde = np.empty((s.T, d), dtype=np.float64)
    for t in range(1, s.T + 1):
        z = rng.standard_normal(d)
        eps_tilde[t - 1] = z
        theta = np.sqrt(1.0 - s.beta[t - 1]) * theta + np.sqrt(s.beta[t - 1]) * z
    return LatentCode(theta_T=theta, eps_tilde=eps_tilde,
                      schedule_id=s.schedule_id)


def reconstruct(latent: LatentCode, s: NoiseSchedule) -> np.ndarray:
    """Invert the forward chain exactly:
    theta_{t-1} = (theta_t - sqrt(beta_t) eps_tilde_t) / sqrt(1-beta_t)."""
    latent.check_schedule(s)
    theta = latent.theta_T.astype(np.float64, copy=True)
    for t in range(s.T, 0, -1):
        theta = ((theta - np.sqrt(s.beta[t - 1]) * latent.eps_tilde[t - 1])
                 / np.sqrt(1.0 - s.beta[t - 1]))
    return theta


def invert_generate(est, latent: LatentCode, s: NoiseSchedule,
                    noise_sign: str = "minus") -> np.ndarray:
    """Denoising sampling seeded at latent.theta_T with the sampler noise
    replaced by the latent's own eps_tilde at every step:

        theta_{t-1} = mu_phi(theta_t, t) -/+ sigma_t * eps_tilde_t

    The default sign is minus, following the injection formula verbatim;
    "plus" matches the ancestral sampler's sign convention (the two differ
    only by the sign of an exchangeable standard normal in distribution, but
    differ pointwise for a fixed latent).  sigma_1 = 0, so eps_tilde_1 never
    enters the final step."""
    latent.check_schedule(s)
    if noise_sign not in ("minus", "plus"):
        raise ValueError(f"noise_sign must be minus|plus, got {noise_sign!r}")
    sign = -1.0 if noise_sign == "minus" else 1.0
    theta = latent.theta_T.astype(np.float64, copy=True)
    for t in range(s.T, 0, -1):
        eps_out = np.asarray(est.eps(theta, t), dtype=np.float64)
        theta = (reverse_mean(eps_out, theta, t, s)
                 + sign * s.sigma[t - 1] * latent.eps_tilde[t - 1])
        if not np.all(np.isfinite(theta)):
            raise NumericError(f"non-finite state at inversion step {t}", step=t)
    return theta
