"""Diffusion noise schedule, closed-form forward noising and the reverse
posterior sampler conditioned on a clean-sample prediction."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

BETA_MIN = 1e-6
BETA_MAX = 0.999


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    """Arrays are indexed by timestep: beta[0] is unused padding, and
    alpha_bar[0] == 1 is the empty product."""

    T: int
    beta: np.ndarray       # (T+1,), beta[1..T] in (0, BETA_MAX]
    alpha: np.ndarray      # (T+1,), alpha[t] = 1 - beta[t]
    alpha_bar: np.ndarray  # (T+1,), cumulative product of alpha[1..t]

    def __post_init__(self):
        if self.T < 1:
            raise ScheduleError(f"T must be >= 1, got {self.T}")
        for name in ("beta", "alpha", "alpha_bar"):
            arr = getattr(self, name)
            if arr.shape != (self.T + 1,):
                raise ScheduleError(f"{name} must have shape ({self.T + 1},)")
        if self.alpha_bar[0] != 1.0:
            raise ScheduleError("alpha_bar[0] must be exactly 1")
        body = self.beta[1:]
        if np.any(body <= 0) or np.any(body >= 1):
            raise ScheduleError("beta[t] must lie in (0, 1)")
        if np.any(np.diff(self.alpha_bar) >= 0):
            raise ScheduleError("alpha_bar must be strictly decreasing")
        if np.max(np.abs(self.alpha_bar - np.cumprod(self.alpha))) > 1e-12:
            raise ScheduleError("alpha_bar does not match the product of alphas")

    def _check_t(self, t: int):
        if not 1 <= t <= self.T:
            raise ScheduleError(f"timestep {t} outside [1, {self.T}]")

    def q_sample(self, x0: np.ndarray, t: int, eps: np.ndarray) -> np.ndarray:
        """Forward-noised sample sqrt(a_bar_t) * x0 + sqrt(1 - a_bar_t) * eps."""
        self._check_t(t)
        x0 = np.asarray(x0, dtype=np.float64)
        eps = np.asarray(eps, dtype=np.float64)
        if eps.shape != x0.shape:
            raise ScheduleError(f"eps shape {eps.shape} != x0 shape {x0.shape}")
        ab = self.alpha_bar[t]
        return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps

    def posterior_coefficients(self, t: int) -> tuple:
        """(coef on x0_hat, coef on x_t, posterior variance) at step t."""
        self._check_t(t)
        ab_t, ab_prev = self.alpha_bar[t], self.alpha_bar[t - 1]
        beta_t, alpha_t = self.beta[t], self.alpha[t]
        denom = 1.0 - ab_t
        coef_x0 = np.sqrt(ab_prev) * beta_t / denom
        coef_xt = np.sqrt(alpha_t) * (1.0 - ab_prev) / denom
        var = (1.0 - ab_prev) / denom * beta_t
        return coef_x0, coef_xt, var

    def posterior_sample(self, x_t: np.ndarray, x0_hat: np.ndarray, t: int,
                         z: np.ndarray) -> np.ndarray:
        """One reverse step: posterior mean given (x_t, x0_hat) plus scaled noise.

        At t = 1 the posterior variance is exactly zero, so the caller's
        z = 0 convention there is automatic.
        """
        x_t = np.asarray(x_t, dtype=np.float64)
        x0_hat = np.asarray(x0_hat, dtype=np.float64)
        z = np.asarray(z, dtype=np.float64)
        if x0_hat.shape != x_t.shape or z.shape != x_t.shape:
            raise ScheduleError("x_t, x0_hat and z must share a shape")
        coef_x0, coef_xt, var = self.posterior_coefficients(t)
        return coef_x0 * x0_hat + coef_xt * x_t + np.sqrt(var) * z


def cosine_schedule(T: int, s: float = 0.008) -> NoiseSchedule:
    """Cosine alpha_bar profile with betas clipped to [BETA_MIN, BETA_MAX].

    alpha_bar is recomputed from the clipped betas so the product identity
    holds exactly.
    """
    if T < 1:
        raise ScheduleError(f"T must be >= 1, got {T}")
    steps = np.arange(T + 1, dtype=np.float64)
    f = np.cos((steps / T + s) / (1.0 + s) * np.pi / 2.0) ** 2
    ab_raw = f / f[0]
    beta_body = np.clip(1.0 - ab_raw[1:] / ab_raw[:-1], BETA_MIN, BETA_MAX)
    beta = np.concatenate([[0.0], beta_body])
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    return NoiseSchedule(T=T, beta=beta, alpha=alpha, alpha_bar=alpha_bar)


def schedule_from_betas(betas: np.ndarray) -> NoiseSchedule:
    """Rebuild a schedule from its stored beta[1..T] array."""
    betas = np.asarray(betas, dtype=np.float64)
    beta = np.concatenate([[0.0], betas])
    alpha = 1.0 - beta
    return NoiseSchedule(T=len(betas), beta=beta, alpha=alpha,
                         alpha_bar=np.cumprod(alpha))
