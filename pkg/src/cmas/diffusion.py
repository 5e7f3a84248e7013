"""DDPM machinery: cosine schedule, forward noising, and posterior sampling.

Steps are indexed t = 1..T externally (t = T is fully noised); internal arrays
are 0-based with the convention alpha_bar_0 = 1 used by the posterior formulas.
The denoiser contract predicts the clean sequence x0, not the noise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Protocol, runtime_checkable

import numpy as np


@dataclass(frozen=True)
class NoiseSchedule:
    steps: int
    beta: np.ndarray       # (T,), beta[i] is beta_{i+1}
    alpha: np.ndarray      # 1 - beta
    alpha_bar: np.ndarray  # cumulative products of alpha

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        for name in ("beta", "alpha", "alpha_bar"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != (self.steps,):
                raise ValueError(f"{name} must have shape ({self.steps},)")
            object.__setattr__(self, name, arr)
        if np.any((self.beta <= 0.0) | (self.beta >= 1.0)):
            raise ValueError("beta values must lie in (0, 1)")
        if np.any(np.diff(self.alpha_bar) >= 0.0) or self.alpha_bar[-1] <= 0.0:
            raise ValueError("alpha_bar must be strictly decreasing and positive")

    def _check_t(self, t: int) -> int:
        t = int(t)
        if not (1 <= t <= self.steps):
            raise ValueError(f"step {t} outside [1, {self.steps}]")
        return t

    def alpha_bar_at(self, t: int) -> float:
        """alpha_bar_t with the convention alpha_bar_0 = 1."""
        if t == 0:
            return 1.0
        return float(self.alpha_bar[self._check_t(t) - 1])


def cosine_schedule(steps: int) -> NoiseSchedule:
    """Squared-cosine alpha_bar decay with offset s = 0.008 and beta clipped at 0.999."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    s = 0.008
    grid = np.arange(steps + 1, dtype=np.float64) / steps
    f = np.cos((grid + s) / (1.0 + s) * (math.pi / 2.0)) ** 2
    alpha_bar_raw = f / f[0]
    beta = 1.0 - alpha_bar_raw[1:] / alpha_bar_raw[:-1]
    beta = np.minimum(beta, 0.999)
    alpha = 1.0 - beta
    return NoiseSchedule(steps=steps, beta=beta, alpha=alpha, alpha_bar=np.cumprod(alpha))


def forward_sample(x0: np.ndarray, t: int, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps."""
    abar = schedule.alpha_bar_at(schedule._check_t(t))
    return math.sqrt(abar) * np.asarray(x0) + math.sqrt(1.0 - abar) * np.asarray(eps)


def posterior_coefficients(t: int, schedule: NoiseSchedule) -> tuple[float, float, float]:
    """(coefficient of x0_hat, coefficient of x_t, variance) of q(x_{t-1} | x_t, x0)."""
    t = schedule._check_t(t)
    beta = float(schedule.beta[t - 1])
    alpha = float(schedule.alpha[t - 1])
    abar_t = schedule.alpha_bar_at(t)
    abar_prev = schedule.alpha_bar_at(t - 1)
    denom = 1.0 - abar_t
    c0 = math.sqrt(abar_prev) * beta / denom
    ct = math.sqrt(alpha) * (1.0 - abar_prev) / denom
    var = (1.0 - abar_prev) / denom * beta
    return c0, ct, var


def posterior_mean_variance(x_t: np.ndarray, x0_hat: np.ndarray, t: int,
                            schedule: NoiseSchedule) -> tuple[np.ndarray, float]:
    c0, ct, var = posterior_coefficients(t, schedule)
    return c0 * np.asarray(x0_hat) + ct * np.asarray(x_t), var


def posterior_sample(x_t: np.ndarray, x0_hat: np.ndarray, t: int,
                     rng: np.random.Generator, schedule: NoiseSchedule) -> np.ndarray:
    """Draw x_{t-1} from the Gaussian posterior given x_t and a clean estimate.

    At t = 1 the posterior variance is exactly zero (alpha_bar_0 = 1) and the
    mean is returned without consuming the generator.
    """
    mean, var = posterior_mean_variance(x_t, x0_hat, t, schedule)
    if var == 0.0:
        return mean
    return mean + math.sqrt(var) * rng.standard_normal(mean.shape)


@runtime_checkable
class Denoiser(Protocol):
    """Clean-sequence predictor x0_hat = D(x_t, t, view).

    ``x_t`` has shape (..., L, J, 2); implementations must accept leading batch
    dimensions, be deterministic given their inputs, and be safe to call
    concurrently after construction. ``seq_shape`` is the (L, J) the denoiser
    was built for.
    """

    seq_shape: tuple[int, int]

    def predict_clean(self, x_t: np.ndarray, t: int, view_index: int) -> np.ndarray:
        ...
