"""Variance schedule and the deterministic (eta = 0) DDIM update."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError, NumericError

#: Timestep tag of a clean latent. Its cumulative alpha is exactly 1.
CLEAN = -1


@dataclass(frozen=True)
class NoiseSchedule:
    num_train_steps: int
    num_sample_steps: int
    alpha_bars: np.ndarray = field(repr=False)
    timesteps: tuple[int, ...]
    beta_start: float = 0.0
    beta_end: float = 0.0

    def __post_init__(self):
        ab = np.asarray(self.alpha_bars, dtype=np.float64)
        ab.setflags(write=False)
        object.__setattr__(self, "alpha_bars", ab)
        object.__setattr__(self, "timesteps", tuple(int(t) for t in self.timesteps))
        if ab.shape != (self.num_train_steps,):
            raise ContractError("alpha_bars length must equal num_train_steps")
        if not (np.all(ab > 0) and np.all(ab <= 1)):
            raise ContractError("alpha_bars must lie in (0, 1]")
        if np.any(np.diff(ab) >= 0):
            raise ContractError("alpha_bars must be strictly decreasing")
        ts = self.timesteps
        if len(ts) != self.num_sample_steps:
            raise ContractError("timesteps length must equal num_sample_steps")
        if any(not 0 <= t < self.num_train_steps for t in ts):
            raise ContractError("timesteps out of range")
        if any(a <= b for a, b in zip(ts, ts[1:])):
            raise ContractError("timesteps must be strictly decreasing")

    def alpha_bar(self, t: int) -> float:
        if t == CLEAN:
            return 1.0
        if not 0 <= t < self.num_train_steps:
            raise ContractError(f"timestep {t} outside schedule")
        return float(self.alpha_bars[t])

    def next_timestep(self, step_index: int) -> int:
        """Timestep reached after denoising step ``step_index`` (CLEAN after the last)."""
        if step_index + 1 < self.num_sample_steps:
            return self.timesteps[step_index + 1]
        return CLEAN

    @property
    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(f"{self.num_train_steps}:{self.num_sample_steps}:".encode())
        h.update(np.ascontiguousarray(self.alpha_bars, dtype="<f8").tobytes())
        h.update(np.asarray(self.timesteps, dtype="<i8").tobytes())
        return h.hexdigest()[:16]


def build_schedule(num_train_steps: int = 1000, beta_start: float = 1e-4,
                   beta_end: float = 2e-2, num_sample_steps: int = 50) -> NoiseSchedule:
    """Linear beta ramp with uniformly spaced, descending sampling timesteps."""
    if int(num_train_steps) != num_train_steps or num_train_steps < 1:
        raise ConfigError("num_train_steps", "must be a positive integer")
    if int(num_sample_steps) != num_sample_steps or num_sample_steps < 1:
        raise ConfigError("num_sample_steps", "must be a positive integer")
    if num_sample_steps > num_train_steps:
        raise ConfigError("num_sample_steps", "must not exceed num_train_steps")
    if not 0 < beta_start < 1:
        raise ConfigError("beta_start", "must lie in (0, 1)")
    if not 0 < beta_end < 1:
        raise ConfigError("beta_end", "must lie in (0, 1)")
    if beta_start > beta_end:
        raise ConfigError("beta_start", "must not exceed beta_end")

    betas = np.linspace(beta_start, beta_end, num_train_steps, dtype=np.float64)
    alpha_bars = np.cumprod(1.0 - betas)
    ratio = num_train_steps // num_sample_steps
    timesteps = (np.arange(num_sample_steps) * ratio)[::-1]
    return NoiseSchedule(int(num_train_steps), int(num_sample_steps), alpha_bars,
                         tuple(timesteps), float(beta_start), float(beta_end))


def ddim_update(z, eps, alpha_from: float, alpha_to: float) -> np.ndarray:
    """Move ``z`` from cumulative alpha ``alpha_from`` to ``alpha_to`` along ``eps``.

    The same formula serves both directions; it is its own algebraic inverse
    when the roles of the two alphas are swapped and ``eps`` is shared.
    """
    z = np.asarray(z, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if z.shape != eps.shape:
        raise ContractError(f"eps shape {eps.shape} does not match latent shape {z.shape}")
    if not np.all(np.isfinite(eps)):
        raise NumericError("non-finite noise prediction")
    x0 = (z - np.sqrt(1.0 - alpha_from) * eps) / np.sqrt(alpha_from)
    return np.sqrt(alpha_to) * x0 + np.sqrt(1.0 - alpha_to) * eps


def ddim_step_coefficient(alpha_from: float, alpha_to: float) -> float:
    """d(output)/d(eps) of :func:`ddim_update`; the update is affine in eps."""
    return np.sqrt(1.0 - alpha_to) - np.sqrt(alpha_to / alpha_from) * np.sqrt(1.0 - alpha_from)


def ddim_step(z, eps, t_from: int, t_to: int, schedule: NoiseSchedule) -> np.ndarray:
    """Denoising DDIM step from ``t_from`` to the earlier ``t_to``."""
    if not t_to < t_from:
        raise ContractError(f"ddim_step must denoise: t_to={t_to} is not before t_from={t_from}")
    return ddim_update(z, eps, schedule.alpha_bar(t_from), schedule.alpha_bar(t_to))


def ddim_inverse_step(z, eps, t_from: int, t_to: int, schedule: NoiseSchedule) -> np.ndarray:
    """Noising DDIM step from ``t_from`` to the later ``t_to``."""
    if not t_to > t_from:
        raise ContractError(f"ddim_inverse_step must add noise: t_to={t_to} is not after t_from={t_from}")
    return ddim_update(z, eps, schedule.alpha_bar(t_from), schedule.alpha_bar(t_to))
