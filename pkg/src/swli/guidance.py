"""Classifier-free guidance and the stage-dependent unconditional embedding."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError
from .injection import Stage


@dataclass(frozen=True)
class GuidanceConfig:
    scale_inversion: float = 1.0
    scale_nti: float = 7.5
    scale_edit: float = 7.0

    def __post_init__(self):
        for name in ("scale_inversion", "scale_nti", "scale_edit"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value >= 0):
                raise ConfigError(name, f"must be a finite value >= 0, got {value}")


def cfg_combine(eps_cond, eps_uncond, w: float) -> np.ndarray:
    """w * eps_cond + (1 - w) * eps_uncond."""
    eps_cond = np.asarray(eps_cond, dtype=np.float64)
    eps_uncond = np.asarray(eps_uncond, dtype=np.float64)
    if eps_cond.shape != eps_uncond.shape:
        raise ContractError(f"cannot combine shapes {eps_cond.shape} and {eps_uncond.shape}")
    return w * eps_cond + (1.0 - w) * eps_uncond


def select_uncond(stage: Stage, t: int, null_schedule, base_null):
    """Optimized per-timestep null embedding during Shape, the plain one during Attribute."""
    if stage is Stage.ATTRIBUTE:
        return base_null
    if null_schedule is None or t not in null_schedule:
        raise ContractError(f"no optimized null embedding for timestep {t}; run inversion first")
    return null_schedule.at(t)
