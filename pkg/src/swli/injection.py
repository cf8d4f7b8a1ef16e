"""Attention, the shape/attribute stage gate, and K/V override construction.

Shape steps replace the key/value inputs of the injected self-attention sites
with hidden states captured from the source trajectory. Attribute steps
prepend hidden states captured from the reference trajectory to the site's own
hidden states, so queries attend over both.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError
from .types import AttentionSiteId, KVOverride, OverrideMode, SiteKind


class Stage(str, enum.Enum):
    SHAPE = "shape"
    ATTRIBUTE = "attribute"


def _softmax_rows(scores):
    scores = scores - scores.max(axis=1, keepdims=True)
    weights = np.exp(scores)
    weights /= weights.sum(axis=1, keepdims=True)
    return weights


def attention(q, k, v, return_weights=False):
    """softmax(q k^T / sqrt(d)) v for single-head, rank-2 inputs."""
    q, k, v = np.asarray(q, dtype=np.float64), np.asarray(k, dtype=np.float64), np.asarray(v, dtype=np.float64)
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise ContractError("attention operands must be rank-2")
    if q.shape[1] != k.shape[1]:
        raise ContractError(f"query width {q.shape[1]} != key width {k.shape[1]}")
    if k.shape[0] != v.shape[0]:
        raise ContractError(f"{k.shape[0]} keys but {v.shape[0]} values")
    weights = _softmax_rows(q @ k.T / math.sqrt(q.shape[1]))
    out = weights @ v
    return (out, weights) if return_weights else out


def attention_backward(q, k, v, weights, grad_out):
    """Gradients of :func:`attention` w.r.t. (q, k, v) given the forward weights."""
    scale = 1.0 / math.sqrt(q.shape[1])
    grad_v = weights.T @ grad_out
    grad_w = grad_out @ v.T
    grad_s = weights * (grad_w - np.sum(grad_w * weights, axis=1, keepdims=True))
    grad_q = grad_s @ k * scale
    grad_k = grad_s.T @ q * scale
    return grad_q, grad_k, grad_v


@dataclass(frozen=True)
class InjectionConfig:
    t_early_frac: float = 0.4
    # None selects every self-attention site of the backend.
    injected_sites: tuple[AttentionSiteId, ...] | None = None
    enabled: bool = True

    def __post_init__(self):
        if not 0.0 <= self.t_early_frac <= 1.0 or math.isnan(self.t_early_frac):
            raise ConfigError("t_early_frac", f"must lie in [0, 1], got {self.t_early_frac}")
        if self.injected_sites is not None:
            sites = tuple(self.injected_sites)
            if any(s.kind is not SiteKind.SELF_ATTENTION for s in sites):
                raise ConfigError("injected_sites", "only self-attention sites can be injected")
            object.__setattr__(self, "injected_sites", sites)

    def num_shape_steps(self, total_steps: int) -> int:
        # round() absorbs representation error such as 0.1 * 30 == 3.0000000000000004
        return math.ceil(round(self.t_early_frac * total_steps, 9))

    def resolve_sites(self, backend) -> tuple[AttentionSiteId, ...]:
        available = tuple(s for s in backend.sites if s.kind is SiteKind.SELF_ATTENTION)
        if self.injected_sites is None:
            return available
        unknown = [s for s in self.injected_sites if s not in available]
        if unknown:
            raise ConfigError("injected_sites", f"not self-attention sites of this backend: {unknown}")
        return self.injected_sites


@dataclass(frozen=True)
class FeatureMap:
    features: dict[AttentionSiteId, np.ndarray] = field(repr=False)
    timestep: int

    def __getitem__(self, site):
        return self.features[site]

    def __contains__(self, site):
        return site in self.features

    def keys(self):
        return self.features.keys()


def stage_of(step_index: int, total_steps: int, config: InjectionConfig) -> Stage:
    """Stage of denoising step ``step_index``, counted from the noisiest step."""
    if not 0 <= step_index < total_steps:
        raise ContractError(f"step_index {step_index} outside [0, {total_steps})")
    return Stage.SHAPE if step_index < config.num_shape_steps(total_steps) else Stage.ATTRIBUTE


def capture_features(backend, z, t: int, emb) -> FeatureMap:
    """Hidden states entering every self-attention site during a plain forward pass."""
    _, trace = backend.trace(z, t, emb)
    feats = {s: h for s, h in trace.kv_inputs.items() if s.kind is SiteKind.SELF_ATTENTION}
    return FeatureMap(feats, t)


def _overrides(features: FeatureMap, sites, mode):
    missing = [s for s in sites if s not in features]
    if missing:
        raise ContractError(f"feature map lacks injected sites {[str(s) for s in missing]}")
    return tuple(KVOverride(s, mode, features[s]) for s in sites)


def make_shape_override(source_features: FeatureMap, config: InjectionConfig, sites=None):
    """One replace_kv override per injected site, carrying the source features."""
    sites = config.injected_sites if sites is None else sites
    if sites is None:
        sites = tuple(sorted(source_features.keys()))
    return _overrides(source_features, sites, OverrideMode.REPLACE_KV)


def make_attribute_override(reference_features: FeatureMap, config: InjectionConfig, sites=None):
    """One concat_kv override per injected site; reference rows go first."""
    sites = config.injected_sites if sites is None else sites
    if sites is None:
        sites = tuple(sorted(reference_features.keys()))
    return _overrides(reference_features, sites, OverrideMode.CONCAT_KV)
