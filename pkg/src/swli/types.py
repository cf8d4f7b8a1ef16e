"""Value types shared between the backend, injection and pipeline layers."""

from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError


class SiteKind(str, enum.Enum):
    SELF_ATTENTION = "self_attention"
    CROSS_ATTENTION = "cross_attention"


class OverrideMode(str, enum.Enum):
    REPLACE_KV = "replace_kv"
    CONCAT_KV = "concat_kv"


@dataclass(frozen=True, order=True)
class AttentionSiteId:
    layer_index: int
    kind: SiteKind
    resolution_level: int

    def __str__(self):
        short = "sa" if self.kind is SiteKind.SELF_ATTENTION else "ca"
        return f"{short}{self.layer_index}@{self.resolution_level}"


def _frozen_array(values, ndim, what):
    arr = np.array(values, dtype=np.float64)
    if arr.ndim != ndim:
        raise ContractError(f"{what} must be rank-{ndim}, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ContractError(f"{what} contains non-finite values")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class PromptEmbedding:
    """Token embedding matrix (sequence_length x embed_dim) for one prompt."""

    tokens: np.ndarray
    source_text: str = ""

    def __post_init__(self):
        tokens = _frozen_array(self.tokens, 2, "embedding tokens")
        if tokens.shape[0] < 1:
            raise ContractError("embedding needs at least one token")
        object.__setattr__(self, "tokens", tokens)

    @property
    def shape(self):
        return self.tokens.shape

    def replace(self, tokens) -> PromptEmbedding:
        return PromptEmbedding(tokens, self.source_text)

    def __eq__(self, other):
        if not isinstance(other, PromptEmbedding):
            return NotImplemented
        return np.array_equal(self.tokens, other.tokens)

    def __hash__(self):
        return hash(self.tokens.tobytes())

    @property
    def fingerprint(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.tokens, "<f8").tobytes()).hexdigest()[:16]


@dataclass(frozen=True, eq=False)
class KVOverride:
    """Replacement (or prefix) for the hidden states feeding one site's K/V projections."""

    site: AttentionSiteId
    mode: OverrideMode
    features: np.ndarray = field(repr=False)

    def __post_init__(self):
        object.__setattr__(self, "mode", OverrideMode(self.mode))
        object.__setattr__(self, "features", _frozen_array(self.features, 2, f"override features at {self.site}"))

    def summary(self) -> dict:
        return {"site": str(self.site), "mode": self.mode.value, "rows": int(self.features.shape[0])}
