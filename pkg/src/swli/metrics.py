"""Desk-scale evaluation metrics.

``palette_distance`` is a per-channel colour-quantile distance. It stands in
for a "palette" perceptual score and is reported as ``palette (quantile)`` so
it is never mistaken for any published number. ``semantic_similarity`` is the
cosine similarity of image embeddings from a pluggable embedder.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, NumericError

PALETTE_LABEL = "palette (quantile)"


def palette_distance(a, b) -> float:
    """Mean absolute difference of sorted channel values, averaged over channels.

    This is the 1-D earth-mover distance between the two per-channel value
    distributions, so it is symmetric, non-negative, and zero exactly when the
    images share every channel's multiset of values.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim != 3:
        raise ContractError("images must be (height, width, channels)")
    channels = a.shape[2]
    qa = np.sort(a.reshape(-1, channels), axis=0)
    qb = np.sort(b.reshape(-1, channels), axis=0)
    return float(np.mean(np.abs(qa - qb)))


def downsample_embedder(image, size: int = 8) -> np.ndarray:
    """Block-mean downsample to ``size`` x ``size``, flattened, centred and normalized."""
    x = np.asarray(image, dtype=np.float64)
    h, w, c = x.shape
    if h % size or w % size:
        raise ContractError(f"image size {h}x{w} is not divisible by {size}")
    blocks = x.reshape(size, h // size, size, w // size, c).mean(axis=(1, 3)).ravel()
    blocks = blocks - blocks.mean()
    norm = np.linalg.norm(blocks)
    return blocks / norm if norm > 0 else blocks


def semantic_similarity(a, b, embedder=downsample_embedder) -> float:
    """Cosine similarity of ``embedder(a)`` and ``embedder(b)``, in [-1, 1]."""
    ea = np.asarray(embedder(a), dtype=np.float64).ravel()
    eb = np.asarray(embedder(b), dtype=np.float64).ravel()
    if ea.shape != eb.shape:
        raise ContractError("embedder produced vectors of different lengths")
    if not (np.all(np.isfinite(ea)) and np.all(np.isfinite(eb))):
        raise NumericError("embedder produced non-finite values")
    na, nb = np.linalg.norm(ea), np.linalg.norm(eb)
    if na == 0 or nb == 0:
        # constant images carry no direction; only an exact match counts as similar
        return 1.0 if np.array_equal(ea, eb) else 0.0
    return float(np.clip(ea @ eb / (na * nb), -1.0, 1.0))


@dataclass(frozen=True)
class MetricReport:
    palette_src: float
    semantic_src: float
    palette_ref: float | None = None
    semantic_ref: float | None = None

    def __post_init__(self):
        for name in ("palette_src", "palette_ref"):
            v = getattr(self, name)
            if v is not None and not (math.isfinite(v) and v >= 0):
                raise NumericError(f"{name} must be finite and >= 0, got {v}")
        for name in ("semantic_src", "semantic_ref"):
            v = getattr(self, name)
            if v is not None and not (math.isfinite(v) and -1 <= v <= 1):
                raise NumericError(f"{name} must lie in [-1, 1], got {v}")

    def to_dict(self) -> dict:
        out = {"palette_metric": PALETTE_LABEL, "palette_src": self.palette_src,
               "semantic_src": self.semantic_src}
        if self.palette_ref is not None:
            out["palette_ref"] = self.palette_ref
        if self.semantic_ref is not None:
            out["semantic_ref"] = self.semantic_ref
        return out


def evaluate(output, source, reference=None, embedder=downsample_embedder) -> MetricReport:
    if reference is None:
        return MetricReport(palette_distance(output, source), semantic_similarity(output, source, embedder))
    return MetricReport(palette_distance(output, source), semantic_similarity(output, source, embedder),
                        palette_distance(output, reference), semantic_similarity(output, reference, embedder))
