"""Stage-wise latent injection for reference-guided image editing with diffusion models."""

__version__ = "0.1.0"

from .backend import Backend, ToyBackend, available_backends, get_backend, register_backend
from .errors import (CacheFormatError, CapabilityError, ConfigError, ContractError, NumericError,
                     StaleCacheError, SwliError)
from .guidance import GuidanceConfig, cfg_combine, select_uncond
from .injection import InjectionConfig, Stage, stage_of
from .inversion import LatentTrajectory, NullEmbeddingSchedule, ddim_invert, null_text_invert
from .metrics import MetricReport, evaluate, palette_distance, semantic_similarity
from .pipeline import EditRequest, EditResult, NTIConfig, ScheduleConfig, edit, reconstruct
from .schedule import CLEAN, NoiseSchedule, build_schedule, ddim_update
from .types import AttentionSiteId, KVOverride, OverrideMode, PromptEmbedding, SiteKind

__all__ = [
    "Backend", "ToyBackend", "available_backends", "get_backend", "register_backend",
    "CacheFormatError", "CapabilityError", "ConfigError", "ContractError", "NumericError",
    "StaleCacheError", "SwliError", "GuidanceConfig", "cfg_combine", "select_uncond",
    "InjectionConfig", "Stage", "stage_of", "LatentTrajectory", "NullEmbeddingSchedule",
    "ddim_invert", "null_text_invert", "MetricReport", "evaluate", "palette_distance",
    "semantic_similarity", "EditRequest", "EditResult", "NTIConfig", "ScheduleConfig", "edit",
    "reconstruct", "CLEAN", "NoiseSchedule", "build_schedule", "ddim_update", "AttentionSiteId",
    "KVOverride", "OverrideMode", "PromptEmbedding", "SiteKind", "__version__",
]
