"""Reference-guided and text-only editing, plus NTI reconstruction.

An edit runs in three phases:

1. invert the source image (DDIM at guidance 1, then null-text optimization
   with the source prompt) and the reference image (DDIM with the empty prompt);
2. denoise from the source's z_T: shape steps use source-feature K/V
   replacement and the optimized null embedding as the unconditional branch,
   attribute steps use reference-feature K/V concatenation and the plain null
   embedding;
3. decode z_0.

Inverted trajectories and null embeddings are rounded to float32 as soon as
they are produced, which is exactly what the cache stores, so a cached run and
a fresh run are bit-for-bit identical.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError
from .guidance import GuidanceConfig, cfg_combine, select_uncond
from .injection import (InjectionConfig, Stage, capture_features, make_attribute_override,
                        make_shape_override, stage_of)
from .inversion import LatentTrajectory, NullEmbeddingSchedule, ddim_invert, null_text_invert
from .schedule import NoiseSchedule, build_schedule, ddim_step

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ScheduleConfig:
    num_train_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    num_sample_steps: int = 50

    def build(self) -> NoiseSchedule:
        return build_schedule(self.num_train_steps, self.beta_start, self.beta_end, self.num_sample_steps)


@dataclass(frozen=True)
class NTIConfig:
    enabled: bool = True
    inner_steps: int = 10
    learning_rate: float = 1e-2
    early_stop_tol: float = 1e-5

    def __post_init__(self):
        if self.inner_steps < 0:
            raise ConfigError("nti_inner_steps", "must be >= 0")
        if not self.learning_rate > 0:
            raise ConfigError("nti_learning_rate", "must be > 0")
        if self.early_stop_tol < 0:
            raise ConfigError("nti_early_stop_tol", "must be >= 0")


@dataclass(frozen=True, eq=False)
class EditRequest:
    source_image: np.ndarray = field(repr=False)
    source_prompt: str
    edit_prompt: str
    reference_image: np.ndarray | None = field(default=None, repr=False)
    injection: InjectionConfig = InjectionConfig()
    guidance: GuidanceConfig = GuidanceConfig()
    schedule: ScheduleConfig = ScheduleConfig()
    nti: NTIConfig = NTIConfig()
    seed: int = 0
    # "reference" or "text"; None infers it from reference_image
    mode: str | None = None

    def __post_init__(self):
        mode = self.mode or ("text" if self.reference_image is None else "reference")
        if mode not in ("reference", "text"):
            raise ConfigError("mode", f"unknown edit mode {mode!r}")
        if mode == "reference" and self.reference_image is None:
            raise ConfigError("reference", "reference mode requires a reference image")
        object.__setattr__(self, "mode", mode)
        if not self.edit_prompt:
            raise ConfigError("edit_prompt", "must be non-empty")

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(image_digest(self.source_image).encode())
        if self.reference_image is not None and self.mode == "reference":
            h.update(image_digest(self.reference_image).encode())
        cfg = {
            "source_prompt": self.source_prompt, "edit_prompt": self.edit_prompt, "mode": self.mode,
            "injection": _jsonable(self.injection), "guidance": asdict(self.guidance),
            "schedule": asdict(self.schedule), "nti": asdict(self.nti), "seed": self.seed,
        }
        h.update(json.dumps(cfg, sort_keys=True).encode())
        return h.hexdigest()[:16]


@dataclass
class EditResult:
    image: np.ndarray = field(repr=False)
    latent: np.ndarray = field(repr=False)
    stage_log: list[dict]
    config_fingerprint: str
    cache_events: list[dict] = field(default_factory=list)


def _jsonable(inj: InjectionConfig) -> dict:
    sites = None if inj.injected_sites is None else [str(s) for s in inj.injected_sites]
    return {"t_early_frac": inj.t_early_frac, "injected_sites": sites, "enabled": inj.enabled}


def image_digest(image) -> str:
    arr = np.ascontiguousarray(image, dtype="<f8")
    h = hashlib.sha256(repr(arr.shape).encode())
    h.update(arr.tobytes())
    return h.hexdigest()[:16]


def text_digest(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def as_float32(traj_or_schedule):
    """Round a trajectory or null schedule to float32-representable values."""
    q = lambda a: np.asarray(a, dtype=np.float32).astype(np.float64)  # noqa: E731
    if isinstance(traj_or_schedule, LatentTrajectory):
        t = traj_or_schedule
        return LatentTrajectory(tuple(q(z) for z in t.latents), t.timesteps, t.prompt.replace(q(t.prompt.tokens)),
                                t.schedule_fingerprint)
    s = traj_or_schedule
    return NullEmbeddingSchedule(s.timesteps, tuple(e.replace(q(e.tokens)) for e in s.embeddings),
                                 s.per_step_loss, s.schedule_fingerprint, s.loss_history)


# ----------------------------------------------------------------------------
# sampling loops


def sample_cfg(backend, z_T, cond, unconds, schedule: NoiseSchedule, w: float, return_all=False):
    """Plain guided DDIM sampling from ``z_T``; ``unconds`` holds one embedding per step
    (or a single embedding used throughout)."""
    if not isinstance(unconds, (list, tuple)):
        unconds = [unconds] * schedule.num_sample_steps
    z = backend.check_latent(z_T)
    path = [z]
    for i, t in enumerate(schedule.timesteps):
        eps = cfg_combine(backend.predict_noise(z, t, cond), backend.predict_noise(z, t, unconds[i]), w)
        z = ddim_step(z, eps, t, schedule.next_timestep(i), schedule)
        path.append(z)
    return path if return_all else z


def run_edit_loop(backend, schedule: NoiseSchedule, source_traj: LatentTrajectory,
                  reference_traj: LatentTrajectory | None, null_schedule: NullEmbeddingSchedule | None,
                  source_cond, edit_cond, null, injection: InjectionConfig, w: float,
                  reference_cond=None):
    """Stage-gated denoising from the source's z_T. Returns ``(z_0, stage_log)``."""
    source_traj.check_schedule(schedule)
    if reference_traj is not None:
        reference_traj.check_schedule(schedule)
    reference_cond = null if reference_cond is None else reference_cond
    sites = injection.resolve_sites(backend)
    total = schedule.num_sample_steps
    z = source_traj.final
    stage_log = []
    for i, t in enumerate(schedule.timesteps):
        stage = stage_of(i, total, injection)
        uncond = select_uncond(stage, t, null_schedule, null)
        overrides = ()
        if injection.enabled:
            if stage is Stage.SHAPE:
                feats = capture_features(backend, source_traj.at(t), t, source_cond)
                overrides = make_shape_override(feats, injection, sites)
            elif reference_traj is not None:
                feats = capture_features(backend, reference_traj.at(t), t, reference_cond)
                overrides = make_attribute_override(feats, injection, sites)
        eps = cfg_combine(backend.predict_noise(z, t, edit_cond, overrides),
                          backend.predict_noise(z, t, uncond, overrides), w)
        z = ddim_step(z, eps, t, schedule.next_timestep(i), schedule)
        stage_log.append({
            "step": i, "timestep": t, "stage": stage.value, "guidance_scale": w,
            "uncond": "optimized" if stage is Stage.SHAPE else "null",
            "overrides": [ov.summary() for ov in overrides],
        })
    return z, stage_log


# ----------------------------------------------------------------------------
# inversion with optional caching


def invert_image(backend, image, prompt: str, schedule: NoiseSchedule, w: float = 1.0,
                 cache=None, events=None) -> LatentTrajectory:
    """DDIM trajectory of ``image`` (float32-rounded), read from / written to ``cache``."""
    key = {"image": image_digest(image), "prompt": text_digest(prompt), "backend": backend.fingerprint,
           "w": w}

    def compute():
        cond = backend.embed_text(prompt)
        return as_float32(ddim_invert(backend.encode(image), cond, schedule, backend, w))

    if cache is None:
        return compute()
    traj, hit, path = cache.get_or_create("trajectory", key, schedule, compute)
    if events is not None:
        events.append({"kind": "trajectory", "path": str(path), "hit": hit})
    return traj


def optimize_null(backend, traj: LatentTrajectory, image, prompt: str, schedule: NoiseSchedule,
                  w: float, nti: NTIConfig, cache=None, events=None,
                  inversion_w: float = 1.0) -> NullEmbeddingSchedule:
    key = {"image": image_digest(image), "prompt": text_digest(prompt), "backend": backend.fingerprint,
           "w": w, "inversion_w": inversion_w, "inner_steps": nti.inner_steps, "learning_rate": nti.learning_rate,
           "early_stop_tol": nti.early_stop_tol}

    def compute():
        cond = backend.embed_text(prompt)
        return as_float32(null_text_invert(traj, cond, backend, schedule, w, nti.inner_steps,
                                           nti.learning_rate, nti.early_stop_tol))

    if cache is None:
        return compute()
    nulls, hit, path = cache.get_or_create("null_schedule", key, schedule, compute)
    if events is not None:
        events.append({"kind": "null_schedule", "path": str(path), "hit": hit})
    return nulls


def prepare_source(backend, image, prompt, schedule, guidance: GuidanceConfig, nti: NTIConfig,
                   cache=None, events=None):
    """Source trajectory and its null schedule (constant when NTI is disabled)."""
    traj = invert_image(backend, image, prompt, schedule, guidance.scale_inversion, cache, events)
    if nti.enabled:
        nulls = optimize_null(backend, traj, image, prompt, schedule, guidance.scale_nti, nti, cache, events,
                              guidance.scale_inversion)
    else:
        nulls = NullEmbeddingSchedule.constant(backend.null_embedding(), schedule)
    return traj, nulls


# ----------------------------------------------------------------------------
# public entry points


def edit(request: EditRequest, backend, cache=None) -> EditResult:
    schedule = request.schedule.build()
    events = []
    injection = request.injection
    total = schedule.num_sample_steps
    needs_nulls = injection.num_shape_steps(total) > 0
    nti = request.nti if needs_nulls else NTIConfig(enabled=False)

    source_traj, nulls = prepare_source(backend, request.source_image, request.source_prompt, schedule,
                                        request.guidance, nti, cache, events)
    reference_traj = None
    needs_reference = injection.enabled and injection.num_shape_steps(total) < total
    if request.mode == "reference" and needs_reference:
        reference_traj = invert_image(backend, request.reference_image, "", schedule,
                                      request.guidance.scale_inversion, cache, events)

    z0, stage_log = run_edit_loop(
        backend, schedule, source_traj, reference_traj, nulls,
        backend.embed_text(request.source_prompt), backend.embed_text(request.edit_prompt),
        backend.null_embedding(), injection, request.guidance.scale_edit)
    return EditResult(backend.decode(z0), z0, stage_log, request.fingerprint(), events)


def reconstruct(source_image, source_prompt: str, backend, *, schedule: ScheduleConfig = ScheduleConfig(),
                guidance: GuidanceConfig = GuidanceConfig(), nti: NTIConfig = NTIConfig(),
                scale: float | None = None, cache=None) -> EditResult:
    """Resample the source from its inverted z_T without any injection.

    With NTI the optimized null embeddings are used at ``guidance.scale_nti``;
    without it the plain null embedding is used at ``guidance.scale_inversion``
    (a replay of the inversion). ``scale`` overrides either choice.
    """
    sched = schedule.build()
    events = []
    traj, nulls = prepare_source(backend, source_image, source_prompt, sched, guidance, nti, cache, events)
    if scale is None:
        scale = guidance.scale_nti if nti.enabled else guidance.scale_inversion
    cond = backend.embed_text(source_prompt)
    z0 = sample_cfg(backend, traj.final, cond, list(nulls.embeddings), sched, scale)
    stage_log = [{"step": i, "timestep": t, "stage": "reconstruct", "guidance_scale": scale,
                  "uncond": "optimized" if nti.enabled else "null", "overrides": []}
                 for i, t in enumerate(sched.timesteps)]
    cfg = json.dumps({"prompt": source_prompt, "schedule": asdict(schedule), "guidance": asdict(guidance),
                      "nti": asdict(nti), "scale": scale, "image": image_digest(source_image)},
                     sort_keys=True)
    return EditResult(backend.decode(z0), z0, stage_log, hashlib.sha256(cfg.encode()).hexdigest()[:16], events)
