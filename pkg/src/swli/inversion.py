"""DDIM inversion and per-timestep null-embedding optimization."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .backend import objective_gradient, objective_loss
from .errors import ContractError, NumericError, StaleCacheError
from .guidance import cfg_combine
from .schedule import CLEAN, NoiseSchedule, ddim_inverse_step, ddim_step
from .types import PromptEmbedding

log = logging.getLogger(__name__)

# step-size halvings tried before an inner iteration gives up
MAX_HALVINGS = 12


@dataclass(frozen=True, eq=False)
class LatentTrajectory:
    """Latents z_0, z_{t_1}, ..., z_{t_T} in noising order (clean latent first)."""

    latents: tuple[np.ndarray, ...] = field(repr=False)
    timesteps: tuple[int, ...]
    prompt: PromptEmbedding = field(repr=False)
    schedule_fingerprint: str

    def __post_init__(self):
        lat = tuple(np.asarray(z, dtype=np.float64) for z in self.latents)
        if len(lat) != len(self.timesteps) or not lat:
            raise ContractError("trajectory needs one timestep tag per latent")
        if self.timesteps[0] != CLEAN:
            raise ContractError("trajectory must start with the clean latent")
        if any(z.shape != lat[0].shape for z in lat):
            raise ContractError("trajectory latents must share one shape")
        for z in lat:
            z.setflags(write=False)
        object.__setattr__(self, "latents", lat)
        object.__setattr__(self, "timesteps", tuple(int(t) for t in self.timesteps))
        object.__setattr__(self, "_index", {t: i for i, t in enumerate(self.timesteps)})

    def __len__(self):
        return len(self.latents)

    def at(self, t: int) -> np.ndarray:
        try:
            return self.latents[self._index[t]]
        except KeyError:
            raise ContractError(f"trajectory has no latent for timestep {t}") from None

    @property
    def clean(self) -> np.ndarray:
        return self.latents[0]

    @property
    def final(self) -> np.ndarray:
        return self.latents[-1]

    def check_schedule(self, schedule: NoiseSchedule) -> None:
        if self.schedule_fingerprint != schedule.fingerprint:
            raise StaleCacheError(f"trajectory built for schedule {self.schedule_fingerprint}, "
                                  f"current schedule is {schedule.fingerprint}")


@dataclass(frozen=True, eq=False)
class NullEmbeddingSchedule:
    """Optimized unconditional embeddings, one per denoising timestep."""

    timesteps: tuple[int, ...]
    embeddings: tuple[PromptEmbedding, ...] = field(repr=False)
    per_step_loss: tuple[float, ...]
    schedule_fingerprint: str
    # accepted inner-loop losses per timestep, first entry is the starting loss
    loss_history: tuple[tuple[float, ...], ...] = ()

    def __post_init__(self):
        if len(self.embeddings) != len(self.timesteps) or len(self.per_step_loss) != len(self.timesteps):
            raise ContractError("null schedule needs one embedding and one loss per timestep")
        shapes = {e.shape for e in self.embeddings}
        if len(shapes) > 1:
            raise ContractError("null embeddings must share one shape")
        object.__setattr__(self, "timesteps", tuple(int(t) for t in self.timesteps))
        object.__setattr__(self, "_index", {t: i for i, t in enumerate(self.timesteps)})

    def __len__(self):
        return len(self.embeddings)

    def __contains__(self, t):
        return t in self._index

    def at(self, t: int) -> PromptEmbedding:
        try:
            return self.embeddings[self._index[t]]
        except KeyError:
            raise ContractError(f"no optimized null embedding for timestep {t}; run inversion first") from None

    @classmethod
    def constant(cls, null: PromptEmbedding, schedule: NoiseSchedule) -> NullEmbeddingSchedule:
        """The unoptimized schedule: the plain null embedding at every timestep."""
        n = schedule.num_sample_steps
        return cls(schedule.timesteps, (null,) * n, (float("nan"),) * n, schedule.fingerprint)


def ddim_invert(z0, cond: PromptEmbedding, schedule: NoiseSchedule, backend, w: float = 1.0,
                null: PromptEmbedding | None = None) -> LatentTrajectory:
    """Run DDIM in the noising direction from the clean latent ``z0``.

    The noise for the move t_prev -> t is predicted at the current latent and
    the target timestep ``t``.
    """
    if w < 0:
        raise ContractError(f"guidance scale must be >= 0, got {w}")
    z = backend.check_latent(z0)
    if w != 1 and null is None:
        null = backend.null_embedding()
    latents, tags = [z], [CLEAN]
    t_prev = CLEAN
    for t in reversed(schedule.timesteps):
        eps = backend.predict_noise(z, t, cond)
        if w != 1:
            eps = cfg_combine(eps, backend.predict_noise(z, t, null), w)
        z = ddim_inverse_step(z, eps, t_prev, t, schedule)
        latents.append(z)
        tags.append(t)
        t_prev = t
    return LatentTrajectory(tuple(latents), tuple(tags), cond, schedule.fingerprint)


def null_text_invert(traj: LatentTrajectory, cond: PromptEmbedding, backend, schedule: NoiseSchedule,
                     w: float = 7.5, inner_steps: int = 10, learning_rate: float = 1e-2,
                     early_stop_tol: float = 1e-5, null: PromptEmbedding | None = None,
                     ) -> NullEmbeddingSchedule:
    """Fit one unconditional embedding per timestep so guided sampling tracks ``traj``.

    Walking t = T..1 from z_T*, each embedding minimizes the squared distance
    between the guided DDIM step from the drifted latent and the inverted
    latent one step earlier. Plain gradient descent, warm-started from the
    previous timestep's result; a step that would raise the loss is retried at
    half the step size, so accepted losses never increase.
    """
    traj.check_schedule(schedule)
    if inner_steps < 0:
        raise ContractError("inner_steps must be >= 0")
    if not backend.supports_gradient:
        backend.predict_noise_vjp(traj.final, schedule.timesteps[0], cond)  # raises CapabilityError
    emb = backend.null_embedding() if null is None else null

    z_bar = traj.final
    embeddings, losses, histories = [], [], []
    for i, t in enumerate(schedule.timesteps):
        t_to = schedule.next_timestep(i)
        target = traj.at(t_to)
        eps_cond = backend.predict_noise(z_bar, t, cond)

        def loss_of(e):
            return objective_loss(backend, target, z_bar, e, cond, t, t_to, w, schedule, eps_cond)

        try:
            loss = loss_of(emb)
            if not np.isfinite(loss):
                raise NumericError("non-finite loss")
            history = [loss]
            for _ in range(inner_steps):
                if loss < early_stop_tol:
                    break
                grad = objective_gradient(backend, target, z_bar, emb, cond, t, t_to, w, schedule, eps_cond)
                if not np.all(np.isfinite(grad)):
                    raise NumericError("non-finite gradient")
                if not np.any(grad):
                    break
                step = learning_rate
                for _ in range(MAX_HALVINGS):
                    candidate = emb.replace(emb.tokens - step * grad)
                    cand_loss = loss_of(candidate)
                    if cand_loss < loss:
                        emb, loss = candidate, cand_loss
                        history.append(loss)
                        break
                    step *= 0.5
                else:
                    break
        except NumericError as exc:
            raise NumericError(f"null-text inversion at timestep {t}: {exc}") from exc
        log.debug("null-text t=%d loss %.3e -> %.3e (%d steps)", t, history[0], loss, len(history) - 1)
        embeddings.append(emb)
        losses.append(loss)
        histories.append(tuple(history))
        eps = cfg_combine(eps_cond, backend.predict_noise(z_bar, t, emb), w)
        z_bar = ddim_step(z_bar, eps, t, t_to, schedule)

    return NullEmbeddingSchedule(schedule.timesteps, tuple(embeddings), tuple(losses),
                                 schedule.fingerprint, tuple(histories))
