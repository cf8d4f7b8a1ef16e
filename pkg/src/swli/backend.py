"""Denoiser / text-embedder / autoencoder abstraction and the seeded toy backend.

Images are float arrays of shape (height, width, 3) with values in [-1, 1].
Latents are float arrays of shape (channels, height, width).
"""

from __future__ import annotations

import abc
import hashlib
import math
import re
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import CapabilityError, ConfigError, ContractError, NumericError
from .injection import attention, attention_backward
from .schedule import NoiseSchedule, ddim_step_coefficient, ddim_update
from .types import AttentionSiteId, OverrideMode, PromptEmbedding, SiteKind


@dataclass
class Trace:
    """What happened at each attention site during one forward pass."""

    # natural K/V input of every site (before any override is applied)
    kv_inputs: dict = field(default_factory=dict)
    # site -> {"q": shape, "kv": shape} as actually fed to the attention kernel
    applied: dict = field(default_factory=dict)


class Backend(abc.ABC):
    name: str = "abstract"
    latent_shape: tuple[int, ...]
    image_shape: tuple[int, ...]
    sites: tuple[AttentionSiteId, ...]
    supports_gradient = False

    @abc.abstractmethod
    def site_dim(self, site: AttentionSiteId) -> int:
        """Width of the hidden states feeding ``site``'s key/value projections."""

    @abc.abstractmethod
    def trace(self, z, t: int, emb: PromptEmbedding, overrides=()) -> tuple[np.ndarray, Trace]:
        """Noise prediction together with a :class:`Trace` of every attention site."""

    def predict_noise(self, z, t: int, emb: PromptEmbedding, overrides=()) -> np.ndarray:
        return self.trace(z, t, emb, overrides)[0]

    def predict_noise_vjp(self, z, t: int, emb: PromptEmbedding):
        """Return ``(eps, pullback)`` where ``pullback(g)`` is d<g, eps>/d emb.tokens."""
        raise CapabilityError(f"backend {self.name!r} cannot run null-text inversion "
                              "(no differentiation capability)")

    @abc.abstractmethod
    def embed_text(self, prompt: str) -> PromptEmbedding: ...

    @abc.abstractmethod
    def encode(self, image) -> np.ndarray: ...

    @abc.abstractmethod
    def decode(self, latent) -> np.ndarray: ...

    @property
    def fingerprint(self) -> str:
        return self.name

    def null_embedding(self) -> PromptEmbedding:
        return self.embed_text("")

    def check_latent(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        if z.shape != tuple(self.latent_shape):
            raise ContractError(f"latent shape {z.shape} does not match backend shape {self.latent_shape}")
        if not np.all(np.isfinite(z)):
            raise NumericError("latent contains non-finite values")
        return z

    def check_overrides(self, overrides) -> dict:
        by_site = {}
        for ov in overrides:
            if ov.site not in self.sites:
                raise ContractError(f"unknown attention site {ov.site}")
            if ov.site in by_site:
                raise ContractError(f"two overrides for site {ov.site}")
            if ov.features.shape[1] != self.site_dim(ov.site):
                raise ContractError(f"override width {ov.features.shape[1]} at {ov.site}, "
                                    f"site dimension is {self.site_dim(ov.site)}")
            by_site[ov.site] = ov
        return by_site


_REGISTRY = {}


def register_backend(name: str, factory) -> None:
    _REGISTRY[name] = factory


def get_backend(name: str, **kwargs) -> Backend:
    try:
        factory = _REGISTRY[name]
    except KeyError:
        raise ConfigError("backend", f"unknown backend {name!r}; known: {sorted(_REGISTRY)}") from None
    return factory(**kwargs)


def available_backends() -> list[str]:
    return sorted(_REGISTRY)


# ----------------------------------------------------------------------------
# null-embedding objective and its gradient


def _cfg_step(z_bar, eps_cond, eps_uncond, w, schedule, t_from, t_to):
    eps = w * eps_cond + (1.0 - w) * eps_uncond
    return ddim_update(z_bar, eps, schedule.alpha_bar(t_from), schedule.alpha_bar(t_to))


def objective_loss(backend, z_target, z_bar, null_emb, cond_emb, t_from, t_to, w,
                   schedule: NoiseSchedule, eps_cond=None) -> float:
    """||z_target - step_w(z_bar; null_emb, cond_emb)||^2 for one guided DDIM step."""
    if eps_cond is None:
        eps_cond = backend.predict_noise(z_bar, t_from, cond_emb)
    eps_uncond = backend.predict_noise(z_bar, t_from, null_emb)
    r = _cfg_step(z_bar, eps_cond, eps_uncond, w, schedule, t_from, t_to) - z_target
    return float(np.sum(r * r))


def objective_gradient(backend, z_target, z_bar, null_emb, cond_emb, t_from, t_to, w,
                       schedule: NoiseSchedule, eps_cond=None, return_loss=False):
    """Gradient of :func:`objective_loss` w.r.t. ``null_emb.tokens``."""
    if not backend.supports_gradient:
        backend.predict_noise_vjp(z_bar, t_from, null_emb)  # raises CapabilityError
    if eps_cond is None:
        eps_cond = backend.predict_noise(z_bar, t_from, cond_emb)
    eps_uncond, pullback = backend.predict_noise_vjp(z_bar, t_from, null_emb)
    r = _cfg_step(z_bar, eps_cond, eps_uncond, w, schedule, t_from, t_to) - z_target
    coeff = ddim_step_coefficient(schedule.alpha_bar(t_from), schedule.alpha_bar(t_to))
    grad = pullback(2.0 * coeff * (1.0 - w) * r)
    if return_loss:
        return float(np.sum(r * r)), grad
    return grad


# ----------------------------------------------------------------------------
# toy backend


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _silu(x):
    return x * _sigmoid(x)


def _silu_grad(x):
    s = _sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


def _im2col(x, h, w):
    """(h*w, c) token grid -> (h*w, 9c) 3x3 neighbourhoods, zero padded."""
    c = x.shape[1]
    padded = np.zeros((h + 2, w + 2, c))
    padded[1:-1, 1:-1] = x.reshape(h, w, c)
    cols = [padded[dy:dy + h, dx:dx + w] for dy in range(3) for dx in range(3)]
    return np.concatenate(cols, axis=2).reshape(h * w, 9 * c)


def _col2im(g, h, w, c):
    g = g.reshape(h, w, 9, c)
    padded = np.zeros((h + 2, w + 2, c))
    for k in range(9):
        dy, dx = divmod(k, 3)
        padded[dy:dy + h, dx:dx + w] += g[:, :, k]
    return padded[1:-1, 1:-1].reshape(h * w, c)


def _pool_matrix(h, w):
    """2x2 average pooling as a (h*w/4, h*w) matrix."""
    pool = np.zeros(((h // 2) * (w // 2), h * w))
    for y in range(h):
        for x in range(w):
            pool[(y // 2) * (w // 2) + x // 2, y * w + x] = 0.25
    return pool


_WORD = re.compile(r"[a-z0-9]+")


class ToyBackend(Backend):
    """Small fixed-random denoiser used by the test-suite and the CLI default.

    Two resolutions (8x8 and 4x4 token grids), each with a 3x3 convolution
    block, one self-attention site and one cross-attention site; sinusoidal
    timestep conditioning. The autoencoder is a pixel-unshuffle by ``patch``
    followed by scaling with 2, so ``decode(encode(x)) == x`` bit for bit.
    """

    name = "toy"
    supports_gradient = True

    def __init__(self, seed=0, image_size=32, patch=4, width=32, embed_dim=16, seq_len=8, time_dim=32,
                 residual_scale=0.1, self_attention_gain=2.0, num_train_steps=1000, beta_start=1e-4,
                 beta_end=2e-2):
        if image_size % patch or (image_size // patch) % 2:
            raise ConfigError("image_size", "must be an even multiple of patch")
        self.seed = int(seed)
        self.image_size, self.patch = image_size, patch
        self.width, self.embed_dim, self.seq_len, self.time_dim = width, embed_dim, seq_len, time_dim
        self.residual_scale = float(residual_scale)
        self.self_attention_gain = float(self_attention_gain)
        self.train_schedule = (int(num_train_steps), float(beta_start), float(beta_end))
        betas = np.linspace(beta_start, beta_end, num_train_steps)
        self._alpha_bars = np.cumprod(1.0 - betas)
        self.grid = image_size // patch
        self.latent_channels = 3 * patch * patch
        self.latent_shape = (self.latent_channels, self.grid, self.grid)
        self.image_shape = (image_size, image_size, 3)

        self.sa0 = AttentionSiteId(0, SiteKind.SELF_ATTENTION, 0)
        self.ca0 = AttentionSiteId(1, SiteKind.CROSS_ATTENTION, 0)
        self.sa1 = AttentionSiteId(2, SiteKind.SELF_ATTENTION, 1)
        self.ca1 = AttentionSiteId(3, SiteKind.CROSS_ATTENTION, 1)
        self.sites = (self.sa0, self.ca0, self.sa1, self.ca1)

        c, e, cl = width, embed_dim, self.latent_channels
        p = self._param
        self.w_in, self.b_in = p("in.w", (cl, c), cl), p("in.b", (c,), 0)
        self.w_t1, self.w_t2 = p("time.1", (time_dim, c), time_dim), p("time.2", (c, c), c)
        self.conv = {name: p(f"{name}.w", (9 * c, c), 9 * c) for name in ("conv0", "conv1", "conv2")}
        self.attn = {}
        for site in self.sites:
            kv_dim = c if site.kind is SiteKind.SELF_ATTENTION else e
            self.attn[site] = {
                "q": p(f"{site}.q", (c, c), c),
                "k": p(f"{site}.k", (kv_dim, c), kv_dim),
                "v": p(f"{site}.v", (kv_dim, c), kv_dim),
                "o": p(f"{site}.o", (c, c), c) * (self.self_attention_gain if kv_dim == c else 1.0),
            }
        # output scaled so eps has roughly unit variance
        self.w_out, self.b_out = 0.3 * p("out.w", (c, cl), c), p("out.b", (cl,), 0)
        self.pool = _pool_matrix(self.grid, self.grid)
        self.unpool = 4.0 * self.pool.T
        self.positions = p("text.pos", (seq_len, e), 0) * 0.5
        self._null = None

    def _rng(self, name):
        return np.random.default_rng([self.seed, zlib.crc32(name.encode())])

    def _param(self, name, shape, fan_in):
        scale = 1.0 / math.sqrt(fan_in) if fan_in else 0.1
        arr = self._rng(name).standard_normal(shape) * scale
        arr.setflags(write=False)
        return arr

    @property
    def fingerprint(self) -> str:
        cfg = (self.seed, self.image_size, self.patch, self.width, self.embed_dim, self.seq_len, self.time_dim,
               self.residual_scale, self.self_attention_gain, self.train_schedule)
        return f"toy-{hashlib.sha256(repr(cfg).encode()).hexdigest()[:12]}"

    def site_dim(self, site):
        if site not in self.sites:
            raise ContractError(f"unknown attention site {site}")
        return self.width if site.kind is SiteKind.SELF_ATTENTION else self.embed_dim

    # -- text and autoencoder -------------------------------------------------

    def _token_vector(self, token: str):
        digest = hashlib.sha256(token.encode()).digest()
        return self._rng("tok:" + digest.hex()).standard_normal(self.embed_dim)

    def embed_text(self, prompt: str) -> PromptEmbedding:
        if prompt == "" and self._null is not None:
            return self._null
        words = _WORD.findall(prompt.lower())[: self.seq_len - 2]
        tokens = ["<bos>", *words, "<eos>"]
        tokens += ["<pad>"] * (self.seq_len - len(tokens))
        mat = np.stack([self._token_vector(tok) for tok in tokens]) + self.positions
        # float32-representable so cached embeddings round-trip exactly
        mat = mat.astype(np.float32).astype(np.float64)
        emb = PromptEmbedding(mat, prompt)
        if prompt == "":
            self._null = emb
        return emb

    def encode(self, image) -> np.ndarray:
        x = np.asarray(image, dtype=np.float64)
        if x.shape != self.image_shape:
            raise ContractError(f"image shape {x.shape} does not match backend {self.image_shape}")
        g, p = self.grid, self.patch
        z = x.reshape(g, p, g, p, 3).transpose(4, 1, 3, 0, 2).reshape(self.latent_shape)
        return z * 2.0

    def decode(self, latent) -> np.ndarray:
        z = np.asarray(latent, dtype=np.float64)
        if z.shape != self.latent_shape:
            raise ContractError(f"latent shape {z.shape} does not match backend {self.latent_shape}")
        g, p = self.grid, self.patch
        x = (z / 2.0).reshape(3, p, p, g, g).transpose(3, 1, 4, 2, 0)
        return x.reshape(self.image_shape)

    # -- denoiser ---------------------------------------------------------------

    def _prior_coefficient(self, t):
        # optimal eps for unit-variance Gaussian data: sqrt(1 - alpha_bar) * z
        if not 0 <= t < len(self._alpha_bars):
            raise ContractError(f"timestep {t} outside the toy model's training range")
        return math.sqrt(1.0 - self._alpha_bars[t])

    def _time_embedding(self, t):
        half = self.time_dim // 2
        freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
        ang = float(t) * freqs
        sincos = np.concatenate([np.sin(ang), np.cos(ang)])
        return _silu(sincos @ self.w_t1) @ self.w_t2

    def _conv_block(self, x, name, side, tape):
        a = _silu(x)
        cols = _im2col(a, side, side)
        if tape is not None:
            tape.append(("conv", name, side, x))
        return x + cols @ self.conv[name]

    def _conv_block_back(self, g, name, side, x):
        ga = _col2im(g @ self.conv[name].T, side, side, self.width)
        return g + ga * _silu_grad(x)

    def _attn_block(self, x, site, kv_natural, override, trace, tape):
        w = self.attn[site]
        if override is None:
            kv = kv_natural
        elif override.mode is OverrideMode.REPLACE_KV:
            kv = override.features
        else:
            kv = np.concatenate([override.features, kv_natural], axis=0)
        q, k, v = x @ w["q"], kv @ w["k"], kv @ w["v"]
        o, weights = attention(q, k, v, return_weights=True)
        trace.kv_inputs[site] = kv_natural
        trace.applied[site] = {"q": q.shape, "kv": kv.shape}
        if tape is not None:
            tape.append(("attn", site, x, kv, q, k, v, weights, override))
        return x + o @ w["o"]

    def _attn_block_back(self, g, site, x, kv, q, k, v, weights, override):
        """Returns (grad wrt block input x, grad wrt the natural kv input)."""
        w = self.attn[site]
        gq, gk, gv = attention_backward(q, k, v, weights, g @ w["o"].T)
        gx = g + gq @ w["q"].T
        gkv = gk @ w["k"].T + gv @ w["v"].T
        if override is None:
            return gx, gkv
        if override.mode is OverrideMode.REPLACE_KV:
            return gx, None
        return gx, gkv[override.features.shape[0]:]

    def _forward(self, z, t, emb, overrides, tape=None):
        z = self.check_latent(z)
        if not isinstance(emb, PromptEmbedding):
            raise ContractError("emb must be a PromptEmbedding")
        if emb.shape[1] != self.embed_dim:
            raise ContractError(f"embedding width {emb.shape[1]} != {self.embed_dim}")
        by_site = self.check_overrides(overrides)
        trace = Trace()
        ctx = emb.tokens
        g0, g1 = self.grid, self.grid // 2

        tokens = z.reshape(self.latent_channels, -1).T
        h0 = tokens @ self.w_in + self.b_in + self._time_embedding(t)
        h0 = self._conv_block(h0, "conv0", g0, tape)
        h0 = self._attn_block(h0, self.sa0, h0, by_site.get(self.sa0), trace, tape)
        h0 = self._attn_block(h0, self.ca0, ctx, by_site.get(self.ca0), trace, tape)
        h1 = self.pool @ h0
        h1 = self._conv_block(h1, "conv1", g1, tape)
        h1 = self._attn_block(h1, self.sa1, h1, by_site.get(self.sa1), trace, tape)
        h1 = self._attn_block(h1, self.ca1, ctx, by_site.get(self.ca1), trace, tape)
        u = h0 + self.unpool @ h1
        u = self._conv_block(u, "conv2", g0, tape)
        out = u @ self.w_out + self.b_out
        eps = self._prior_coefficient(t) * z + self.residual_scale * out.T.reshape(self.latent_shape)
        if not np.all(np.isfinite(eps)):
            raise NumericError(f"toy denoiser produced non-finite output at t={t}")
        return eps, trace

    def trace(self, z, t, emb, overrides=()):
        return self._forward(z, t, emb, overrides)

    def predict_noise_vjp(self, z, t, emb, overrides=()):
        tape = []
        eps, _ = self._forward(z, t, emb, overrides, tape)
        # tape order: conv0, sa0, ca0, conv1, sa1, ca1, conv2
        (_, _, _, x_c2) = tape[6]
        ca0, sa1, ca1 = tape[2], tape[4], tape[5]
        _, _, side1, x_c1 = tape[3]

        def pullback(g_eps):
            g_eps = np.asarray(g_eps, dtype=np.float64)
            if g_eps.shape != self.latent_shape:
                raise ContractError("cotangent shape does not match latent shape")
            g_u = self.residual_scale * g_eps.reshape(self.latent_channels, -1).T @ self.w_out.T
            g_u = self._conv_block_back(g_u, "conv2", self.grid, x_c2)
            g_h1 = self.unpool.T @ g_u
            g_h1, g_ctx = self._attn_block_back(g_h1, *ca1[1:])
            g_ctx = np.zeros_like(emb.tokens) if g_ctx is None else g_ctx
            g_h1, g_kv = self._attn_block_back(g_h1, *sa1[1:])
            if g_kv is not None:
                g_h1 = g_h1 + g_kv
            g_h1 = self._conv_block_back(g_h1, "conv1", side1, x_c1)
            g_h0 = g_u + self.pool.T @ g_h1
            _, g_ctx0 = self._attn_block_back(g_h0, *ca0[1:])
            if g_ctx0 is not None:
                g_ctx = g_ctx + g_ctx0
            return g_ctx

        return eps, pullback


register_backend("toy", ToyBackend)
