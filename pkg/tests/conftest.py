import numpy as np
import pytest

from swli.backend import Backend, Trace, ToyBackend
from swli.errors import ContractError
from swli.types import PromptEmbedding


def disc_image(size=32):
    """Red disc on a graded background."""
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1.0)
    disc = (xx - 0.5) ** 2 + (yy - 0.5) ** 2 < 0.09
    img = np.zeros((size, size, 3))
    img[..., 0] = np.where(disc, 0.8, -0.6)
    img[..., 1] = np.where(disc, 0.2, -0.2) + 0.3 * xx
    img[..., 2] = -0.5 + 0.4 * yy
    return img


def stripe_image(size=32):
    """Blue/cyan vertical stripes."""
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1.0)
    stripes = np.sin(xx * 20) > 0
    img = np.zeros((size, size, 3))
    img[..., 0] = -0.7 + 0.2 * yy
    img[..., 1] = np.where(stripes, 0.6, -0.1)
    img[..., 2] = np.where(stripes, 0.9, 0.3)
    return img


def to_uint8(img):
    return np.clip(np.round((img + 1) * 127.5), 0, 255).astype(np.uint8)


class AffineNoiseBackend(Backend):
    """Test double: eps = offset + gain * z, independent of t and the prompt.

    With ``gain == 0`` the noise prediction is input-independent, so DDIM
    inversion and replay are exact algebraic inverses.
    """

    name = "affine-test"
    supports_gradient = False

    def __init__(self, shape=(4, 4, 4), offset=None, gain=0.0, seed=0):
        rng = np.random.default_rng(seed)
        self.latent_shape = shape
        self.image_shape = shape
        self.sites = ()
        self.offset = rng.standard_normal(shape) if offset is None else np.broadcast_to(offset, shape)
        self.gain = gain

    def site_dim(self, site):
        raise ContractError(f"unknown attention site {site}")

    def trace(self, z, t, emb, overrides=()):
        z = self.check_latent(z)
        self.check_overrides(overrides)
        return self.offset + self.gain * z, Trace()

    def embed_text(self, prompt):
        return PromptEmbedding(np.full((2, 3), float(len(prompt))), prompt)

    def encode(self, image):
        return np.asarray(image, dtype=np.float64)

    def decode(self, latent):
        return np.asarray(latent, dtype=np.float64)


@pytest.fixture(scope="session")
def toy():
    return ToyBackend(seed=0)


@pytest.fixture(scope="session")
def source_image():
    return disc_image()


@pytest.fixture(scope="session")
def reference_image():
    return stripe_image()


@pytest.fixture
def constant_backend():
    return AffineNoiseBackend()
