import numpy as np
import pytest
import torch
from hypothesis import settings

from p2i.core import ClassifierConfig, EncoderConfig, RunConfig

settings.register_profile("p2i", deadline=None, max_examples=60, derandomize=True)
settings.load_profile("p2i")

torch.set_num_threads(1)


def tiny_config(**changes) -> RunConfig:
    """A run small enough to go through every stage in a few seconds."""
    small = ClassifierConfig(widths=(8, 8, 8, 8), feature_dim=8, epochs=2)
    base = RunConfig(
        num_classes=4, height=16, width=16, channels=1, latent_layers=2, latent_dim=4,
        n_public_ids=6, images_per_id=4, n_synthetic=12, blobs_per_layer=1,
        attribute_dim=4, top_n=2, epochs=2, batch_size=4, learning_rate=1e-3,
        encoder=EncoderConfig(stem_channels=4, deconv_widths=(4, 4), block_widths=(4, 4, 4, 4)),
        interpolation_steps=4, interpolation_ids=4,
        target_classifier=small, eval_classifier=small, identity_classifier=small,
    )
    return base.replace(**changes)


@pytest.fixture
def tiny_cfg() -> RunConfig:
    return tiny_config()


@pytest.fixture
def np_rng():
    return np.random.default_rng(12345)


def random_simplex(rng, c, size=None):
    """Dirichlet draws: strictly positive vectors summing to one."""
    return rng.dirichlet(np.ones(c), size=size)
