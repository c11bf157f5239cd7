import numpy as np
import pytest
import torch
from hypothesis import settings

from echoone.atlas import EncoderConfig, build_atlas, train_latent_encoder
from echoone.modeling import ModelConfig
from echoone.synthetic import make_dataset

settings.register_profile("default", max_examples=50, deadline=None)
settings.load_profile("default")

torch.set_num_threads(1)


def tiny_model_config(**kw):
    base = dict(input_size=32, patch_size=8, embed_dim=32, encoder_depth=4, encoder_heads=2,
                decoder_heads=2, cnn_widths=(8, 8, 16, 16), stem_width=4, mask_in_chans=8)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture(scope="session")
def toy_images():
    return make_dataset(2, size=32, seed=0)


@pytest.fixture(scope="session")
def toy_atlas(toy_images):
    enc = train_latent_encoder(toy_images, epochs=10, seed=0, config=EncoderConfig(input_size=32))
    return build_atlas(enc, toy_images, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
