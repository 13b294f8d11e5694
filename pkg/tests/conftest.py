import numpy as np
import pytest
import torch

from scob.model import ModelConfig, ScobModel
from scob.render import RenderConfig, RenderedSample, WordAnnotation
from scob.seqcodec import Vocab


@pytest.fixture(scope="session")
def vocab():
    return Vocab()


@pytest.fixture()
def fast_render_config():
    return RenderConfig(
        resolution_range=(96, 128),
        font_size_range=(10, 22),
        blur_prob=0.0,
        blur_max_radius=0.0,
    )


@pytest.fixture()
def tiny_model_config(vocab):
    return ModelConfig(
        vocab_size=len(vocab),
        image_side=64,
        patch_size=16,
        enc_dim=32,
        enc_layers=1,
        enc_heads=2,
        dec_dim=32,
        dec_layers=1,
        dec_heads=2,
        max_len=32,
        projector_hidden=16,
        projector_out=16,
    )


@pytest.fixture()
def tiny_model(tiny_model_config):
    torch.manual_seed(0)
    return ScobModel(tiny_model_config)


def make_sample(words_with_boxes, width=200, height=100, domain="synthetic", seed=0):
    """Annotation-only sample for codec tests; pixels are irrelevant there."""
    words = [WordAnnotation(text, bbox) for text, bbox in words_with_boxes]
    return RenderedSample(np.zeros((height, width, 3), dtype=np.uint8), words, domain, seed)
