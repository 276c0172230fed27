import numpy as np
import pytest
import torch

from maskcodec.net import MaskedTransformer, ModelConfig


def make_model(c=2, w_T=4, layers=2, width=16, heads=2, mlp_hidden=32, seed=0):
    torch.manual_seed(seed)
    return MaskedTransformer(ModelConfig(c=c, w_T=w_T, layers=layers, width=width, heads=heads,
                                         mlp_hidden=mlp_hidden)).reset_parameters(seed).eval()


@pytest.fixture
def tiny_model():
    return make_model()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
