import math

import numpy as np
import pytest

from csaseg.attention import AttentionWeights
from csaseg.synthetic import random_classes, random_model, tiny_config


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_weights(rng, d=16, heads=4, bias_scale=0.1):
    mats = [(rng.standard_normal((d, d)) / math.sqrt(d)).astype(np.float32) for _ in range(4)]
    biases = [(rng.standard_normal(d) * bias_scale).astype(np.float32) for _ in range(4)]
    return AttentionWeights(*mats, *biases, head_count=heads)


def random_tokens(rng, n, d=16):
    return rng.standard_normal((n, d)).astype(np.float32)


@pytest.fixture
def tiny_model():
    return random_model(tiny_config(), seed=7)


@pytest.fixture
def tiny_classes(tiny_model):
    return random_classes(3, tiny_model.config.embed_out_dim, seed=7)


@pytest.fixture
def patch16_model():
    """Width-16 model on 16-pixel patches, so 224-pixel windows give a 14x14 grid."""
    return random_model(tiny_config(patch_size=16, pretrain_grid=(14, 14)), seed=11)


@pytest.fixture
def patch16_classes(patch16_model):
    return random_classes(4, patch16_model.config.embed_out_dim, seed=11)


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance")
    if module is not None and module.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in module.RESULTS:
            terminalreporter.write_line(line)
