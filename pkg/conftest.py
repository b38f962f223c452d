"""Shared fixtures: tiny models and corpora, finite differences, slow-test switch"""

import numpy as np
import pytest

from dataset import DatasetConfig, generate_corpus
from trainer import ModelShapes, initialize


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False,
                     help="also run the desk-scale training checks")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: desk-scale training checks, enabled with --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


def finite_difference(fn, array, indices=None, eps=1e-6):
    """
    Central differences of the scalar fn() with respect to entries of array,
    which is perturbed in place and restored. Returns {index: derivative}.
    """
    indices = list(np.ndindex(array.shape)) if indices is None else indices
    out = {}
    for index in indices:
        original = array[index]
        array[index] = original + eps
        up = fn()
        array[index] = original - eps
        down = fn()
        array[index] = original
        out[index] = (up - down) / (2.0 * eps)
    return out


@pytest.fixture
def numeric_grad():
    return finite_difference


@pytest.fixture
def tiny_shapes():
    return ModelShapes(pixels=16, canvas_size=8, state_size=8, components=2, object_counts=(1, 2))


@pytest.fixture
def tiny_model(tiny_shapes):
    return initialize(0, tiny_shapes)


@pytest.fixture(scope="session")
def small_config():
    return DatasetConfig(steps=8, height=16, width=16, radius=2, object_counts=(1, 2),
                         train_per_count=6, test_per_count=3, seed=3)


@pytest.fixture(scope="session")
def small_corpora(small_config):
    return generate_corpus(small_config, threads=1)


@pytest.fixture
def small_model(small_config):
    shapes = ModelShapes(pixels=small_config.height * small_config.width, canvas_size=8, state_size=8,
                         components=2, object_counts=small_config.object_counts)
    return initialize(1, shapes)
