"""Shared fixtures: 8x8 synthetic images and very small networks."""

import sys
from pathlib import Path

import numpy as np
import pytest

# Ajouter le chemin du projet pour les imports
sys.path.insert(0, str(Path(__file__).parent.parent))

from src.datasets import SyntheticSpec, synth_dataset, train_validation_split  # noqa: E402
from src.diffnet import NetworkBuilder, instantiate  # noqa: E402
from src.utils import setup_logging  # noqa: E402

TINY_SHAPE = (3, 8, 8)


def linear_net(num_classes=4, seed=0, input_shape=TINY_SHAPE):
    b = NetworkBuilder(input_shape)
    b.flatten()
    b.dense(num_classes, role="head")
    return instantiate(b.specs, input_shape, seed)


def small_convnet(num_classes=4, seed=0, activation="tanh", input_shape=TINY_SHAPE):
    b = NetworkBuilder(input_shape)
    b.conv(4, 3)
    b.act(activation)
    b.avgpool(2)
    b.flatten()
    b.dense(num_classes, role="head")
    return instantiate(b.specs, input_shape, seed)


@pytest.fixture(scope="session", autouse=True)
def quiet_logs():
    setup_logging("WARNING")


@pytest.fixture
def tiny_spec():
    return SyntheticSpec(classes=4, image_size=8, channels=3, noise_std=0.05, samples_per_class=10)


@pytest.fixture
def tiny_images(tiny_spec):
    return synth_dataset(tiny_spec, stream=1)


@pytest.fixture
def tiny_splits(tiny_spec):
    return train_validation_split(synth_dataset(tiny_spec, stream=0), 0.8, 0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
