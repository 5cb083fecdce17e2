"""Shared fixtures: small configurations that keep full runs fast."""

import numpy as np
import pytest
from hypothesis import settings

from adaroute.config import BaselineSettings, PipelineSettings, RunConfig
from adaroute.encoder import AdapterHyper, EncoderConfig, LayeredEncoder
from adaroute.tasks import StreamSpec, generate_task_stream

settings.register_profile("suite", deadline=None)
settings.load_profile("suite")


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def tiny_encoder_config():
    return EncoderConfig(
        hidden=8, ffn_hidden=12, total_layers=3, split_layer=1, vocab=20, seed=7
    )


@pytest.fixture(scope="session")
def tiny_encoder(tiny_encoder_config):
    return LayeredEncoder.from_config(tiny_encoder_config)


@pytest.fixture(scope="session")
def fast_config():
    # three tasks with 3-token alphabets: training covers every last-token
    # rule, so full continual runs stay fast without going inexact
    return RunConfig(
        stream=StreamSpec(
            num_tasks=3,
            samples_per_task=20,
            prompt_len=6,
            prompt_pool=9,
            answer_pool=8,
        ),
        adapter=AdapterHyper(rank=4, learning_rate=0.5, epochs=150, seed=303),
        pipeline=PipelineSettings(expansion=128, seed=202),
        baseline=BaselineSettings(hidden=32, epochs=120, learning_rate=0.5, seed=505),
        stream_seed=404,
    )


@pytest.fixture(scope="session")
def fast_stream(fast_config):
    return generate_task_stream(fast_config.stream, fast_config.stream_seed)


@pytest.fixture
def xor_datasets():
    # two cluster pairs on opposite diagonals of [-1, 1]^2: no single
    # hyperplane separates them in the raw plane
    rng = np.random.default_rng(11)

    def arm(cx, cy):
        return np.array([cx, cy]) + 0.1 * rng.standard_normal((20, 2))

    task0 = np.vstack([arm(-1.0, -1.0), arm(1.0, 1.0)])
    task1 = np.vstack([arm(-1.0, 1.0), arm(1.0, -1.0)])
    return [task0, task1]
