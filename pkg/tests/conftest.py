import numpy as np
import pytest
import torch

from csvr.config import ModelConfig, TrainConfig
from csvr.data import make_corpus

torch.set_num_threads(1)


def tiny_model_config(**changes) -> ModelConfig:
    base = dict(num_joints=4, clip_len=4, future_len=4, frame_stride=2, frame_size=(16, 16),
                feature_dim=8, noise_dims=(3, 4, 4), encoder_widths=(4, 8), iframe_widths=(4, 8),
                pose_width=8, generator_width=4, discriminator_width=4, gop_len=2, episode_len=16)
    base.update(changes)
    return ModelConfig(**base)


@pytest.fixture
def tiny_cfg():
    return tiny_model_config()


@pytest.fixture(scope="session")
def tiny_corpus():
    return make_corpus(tiny_model_config(), episodes_per_class=5, seed=0)


@pytest.fixture
def tiny_train():
    return TrainConfig(batch_size=4, epochs=1, warmup_epochs=1, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(LINES):
            terminalreporter.write_line(line)
