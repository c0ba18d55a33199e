import numpy as np
import pytest

from flowcot.flowcodec import FlowCodecConfig, flow_to_rgb
from flowcot.tokenizer import build_codebook
from flowcot.training import TrainData
from flowcot.worldsim import WorldConfig, gen_episode


@pytest.fixture(scope="session")
def world_cfg():
    return WorldConfig()


@pytest.fixture(scope="session")
def codec():
    return FlowCodecConfig()


@pytest.fixture(scope="session")
def episodes(world_cfg):
    return [gen_episode(world_cfg, s) for s in range(40)]


@pytest.fixture(scope="session")
def codebook(episodes, codec):
    corpus = [f for ep in episodes for f in ep.frames]
    corpus += [flow_to_rgb(fl, codec) for ep in episodes for fl in ep.flows]
    return build_codebook(corpus)


@pytest.fixture(scope="session")
def train_data(world_cfg, episodes, codebook, codec):
    return TrainData.prepare(world_cfg, episodes, codebook, codec)
