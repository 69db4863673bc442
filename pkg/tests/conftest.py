# put your pytest fixtures here
import numpy as np
import pytest

from quse_tensorgraph.data import synth_diffusion, window_split

TINY_CONFIG = {
    "synth_nodes": 4,
    "synth_steps": 120,
    "window": 4,
    "horizon": 3,
    "eval_horizons": [1, 3],
    "k_a": 2,
    "k_b": 2,
    "embed_rank": 2,
    "hidden_channels": 3,
    "num_blocks": 1,
    "epochs": 2,
    "batch_size": 8,
    "patience": 2,
}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_series():
    series, _ = synth_diffusion(4, 120, seed=3, noise=0.05)
    return series


@pytest.fixture
def tiny_datasets(tiny_series):
    return window_split(tiny_series, window=4, horizon=3)


@pytest.fixture
def tiny_config():
    return dict(TINY_CONFIG)


@pytest.fixture
def artifact_dir(tmp_path):
    out = tmp_path / "artifacts"
    out.mkdir()
    return out
