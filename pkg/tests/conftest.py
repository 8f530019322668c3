import numpy as np
import pytest

from fang.model import ModelConfig, init_model


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_config():
    return ModelConfig(n_layers=2, d_model=32, n_heads=4, d_head=8, n_ffn=48, ffn_kind="gated", seed=7)


@pytest.fixture(scope="session")
def small_model(small_config):
    return init_model(small_config)


@pytest.fixture(scope="session")
def plain_model():
    cfg = ModelConfig(n_layers=2, d_model=32, n_heads=4, d_head=8, n_ffn=48, ffn_kind="plain", seed=3)
    return init_model(cfg)


def random_spd(rng, n, cond=10.0):
    q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    vals = np.geomspace(1.0, cond, n)
    return (q * vals) @ q.T
