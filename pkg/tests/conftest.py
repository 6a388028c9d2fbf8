import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from lstransducer.data import SynthConfig, generate
from lstransducer.model import ModelConfig, Transducer

settings.register_profile("repo", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: end-to-end training runs (minutes)")


@pytest.fixture(scope="session")
def small_synth():
    return SynthConfig(src_vocab=8, min_len=2, max_len=4, dev_size=4, test_size=6, cross_size=4)


@pytest.fixture(scope="session")
def small_data(small_synth):
    return generate(small_synth, 16)


def tiny_config(synth, **kw) -> ModelConfig:
    base = dict(vocab_size=synth.vocab_size, feat_dim=synth.feat_dim, d_model=8, n_heads=2, ff_dim=8,
                enc_layers=1, pred_layers=2, chunk_size=4, query_layer=0)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def tiny_model(small_synth):
    return Transducer(tiny_config(small_synth), seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
