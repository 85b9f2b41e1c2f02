import numpy as np
import pytest

from ladiff.corpus import CorpusConfig, fit_normalizer, generate_corpus
from ladiff.lavae import LaVae, LaVaeConfig


@pytest.fixture(scope="session")
def small_corpus():
    return generate_corpus(CorpusConfig(n_samples=48), seed=101)


@pytest.fixture(scope="session")
def small_normalizer(small_corpus):
    train = [s.motion for s in small_corpus if s.split == "train"]
    return fit_normalizer(train)


@pytest.fixture(scope="session")
def tiny_vae_config():
    return LaVaeConfig(d_model=32, layers=2, heads=2, f_max=200, r=48)


@pytest.fixture(scope="session")
def tiny_vae(tiny_vae_config):
    return LaVae(tiny_vae_config, seed=0)
