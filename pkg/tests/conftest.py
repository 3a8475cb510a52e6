import numpy as np
import pytest
import torch

torch.set_num_threads(1)
torch.set_default_dtype(torch.float64)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def tiny_config(variant="full", seed=0, **overrides):
    """A run small enough for unit tests: short corpus, small model, few steps."""
    from dataclasses import replace

    from talbo.alignment import InversionConfig
    from talbo.benchmark import TASKS
    from talbo.latent_model import LatentModelConfig
    from talbo.optimizer import PretrainConfig, RetrainConfig, RunConfig, SurrogateConfig

    base = dict(
        task=replace(TASKS["median-2"], corpus_size=300),
        variant=variant,
        seed=seed,
        horizon=4,
        batch_size=3,
        num_init=12,
        num_init_slots=6,
        latent=LatentModelConfig(latent_dim=4, num_features=6, hidden_size=16, embedding_size=8),
        surrogate=SurrogateConfig(num_inducing=16, fit_steps=2, num_candidates=64),
        pretrain=PretrainConfig(steps=150, batch_size=32),
        retrain=RetrainConfig(steps=5, failure_tolerance=2, batch_size=32),
        inversion=InversionConfig(max_steps=10),
    )
    base.update(overrides)
    return RunConfig(**base)


@pytest.fixture
def tiny():
    return tiny_config
