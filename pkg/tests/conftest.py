"""Shared fixtures: tiny model configurations and small synthetic domains
sized so the whole suite stays fast on one CPU core."""

import numpy as np
import pytest

from dkua.data import DomainSpec, generate_domain
from dkua.model import BackboneConfig, DkuaModel


@pytest.fixture
def tiny_cfg():
    """4x4 single-channel images, 4 tokens, 6-dim embeddings."""
    return BackboneConfig(height=4, width=4, channels=1, patch_size=2,
                          embed_dim=6, depth=1, heads=2, mlp_ratio=2.0)


@pytest.fixture
def tiny_model(tiny_cfg):
    rng = np.random.default_rng(0)
    model = DkuaModel(tiny_cfg, rng)
    model.grow_domain(3, rng)
    return model


def small_spec(name="small", pattern_id=0, **overrides):
    """A small but trainable domain: 4 identities x 8 instances covers
    P=4 x K=4 sampling with 2 query and 2 gallery instances each."""
    params = dict(name=name, pattern_id=pattern_id, num_identities=4,
                  instances_per_identity=8)
    params.update(overrides)
    return DomainSpec(**params)


@pytest.fixture
def small_domain():
    return generate_domain(small_spec(), seed=0, domain_id=1)
