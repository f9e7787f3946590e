"""Estimator-facade tests: sklearn parameter contract, sequential fitting,
transform output, and input validation."""

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from dkua import DkuaLifelongReID, check_images
from dkua.data import generate_domain
from dkua.errors import ConfigError

from conftest import small_spec


def tiny_estimator(**overrides):
    params = dict(seed=0, epochs=1, embed_dim=6, depth=1, heads=2)
    params.update(overrides)
    return DkuaLifelongReID(**params)


def two_domains():
    return [generate_domain(small_spec(name="d1"), 0, 1),
            generate_domain(small_spec(name="d2", pattern_id=1), 0, 2,
                            first_identity=4)]


def test_get_set_params_round_trip():
    est = tiny_estimator(lr=0.002)
    params = est.get_params()
    assert params["lr"] == 0.002 and params["seed"] == 0
    est.set_params(epochs=3)
    assert est.epochs == 3
    dup = clone(est)
    assert dup.get_params() == est.get_params()


def test_fit_then_transform_shapes():
    domains = two_domains()
    est = tiny_estimator().fit(domains)
    assert est.model_.t == 2
    x = np.stack([domains[0].images[r.path]
                  for r in domains[0].records[:5]])
    emb = est.transform(x)
    assert emb.shape == (5, 6)
    assert np.isfinite(emb).all()


def test_partial_fit_appends_domains():
    d1, d2 = two_domains()
    est = tiny_estimator()
    est.partial_fit(d1)
    assert est.model_.t == 1
    est.partial_fit(d2)
    assert est.model_.t == 2
    assert est.model_.tms[0].frozen


def test_fit_matches_sequential_partial_fit():
    domains = two_domains()
    a = tiny_estimator().fit(domains)
    b = tiny_estimator()
    for d in domains:
        b.partial_fit(d)
    for (_, pa), (_, pb) in zip(a.model_.named_params(),
                                b.model_.named_params()):
        np.testing.assert_array_equal(pa.data, pb.data)


def test_transform_before_fit_raises():
    with pytest.raises(NotFittedError):
        tiny_estimator().transform(np.zeros((1, 3, 32, 16)))


def test_no_dse_configuration_trains():
    est = tiny_estimator(use_dse=False).fit(two_domains()[:1])
    assert est.model_.tms == []
    assert est.stats_.completed == 0


def test_check_images_validation():
    good = np.zeros((2, 3, 32, 16))
    assert check_images(good, 3, 32, 16).shape == (2, 3, 32, 16)
    with pytest.raises(ConfigError, match="shape"):
        check_images(np.zeros((2, 1, 32, 16)), 3, 32, 16)
    bad = good.copy()
    bad[0, 0, 0, 0] = np.nan
    with pytest.raises(ConfigError, match="finite"):
        check_images(bad, 3, 32, 16)
    with pytest.raises(ConfigError, match=r"\[0, 1\]"):
        check_images(good - 0.5, 3, 32, 16)
