"""Gradient-certification harness tests: the suite passes on its pinned
seed, the self-test hook reports corruption, and the result plumbing works."""

import time

from dkua.gradcheck import (CheckResult, relative_error, run_gradcheck)

import numpy as np


def test_relative_error_floor():
    # tiny numeric values fall back to the absolute floor denominator
    a = np.array([1e-9])
    b = np.array([0.0])
    assert relative_error(a, b) == 1e-9 / 1e-8


def test_check_result_pass_fail():
    assert CheckResult("x", 1e-5, 1e-4).passed
    assert not CheckResult("x", 2e-4, 1e-4).passed


def test_full_suite_passes_within_time_budget():
    start = time.monotonic()
    results = run_gradcheck(seed=0)
    elapsed = time.monotonic() - start
    names = [r.name for r in results]
    # every op, every loss term, and the composite objective are covered
    for expected in ("matmul/left", "softmax", "rowwise_cosine/a",
                     "covariance", "gaussian_kl/sigma1", "kl_discrete/p",
                     "cross_entropy", "triplet", "ka_loss", "association",
                     "uka_loss", "dkt_loss", "composite_total_t3"):
        assert expected in names
    for r in results:
        assert r.passed, f"{r.name}: {r.max_rel_err:.3e} > {r.tolerance:g}"
    assert elapsed < 60.0


def test_corrupt_hook_injects_failure():
    results = run_gradcheck(seed=0, corrupt=True)
    failed = [r for r in results if not r.passed]
    assert [r.name for r in failed] == ["corrupted_fixture"]
