"""Optimal-transport metrics: exact solver and entropic divergence."""

import itertools

import numpy as np
import pytest

from granuplan.ot import (
    PointCloud,
    TargetCost,
    auto_epsilon,
    exact_w2,
    sinkhorn_divergence,
)

ALL_PERMS_8 = np.array(list(itertools.permutations(range(8))))


def perm_w2sq(xa, xb):
    """Exhaustive-minimum mean squared matched distance, N <= 8."""
    n = len(xa)
    perms = ALL_PERMS_8[:, :n] if n == 8 else np.array(
        list(itertools.permutations(range(n))))
    d2 = np.sum((xa[:, None, :] - xb[None, :, :]) ** 2, axis=2)
    totals = d2[np.arange(n)[None, :], perms].sum(axis=1)
    return float(totals.min()) / n


def test_exact_w2_matches_permutation_search():
    rng = np.random.default_rng(0)
    for trial in range(30):
        n = int(rng.integers(2, 8))
        dim = 2 if trial % 2 == 0 else 3
        xa = rng.uniform(0, 1, size=(n, dim))
        xb = rng.uniform(0, 1, size=(n, dim))
        ref = np.sqrt(perm_w2sq(xa, xb))
        assert abs(exact_w2(xa, xb) - ref) < 1e-12


def test_exact_w2_identity_and_translation():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(40, 2))
    assert exact_w2(x, x) < 1e-7
    t = np.array([0.25, -0.4])
    # translating every point moves the optimal plan rigidly
    assert abs(exact_w2(x, x + t) - np.linalg.norm(t)) < 1e-9


def test_exact_w2_needs_equal_sizes():
    with pytest.raises(ValueError):
        exact_w2(np.zeros((3, 2)), np.zeros((4, 2)))


def test_sinkhorn_identical_clouds_exactly_zero():
    rng = np.random.default_rng(2)
    for n in (1, 5, 64):
        x = rng.normal(size=(n, 2))
        res = sinkhorn_divergence(x, x, epsilon=0.05)
        assert res.value == 0.0
        assert res.converged


def test_sinkhorn_symmetry():
    rng = np.random.default_rng(3)
    x = rng.uniform(size=(20, 2))
    y = rng.uniform(size=(25, 2))
    a = sinkhorn_divergence(x, y, epsilon=0.01).value
    b = sinkhorn_divergence(y, x, epsilon=0.01).value
    assert abs(a - b) < 1e-8


def test_sinkhorn_translation_recovers_squared_shift():
    rng = np.random.default_rng(4)
    x = rng.uniform(size=(30, 2))
    t = np.array([0.3, -0.2])
    res = sinkhorn_divergence(x, x + t, epsilon=1e-3, tol=1e-8, max_iters=2000)
    assert abs(res.value - float(t @ t)) < 0.01 * float(t @ t)


def test_sinkhorn_close_to_exact_on_small_clouds():
    # spot version of the full acceptance sweep: small blur tracks the
    # exact squared distance within a few percent
    rng = np.random.default_rng(5)
    for i in range(10):
        xa = rng.uniform(0, 1, size=(8, 2))
        xb = rng.uniform(0, 1, size=(8, 2))
        ref = perm_w2sq(xa, xb)
        res = sinkhorn_divergence(xa, xb, epsilon=5e-4, tol=1e-9,
                                  max_iters=4000)
        assert abs(res.value - ref) <= 0.03 * ref


def test_sinkhorn_different_sizes_and_weights():
    x = np.array([[0.0, 0.0]])
    y = np.array([[1.0, 0.0], [-1.0, 0.0]])
    # one atom against a symmetric pair: mass splits evenly, cost -> 1
    res = sinkhorn_divergence(x, y, epsilon=1e-3, tol=1e-9, max_iters=2000)
    assert abs(res.value - 1.0) < 0.02
    # with any weighting, all mass still travels unit distance
    w = PointCloud(y, weights=np.array([3.0, 1.0]))
    res_w = sinkhorn_divergence(x, w, epsilon=1e-3, tol=1e-9, max_iters=2000)
    assert abs(res_w.value - 1.0) < 0.02


def test_sinkhorn_marginal_error_reported():
    rng = np.random.default_rng(6)
    x = rng.uniform(size=(12, 2))
    y = rng.uniform(size=(12, 2))
    res = sinkhorn_divergence(x, y, epsilon=0.01, tol=1e-6)
    assert res.converged and res.marginal_error < 1e-6
    assert res.iterations > 0
    # a starved iteration budget must be reported honestly, not papered over
    starved = sinkhorn_divergence(x, y, epsilon=1e-4, tol=1e-12, max_iters=3)
    assert not starved.converged
    assert starved.marginal_error > 1e-12


def test_auto_epsilon_scales_with_extent():
    x = np.array([[0.0, 0.0], [1.0, 0.0]])
    assert abs(auto_epsilon(x) - (0.05 * 1.0) ** 2) < 1e-12
    assert auto_epsilon(np.zeros((3, 2))) > 0


def test_point_cloud_validation():
    with pytest.raises(ValueError):
        PointCloud(np.zeros((0, 2)))
    with pytest.raises(ValueError):
        PointCloud(np.zeros((3, 2)), weights=np.array([1.0, -1.0, 0.0]))
    with pytest.raises(ValueError):
        sinkhorn_divergence(np.zeros((2, 2)), np.zeros((2, 2)), epsilon=-1.0)


def test_target_cost_caching_and_counting():
    rng = np.random.default_rng(7)
    target = rng.uniform(size=(25, 2))
    cost = TargetCost(target, epsilon=1e-3)
    assert cost.calls == 0
    x = rng.uniform(size=(20, 2))
    v = cost(x)
    assert cost.calls == 1
    ref = sinkhorn_divergence(x, target, epsilon=1e-3).value
    assert abs(v - ref) < 1e-9
    assert cost(target) == 0.0
    assert cost.calls == 2
