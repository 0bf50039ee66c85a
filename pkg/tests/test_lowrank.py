import numpy as np
import pytest

from kdprune.lowrank import FactorizedLinear, NumericalError, factorize, init_rank, lrf_forward, prune_ranks
from kdprune.tensor import Tensor


def test_init_rank_values():
    assert init_rank(1024, 1024) == 512
    assert init_rank(32, 128) == 25
    assert init_rank(1, 1) == 1


def test_factorized_param_count():
    rng = np.random.default_rng(0)
    f = factorize(rng.normal(size=(12, 7)), 4)
    assert f.dense_weight_count() == 4 * (12 + 7)


def test_full_rank_reconstruction():
    rng = np.random.default_rng(1)
    W = rng.normal(size=(9, 6))
    f = factorize(W, 6)
    assert np.abs(f.reconstruct() - W).max() <= 1e-10


def test_truncation_error_is_discarded_energy():
    rng = np.random.default_rng(2)
    W = rng.normal(size=(10, 8))
    s = np.linalg.svd(W, compute_uv=False)
    for r in range(1, 8):
        err = np.linalg.norm(W - factorize(W, r).reconstruct()) ** 2
        assert err == pytest.approx(float((s[r:] ** 2).sum()), abs=1e-8)


def test_forward_matches_reconstructed_dense_map():
    rng = np.random.default_rng(3)
    W, b = rng.normal(size=(6, 5)), rng.normal(size=5)
    f = factorize(W, 5, b)
    x = rng.normal(size=(3, 6))
    np.testing.assert_allclose(lrf_forward(f, Tensor(x)).data, x @ W + b, atol=1e-10)


def test_zero_rank_is_bias_only():
    f = FactorizedLinear(np.zeros((4, 0)), np.zeros((3, 0)), np.array([1.0, 2.0, 3.0]))
    y = f(Tensor(np.ones((2, 4)))).data
    np.testing.assert_array_equal(y, [[1.0, 2.0, 3.0]] * 2)


def test_prune_ranks_equals_gated_forward():
    rng = np.random.default_rng(4)
    f = factorize(rng.normal(size=(6, 5)), 4, rng.normal(size=5))
    z = np.array([0.0, 0.7, 1.0, 0.0])
    x = rng.normal(size=(3, 6))
    gated = lrf_forward(f, Tensor(x), Tensor(z)).data
    p = prune_ranks(f, z)
    assert p.r == 2
    np.testing.assert_allclose(p(Tensor(x)).data, gated, atol=1e-12)


def test_factorize_rejects_bad_rank_and_non_finite():
    with pytest.raises(ValueError):
        factorize(np.ones((3, 3)), 4)
    with pytest.raises(NumericalError):
        factorize(np.full((3, 3), np.nan), 2)
