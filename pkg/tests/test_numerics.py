import numpy as np
import pytest

from mquant.numerics import (
    MASK_BLOCKED,
    MASK_FREE,
    NormParams,
    as_tensor,
    layer_norm,
    masked_softmax_rows,
    matmul,
    rms_norm,
)


def triple_loop_matmul(a, b):
    """Independent oracle: naive three-loop product, inner dim innermost."""
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for t in range(k):
                acc += a[i, t] * b[t, j]
            out[i, j] = acc
    return out


def test_matmul_matches_triple_loop_bitwise():
    rng = np.random.default_rng(0)
    for _ in range(10):
        a = rng.normal(size=(5, 7))
        b = rng.normal(size=(7, 3))
        got = matmul(a, b)
        want = triple_loop_matmul(a, b)
        assert np.array_equal(got, want)


def test_matmul_known_values():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    b = np.array([[5.0, 6.0], [7.0, 8.0]])
    np.testing.assert_array_equal(matmul(a, b), [[19.0, 22.0], [43.0, 50.0]])


def test_matmul_identity():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(4, 4))
    assert np.array_equal(matmul(a, np.eye(4)), a)


def test_matmul_shape_mismatch():
    with pytest.raises(ValueError, match="shape mismatch"):
        matmul(np.ones((2, 3)), np.ones((4, 2)))


def test_matmul_repeatable():
    rng = np.random.default_rng(2)
    a = rng.normal(size=(16, 16))
    b = rng.normal(size=(16, 16))
    assert np.array_equal(matmul(a, b), matmul(a, b))


def test_as_tensor_rejects_wrong_ndim():
    with pytest.raises(ValueError, match="2-D"):
        as_tensor(np.zeros(3))
    with pytest.raises(ValueError, match="2-D"):
        as_tensor(np.zeros((2, 2, 2)))


def test_softmax_uniform_when_free():
    scores = np.zeros((2, 4))
    mask = np.full((2, 4), MASK_FREE)
    out = masked_softmax_rows(scores, mask)
    np.testing.assert_allclose(out, 0.25)


def test_softmax_blocked_positions_exactly_zero():
    scores = np.array([[1.0, 2.0, 3.0]])
    mask = np.array([[MASK_FREE, MASK_BLOCKED, MASK_FREE]])
    out = masked_softmax_rows(scores, mask)
    assert out[0, 1] == 0.0
    np.testing.assert_allclose(out.sum(axis=1), 1.0)
    # surviving entries renormalize among themselves
    e1, e3 = np.exp(1.0), np.exp(3.0)
    np.testing.assert_allclose(out[0, 0], e1 / (e1 + e3))


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(3)
    scores = rng.normal(size=(6, 6)) * 10
    mask = np.where(rng.random((6, 6)) < 0.4, MASK_BLOCKED, MASK_FREE)
    mask[:, 0] = MASK_FREE  # keep every row alive
    out = masked_softmax_rows(scores, mask)
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(out[mask == MASK_BLOCKED] == 0.0)


def test_softmax_fully_blocked_row_raises():
    scores = np.zeros((2, 2))
    mask = np.array([[MASK_FREE, MASK_FREE], [MASK_BLOCKED, MASK_BLOCKED]])
    with pytest.raises(ValueError, match="row 1"):
        masked_softmax_rows(scores, mask)


def test_softmax_rejects_foreign_mask_values():
    with pytest.raises(ValueError, match="mask entries"):
        masked_softmax_rows(np.zeros((1, 2)), np.array([[0.0, -1.0]]))


def test_softmax_huge_scores_stay_finite():
    scores = np.array([[1e300, 0.0]])
    mask = np.full((1, 2), MASK_FREE)
    out = masked_softmax_rows(scores, mask)
    np.testing.assert_allclose(out, [[1.0, 0.0]])


def test_layer_norm_known_example():
    # row [1, 3]: mean 2, var 1
    params = NormParams(alpha=np.ones(2), beta=np.zeros(2), eps=1e-12)
    out = layer_norm(np.array([[1.0, 3.0]]), params)
    np.testing.assert_allclose(out, [[-1.0, 1.0]], atol=1e-6)


def test_layer_norm_constant_row_is_zero_plus_beta():
    params = NormParams(alpha=np.ones(3), beta=np.full(3, 0.5))
    out = layer_norm(np.full((2, 3), 7.0), params)
    np.testing.assert_allclose(out, 0.5)


def test_rms_norm_ignores_beta():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(3, 8))
    a = NormParams(alpha=np.ones(8), beta=np.zeros(8))
    b = NormParams(alpha=np.ones(8), beta=np.full(8, 123.0))
    assert np.array_equal(rms_norm(x, a), rms_norm(x, b))


def test_layer_norm_equals_rms_norm_on_zero_mean_rows():
    """On recentered rows the two normalizations coincide (same eps, unit
    affine), which is the identity the vision rewrite depends on."""
    rng = np.random.default_rng(5)
    x = rng.normal(size=(10, 16))
    x = x - x.mean(axis=1, keepdims=True)
    params = NormParams(alpha=np.ones(16), beta=np.zeros(16), eps=1e-6)
    np.testing.assert_allclose(layer_norm(x, params), rms_norm(x, params), atol=1e-12)


def test_norm_params_validation():
    with pytest.raises(ValueError, match="length mismatch"):
        NormParams(alpha=np.ones(3), beta=np.zeros(2))
    with pytest.raises(ValueError, match="eps"):
        NormParams(alpha=np.ones(2), beta=np.zeros(2), eps=0.0)


def test_norm_feature_count_checked():
    params = NormParams(alpha=np.ones(4), beta=np.zeros(4))
    with pytest.raises(ValueError, match="features"):
        layer_norm(np.zeros((2, 5)), params)
