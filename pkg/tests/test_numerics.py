import math

import numpy as np
import pytest

from mateicl.errors import DomainError, ShapeError
from mateicl.numerics import Rng, gelu, layer_norm, masked_softmax, matmul, stable_softmax


def test_matmul_identity():
    m = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(matmul(np.eye(2), m), m)


def test_matmul_hand_case():
    out = matmul(np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([[1.0], [1.0]]))
    assert np.array_equal(out, np.array([[3.0], [7.0]]))


def test_matmul_zero_annihilates():
    m = np.arange(6.0).reshape(2, 3)
    assert np.all(matmul(np.zeros((4, 2)), m) == 0.0)


def test_matmul_shape_error():
    with pytest.raises(ShapeError):
        matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_matmul_associativity():
    rng = Rng(3)
    for _ in range(20):
        a = rng.normal(16 * 16).reshape(16, 16)
        b = rng.normal(16 * 16).reshape(16, 16)
        c = rng.normal(16 * 16).reshape(16, 16)
        left = matmul(matmul(a, b), c)
        right = matmul(a, matmul(b, c))
        scale = np.abs(left).max()
        assert np.abs(left - right).max() / scale < 1e-6


def test_softmax_symmetry():
    assert np.allclose(stable_softmax([3.3] * 4), [0.25] * 4, atol=1e-12)


def test_softmax_hand_case():
    out = stable_softmax([0.0, math.log(2.0)])
    assert np.allclose(out, [1.0 / 3.0, 2.0 / 3.0], atol=1e-12)


def test_softmax_no_overflow():
    out = stable_softmax([1000.0, 0.0])
    assert out[0] > 1.0 - 1e-12 and out[1] < 1e-12
    assert np.all(np.isfinite(out))


def test_softmax_empty_row():
    with pytest.raises(DomainError):
        stable_softmax(np.array([]))


def test_softmax_sums_to_one_many_rows():
    rng = Rng(17)
    for _ in range(10_000):
        n = 1 + rng.below(512)
        row = rng.normal(n, 4.0)
        assert abs(stable_softmax(row).sum() - 1.0) <= 1e-9


def test_softmax_shift_invariance():
    rng = Rng(18)
    for _ in range(500):
        row = rng.normal(1 + rng.below(64), 2.0)
        c = float(rng.normal(1, 50.0)[0])
        assert np.abs(stable_softmax(row) - stable_softmax(row + c)).max() < 1e-12


def test_softmax_order_preserving():
    rng = Rng(19)
    row = rng.normal(32, 3.0)
    assert np.argmax(stable_softmax(row)) == np.argmax(row)


def test_masked_softmax_degenerate_flag():
    out, degenerate = masked_softmax(np.array([-np.inf, -np.inf]))
    assert degenerate and np.allclose(out, [0.5, 0.5])
    out, degenerate = masked_softmax(np.array([0.0, -np.inf]))
    assert not degenerate and np.allclose(out, [1.0, 0.0])


def test_layer_norm_constant_row_collapses_to_shift():
    out = layer_norm(np.array([5.0, 5.0, 5.0]), np.ones(3), np.zeros(3), 1e-5)
    assert np.allclose(out, 0.0, atol=1e-6)


def test_layer_norm_unit_variance_row():
    out = layer_norm(np.array([1.0, -1.0]), np.ones(2), np.zeros(2), 1e-12)
    assert np.allclose(out, [1.0, -1.0], atol=1e-6)


def test_layer_norm_zero_gain_gives_shift():
    shift = np.array([2.0, -1.0, 0.5])
    out = layer_norm(np.array([3.0, 1.0, 4.0]), np.zeros(3), shift, 1e-5)
    assert np.array_equal(out, shift)


def test_layer_norm_length_mismatch():
    with pytest.raises(ShapeError):
        layer_norm(np.ones(4), np.ones(3), np.zeros(3), 1e-5)


def test_gelu_anchors():
    assert gelu(0.0) == 0.0
    assert abs(gelu(20.0) - 20.0) < 1e-8
    assert abs(gelu(-20.0)) < 1e-8
    # increasing above the curve's minimum (~ -0.75)
    xs = np.linspace(-0.7, 3, 50)
    assert np.all(np.diff(gelu(xs)) > 0)


def test_rng_reproducible_streams():
    a, b = Rng(123456789), Rng(123456789)
    assert np.array_equal(a.u64(10_000), b.u64(10_000))


def test_rng_vector_equals_scalar_draws():
    vec = Rng(42).u64(100)
    scalar_rng = Rng(42)
    scalars = np.array([scalar_rng.next_u64() for _ in range(100)], dtype=np.uint64)
    assert np.array_equal(vec, scalars)


def test_rng_uniform_range_and_normal_moments():
    rng = Rng(5)
    u = rng.uniform(50_000)
    assert u.min() >= 0.0 and u.max() < 1.0
    z = Rng(6).normal(100_000, 2.0)
    assert abs(z.mean()) < 0.05 and abs(z.std() - 2.0) < 0.05


def test_rng_sample_without_replacement():
    idx = Rng(9).sample_indices(10, 10)
    assert sorted(idx) == list(range(10))
    with pytest.raises(DomainError):
        Rng(9).sample_indices(3, 4)
