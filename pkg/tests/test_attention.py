import math

import numpy as np
import pytest

from mateicl.attention import (
    MATEICL,
    PCW,
    STRUCTURED,
    BiasKind,
    BiasMode,
    KVCache,
    apply_atbias,
    attend,
    bias_value,
    compute_nu,
    concat_caches,
    decompose_linear_attention,
    decompose_softmax_attention,
    task_mass,
)
from mateicl.errors import DomainError, ShapeError
from mateicl.numerics import Rng, stable_softmax


def test_attend_single_allowed_key():
    q = np.array([[1.0, 0.0]])
    k = np.array([[1.0, 0.0], [0.0, 1.0]])
    v = np.array([[5.0, 5.0], [7.0, 7.0]])
    mask = np.array([[False, True]])
    out, w = attend(q, k, v, mask, scale=1.0)
    assert np.allclose(w, [[0.0, 1.0]])
    assert np.allclose(out, [[7.0, 7.0]])


def test_attend_equal_scores_split_evenly():
    q = np.array([[1.0, 1.0]])
    k = np.array([[0.5, 0.5], [0.5, 0.5]])
    v = np.array([[1.0, 0.0], [0.0, 1.0]])
    out, w = attend(q, k, v, np.ones((1, 2), bool), scale=1.0)
    assert np.allclose(w, [[0.5, 0.5]])
    assert np.allclose(out, [[0.5, 0.5]])


def test_attend_hand_softmax():
    # scores 0 and ln 2 -> weights 1/3, 2/3
    q = np.array([[1.0]])
    k = np.array([[0.0], [math.log(2.0)]])
    v = np.array([[1.0], [4.0]])
    out, w = attend(q, k, v, np.ones((1, 2), bool), scale=1.0)
    assert np.allclose(w, [[1.0 / 3.0, 2.0 / 3.0]], atol=1e-12)
    assert np.allclose(out, [[3.0]], atol=1e-12)


def test_attend_fully_masked_row_raises():
    with pytest.raises(DomainError):
        attend(
            np.ones((1, 2)), np.ones((2, 2)), np.ones((2, 2)),
            np.zeros((1, 2), bool), 1.0,
        )


def test_attend_weight_rows_sum_to_one():
    rng = Rng(31)
    q = rng.normal(6 * 4).reshape(6, 4)
    k = rng.normal(9 * 4).reshape(9, 4)
    v = rng.normal(9 * 4).reshape(9, 4)
    mask = np.tril(np.ones((6, 9), bool), k=3)
    _, w = attend(q, k, v, mask, 0.5)
    assert np.allclose(w.sum(axis=1), 1.0, atol=1e-12)


def test_bias_schedule_table():
    expected = {1: None, 2: 2.0, 3: 2.0, 4: 3.0, 5: 3.0, 6: 4.0, 7: 4.0, 8: 4.0, 9: 5.0}
    for W, want in expected.items():
        assert bias_value(MATEICL, W) == want
    assert bias_value(MATEICL, 12) == 6.0


def test_bias_modes():
    for W in range(1, 10):
        assert bias_value(PCW, W) is None
    assert bias_value(STRUCTURED, 1) is None
    assert bias_value(STRUCTURED, 5) == 5.0
    fixed = BiasMode(BiasKind.FIXED, 2.5)
    assert bias_value(fixed, 1) is None
    assert bias_value(fixed, 4) == 2.5
    with pytest.raises(DomainError):
        BiasMode(BiasKind.FIXED, 0.5)


def test_bias_mode_parsing():
    assert BiasMode.parse("pcw") == PCW
    assert BiasMode.parse("MateICL") == MATEICL
    assert BiasMode.parse("fixed:3.5").fixed_b == 3.5
    with pytest.raises(DomainError):
        BiasMode.parse("mystery")


def test_apply_atbias_identity():
    row = np.array([0.25, 0.25, 0.5])
    assert np.array_equal(apply_atbias(row, 1, 1.0), row)


def test_apply_atbias_hand_case():
    out = apply_atbias(np.array([0.5, 0.3, 0.2]), task_start=2, b=2.0)
    assert np.allclose(out, [5.0 / 12.0, 3.0 / 12.0, 4.0 / 12.0], atol=1e-12)


def test_apply_atbias_mass_law_spot():
    # pre-bias task mass 0.2, b=4 -> post mass 0.5
    row = np.array([0.4, 0.4, 0.1, 0.1])
    out = apply_atbias(row, 2, 4.0)
    assert abs(out[2:].sum() - 0.5) < 1e-12


def test_apply_atbias_normalization_and_mass_law():
    rng = Rng(71)
    for _ in range(10_000):
        n = 2 + rng.below(48)
        row = stable_softmax(rng.normal(n, 2.0))
        ts = rng.below(n + 1)
        b = [1.0, 2.0, 3.0, 5.0][rng.below(4)]
        out = apply_atbias(row, ts, b)
        assert abs(out.sum() - 1.0) <= 1e-9
        m = row[ts:].sum()
        want = b * m / (1.0 + (b - 1.0) * m)
        assert abs(out[ts:].sum() - want) <= 1e-9
        if b > 1.0 and 0.0 < m < 1.0:
            assert out[ts:].sum() > m


def test_apply_atbias_preserves_ranking():
    rng = Rng(72)
    for _ in range(200):
        n = 4 + rng.below(16)
        row = stable_softmax(rng.normal(n, 1.0))
        ts = 1 + rng.below(n - 1)
        out = apply_atbias(row, ts, 3.0)
        # within-segment order preserved
        assert np.array_equal(np.argsort(out[:ts]), np.argsort(row[:ts]))
        assert np.array_equal(np.argsort(out[ts:]), np.argsort(row[ts:]))
        # no task key loses rank against any context key
        for j in range(ts, n):
            for i in range(ts):
                if row[j] >= row[i]:
                    assert out[j] >= out[i]


def test_apply_atbias_domain_errors():
    row = np.array([0.5, 0.5])
    with pytest.raises(DomainError):
        apply_atbias(row, 0, 0.5)
    with pytest.raises(DomainError):
        apply_atbias(row, 3, 2.0)
    with pytest.raises(DomainError):
        apply_atbias(np.array([0.9, 0.6]), 0, 2.0)


def test_compute_nu_anchors():
    assert compute_nu(np.array([]), np.array([0.0])) == 0.0
    assert compute_nu(np.array([0.0]), np.array([0.0])) == 0.5
    got = compute_nu(np.array([math.log(2.0), 0.0]), np.array([0.0]))
    assert abs(got - 0.75) < 1e-12


def test_compute_nu_stability_and_domain():
    assert 0.0 <= compute_nu(np.array([2000.0]), np.array([1999.0])) <= 1.0
    with pytest.raises(DomainError):
        compute_nu(np.array([]), np.array([]))


def test_decompose_softmax_mirrored_segments():
    rng = Rng(73)
    K = rng.normal(3 * 4).reshape(3, 4)
    V = rng.normal(3 * 4).reshape(3, 4)
    q = rng.normal(4)
    qp, dp, nu, recon = decompose_softmax_attention(q, K, V, K, V)
    assert abs(nu - 0.5) < 1e-12
    assert np.allclose(qp, dp, atol=1e-12)
    assert np.allclose(recon, qp, atol=1e-12)


def test_decompose_softmax_matches_full_attention():
    rng = Rng(74)
    for _ in range(300):
        d = 4
        nd, nq = 1 + rng.below(7), 1 + rng.below(7)
        q = rng.normal(d)
        K_d = rng.normal(nd * d).reshape(nd, d)
        V_d = rng.normal(nd * d).reshape(nd, d)
        K_q = rng.normal(nq * d).reshape(nq, d)
        V_q = rng.normal(nq * d).reshape(nq, d)
        _, _, nu, recon = decompose_softmax_attention(q, K_d, V_d, K_q, V_q)
        full = stable_softmax(np.vstack([K_d, K_q]) @ q) @ np.vstack([V_d, V_q])
        assert np.abs(recon - full).max() < 1e-6
        assert 0.0 <= nu <= 1.0


def test_decompose_softmax_vanishing_demo_segment():
    q = np.array([1.0, 0.0])
    K_d = np.array([[-2000.0, 0.0]])  # score -> -inf limit
    V_d = np.array([[9.0, 9.0]])
    K_q = np.array([[0.0, 0.0], [1.0, 0.0]])
    V_q = np.array([[1.0, 2.0], [3.0, 4.0]])
    qp, _, nu, recon = decompose_softmax_attention(q, K_d, V_d, K_q, V_q)
    assert nu < 1e-300
    assert np.allclose(recon, qp, atol=1e-12)


def test_decompose_softmax_empty_segment_error():
    with pytest.raises(DomainError):
        decompose_softmax_attention(
            np.ones(2), np.empty((0, 2)), np.empty((0, 2)), np.ones((1, 2)), np.ones((1, 2))
        )


def test_decompose_linear_empty_demo_is_zsl():
    rng = Rng(75)
    q = rng.normal(3)
    K_q = rng.normal(2 * 3).reshape(2, 3)
    V_q = rng.normal(2 * 3).reshape(2, 3)
    zsl, icl, total = decompose_linear_attention(q, np.empty((0, 3)), np.empty((0, 3)), K_q, V_q)
    assert np.allclose(icl, 0.0)
    assert np.allclose(total, zsl)


def test_decompose_linear_swap_symmetry():
    rng = Rng(76)
    q = rng.normal(3)
    K_d = rng.normal(2 * 3).reshape(2, 3)
    V_d = rng.normal(2 * 3).reshape(2, 3)
    K_q = rng.normal(4 * 3).reshape(4, 3)
    V_q = rng.normal(4 * 3).reshape(4, 3)
    zsl, icl, total = decompose_linear_attention(q, K_d, V_d, K_q, V_q)
    zsl2, icl2, total2 = decompose_linear_attention(q, K_q, V_q, K_d, V_d)
    assert np.allclose(zsl, icl2) and np.allclose(icl, zsl2)
    assert np.allclose(total, total2)


def test_decompose_linear_additivity():
    rng = Rng(77)
    for _ in range(300):
        d = 3
        nd, nq = 1 + rng.below(5), 1 + rng.below(5)
        q = rng.normal(d)
        K_d = rng.normal(nd * d).reshape(nd, d)
        V_d = rng.normal(nd * d).reshape(nd, d)
        K_q = rng.normal(nq * d).reshape(nq, d)
        V_q = rng.normal(nq * d).reshape(nq, d)
        _, _, total = decompose_linear_attention(q, K_d, V_d, K_q, V_q)
        direct = (np.vstack([K_d, K_q]) @ q) @ np.vstack([V_d, V_q])
        scale = max(np.abs(direct).max(), 1e-12)
        assert np.abs(total - direct).max() / scale < 1e-9


def test_task_mass_anchors():
    row = np.array([0.5, 0.3, 0.2])
    assert task_mass(row, 0) == 1.0
    assert task_mass(row, 3) == 0.0
    assert abs(task_mass(row, 1) - 0.5) < 1e-12


def test_dilution_expectation_and_trend():
    rng = Rng(80)
    T, C = 4, 16
    means = []
    for W in (1, 3, 6, 9):
        n = T + W * C
        scores = rng.normal(10_000 * n).reshape(10_000, n)
        e = np.exp(scores - scores.max(axis=1, keepdims=True))
        weights = e / e.sum(axis=1, keepdims=True)
        mass = weights[:, :T].sum(axis=1)
        se = mass.std() / math.sqrt(mass.size)
        assert abs(mass.mean() - T / n) <= 3 * se
        means.append(mass.mean())
    assert means[0] > means[1] > means[2] > means[3]


def _cache_with(n_keys, n_heads=2, d_head=3, seg=0, layer_count=2, seed=1):
    rng = Rng(seed)
    layers = []
    for _ in range(layer_count):
        k = rng.normal(n_keys * n_heads * d_head).reshape(n_keys, n_heads, d_head)
        v = rng.normal(n_keys * n_heads * d_head).reshape(n_keys, n_heads, d_head)
        layers.append((k, v))
    return KVCache(
        layers=layers,
        positions=np.arange(n_keys, dtype=np.int64),
        segments=np.full(n_keys, seg, dtype=np.int64),
    )


def test_concat_single_cache_unchanged():
    c = _cache_with(5)
    out = concat_caches([c])
    assert out.n_keys == 5
    for (k1, v1), (k2, v2) in zip(c.layers, out.layers):
        assert np.array_equal(k1, k2) and np.array_equal(v1, v2)


def test_concat_lengths_and_tags():
    a = _cache_with(5, seg=0, seed=1)
    b = _cache_with(5, seg=1, seed=2)
    out = concat_caches([a, b])
    assert out.n_keys == 10
    assert list(out.segments) == [0] * 5 + [1] * 5
    assert out.task_start == 10


def test_concat_geometry_mismatch():
    a = _cache_with(4, n_heads=2)
    b = _cache_with(4, n_heads=3)
    with pytest.raises(ShapeError):
        concat_caches([a, b])


def test_cache_task_suffix_enforced():
    c = _cache_with(4)
    mixed = KVCache(layers=c.layers, positions=c.positions, segments=np.array([-1, 0, 0, 0]))
    with pytest.raises(DomainError):
        mixed.task_start
