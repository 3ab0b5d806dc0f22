import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sq.errors import EmptyBatchError, EmptyVectorError, ShapeMismatchError
from sq.salience import (
    BalancingPair,
    activation_salience,
    apply_balancing,
    balanced_salience,
    build_balancing,
    overall_salience,
    weight_salience,
)


class TestActivationSalience:
    def test_single_row(self):
        np.testing.assert_array_equal(
            activation_salience([np.array([[1.0, -3.0, 2.0]])]), [1.0, 3.0, 2.0]
        )

    def test_max_pools_over_batch(self):
        a = np.array([[4.0, 0.0]])
        b = np.array([[7.0, 1.0], [-2.0, 0.5]])
        np.testing.assert_array_equal(activation_salience([a, b]), [7.0, 1.0])

    def test_all_zero_batch(self):
        np.testing.assert_array_equal(activation_salience([np.zeros((3, 4))]), np.zeros(4))

    def test_empty_batch_raises(self):
        with pytest.raises(EmptyBatchError):
            activation_salience([])

    def test_column_mismatch_raises(self):
        with pytest.raises(ShapeMismatchError):
            activation_salience([np.zeros((2, 3)), np.zeros((2, 4))])


class TestWeightSalience:
    def test_identity_weight(self):
        np.testing.assert_array_equal(weight_salience(np.eye(4)), np.ones(4))

    def test_takes_row_maximum(self):
        w = np.array([[0.1, -0.9], [2.0, 0.0]])
        np.testing.assert_array_equal(weight_salience(w), [0.9, 2.0])

    def test_zero_row_has_zero_salience(self):
        w = np.array([[0.0, 0.0], [1.0, 1.0]])
        assert weight_salience(w)[0] == 0.0


class TestBalancedSalience:
    def test_geometric_mean(self):
        np.testing.assert_allclose(balanced_salience([4.0], [1.0]), [2.0])

    def test_equal_inputs_are_fixed_points(self):
        s = np.array([0.5, 2.0, 7.0])
        np.testing.assert_array_equal(balanced_salience(s, s), s)

    def test_zero_is_absorbing(self):
        assert balanced_salience([0.0], [5.0])[0] == 0.0

    def test_length_mismatch(self):
        with pytest.raises(Exception):
            balanced_salience([1.0], [1.0, 2.0])


class TestBuildBalancing:
    def test_hand_example(self):
        pair = build_balancing([4.0], [1.0])
        assert pair.bx[0] == pytest.approx(0.5)
        assert pair.bw[0] == pytest.approx(2.0)

    def test_equal_saliences_give_identity(self):
        s = np.array([1.0, 2.0, 3.0])
        pair = build_balancing(s, s)
        np.testing.assert_allclose(pair.bx, 1.0)
        np.testing.assert_allclose(pair.bw, 1.0)

    def test_dead_channel_uses_floor(self):
        eps = 1e-5
        pair = build_balancing([0.0], [1.0], eps)
        assert pair.bx[0] == pytest.approx(np.sqrt(1.0 / eps))
        assert pair.bw[0] == pytest.approx(np.sqrt(eps))

    def test_pair_validates_inverse(self):
        with pytest.raises(ShapeMismatchError):
            BalancingPair(bx=np.array([2.0]), bw=np.array([2.0]))

    def test_pair_rejects_nonpositive(self):
        with pytest.raises(ShapeMismatchError):
            BalancingPair(bx=np.array([-1.0]), bw=np.array([-1.0]))

    def test_swapped_inverts(self):
        pair = build_balancing([4.0, 9.0], [1.0, 1.0])
        inv = pair.swapped()
        np.testing.assert_array_equal(inv.bx, pair.bw)
        np.testing.assert_array_equal(inv.bw, pair.bx)


class TestApplyBalancing:
    def test_identity_pair_is_noop(self):
        rng = np.random.default_rng(0)
        x, w = rng.normal(size=(5, 3)), rng.normal(size=(3, 4))
        xb, wb = apply_balancing(x, w, BalancingPair.identity(3))
        np.testing.assert_array_equal(xb, x)
        np.testing.assert_array_equal(wb, w)

    def test_balancing_equalizes_saliences(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(20, 6)) * np.array([1, 10, 0.1, 3, 1, 5.0])
        w = rng.normal(size=(6, 8))
        sx = activation_salience([x])
        sw = weight_salience(w)
        pair = build_balancing(sx, sw, eps=1e-12)
        xb, wb = apply_balancing(x, w, pair)
        target = balanced_salience(sx, sw)
        np.testing.assert_allclose(activation_salience([xb]), target, rtol=1e-6)
        np.testing.assert_allclose(weight_salience(wb), target, rtol=1e-6)

    def test_product_preserved_double(self):
        rng = np.random.default_rng(2)
        x, w = rng.normal(size=(16, 64)), rng.normal(size=(64, 48))
        pair = build_balancing(
            np.exp(rng.uniform(-4, 4, 64)), np.exp(rng.uniform(-4, 4, 64))
        )
        xb, wb = apply_balancing(x, w, pair)
        ref = x @ w
        assert np.linalg.norm(xb @ wb - ref) / np.linalg.norm(ref) < 1e-10

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            apply_balancing(np.zeros((2, 3)), np.zeros((4, 2)), BalancingPair.identity(3))


class TestOverallSalience:
    def test_max(self):
        assert overall_salience([1.0, 3.0, 2.0]) == 3.0

    def test_zeros(self):
        assert overall_salience(np.zeros(4)) == 0.0

    def test_empty_raises(self):
        with pytest.raises(EmptyVectorError):
            overall_salience(np.array([]))


# -- properties -------------------------------------------------------------

salience_vec = arrays(
    np.float64,
    st.shared(st.integers(1, 32), key="d"),
    elements=st.floats(1e-4, 1e4),
)


@given(sx=salience_vec, sw=salience_vec)
@settings(max_examples=300, deadline=None)
def test_mutual_inverse_property(sx, sw):
    pair = build_balancing(sx, sw)
    assert np.max(np.abs(pair.bx * pair.bw - 1.0)) <= 1e-12


@given(sx=salience_vec, sw=salience_vec)
@settings(max_examples=300, deadline=None)
def test_overall_salience_never_increases(sx, sw):
    pair = build_balancing(sx, sw, eps=1e-12)
    post = max(overall_salience(sx * pair.bx), overall_salience(sw * pair.bw))
    pre = max(overall_salience(sx), overall_salience(sw))
    assert post <= pre * (1 + 1e-12)


@given(
    sx=salience_vec,
    sw=salience_vec,
    c=st.sampled_from([0.25, 4.0, 16.0, 64.0]),
)
@settings(max_examples=100, deadline=None)
def test_scale_covariance_with_exact_powers_of_four(sx, sw, c):
    # Scaling the activation side by c scales bx by 1/sqrt(c) exactly when
    # sqrt(c) is a power of two.
    base = build_balancing(sx, sw, eps=1e-12)
    scaled = build_balancing(sx * c, sw, eps=1e-12)
    np.testing.assert_array_equal(scaled.bx * np.sqrt(c), base.bx)
    np.testing.assert_array_equal(scaled.bw, base.bw * np.sqrt(c))


@given(
    x=arrays(np.float32, (8, 16), elements=st.floats(-100, 100, width=32)),
    logs=arrays(np.float64, 16, elements=st.floats(-3, 3)),
)
@settings(max_examples=100, deadline=None)
def test_product_preserved_single_precision(x, logs):
    rng = np.random.default_rng(5)
    w = (rng.normal(size=(16, 12))).astype(np.float32)
    pair = build_balancing(np.exp(logs), np.exp(-logs))
    xb, wb = apply_balancing(x, w, pair)
    ref = (x @ w).astype(np.float64)
    err = np.linalg.norm(xb.astype(np.float64) @ wb.astype(np.float64) - ref)
    assert err <= 1e-5 * max(np.linalg.norm(ref), 1e-6)
