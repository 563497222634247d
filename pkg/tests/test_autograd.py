import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from colocate import autograd as ag
from oracles import check_op, conv1d_direct, gradient_cases


@pytest.mark.parametrize("seed", range(3))
def test_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    for name, build, inputs in gradient_cases(rng, per_op=1):
        err = check_op(build, inputs, rng)
        assert err <= 1e-4, f"{name}: relative error {err:.2e}"


@settings(max_examples=25, deadline=None)
@given(b=st.integers(1, 2), c_in=st.integers(1, 3), c_out=st.integers(1, 3),
       n=st.integers(1, 12), k=st.integers(1, 9), seed=st.integers(0, 2**31))
def test_conv1d_matches_direct_sum(b, c_in, c_out, n, k, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((b, c_in, n))
    w = rng.standard_normal((c_out, c_in, k))
    bias = rng.standard_normal(c_out)
    got = ag.conv1d(ag.Tensor(x), ag.Tensor(w), ag.Tensor(bias)).data
    np.testing.assert_allclose(got, conv1d_direct(x, w, bias), rtol=0, atol=1e-10)


def test_conv1d_keeps_length_and_padding_split():
    assert ag.conv_padding(64) == (31, 32)
    assert ag.conv_padding(5) == (2, 2)
    x = ag.Tensor(np.ones((1, 1, 10)))
    w = ag.Tensor(np.ones((1, 1, 4)))
    y = ag.conv1d(x, w).data[0, 0]
    # left pad 1, right pad 2
    np.testing.assert_allclose(y, [3, 4, 4, 4, 4, 4, 4, 4, 3, 2])


def test_conv1d_channel_mismatch():
    with pytest.raises(ValueError, match="channels"):
        ag.conv1d(ag.Tensor(np.zeros((1, 2, 8))), ag.Tensor(np.zeros((1, 3, 3))))


def test_nonfinite_forward_raises():
    with pytest.raises(ag.NonFiniteError):
        ag.relu(ag.Tensor(np.array([1.0, np.nan])))


def test_batchnorm_training_normalises_and_updates_buffers():
    rng = np.random.default_rng(1)
    x = rng.normal(3.0, 2.0, (8, 2, 50))
    rm, rv = np.zeros(2), np.ones(2)
    y = ag.batchnorm1d(ag.Tensor(x), np.ones(2), np.zeros(2), rm, rv, training=True).data
    np.testing.assert_allclose(y.mean(axis=(0, 2)), 0, atol=1e-12)
    np.testing.assert_allclose(y.var(axis=(0, 2)), 1, atol=1e-3)
    np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 2)))
    assert np.all(rv > 1)


def test_batchnorm_eval_uses_running_stats():
    x = np.full((1, 1, 4), 5.0)
    y = ag.batchnorm1d(ag.Tensor(x), np.array([2.0]), np.array([1.0]), np.array([3.0]), np.array([4.0]),
                       training=False).data
    np.testing.assert_allclose(y, 2.0 * (5 - 3) / np.sqrt(4 + ag.BN_EPS) + 1)


def test_batchnorm_training_rejects_batch_of_one():
    with pytest.raises(ValueError):
        ag.batchnorm1d(ag.Tensor(np.zeros((1, 1, 5))), np.ones(1), np.zeros(1), np.zeros(1), np.ones(1), True)


def test_softmax_rows_sum_to_one_and_are_shift_invariant():
    z = np.array([[1000.0, 1001.0, 999.0], [0.0, 0.0, 0.0]])
    p = ag.softmax(ag.Tensor(z)).data
    np.testing.assert_allclose(p.sum(axis=1), 1)
    np.testing.assert_allclose(p[0], ag.softmax(ag.Tensor(z[0] - 1000)).data)


def test_fused_cross_entropy_equals_composition():
    rng = np.random.default_rng(2)
    z = rng.standard_normal((4, 3))
    c = np.eye(3)[[0, 2, 1, 1]]
    fused = ag.softmax_cross_entropy(ag.Tensor(z), c).data
    composed = ag.cross_entropy(ag.softmax(ag.Tensor(z)), c).data
    np.testing.assert_allclose(fused, composed, rtol=1e-12)


def test_gradient_accumulates_over_shared_inputs():
    x = ag.Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    ag.add(x, x).backward(np.ones(3))
    np.testing.assert_allclose(x.grad, 2 * np.ones(3))


def test_adam_first_step_moves_by_lr():
    ps = ag.ParamStore()
    w = ps.add("w", np.array([1.0, -1.0]))
    w.grad = np.array([0.5, -3.0])
    ag.adam_step(ps, lr=0.01)
    np.testing.assert_allclose(w.data, [0.99, -0.99], atol=1e-7)
    assert w.grad is None


def test_param_store_snapshot_restore():
    ps = ag.ParamStore()
    w = ps.add("w", np.zeros(3))
    buf = ps.add_buffer("b", np.ones(2))
    snap = ps.snapshot()
    w.data += 5
    buf *= 3
    ps.restore(snap)
    np.testing.assert_array_equal(w.data, 0)
    np.testing.assert_array_equal(ps.buffers["b"], 1)
    with pytest.raises(KeyError):
        ps.add("w", np.zeros(1))
