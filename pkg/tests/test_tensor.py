import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from klp import functional as F
from klp.tensor import Tensor

from oracles import (batchnorm_loops, check_gradients, conv2d_loops, cross_entropy_direct, linear_loops,
                     maxpool_loops)


def conv_params(w, b, stride=1, padding=0, grad=False):
    return F.ConvParams(Tensor(w, requires_grad=grad), Tensor(b, requires_grad=grad), stride, padding)


def bn_state(c, gamma=None, beta=None, mode="train", eps=1e-5):
    s = F.BatchNormState.init(c, epsilon=eps)
    if gamma is not None:
        s.gamma.data = np.array(gamma, dtype=float)
    if beta is not None:
        s.beta.data = np.array(beta, dtype=float)
    s.mode = mode
    return s


# --- conv2d -------------------------------------------------------------------

def test_conv_zero_input_gives_bias():
    rng = np.random.default_rng(0)
    out = F.conv2d(Tensor(np.zeros((1, 1, 3, 3))), conv_params(rng.normal(size=(1, 1, 3, 3)), [0.7], padding=1))
    assert np.all(out.data == 0.7)


def test_conv_identity_kernel():
    x = np.random.default_rng(1).normal(size=(1, 1, 3, 3))
    k = np.zeros((1, 1, 3, 3))
    k[0, 0, 1, 1] = 1.0
    out = F.conv2d(Tensor(x), conv_params(k, [0.0], padding=1))
    assert np.array_equal(out.data, x)


def test_conv_matches_loop_oracle():
    rng = np.random.default_rng(2)
    x, w, b = rng.normal(size=(1, 2, 5, 5)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)
    out = F.conv2d(Tensor(x), conv_params(w, b))
    np.testing.assert_allclose(out.data, conv2d_loops(x, w, b), atol=1e-10, rtol=0)


def test_conv_channel_mismatch_names_shapes():
    with pytest.raises(ValueError, match=r"\(1, 3, 5, 5\).*\(2, 2, 3, 3\)"):
        F.conv2d(Tensor(np.zeros((1, 3, 5, 5))), conv_params(np.zeros((2, 2, 3, 3)), np.zeros(2)))


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 2), st.integers(1, 3), st.integers(1, 3), st.integers(3, 7), st.integers(3, 7),
       st.sampled_from([1, 2]), st.sampled_from([0, 1]), st.integers(0, 10 ** 6))
def test_conv_oracle_property(n, c, o, h, w, stride, padding, seed):
    rng = np.random.default_rng(seed)
    x, k, b = rng.normal(size=(n, c, h, w)), rng.normal(size=(o, c, 3, 3)), rng.normal(size=o)
    out = F.conv2d(Tensor(x), conv_params(k, b, stride, padding))
    np.testing.assert_allclose(out.data, conv2d_loops(x, k, b, stride, padding), atol=1e-10, rtol=0)


# --- maxpool ------------------------------------------------------------------

def test_maxpool_constant():
    out = F.maxpool2d(Tensor(np.full((1, 2, 6, 6), 3.5)), 2)
    assert np.all(out.data == 3.5)


def test_maxpool_direct():
    out = F.maxpool2d(Tensor([[[[1.0, 2.0], [3.0, 4.0]]]]), 2)
    assert out.data.tolist() == [[[[4.0]]]]


def test_maxpool_matches_oracle_exactly():
    x = np.random.default_rng(3).normal(size=(1, 3, 8, 8))
    assert np.array_equal(F.maxpool2d(Tensor(x), 2, 2).data, maxpool_loops(x, 2, 2))


def test_maxpool_window_too_large():
    with pytest.raises(ValueError):
        F.maxpool2d(Tensor(np.zeros((1, 1, 1, 3))), 2)


def test_maxpool_gradient_goes_to_first_maximum():
    x = Tensor(np.array([[[[5.0, 5.0], [5.0, 1.0]]]]), requires_grad=True)
    F.maxpool2d(x, 2).sum().backward()
    assert x.grad.tolist() == [[[[1.0, 0.0], [0.0, 0.0]]]]


# --- batchnorm ----------------------------------------------------------------

def test_batchnorm_train_normalises():
    x = np.random.default_rng(4).normal(3.0, 2.0, size=(4, 3, 5, 5))
    out = F.batchnorm2d(Tensor(x), bn_state(3, eps=1e-12)).data
    assert np.all(np.abs(out.mean(axis=(0, 2, 3))) < 1e-9)
    assert np.all(np.abs(out.var(axis=(0, 2, 3)) - 1) < 1e-6)


def test_batchnorm_eval_identity_configuration():
    x = np.random.default_rng(5).normal(size=(2, 2, 3, 3))
    out = F.batchnorm2d(Tensor(x), bn_state(2, mode="eval", eps=1e-12)).data
    np.testing.assert_allclose(out, x, atol=1e-9)


def test_batchnorm_matches_statistics_oracle():
    rng = np.random.default_rng(6)
    x, g, b = rng.normal(size=(3, 2, 4, 4)), rng.normal(size=2), rng.normal(size=2)
    out = F.batchnorm2d(Tensor(x), bn_state(2, g, b)).data
    np.testing.assert_allclose(out, batchnorm_loops(x, g, b, 1e-5), atol=1e-10, rtol=0)


def test_batchnorm_updates_running_buffers():
    x = np.random.default_rng(7).normal(2.0, 3.0, size=(4, 1, 4, 4))
    s = bn_state(1)
    F.batchnorm2d(Tensor(x), s)
    assert s.running_mean[0] == pytest.approx(0.1 * x.mean())
    assert s.running_var[0] == pytest.approx(0.9 + 0.1 * x.var(ddof=1))


def test_batchnorm_rejects_single_sample_in_train_mode():
    with pytest.raises(ValueError, match="at least 2"):
        F.batchnorm2d(Tensor(np.zeros((1, 1, 3, 3))), bn_state(1))


# --- relu, linear, concat, loss --------------------------------------------------

def test_relu_values_and_subgradient():
    assert F.relu(Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]
    x = Tensor([-1.0, 2.0], requires_grad=True)
    F.relu(x).sum().backward()
    assert x.grad.tolist() == [0.0, 1.0]
    z = Tensor([0.0], requires_grad=True)
    F.relu(z).sum().backward()
    assert z.grad.tolist() == [0.0]


def test_relu_positive_identity():
    x = np.abs(np.random.default_rng(8).normal(size=10)) + 0.1
    assert np.array_equal(F.relu(Tensor(x)).data, x)


def test_linear_identity_and_bias():
    x = np.random.default_rng(9).normal(size=(2, 3))
    assert np.array_equal(F.linear(Tensor(x), Tensor(np.eye(3)), Tensor(np.zeros(3))).data, x)
    out = F.linear(Tensor(np.zeros((2, 3))), Tensor(np.ones((4, 3))), Tensor([1.0, 2.0, 3.0, 4.0]))
    assert out.data.tolist() == [[1.0, 2.0, 3.0, 4.0]] * 2


def test_linear_matches_oracle():
    rng = np.random.default_rng(10)
    x, w, b = rng.normal(size=(2, 3)), rng.normal(size=(4, 3)), rng.normal(size=4)
    np.testing.assert_allclose(F.linear(Tensor(x), Tensor(w), Tensor(b)).data, linear_loops(x, w, b),
                               atol=1e-12, rtol=0)


def test_linear_dimension_mismatch():
    with pytest.raises(ValueError):
        F.linear(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))), Tensor(np.zeros(4)))


def test_concat_shapes_and_gradient():
    a = Tensor(np.ones((1, 2, 4, 4)), requires_grad=True)
    b = Tensor(np.ones((1, 3, 4, 4)), requires_grad=True)
    out = F.channel_concat(a, b)
    assert out.shape == (1, 5, 4, 4)
    out.sum().backward()
    assert np.all(a.grad == 1) and np.all(b.grad == 1)
    empty = Tensor(np.zeros((1, 0, 4, 4)))
    assert np.array_equal(F.channel_concat(a, empty).data, a.data)
    with pytest.raises(ValueError):
        F.channel_concat(a, Tensor(np.zeros((1, 1, 3, 4))))


def test_cross_entropy_uniform_and_limit():
    assert F.softmax_cross_entropy(Tensor(np.zeros((1, 5))), [3]).item() == pytest.approx(np.log(5), abs=1e-12)
    assert F.softmax_cross_entropy(Tensor([[0.0, 800.0, 0.0]]), [1]).item() < 1e-300


def test_cross_entropy_matches_direct_formula():
    rng = np.random.default_rng(11)
    logits, labels = rng.normal(size=(3, 5)), np.array([0, 4, 2])
    assert F.softmax_cross_entropy(Tensor(logits), labels).item() == pytest.approx(
        cross_entropy_direct(logits, labels), abs=1e-12)


def test_cross_entropy_rejects_bad_label():
    with pytest.raises(ValueError):
        F.softmax_cross_entropy(Tensor(np.zeros((2, 5))), [0, 5])


def test_softmax_rows_are_distributions():
    p = F.softmax(np.random.default_rng(12).normal(size=(20, 5)) * 30)
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)


# --- autograd mechanics ---------------------------------------------------------

def test_backward_reaches_every_leaf():
    rng = np.random.default_rng(13)
    x = Tensor(rng.normal(size=(2, 1, 4, 4)))
    params = F.ConvParams.init(1, 2, rng)
    bn = F.BatchNormState.init(2)
    y = F.maxpool2d(F.relu(F.batchnorm2d(F.conv2d(x, params), bn)), 2)
    y.sum().backward()
    for t in (params.weight, params.bias, bn.gamma, bn.beta):
        assert t.grad is not None and t.grad.shape == t.shape


def test_gradient_accumulates_over_shared_use():
    x = Tensor([2.0, 3.0], requires_grad=True)
    (x * x + x).sum().backward()
    assert x.grad.tolist() == [5.0, 7.0]


def test_determinism_bitwise():
    rng = np.random.default_rng(14)
    x, w, b = rng.normal(size=(2, 3, 6, 6)), rng.normal(size=(4, 3, 3, 3)), rng.normal(size=4)
    a = F.conv2d(Tensor(x), conv_params(w, b, padding=1)).data
    c = F.conv2d(Tensor(x), conv_params(w, b, padding=1)).data
    assert a.tobytes() == c.tobytes()


# --- gradient checks --------------------------------------------------------------

def weighted(out, rng):
    """Random linear functional of ``out`` so gradients are not all equal."""
    return (out * Tensor(rng.normal(size=out.shape))).sum()


def test_gradcheck_conv():
    rng = np.random.default_rng(20)
    x = Tensor(rng.normal(size=(2, 2, 5, 5)), requires_grad=True)
    p = F.ConvParams(Tensor(rng.normal(size=(3, 2, 3, 3)), requires_grad=True),
                     Tensor(rng.normal(size=3), requires_grad=True), stride=2, padding=1)
    probe = rng.normal(size=(2, 3, 3, 3))
    check_gradients(lambda: (F.conv2d(x, p) * Tensor(probe)).sum(), [x, p.weight, p.bias])


def test_gradcheck_maxpool():
    rng = np.random.default_rng(21)
    x = Tensor(rng.normal(size=(2, 2, 6, 6)), requires_grad=True)
    probe = rng.normal(size=(2, 2, 3, 3))
    check_gradients(lambda: (F.maxpool2d(x, 2) * Tensor(probe)).sum(), [x])
    probe2 = rng.normal(size=(2, 2, 2, 2))
    check_gradients(lambda: (F.maxpool2d(x, 3, 2) * Tensor(probe2)).sum(), [x])


@pytest.mark.parametrize("mode", ["train", "eval"])
def test_gradcheck_batchnorm(mode):
    rng = np.random.default_rng(22)
    x = Tensor(rng.normal(size=(3, 2, 3, 3)), requires_grad=True)
    s = bn_state(2, rng.normal(size=2), rng.normal(size=2), mode=mode)
    s.running_mean, s.running_var = rng.normal(size=2), rng.uniform(0.5, 2, size=2)
    probe = rng.normal(size=x.shape)
    check_gradients(lambda: (F.batchnorm2d(x, s) * Tensor(probe)).sum(), [x, s.gamma, s.beta])


def test_gradcheck_relu_linear_concat_ce_pools():
    rng = np.random.default_rng(23)
    x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    w = Tensor(rng.normal(size=(5, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=5), requires_grad=True)
    labels = np.array([0, 3, 4])
    check_gradients(lambda: F.softmax_cross_entropy(F.relu(F.linear(x, w, b)), labels), [x, w, b])

    a = Tensor(rng.normal(size=(2, 1, 4, 4)), requires_grad=True)
    c = Tensor(rng.normal(size=(2, 2, 4, 4)), requires_grad=True)
    probe = rng.normal(size=(2, 3, 2, 2))
    check_gradients(lambda: (F.avgpool2d(F.channel_concat(a, c), 2) * Tensor(probe)).sum(), [a, c])
    probe2 = rng.normal(size=(2, 3))
    check_gradients(lambda: (F.global_avg_pool(F.channel_concat(a, c)) * Tensor(probe2)).sum(), [a, c])


def test_gradcheck_detection_losses():
    rng = np.random.default_rng(24)
    z = Tensor(rng.normal(size=(2, 6)), requires_grad=True)
    t = (rng.random((2, 6)) < 0.3).astype(float)
    check_gradients(lambda: F.bce_with_logits(z, t, "sum"), [z])
    check_gradients(lambda: F.bce_with_logits(z, t, "mean"), [z])
    mask = (rng.random((2, 6)) < 0.5).astype(float)
    target = rng.random((2, 6))
    check_gradients(lambda: F.masked_squared_error(F.sigmoid(z), target, mask), [z])
