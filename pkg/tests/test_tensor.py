import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vitlr import tensor as T
from helpers import block_diagonal, gradcheck, naive_conv2d

rng = np.random.default_rng(0)


def t(a, name=None):
    return T.Tensor(np.asarray(a, dtype=np.float32), name=name)


# --- convolution -----------------------------------------------------------

def test_identity_kernel():
    x = rng.standard_normal((1, 1, 3, 3))
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 1, 1] = 1
    out = T.conv2d(t(x), t(w), t([0.0]), padding=1)
    np.testing.assert_allclose(out.data, x, atol=1e-6)


def test_all_ones_center_and_corner():
    out = T.conv2d(t(np.ones((1, 1, 3, 3))), t(np.ones((1, 1, 3, 3))), padding=1).data[0, 0]
    assert out[1, 1] == 9 and out[0, 0] == 4


def test_conv_shapes():
    out = T.conv2d(t(np.zeros((2, 3, 8, 8))), t(np.zeros((5, 3, 3, 3))), stride=2, padding=1)
    assert out.shape == (2, 5, 4, 4)
    out = T.dwconv2d(t(np.zeros((1, 4, 6, 6))), t(np.zeros((4, 1, 7, 7))), padding=3)
    assert out.shape == (1, 4, 6, 6)


@pytest.mark.parametrize("wshape, msg", [((5, 2, 3, 3), "Cin"), ((5, 3, 2, 2), "odd")])
def test_conv_rejects_bad_weights(wshape, msg):
    with pytest.raises(ValueError, match=msg):
        T.conv2d(t(np.zeros((1, 3, 8, 8))), t(np.zeros(wshape)))


def test_conv_rejects_kernel_larger_than_input():
    with pytest.raises(ValueError, match="larger"):
        T.conv2d(t(np.zeros((1, 1, 2, 2))), t(np.zeros((1, 1, 3, 3))))


def test_dwconv_identity_and_channel_isolation():
    x = rng.standard_normal((1, 2, 5, 5))
    w = np.zeros((2, 1, 3, 3))
    w[:, 0, 1, 1] = 1
    np.testing.assert_allclose(T.dwconv2d(t(x), t(w), padding=1).data, x, atol=1e-6)
    x2 = x.copy()
    x2[:, 1] += 5
    k = t(rng.standard_normal((2, 1, 3, 3)))
    a = T.dwconv2d(t(x), k, padding=1).data
    b = T.dwconv2d(t(x2), k, padding=1).data
    assert np.array_equal(a[:, 0], b[:, 0]) and not np.allclose(a[:, 1], b[:, 1])


def test_dwconv_matches_block_diagonal_conv():
    x = rng.standard_normal((2, 3, 7, 7)).astype(np.float32)
    w = rng.standard_normal((3, 1, 3, 3)).astype(np.float32)
    a = T.dwconv2d(t(x), t(w), stride=2, padding=1).data
    b = T.conv2d(t(x), t(block_diagonal(w)), stride=2, padding=1).data
    assert np.abs(a - b).max() < 1e-5


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 2), st.integers(1, 3), st.integers(1, 3), st.integers(3, 8),
       st.integers(3, 8), st.sampled_from([1, 3]), st.integers(1, 2), st.integers(0, 1),
       st.integers(0, 2**31 - 1))
def test_conv_matches_naive_property(n, cin, cout, h, w, k, stride, pad, seed):
    r = np.random.default_rng(seed)
    if k > min(h, w) + 2 * pad:
        return
    x = r.standard_normal((n, cin, h, w)).astype(np.float32)
    wt = r.standard_normal((cout, cin, k, k)).astype(np.float32)
    b = r.standard_normal(cout).astype(np.float32)
    got = T.conv2d(t(x), t(wt), t(b), stride=stride, padding=pad).data
    assert np.abs(got - naive_conv2d(x, wt, b, stride, pad)).max() < 1e-5


# --- normalization ---------------------------------------------------------

def test_batchnorm_eval_identity():
    x = rng.standard_normal((2, 3, 4, 4)).astype(np.float32)
    out = T.batchnorm2d(t(x), t(np.ones(3)), t(np.zeros(3)), np.zeros(3), np.ones(3),
                        eps=1e-5, mode="eval")
    np.testing.assert_allclose(out.data, x / np.sqrt(1 + 1e-5), rtol=1e-6)


def test_batchnorm_train_hand_case_and_running_stats():
    rm, rv = np.zeros(1), np.ones(1)
    out = T.batchnorm2d(t([[[[1, 2, 3, 4]]]]), t([1.0]), t([0.0]), rm, rv, eps=1e-9)
    np.testing.assert_allclose(out.data.ravel(), [-1.3416, -0.4472, 0.4472, 1.3416], atol=1e-4)
    np.testing.assert_allclose(rm, [0.25])
    const = T.batchnorm2d(t(np.full((2, 1, 2, 2), 3.0)), t([2.0]), t([0.7]), np.zeros(1),
                          np.ones(1))
    np.testing.assert_allclose(const.data, 0.7, atol=1e-6)


def test_batchnorm_rejects_channel_mismatch():
    with pytest.raises(ValueError, match="C=3"):
        T.batchnorm2d(t(np.zeros((1, 3, 2, 2))), t(np.ones(2)), t(np.zeros(2)), np.zeros(2),
                      np.ones(2))


def test_layernorm_examples():
    out = T.layernorm(t([[[[1.0]], [[3.0]]]]), t([1, 1]), t([0, 0]), eps=1e-12)
    np.testing.assert_allclose(out.data.ravel(), [-1, 1], atol=1e-5)
    flat = T.layernorm(t(np.full((1, 3, 2, 2), 4.0)), t(np.ones(3)), t(np.zeros(3)))
    np.testing.assert_allclose(flat.data, 0, atol=1e-6)
    beta = T.layernorm(t(rng.standard_normal((1, 2, 2, 2))), t([0, 0]), t([0.5, -2]))
    np.testing.assert_allclose(beta.data[0, :, 0, 0], [0.5, -2])


# --- pointwise and shape ops ----------------------------------------------

def test_activation_examples():
    assert T.relu(t([-1, 0, 2])).data.tolist() == [0, 0, 2]
    assert T.sigmoid(t([0.0])).data[0] == 0.5
    big = T.sigmoid(t([-1e4, 1e4])).data
    assert np.isfinite(big).all() and big[0] == 0 and big[1] == 1
    np.testing.assert_allclose(T.softmax(t([[0.0, 0.0]])).data, [[0.5, 0.5]])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_softmax_sums_to_one(seed):
    x = np.random.default_rng(seed).standard_normal((2, 5, 3, 3)) * 30
    s = T.softmax(t(x), axis=1).data.sum(axis=1)
    assert np.abs(s - 1).max() < 1e-6


def test_dense_pool_reshape():
    x = rng.standard_normal((3, 4))
    np.testing.assert_allclose(T.dense(t(x), t(np.eye(4)), t(np.zeros(4))).data, x, atol=1e-6)
    assert T.adaptive_avg_pool2d(t([[[[1, 2], [3, 4]]]]), 1, 1).data.item() == 2.5
    a = t(rng.standard_normal((2, 3, 4)))
    back = T.reshape(T.reshape(a, (2, 12)), (2, 3, 4))
    assert np.array_equal(back.data, a.data)
    assert T.flatten(t(np.zeros((2, 3, 4, 5)))).shape == (2, 60)
    with pytest.raises(ValueError, match="element count"):
        T.reshape(a, (5, 5))
    with pytest.raises(ValueError, match="divide"):
        T.adaptive_avg_pool2d(t(np.zeros((1, 1, 3, 3))), 2, 2)


def test_concat_channels():
    a, b = rng.standard_normal((1, 2, 3, 3)), rng.standard_normal((1, 1, 3, 3))
    assert np.array_equal(T.concat_channels([t(a), t(b)]).data,
                          np.concatenate([a, b], 1).astype(np.float32))


def test_tensor_invariants():
    with pytest.raises(ValueError):
        T.Tensor(np.zeros((1, 1, 1, 1, 1)))
    with pytest.raises(ValueError):
        T.Tensor(np.zeros((0, 3)))
    with pytest.raises(T.NonFiniteError):
        T.Tensor([np.nan])
    assert t([1.0]).data.dtype == np.float32


# --- backward --------------------------------------------------------------

def test_relu_subgradient():
    x = t([1.0, -1.0], "x")
    with T.Tape() as tape:
        loss = T.tsum(T.relu(x))
    assert T.backward(tape, loss)["x"].tolist() == [1, 0]


def test_reused_parameter_accumulates():
    th = t([3.0], "theta")
    with T.Tape() as tape:
        y = T.tsum(T.add(th, th))
    assert T.backward(tape, y)["theta"].tolist() == [2]


def test_unreached_parameter_gets_zero():
    a, b = t([1.0], "a"), t([2.0, 3.0], "b")
    with T.Tape() as tape:
        y = T.tsum(T.square(a))
    g = T.backward(tape, y, {"a": a, "b": b})
    assert g["b"].tolist() == [0, 0] and g["a"].tolist() == [2]


def test_backward_needs_scalar():
    x = t([1.0, 2.0], "x")
    with T.Tape() as tape:
        y = T.relu(x)
    with pytest.raises(ValueError, match="scalar"):
        T.backward(tape, y)


def test_backward_replays_in_reverse_order():
    x = t([0.5], "x")
    with T.Tape() as tape:
        y = T.tsum(T.mul(T.sigmoid(x), T.square(x)))
    names = [r.grad_fn for r in tape.records]
    assert len(names) == len(tape) == 4
    s = 1 / (1 + np.exp(-0.5))
    expect = s * (1 - s) * 0.25 + s * 2 * 0.5
    assert T.backward(tape, y)["x"][0] == pytest.approx(expect, rel=1e-5)


def _pos(shape):
    return rng.uniform(0.5, 2.0, shape)


def _away_from_zero(shape):
    return rng.uniform(0.3, 1.5, shape) * rng.choice([-1, 1], shape)


GRAD_CASES = {
    "conv2d": (lambda x, w, b: T.conv2d(x, w, b, stride=2, padding=1),
               [rng.standard_normal((2, 2, 5, 5)), rng.standard_normal((3, 2, 3, 3)),
                rng.standard_normal(3)]),
    "dwconv2d": (lambda x, w, b: T.dwconv2d(x, w, b, padding=1),
                 [rng.standard_normal((1, 2, 4, 4)), rng.standard_normal((2, 1, 3, 3)),
                  rng.standard_normal(2)]),
    "batchnorm_train": (lambda x, g, b: T.batchnorm2d(x, g, b, np.zeros(2), np.ones(2)),
                        [rng.standard_normal((2, 2, 2, 2)), _pos(2), rng.standard_normal(2)]),
    "batchnorm_eval": (lambda x, g, b: T.batchnorm2d(x, g, b, np.full(2, 0.3), np.full(2, 2.0),
                                                     mode="eval"),
                       [rng.standard_normal((1, 2, 2, 2)), _pos(2), rng.standard_normal(2)]),
    "layernorm": (lambda x, g, b: T.layernorm(x, g, b),
                  [rng.standard_normal((1, 3, 2, 2)), _pos(3), rng.standard_normal(3)]),
    "relu": (T.relu, [_away_from_zero((2, 3))]),
    "sigmoid": (T.sigmoid, [rng.standard_normal((2, 3))]),
    "softmax": (lambda x: T.softmax(x, axis=1), [rng.standard_normal((2, 4))]),
    "dense": (T.dense, [rng.standard_normal((3, 4)), rng.standard_normal((2, 4)),
                        rng.standard_normal(2)]),
    "reshape": (lambda x: T.reshape(x, (6, 2)), [rng.standard_normal((3, 4))]),
    "flatten": (T.flatten, [rng.standard_normal((2, 2, 2, 2))]),
    "pool": (lambda x: T.adaptive_avg_pool2d(x, 2, 1), [rng.standard_normal((1, 2, 4, 4))]),
    "upsample": (lambda x: T.upsample_nearest(x, 4, 4), [rng.standard_normal((1, 2, 2, 2))]),
    "concat": (lambda a, b: T.concat_channels([a, b]),
               [rng.standard_normal((1, 2, 2, 2)), rng.standard_normal((1, 1, 2, 2))]),
    "tokens": (lambda x: T.from_tokens(T.to_tokens(x), 2, 3), [rng.standard_normal((2, 3, 2, 3))]),
    "broadcast": (lambda x: T.broadcast_batch(x, 3), [rng.standard_normal((1, 2, 2))]),
    "take": (lambda x: T.take(x, [2, 0, 2], axis=1), [rng.standard_normal((2, 3))]),
    "add": (T.add, [rng.standard_normal((2, 3)), rng.standard_normal(3)]),
    "sub": (T.sub, [rng.standard_normal((2, 3)), rng.standard_normal((2, 1))]),
    "mul": (T.mul, [rng.standard_normal((2, 3)), rng.standard_normal((2, 3))]),
    "div": (T.div, [rng.standard_normal((2, 3)), _away_from_zero((2, 3))]),
    "neg": (T.neg, [rng.standard_normal(4)]),
    "scale": (lambda x: T.scale(x, -1.7), [rng.standard_normal(4)]),
    "log": (T.log, [_pos(4)]),
    "arctan": (T.arctan, [rng.standard_normal(4)]),
    "square": (T.square, [rng.standard_normal(4)]),
    "pow": (lambda x: T.pow_scalar(x, 2.5), [_pos(4)]),
    "maximum": (T.maximum, [np.array([0.0, 1.0, -2.0]), np.array([0.5, 0.2, -1.0])]),
    "minimum": (T.minimum, [np.array([0.0, 1.0, -2.0]), np.array([0.5, 0.2, -1.0])]),
    "clamp_min": (lambda x: T.clamp_min(x, 0.1), [np.array([-1.0, 0.5, 2.0])]),
    "tsum_axis": (lambda x: T.tsum(x, axis=1), [rng.standard_normal((2, 3))]),
    "mean": (T.mean, [rng.standard_normal((2, 3))]),
}


@pytest.mark.parametrize("name", sorted(GRAD_CASES))
def test_gradcheck(name):
    fn, arrays = GRAD_CASES[name]
    assert gradcheck(fn, arrays) < 1e-3


def test_gradcheck_covers_every_differentiable_op():
    helpers = {"Tensor", "Tape", "NonFiniteError", "backward", "precision", "default_dtype",
               "to_tokens", "from_tokens"}
    ops = set(T.__all__) - helpers
    covered = {"conv2d", "dwconv2d", "batchnorm2d", "layernorm", "relu", "sigmoid", "softmax",
               "dense", "reshape", "flatten", "adaptive_avg_pool2d", "upsample_nearest",
               "concat_channels", "broadcast_batch", "take", "add", "sub", "mul", "div", "neg",
               "scale", "log", "arctan", "square", "pow_scalar", "maximum", "minimum",
               "clamp_min", "tsum", "mean"}
    assert ops <= covered
