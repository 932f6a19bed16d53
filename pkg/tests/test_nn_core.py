import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from bloodseg import nn_core as nn
from conftest import naive_conv


def conv_params(w, b=None, stride=1, padding=0):
    b = np.zeros(w.shape[0]) if b is None else b
    return nn.ConvParams(nn.Tensor(w), nn.Tensor(b), stride, padding)


# conv forward

def test_conv_identity_kernel():
    x = np.array([[[[3.5]]]])
    out = nn.conv2d_forward(x, conv_params(np.ones((1, 1, 1, 1))))
    assert out.shape == (1, 1, 1, 1) and out[0, 0, 0, 0] == 3.5


def test_conv_ones_window_overlap_counts():
    out = nn.conv2d_forward(np.ones((1, 1, 3, 3)), conv_params(np.ones((1, 1, 3, 3)), padding=1))
    np.testing.assert_array_equal(out[0, 0], [[4, 6, 4], [6, 9, 6], [4, 6, 4]])


@pytest.mark.parametrize("seed", range(5))
def test_conv_matches_naive_loops(seed):
    r = np.random.default_rng(seed)
    x = r.normal(size=(1, 2, 5, 5))
    w = r.normal(size=(3, 2, 3, 3))
    b = r.normal(size=3)
    got = nn.conv2d_forward(x, conv_params(w, b))
    np.testing.assert_allclose(got, naive_conv(x, w, b), rtol=0, atol=1e-12)


@given(
    n=st.integers(1, 2), c_in=st.integers(1, 4), c_out=st.integers(1, 3),
    h=st.integers(3, 8), w=st.integers(3, 8), k=st.sampled_from([1, 3]),
    stride=st.integers(1, 2), pad=st.integers(0, 1), seed=st.integers(0, 2**32 - 1),
)
def test_conv_matches_naive_loops_property(n, c_in, c_out, h, w, k, stride, pad, seed):
    r = np.random.default_rng(seed)
    x = r.normal(size=(n, c_in, h, w))
    wt = r.normal(size=(c_out, c_in, k, k))
    b = r.normal(size=c_out)
    got = nn.conv2d_forward(x, conv_params(wt, b, stride, pad))
    np.testing.assert_allclose(got, naive_conv(x, wt, b, stride, pad), rtol=0, atol=1e-12)


def test_conv_shape_errors():
    p = conv_params(np.ones((2, 3, 3, 3)))
    with pytest.raises(nn.ShapeError):
        nn.conv2d_forward(np.ones((1, 2, 5, 5)), p)
    with pytest.raises(nn.ShapeError):
        nn.conv2d_forward(np.ones((1, 3, 2, 2)), p)
    with pytest.raises(nn.ShapeError):
        nn.conv2d_backward(np.ones((1, 3, 5, 5)), p, np.ones((1, 2, 5, 5)))


def test_conv_params_validation():
    with pytest.raises(nn.ShapeError):
        nn.ConvParams(nn.Tensor(np.ones((2, 1, 3, 3))), nn.Tensor(np.ones(3)))


# conv backward

def test_conv_backward_zero_grad():
    r = np.random.default_rng(0)
    x = r.normal(size=(1, 2, 4, 4))
    p = conv_params(r.normal(size=(3, 2, 3, 3)), padding=1)
    gx, gw, gb = nn.conv2d_backward(x, p, np.zeros((1, 3, 4, 4)))
    assert not gx.any() and not gw.any() and not gb.any()


def test_conv_backward_identity():
    x = np.random.default_rng(0).normal(size=(1, 1, 3, 3))
    g = np.random.default_rng(1).normal(size=(1, 1, 3, 3))
    gx, _, _ = nn.conv2d_backward(x, conv_params(np.ones((1, 1, 1, 1))), g)
    np.testing.assert_array_equal(gx, g)


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1)])
def test_conv_backward_finite_differences(stride, pad):
    r = np.random.default_rng(stride * 10 + pad)
    x = r.normal(size=(2, 2, 5, 5))
    p = conv_params(r.normal(size=(3, 2, 3, 3)), r.normal(size=3), stride, pad)
    proj = r.normal(size=nn.conv2d_forward(x, p).shape)

    def f():
        return float((nn.conv2d_forward(x, p) * proj).sum())

    gx, gw, gb = nn.conv2d_backward(x, p, proj)
    assert nn.gradient_check(f, x, gx) < 1e-6
    assert nn.gradient_check(f, p.weight.data, gw) < 1e-6
    assert nn.gradient_check(f, p.bias.data, gb) < 1e-6


# relu

def test_relu_cases():
    neg = -np.arange(1, 5, dtype=float)
    assert not nn.relu(neg).any()
    pos = np.arange(1, 5, dtype=float)
    np.testing.assert_array_equal(nn.relu(pos), pos)


def test_relu_backward_mask_matches_elementwise():
    r = np.random.default_rng(3)
    x = r.normal(size=(2, 3, 4))
    x[0, 0, 0] = 0.0
    g = r.normal(size=x.shape)
    got = nn.relu_backward(x, g)
    expected = np.array([gv if xv > 0 else 0.0 for xv, gv in zip(x.ravel(), g.ravel())]).reshape(x.shape)
    np.testing.assert_array_equal(got, expected)


# pooling

def test_maxpool_forced_argmax():
    out, idx = nn.maxpool2x2(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
    assert out[0, 0, 0, 0] == 4.0
    assert idx.flat[0, 0, 0, 0] == 1 * 2 + 1
    assert idx.input_hw == (2, 2)


def test_maxpool_ties_pick_top_left():
    _, idx = nn.maxpool2x2(np.ones((1, 1, 4, 6)))
    rows, cols = np.divmod(idx.flat[0, 0], 6)
    np.testing.assert_array_equal(rows, [[0, 0, 0], [2, 2, 2]])
    np.testing.assert_array_equal(cols, [[0, 2, 4], [0, 2, 4]])


def test_maxpool_odd_plane_floor():
    x = np.random.default_rng(0).normal(size=(1, 2, 75, 75))
    out, idx = nn.maxpool2x2(x)
    assert out.shape == (1, 2, 37, 37) and idx.input_hw == (75, 75)
    back = nn.maxunpool2x2(out, idx)
    assert back.shape == x.shape


def test_pool_chain_300_reconstructs():
    x = np.random.default_rng(0).normal(size=(1, 1, 300, 300))
    sizes, stack, h = [], [], x
    for _ in range(5):
        h, idx = nn.maxpool2x2(h)
        stack.append(idx)
        sizes.append(h.shape[2])
    assert sizes == [150, 75, 37, 18, 9]
    for idx in reversed(stack):
        h = nn.maxunpool2x2(h, idx)
    assert h.shape == x.shape


def _window_maxima_oracle(plane):
    h, w = plane.shape
    out = np.zeros_like(plane)
    for i in range(h // 2):
        for j in range(w // 2):
            best = None
            for dy in (0, 1):
                for dx in (0, 1):
                    v = plane[2 * i + dy, 2 * j + dx]
                    if best is None or v > best[0]:
                        best = (v, 2 * i + dy, 2 * j + dx)
            out[best[1], best[2]] = best[0]
    return out


@pytest.mark.parametrize("h", range(2, 8))
@pytest.mark.parametrize("w", range(2, 8))
def test_pool_unpool_keeps_only_window_maxima(h, w):
    r = np.random.default_rng(h * 10 + w)
    # small integer values force ties
    x = r.integers(0, 3, size=(2, 2, h, w)).astype(float)
    out, idx = nn.maxpool2x2(x)
    back = nn.maxunpool2x2(out, idx)
    for n in range(2):
        for c in range(2):
            np.testing.assert_array_equal(back[n, c], _window_maxima_oracle(x[n, c]))


def test_unpool_zero_input():
    _, idx = nn.maxpool2x2(np.random.default_rng(0).normal(size=(1, 1, 6, 6)))
    assert not nn.maxunpool2x2(np.zeros((1, 1, 3, 3)), idx).any()


def test_unpool_sum_equals_window_maxima_sum():
    x = np.random.default_rng(5).normal(size=(1, 1, 9, 9))
    out, idx = nn.maxpool2x2(x)
    assert math.isclose(nn.maxunpool2x2(out, idx).sum(), sum(
        x[0, 0, 2 * i:2 * i + 2, 2 * j:2 * j + 2].max() for i in range(4) for j in range(4)
    ), rel_tol=1e-12)


def test_unpool_rejects_bad_indices():
    out, idx = nn.maxpool2x2(np.ones((1, 1, 4, 4)))
    bad = nn.PoolIndices(idx.flat + 100, idx.input_hw)
    with pytest.raises(nn.CorruptedIndicesError):
        nn.maxunpool2x2(out, bad)
    with pytest.raises(nn.ShapeError):
        nn.maxunpool2x2(np.ones((1, 1, 3, 3)), idx)


def test_pool_backward_finite_differences():
    r = np.random.default_rng(8)
    x = r.normal(size=(1, 2, 5, 7))
    proj = r.normal(size=(1, 2, 2, 3))

    def f():
        return float((nn.maxpool2x2(x)[0] * proj).sum())

    _, idx = nn.maxpool2x2(x)
    assert nn.gradient_check(f, x, nn.maxpool2x2_backward(proj, idx)) < 1e-8


def test_unpool_backward_finite_differences():
    r = np.random.default_rng(9)
    _, idx = nn.maxpool2x2(r.normal(size=(1, 2, 5, 7)))
    x = r.normal(size=(1, 2, 2, 3))
    proj = r.normal(size=(1, 2, 5, 7))

    def f():
        return float((nn.maxunpool2x2(x, idx) * proj).sum())

    assert nn.gradient_check(f, x, nn.maxunpool2x2_backward(proj, idx)) < 1e-8


# loss

def test_uniform_logits_give_log_k():
    loss, _ = nn.softmax_cross_entropy(np.zeros((1, 4, 1, 1)), np.array([[2]]))
    assert math.isclose(loss, math.log(4), rel_tol=1e-12)
    assert round(loss, 6) == 1.386294


def test_confident_logits_give_near_zero_loss():
    labels = np.array([[0, 1], [2, 3]])
    logits = np.zeros((1, 4, 2, 2))
    for y in range(2):
        for x in range(2):
            logits[0, labels[y, x], y, x] = 50.0
    loss, grad = nn.softmax_cross_entropy(logits, labels)
    assert loss < 1e-20 and np.abs(grad).max() < 1e-20


@pytest.mark.parametrize("weights,ignore", [(None, None), ([0.5, 1.0, 2.0, 4.0], None), (None, 0)])
def test_loss_gradient_finite_differences(weights, ignore):
    r = np.random.default_rng(11)
    logits = r.normal(size=(1, 4, 3, 3))
    labels = r.integers(0, 4, size=(3, 3))
    _, grad = nn.softmax_cross_entropy(logits, labels, weights, ignore)

    def f():
        return nn.softmax_cross_entropy(logits, labels, weights, ignore)[0]

    assert nn.gradient_check(f, logits, grad) < 1e-6


def test_ignored_pixels_have_zero_grad():
    r = np.random.default_rng(2)
    labels = np.array([[0, 1], [0, 2]])
    _, grad = nn.softmax_cross_entropy(r.normal(size=(1, 4, 2, 2)), labels, ignore_id=0)
    assert not grad[0, :, labels == 0].any()


def test_invalid_label_rejected():
    with pytest.raises(nn.InvalidLabelError):
        nn.softmax_cross_entropy(np.zeros((1, 3, 1, 2)), np.array([[0, 3]]))
    # an out-of-range id equal to ignore_id is fine
    nn.softmax_cross_entropy(np.zeros((1, 3, 1, 2)), np.array([[0, 7]]), ignore_id=7)


@given(hnp.arrays(np.float64, (2, 5, 3, 3), elements=st.floats(-30, 30)))
def test_softmax_sums_to_one(logits):
    np.testing.assert_allclose(nn.softmax(logits).sum(axis=1), 1.0, rtol=0, atol=1e-12)


# sgd

def test_sgd_zero_lr_is_noop():
    t = nn.Tensor(np.array([1.0, 2.0]), grad=np.array([5.0, 5.0]))
    nn.sgd_step([t], 0.0)
    np.testing.assert_array_equal(t.data, [1.0, 2.0])
    assert not t.grad.any()


def test_sgd_scalar_arithmetic():
    t = nn.Tensor(np.array([1.0]), grad=np.array([2.0]))
    nn.sgd_step([t], 0.5)
    assert t.data[0] == 0.0


def test_sgd_quadratic_converges():
    t = nn.Tensor(np.array([0.0]))
    for _ in range(100):
        t.grad = 2 * (t.data - 3.0)
        nn.sgd_step([t], 0.1)
    # closed form: |w - 3| = 3 * 0.8**100
    assert abs(t.data[0] - 3.0) < 1e-6
    assert math.isclose(abs(t.data[0] - 3.0), 3 * 0.8 ** 100, rel_tol=1e-6)


def test_sgd_missing_grad():
    with pytest.raises(nn.GradStateError):
        nn.sgd_step([nn.Tensor(np.zeros(2))], 0.1)


# gradient check harness

def test_gradient_check_linear_is_exact():
    x = np.random.default_rng(0).normal(size=10)
    assert nn.gradient_check(lambda: float(x.sum()), x, np.ones(10)) < 1e-10


def test_gradient_check_square():
    x = np.random.default_rng(1).normal(size=10)
    assert nn.gradient_check(lambda: float((x ** 2).sum()), x, 2 * x) < 1e-8


def test_gradient_check_detects_wrong_gradient():
    x = np.random.default_rng(1).normal(size=10)
    assert nn.gradient_check(lambda: float((x ** 2).sum()), x, 3 * x) > 0.1


def test_gradient_check_restores_input():
    x = np.random.default_rng(1).normal(size=6)
    before = x.copy()
    nn.gradient_check(lambda: float((x ** 3).sum()), x, 3 * x ** 2)
    np.testing.assert_array_equal(x, before)


# determinism and checkpoint container

def test_ops_bit_deterministic():
    r = np.random.default_rng(4)
    x = r.normal(size=(2, 3, 9, 9))
    p = conv_params(r.normal(size=(4, 3, 3, 3)), r.normal(size=4), 1, 1)
    a = nn.conv2d_forward(x, p)
    b = nn.conv2d_forward(x.copy(), p)
    assert a.tobytes() == b.tobytes()
    ga = nn.conv2d_backward(x, p, a)
    gb = nn.conv2d_backward(x, p, b)
    assert all(u.tobytes() == v.tobytes() for u, v in zip(ga, gb))


def test_checkpoint_roundtrip_and_byte_stable(tmp_path):
    r = np.random.default_rng(0)
    tensors = {"b.w": r.normal(size=(2, 3)), "a.b": r.normal(size=4)}
    nn.save_tensors(tmp_path / "x.safetensors", tensors, meta={"k": 1})
    nn.save_tensors(tmp_path / "y.safetensors", dict(reversed(tensors.items())), meta={"k": 1})
    assert (tmp_path / "x.safetensors").read_bytes() == (tmp_path / "y.safetensors").read_bytes()
    loaded, meta = nn.load_tensors(tmp_path / "x.safetensors")
    assert meta == {"k": 1}
    for k, v in tensors.items():
        assert loaded[k].dtype == np.float64
        np.testing.assert_array_equal(loaded[k], v)
