import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fgrnet import tensor as T
from fgrnet.exceptions import ContractError, DimensionError
from fgrnet.tensor import Tape, Tensor, grad_check, make_op


def conv_loop(x, w, b, stride, pad):
    """Direct nested-loop cross-correlation."""
    B, C, H, W = x.shape
    O, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    Ho, Wo = (H + 2 * pad - k) // stride + 1, (W + 2 * pad - k) // stride + 1
    out = np.zeros((B, O, Ho, Wo))
    for n in range(B):
        for o in range(O):
            for i in range(Ho):
                for j in range(Wo):
                    patch = xp[n, :, i * stride:i * stride + k, j * stride:j * stride + k]
                    out[n, o, i, j] = (patch * w[o]).sum() + (0 if b is None else b[o])
    return out


def bilinear_point(row, n_out):
    """Evaluate the half-pixel interpolation formula one output sample at a time."""
    n_in = len(row)
    out = []
    for i in range(n_out):
        s = min(max((i + 0.5) * n_in / n_out - 0.5, 0.0), n_in - 1)
        lo = int(np.floor(s))
        hi = min(lo + 1, n_in - 1)
        out.append(row[lo] * (1 - (s - lo)) + row[hi] * (s - lo))
    return np.array(out)


# --- forward examples -------------------------------------------------------

def test_conv_scaling_kernel():
    out = T.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.full((1, 1, 1, 1), 2.0)))
    np.testing.assert_array_equal(out.data, np.full((1, 1, 3, 3), 2.0))


def test_conv_sliding_window_sum():
    x = np.arange(1, 10, dtype=np.float64).reshape(1, 1, 3, 3)
    out = T.conv2d(Tensor(x), Tensor(np.ones((1, 1, 2, 2))))
    np.testing.assert_array_equal(out.data[0, 0], [[12, 16], [24, 28]])


def test_conv_same_padding_preserves_size():
    out = T.conv2d(Tensor(np.zeros((1, 3, 64, 64))), Tensor(np.zeros((4, 3, 3, 3))), padding=1)
    assert out.shape == (1, 4, 64, 64)


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 0)])
def test_conv_matches_loop_oracle(rng, stride, pad):
    x = rng.standard_normal((2, 3, 7, 6))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    out = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=pad)
    np.testing.assert_allclose(out.data, conv_loop(x, w, b, stride, pad), rtol=1e-12, atol=1e-12)


def test_maxpool_examples():
    out = T.maxpool2d(Tensor(np.array([[[[1.0, 2], [3, 4]]]])), 2, 2)
    assert out.data.item() == 4
    neg = -np.arange(1, 17, dtype=np.float64).reshape(1, 1, 4, 4)
    out = T.maxpool2d(Tensor(neg), 2, 2).data[0, 0]
    np.testing.assert_array_equal(out, [[-1, -3], [-9, -11]])


def test_maxpool_halves_paper_resolution():
    assert T.maxpool2d(Tensor(np.zeros((1, 1, 480, 480), dtype=np.float32)), 2, 2).shape == (1, 1, 240, 240)


def test_maxpool_tie_gradient_goes_to_first_cell():
    x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
    T.backward(T.maxpool2d(x, 2).sum())
    np.testing.assert_array_equal(x.grad[0, 0], [[1, 0], [0, 0]])


def test_bilinear_examples():
    out = T.bilinear_upsample(Tensor(np.full((1, 1, 1, 1), 5.0)), 2)
    np.testing.assert_array_equal(out.data, np.full((1, 1, 2, 2), 5.0))
    out = T.bilinear_upsample(Tensor(np.array([[[[0.0, 1.0], [0.0, 1.0]]]])), 2).data[0, 0]
    for row in out:
        np.testing.assert_allclose(row, [0, 0.25, 0.75, 1], atol=1e-15)
    assert T.bilinear_upsample(Tensor(np.zeros((1, 2, 15, 15))), 2).shape == (1, 2, 30, 30)


def test_bilinear_matches_pointwise_formula(rng):
    x = rng.standard_normal((1, 1, 5, 7))
    out = T.resize_bilinear(Tensor(x), 11, 9).data[0, 0]
    cols = np.stack([bilinear_point(x[0, 0, :, j], 11) for j in range(7)], axis=1)
    expected = np.stack([bilinear_point(r, 9) for r in cols])
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_relu_examples():
    x = Tensor(np.array([-1.0, 0.0, 2.0]), requires_grad=True)
    y = T.relu(x)
    np.testing.assert_array_equal(y.data, [0, 0, 2])
    T.backward(y.sum())
    np.testing.assert_array_equal(x.grad, [0, 0, 1])
    z = Tensor(-np.ones(4), requires_grad=True)
    out = T.relu(z)
    T.backward(out.sum())
    assert not out.data.any() and not z.grad.any()


def test_linear_examples(rng):
    x = Tensor(np.array([[1.0, 2.0]]))
    out = T.linear(x, Tensor(np.array([[1.0, 0.0], [0.0, 3.0]])), Tensor(np.array([1.0, 1.0])))
    np.testing.assert_array_equal(out.data, [[2, 7]])
    v = rng.standard_normal((3, 5))
    np.testing.assert_array_equal(T.linear(Tensor(v), Tensor(np.eye(5)), Tensor(np.zeros(5))).data, v)
    assert T.linear(Tensor(np.zeros((1, 512))), Tensor(np.zeros((512, 256)))).shape == (1, 256)


def test_concat_examples(rng):
    a = Tensor(np.zeros((1, 512, 15, 15), dtype=np.float32))
    b = Tensor(np.zeros((1, 256, 15, 15), dtype=np.float32))
    assert T.concat_channels(a, b).shape == (1, 768, 15, 15)
    x = rng.standard_normal((2, 3, 4, 4))
    np.testing.assert_array_equal(T.concat_channels(Tensor(x), Tensor(np.zeros((2, 0, 4, 4)))).data, x)
    y = rng.standard_normal((2, 2, 4, 4))
    np.testing.assert_array_equal(T.concat_channels(Tensor(x), Tensor(y)).data[:, :3], x)


def test_backward_examples():
    x = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    T.backward((x * x).sum())
    np.testing.assert_array_equal(x.grad, [2, -4, 6])
    x = Tensor(np.array([-1.0, 2.0]), requires_grad=True)
    T.backward(T.relu(x).sum())
    np.testing.assert_array_equal(x.grad, [0, 1])


def test_backward_with_tape_matches_untaped(rng):
    w = rng.standard_normal((2, 3, 3, 3))
    x = rng.standard_normal((1, 3, 5, 5))
    grads = []
    for use_tape in (False, True):
        wt = Tensor(w, requires_grad=True)
        if use_tape:
            with Tape() as tape:
                loss = T.relu(T.conv2d(Tensor(x), wt, padding=1)).sum()
            T.backward(loss, tape)
            assert tape.count("conv2d") == 1
        else:
            T.backward(T.relu(T.conv2d(Tensor(x), wt, padding=1)).sum())
        grads.append(wt.grad)
    np.testing.assert_array_equal(grads[0], grads[1])


def test_gradients_accumulate_on_leaves():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    T.backward((x * 3.0).sum())
    T.backward((x * 2.0).sum())
    np.testing.assert_array_equal(x.grad, [5, 5])


def test_shared_subexpression_gradient():
    x = Tensor(np.array([3.0]), requires_grad=True)
    y = x * x
    T.backward((y + y).sum())
    np.testing.assert_array_equal(x.grad, [12.0])


def test_retain_grad_on_intermediate():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    h = (x * 2.0).retain_grad()
    T.backward((h * h).sum())
    np.testing.assert_array_equal(h.grad, [4.0, 8.0])


# --- gradient checks ----------------------------------------------------------

def _away_from_kinks(arrays, margin=1e-3):
    return all(np.abs(a).min() > margin for a in arrays[:1])


def _distinct_windows(arrays):
    x = arrays[0]
    B, C, H, W = x.shape
    w = x[:, :, :H // 2 * 2, :W // 2 * 2].reshape(B, C, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    s = np.sort(w.reshape(B, C, H // 2, W // 2, 4), axis=-1)
    return (s[..., -1] - s[..., -2]).min() > 1e-3


GRAD_CASES = {
    "add": (lambda a, b: a + b, [(2, 3, 4), (3, 4)], None),
    "sub": (lambda a, b: a - b, [(2, 4), (2, 4)], None),
    "mul": (lambda a, b: a * b, [(2, 4, 3), (1, 4, 1)], None),
    "div": (lambda a, b: a / (b * b + 1.0), [(3, 4), (3, 4)], None),
    "neg": (lambda a: -a, [(4, 5)], None),
    "power": (lambda a: T.power(a * a + 0.5, 1.5), [(3, 4)], None),
    "exp": (lambda a: T.exp(a), [(2, 3, 4)], None),
    "log": (lambda a: T.log(a * a + 0.1), [(3, 5)], None),
    "abs": (lambda a: T.tabs(a), [(4, 6)], _away_from_kinks),
    "clamp_min": (lambda a: T.clamp_min(a, 0.0), [(4, 6)], _away_from_kinks),
    "relu": (lambda a: T.relu(a), [(2, 4, 8, 8)], _away_from_kinks),
    "sigmoid": (lambda a: T.sigmoid(a), [(2, 4, 8, 8)], None),
    "softmax": (lambda a: T.softmax(a), [(3, 5)], None),
    "sum": (lambda a: T.tsum(a, axis=(1, 3), keepdims=True), [(2, 4, 3, 5)], None),
    "mean": (lambda a: T.tmean(a, axis=1), [(2, 4, 3)], None),
    "reshape": (lambda a: T.reshape(a, (4, 6)), [(2, 3, 4)], None),
    "take": (lambda a: a[:, [0, 2, 2]], [(3, 4)], None),
    "conv2d": (lambda x, w, b: T.conv2d(x, w, b, stride=1, padding=1), [(2, 4, 8, 8), (3, 4, 3, 3), (3,)], None),
    "conv2d_strided": (lambda x, w: T.conv2d(x, w, stride=2, padding=0), [(2, 3, 7, 7), (2, 3, 3, 3)], None),
    "conv2d_1x1": (lambda x, w, b: T.conv2d(x, w, b), [(2, 4, 5, 5), (3, 4, 1, 1), (3,)], None),
    "maxpool2d": (lambda x: T.maxpool2d(x, 2, 2), [(2, 4, 8, 8)], _distinct_windows),
    "bilinear_upsample": (lambda x: T.bilinear_upsample(x, 2), [(2, 4, 4, 4)], None),
    "resize_bilinear": (lambda x: T.resize_bilinear(x, 8, 5), [(2, 3, 3, 4)], None),
    "linear": (lambda x, w, b: T.linear(x, w, b), [(2, 8), (8, 5), (5,)], None),
    "concat": (lambda a, b: T.concat_channels(a, b), [(2, 3, 4, 4), (2, 1, 4, 4)], None),
    "global_avg_pool": (lambda x: T.global_avg_pool(x), [(2, 4, 8, 8)], None),
}


@pytest.mark.parametrize("name", sorted(GRAD_CASES))
def test_grad_check_every_op(name):
    op, shapes, valid = GRAD_CASES[name]
    report = grad_check(op, shapes, step=1e-4, tolerance=1e-4, seed=7, valid=valid)
    assert report.passed, report.detail


def test_grad_check_conv_pool_linear_chain():
    def chain(x, w, fc):
        h = T.maxpool2d(T.relu(T.conv2d(x, w, padding=1)), 2, 2)
        return T.linear(T.reshape(h, (h.shape[0], -1)), fc)

    report = grad_check(chain, [(2, 2, 4, 4), (3, 2, 3, 3), (12, 2)], seed=3)
    assert report.passed, report.detail


def test_linear_op_is_exact_to_rounding():
    report = grad_check(lambda x, w: T.linear(x, w), [(3, 6), (6, 4)], seed=11)
    assert report.max_error < 1e-8


def test_corrupted_gradient_is_flagged():
    def scaled_square(a):
        return make_op(a.data ** 2, (a,), lambda g: (g * 2 * a.data * 1.01,), "bad_square")

    report = grad_check(scaled_square, [(3, 4)], seed=0)
    assert not report.passed
    assert report.max_error > 1e-3


# --- invariants ----------------------------------------------------------------

dims = st.integers(min_value=1, max_value=4)


@settings(max_examples=30, deadline=None)
@given(b=dims, c=dims, h=st.integers(3, 9), w=st.integers(3, 9), o=dims, k=st.integers(1, 3),
       stride=st.integers(1, 2), pad=st.integers(0, 1))
def test_conv_shape_algebra(b, c, h, w, o, k, stride, pad):
    out = T.conv2d(Tensor(np.zeros((b, c, h, w))), Tensor(np.zeros((o, c, k, k))), stride=stride, padding=pad)
    assert out.shape == (b, o, (h + 2 * pad - k) // stride + 1, (w + 2 * pad - k) // stride + 1)


@settings(max_examples=30, deadline=None)
@given(b=dims, c=dims, h=st.integers(2, 10), w=st.integers(2, 10), factor=st.integers(1, 3))
def test_pool_and_upsample_shape_algebra(b, c, h, w, factor):
    x = Tensor(np.zeros((b, c, h, w)))
    assert T.maxpool2d(x, 2, 2).shape == (b, c, (h - 2) // 2 + 1, (w - 2) // 2 + 1)
    assert T.bilinear_upsample(x, factor).shape == (b, c, h * factor, w * factor)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2 ** 16), alpha=st.floats(-3, 3), beta=st.floats(-3, 3))
def test_linearity_of_linear_ops(seed, alpha, beta):
    r = np.random.default_rng(seed)
    x, y = r.standard_normal((2, 2, 2, 4, 4))
    w = Tensor(r.standard_normal((3, 2, 3, 3)))
    fc = Tensor(r.standard_normal((32, 5)))
    ops = [
        lambda v: T.conv2d(Tensor(v), w, padding=1).data,
        lambda v: T.linear(Tensor(v.reshape(2, -1)), fc).data,
        lambda v: T.bilinear_upsample(Tensor(v), 2).data,
        lambda v: T.concat_channels(Tensor(v), Tensor(v[:, :1])).data,
    ]
    for f in ops:
        lhs = f(alpha * x + beta * y)
        rhs = alpha * f(x) + beta * f(y)
        scale = max(np.abs(lhs).max(), np.abs(rhs).max(), 1e-12)
        assert np.abs(lhs - rhs).max() / scale < 1e-6


def test_determinism_bit_identical(rng):
    x = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
    w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
    runs = []
    for _ in range(2):
        xt = Tensor(x, requires_grad=True)
        out = T.maxpool2d(T.relu(T.conv2d(xt, Tensor(w), padding=1)), 2)
        T.backward(out.sum())
        runs.append((out.data.tobytes(), xt.grad.tobytes()))
    assert runs[0] == runs[1]


def test_default_dtype_is_float32():
    assert Tensor([1, 2, 3]).dtype == np.float32
    assert Tensor(np.zeros(2, dtype=np.float64)).dtype == np.float64


# --- errors ---------------------------------------------------------------------

def test_conv_channel_mismatch_names_axis():
    with pytest.raises(DimensionError) as exc:
        T.conv2d(Tensor(np.zeros((1, 3, 5, 5))), Tensor(np.zeros((2, 4, 3, 3))))
    assert exc.value.axis == "channel"


def test_conv_bad_stride_and_rank():
    with pytest.raises(ContractError):
        T.conv2d(Tensor(np.zeros((1, 1, 5, 5))), Tensor(np.zeros((1, 1, 3, 3))), stride=0)
    with pytest.raises(DimensionError):
        T.conv2d(Tensor(np.zeros((1, 5, 5))), Tensor(np.zeros((1, 1, 3, 3))))


def test_linear_and_concat_errors():
    with pytest.raises(DimensionError) as exc:
        T.linear(Tensor(np.zeros((1, 3))), Tensor(np.zeros((4, 2))))
    assert exc.value.axis == "feature"
    with pytest.raises(DimensionError) as exc:
        T.concat_channels(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 1, 4, 5))))
    assert exc.value.axis == "width"


def test_backward_needs_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(Exception):
        T.backward(x * 2.0)
