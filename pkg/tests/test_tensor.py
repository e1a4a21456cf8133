import numpy as np
import pytest
from hypothesis import given, strategies as st

from panodepth import tensor as T
from panodepth.tensor import ConvSpec, Tensor

F64 = np.float64


def var(rng, shape, nudge=False):
    data = rng.normal(size=shape)
    if nudge:
        # keep ELU inputs 1e-3 away from the kink at 0
        data = np.where(np.abs(data) < 1e-3, np.sign(data + 1e-12) * 1e-3, data)
    return T.tensor(data, F64, requires_grad=True)


def brute_conv(x, w, b, stride, dilation, padding):
    """Direct loops over output pixels and taps."""
    n, c, h, wd = x.shape
    co, _, kh, kw = w.shape
    ho, top, _ = T.same_padding(h, kh, stride, dilation)
    wo, left, _ = T.same_padding(wd, kw, stride, dilation)
    out = np.zeros((n, co, ho, wo))
    for y in range(ho):
        for xx in range(wo):
            for i in range(kh):
                for j in range(kw):
                    r = y * stride - top + i * dilation
                    col = xx * stride - left + j * dilation
                    if not 0 <= r < h:
                        continue
                    if padding == "sphere":
                        col %= wd
                    elif not 0 <= col < wd:
                        continue
                    out[:, :, y, xx] += x[:, :, r, col] @ w[:, :, i, j].T
    return out + b[None, :, None, None]


def brute_transpose(x, w, b, padding):
    n, c, h, wd = x.shape
    _, co, kh, kw = w.shape
    out = np.zeros((n, co, 2 * h, 2 * wd))
    for i in range(h):
        for j in range(wd):
            for a in range(kh):
                for e in range(kw):
                    y, col = 2 * i + a - kh // 2, 2 * j + e - kw // 2
                    if padding == "sphere":
                        col %= 2 * wd
                    if 0 <= y < 2 * h and 0 <= col < 2 * wd:
                        out[:, :, y, col] += x[:, :, i, j] @ w[:, :, a, e]
    return out + b[None, :, None, None]


def test_conv_ones_example():
    out = T.conv2d(T.tensor(np.ones((1, 1, 3, 3))), T.tensor(np.ones((1, 1, 3, 3))))
    assert out.data[0, 0, 1, 1] == 9
    # sphere padding: rows zero-padded, columns wrap
    assert out.data[0, 0, 0, 0] == 6


def test_identity_kernel(rng):
    x = rng.normal(size=(2, 3, 5, 8)).astype(np.float32)
    w = np.eye(3, dtype=np.float32)[:, :, None, None]
    np.testing.assert_array_equal(T.conv2d(T.Tensor(x), T.Tensor(w)).data, x)


@pytest.mark.parametrize("padding", ["sphere", "zero"])
@pytest.mark.parametrize("kernel, stride, dilation", [
    ((3, 3), 1, 1), ((3, 3), 2, 1), ((1, 9), 1, 1), ((3, 9), 1, 1), ((5, 5), 2, 1), ((3, 3), 1, 3), ((2, 4), 2, 2),
])
def test_conv_matches_brute_force(rng, padding, kernel, stride, dilation):
    x = rng.normal(size=(2, 3, 7, 12))
    w = rng.normal(size=(4, 3) + kernel)
    b = rng.normal(size=4)
    out = T.conv2d(T.Tensor(x), T.Tensor(w), T.Tensor(b), stride, dilation, padding).data
    assert out.shape[2:] == (-(-7 // stride), -(-12 // stride))
    np.testing.assert_allclose(out, brute_conv(x, w, b, stride, dilation, padding), atol=1e-12)


@given(st.integers(0, 20), st.sampled_from([1, 2, 4, 16]), st.sampled_from([(3, 3), (1, 9), (3, 9), (5, 5)]))
def test_conv_longitude_equivariance(shift, dilation, kernel):
    rng = np.random.default_rng(shift)
    x = rng.normal(size=(1, 2, 5, 8)).astype(np.float32)
    w = rng.normal(size=(3, 2) + kernel).astype(np.float32)
    y = T.conv2d(T.Tensor(x), T.Tensor(w), dilation=dilation).data
    ys = T.conv2d(T.Tensor(np.roll(x, shift, 3)), T.Tensor(w), dilation=dilation).data
    np.testing.assert_array_equal(ys, np.roll(y, shift, 3))


def test_conv_shape_errors():
    with pytest.raises(ValueError, match=r"\(1, 2, 4, 4\).*\(3, 3, 3, 3\)"):
        T.conv2d(T.tensor(np.ones((1, 2, 4, 4))), T.tensor(np.ones((3, 3, 3, 3))))
    with pytest.raises(ValueError, match="bias"):
        T.conv2d(T.tensor(np.ones((1, 3, 4, 4))), T.tensor(np.ones((2, 3, 3, 3))), T.tensor(np.ones(3)))


def test_conv_spec_checks():
    assert ConvSpec(3, 8, (1, 9)).n_params == 8 * 3 * 9 + 8
    assert ConvSpec(4, 2, transpose=True, stride=2).weight_shape == (4, 2, 3, 3)
    with pytest.raises(ValueError):
        ConvSpec(1, 1, (0, 3))
    with pytest.raises(ValueError):
        ConvSpec(1, 1, transpose=True, stride=1)


def test_transpose_shape_and_impulse(rng):
    x = rng.normal(size=(1, 1, 2, 2))
    out = T.conv_transpose2d(T.Tensor(x), T.Tensor(np.ones((1, 1, 1, 1)))).data
    assert out.shape == (1, 1, 4, 4)
    expected = np.zeros((1, 1, 4, 4))
    expected[..., ::2, ::2] = x
    np.testing.assert_array_equal(out, expected)


@pytest.mark.parametrize("padding", ["sphere", "zero"])
@pytest.mark.parametrize("kernel", [(3, 3), (4, 4), (2, 5), (1, 1)])
def test_transpose_matches_scatter(rng, padding, kernel):
    x = rng.normal(size=(2, 3, 3, 3 if padding == "zero" else 4))
    w = rng.normal(size=(3, 2) + kernel)
    b = rng.normal(size=2)
    out = T.conv_transpose2d(T.Tensor(x), T.Tensor(w), T.Tensor(b), padding=padding).data
    np.testing.assert_allclose(out, brute_transpose(x, w, b, padding), atol=1e-12)


def test_transpose_equivariance(rng):
    x = rng.normal(size=(1, 4, 4, 8)).astype(np.float32)
    w = rng.normal(size=(4, 3, 3, 3)).astype(np.float32)
    y = T.conv_transpose2d(T.Tensor(x), T.Tensor(w)).data
    for s in (1, 3):
        ys = T.conv_transpose2d(T.Tensor(np.roll(x, s, 3)), T.Tensor(w)).data
        np.testing.assert_array_equal(ys, np.roll(y, 2 * s, 3))


def test_elu_values():
    x = T.tensor([0.0, 1.0, -20.0, -1.0], F64)
    out = T.elu(x).data
    assert out[0] == 0 and out[1] == 1
    assert abs(out[2] - (np.exp(-20) - 1)) < 1e-15 and abs(out[2] + 1) < 1e-8
    assert out[3] == pytest.approx(np.expm1(-1))


def test_dropout_semantics():
    x = T.tensor(np.ones((2, 3, 8, 8)))
    assert T.dropout(x, 0.0, train=True) is x
    assert T.dropout(x, 0.5, train=False) is x
    a = T.dropout(x, 0.5, seed=1, train=True, layer_id=2, step=7).data
    b = T.dropout(x, 0.5, seed=1, train=True, layer_id=2, step=7).data
    np.testing.assert_array_equal(a, b)
    assert set(np.unique(a)) <= {0.0, 2.0}
    c = T.dropout(x, 0.5, seed=1, train=True, layer_id=2, step=8).data
    d = T.dropout(x, 0.5, seed=1, train=True, layer_id=3, step=7).data
    assert not np.array_equal(a, c) and not np.array_equal(a, d)
    with pytest.raises(ValueError):
        T.dropout(x, 1.0, train=True)


def test_upsample_example():
    out = T.upsample_nearest(T.tensor([[[[1, 2], [3, 4]]]]), 2).data[0, 0]
    assert out.tolist() == [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]]


def test_concat_mismatch():
    with pytest.raises(ValueError, match="concat"):
        T.concat([T.tensor(np.ones((1, 1, 2, 2))), T.tensor(np.ones((1, 1, 2, 3)))])


def test_sum_backward_is_ones(rng):
    x = var(rng, (2, 3, 4, 5))
    T.sum(x).backward()
    np.testing.assert_array_equal(x.grad, np.ones((2, 3, 4, 5)))


def test_backward_needs_scalar(rng):
    with pytest.raises(ValueError, match="scalar"):
        var(rng, (2, 2)).backward()


def test_shared_input_accumulates(rng):
    x = var(rng, (1, 1, 2, 2))
    T.sum(T.add(T.mul(x, x), x)).backward()
    np.testing.assert_allclose(x.grad, 2 * x.data + 1)


def test_no_grad_builds_no_graph(rng):
    x = var(rng, (1, 1, 2, 2))
    with T.no_grad():
        y = T.square(x)
    assert not y.requires_grad and y._parents == ()


def test_grad_check_linear_is_exact(rng):
    # central differences of a linear map are exact for any step, so the only
    # error is rounding of order ulp(f) / eps; a wider step keeps it small
    x, w = var(rng, (1, 2, 4, 6)), var(rng, (3, 2, 3, 3))
    assert T.grad_check(lambda: T.sum(T.conv2d(x, w)), [x, w], eps=1e-2) < 1e-10
    assert T.grad_check(lambda: T.sum(T.scale(x, 0.7)), [x], eps=1e-2) < 1e-10


def _layer_cases(rng):
    x = var(rng, (2, 3, 4, 8))
    y = var(rng, (2, 3, 4, 8))
    xe = var(rng, (2, 3, 4, 8), nudge=True)
    w, b = var(rng, (4, 3, 3, 3)), var(rng, (4,))
    wr = var(rng, (2, 3, 1, 9))
    wt, bt = var(rng, (3, 2, 3, 3)), var(rng, (2,))
    return {
        "conv": (lambda: T.sum(T.square(T.conv2d(x, w, b))), [x, w, b]),
        "conv_strided": (lambda: T.sum(T.square(T.conv2d(x, w, b, stride=2))), [x, w, b]),
        "conv_dilated": (lambda: T.sum(T.square(T.conv2d(x, w, b, dilation=3))), [x, w, b]),
        "conv_rect": (lambda: T.sum(T.square(T.conv2d(x, wr))), [x, wr]),
        "conv_zero_pad": (lambda: T.sum(T.square(T.conv2d(x, w, b, padding="zero"))), [x, w, b]),
        "conv_transpose": (lambda: T.sum(T.square(T.conv_transpose2d(x, wt, bt))), [x, wt, bt]),
        "elu": (lambda: T.sum(T.square(T.elu(xe))), [xe]),
        "dropout": (lambda: T.sum(T.square(T.dropout(x, 0.3, seed=4, train=True, layer_id=1, step=2))), [x]),
        "concat": (lambda: T.sum(T.square(T.concat([x, T.scale(y, 2.0)]))), [x, y]),
        "upsample": (lambda: T.sum(T.square(T.upsample_nearest(x, 2))), [x]),
        "add": (lambda: T.sum(T.square(T.add(x, y))), [x, y]),
        "roll_crop": (lambda: T.sum(T.square(T.crop(T.roll(x, 3, 3), 2, 1, 3))), [x]),
    }


@pytest.mark.parametrize("name", ["conv", "conv_strided", "conv_dilated", "conv_rect", "conv_zero_pad",
                                  "conv_transpose", "elu", "dropout", "concat", "upsample", "add", "roll_crop"])
def test_layer_gradients(rng, name):
    fn, params = _layer_cases(rng)[name]
    assert T.grad_check(fn, params) < 1e-4


def test_grad_check_detects_wrong_gradient(rng):
    x = var(rng, (1, 1, 2, 3))
    bad = lambda: T._result(x.data ** 3, (x,), lambda g: (g * x.data,))  # noqa: E731
    assert T.grad_check(lambda: T.sum(bad()), [x]) > 0.1


def test_same_padding():
    assert T.same_padding(8, 3, 1, 1) == (8, 1, 1)
    assert T.same_padding(8, 3, 2, 1) == (4, 0, 1)  # extra pad goes after
    assert T.same_padding(7, 3, 2, 1) == (4, 1, 1)
    assert T.same_padding(8, 3, 1, 4) == (8, 4, 4)
