import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mcdqmri import nnengine as nn


def naive_conv3d(x, w, b):
    B, C, X, Y, Z = x.shape
    O = w.shape[0]
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1), (1, 1)))
    out = np.zeros((B, O, X, Y, Z))
    for n, o, i, j, k in itertools.product(range(B), range(O), range(X), range(Y), range(Z)):
        out[n, o, i, j, k] = np.sum(xp[n, :, i:i + 3, j:j + 3, k:k + 3] * w[o]) + b[o]
    return out


def naive_convtranspose(x, w, b):
    B, C, X, Y, Z = x.shape
    O = w.shape[1]
    out = np.zeros((B, O, 2 * X, 2 * Y, 2 * Z)) + b.reshape(1, O, 1, 1, 1)
    for n, c, i, j, k in itertools.product(range(B), range(C), range(X), range(Y), range(Z)):
        out[n, :, 2 * i:2 * i + 2, 2 * j:2 * j + 2, 2 * k:2 * k + 2] += x[n, c, i, j, k] * w[c]
    return out


def naive_maxpool(x):
    B, C, X, Y, Z = x.shape
    out = np.zeros((B, C, X // 2, Y // 2, Z // 2))
    for n, c, i, j, k in itertools.product(range(B), range(C), range(X // 2), range(Y // 2), range(Z // 2)):
        out[n, c, i, j, k] = x[n, c, 2 * i:2 * i + 2, 2 * j:2 * j + 2, 2 * k:2 * k + 2].max()
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def test_conv3d_matches_naive(rng):
    x = rng.normal(size=(2, 3, 4, 3, 5))
    w = rng.normal(size=(2, 3, 3, 3, 3))
    b = rng.normal(size=2)
    np.testing.assert_allclose(nn.conv3d(x, w, b), naive_conv3d(x, w, b), atol=1e-12)


def test_conv3d_dirac_kernel_is_identity(rng):
    x = rng.normal(size=(1, 2, 4, 4, 4))
    w = np.zeros((2, 2, 3, 3, 3))
    w[0, 0, 1, 1, 1] = w[1, 1, 1, 1, 1] = 1.0
    np.testing.assert_array_equal(nn.conv3d(x, w, np.zeros(2)), x)


def test_conv3d_shape_errors(rng):
    with pytest.raises(nn.ShapeError, match="channel"):
        nn.conv3d(np.zeros((1, 2, 4, 4, 4)), np.zeros((1, 3, 3, 3, 3)), np.zeros(1))
    with pytest.raises(nn.ShapeError):
        nn.conv3d(np.zeros((2, 4, 4, 4)), np.zeros((1, 2, 3, 3, 3)), np.zeros(1))


def test_convtranspose_matches_naive(rng):
    x = rng.normal(size=(2, 3, 2, 3, 2))
    w = rng.normal(size=(3, 2, 2, 2, 2))
    b = rng.normal(size=2)
    np.testing.assert_allclose(nn.convtranspose3d(x, w, b), naive_convtranspose(x, w, b), atol=1e-12)


def test_maxpool_matches_naive_and_tie_break(rng):
    x = rng.normal(size=(1, 2, 4, 2, 6))
    y, idx = nn.maxpool3d(x)
    np.testing.assert_array_equal(y, naive_maxpool(x))
    flat = np.ones((1, 1, 2, 2, 2))
    y, idx = nn.maxpool3d(flat)
    assert idx.ravel().tolist() == [0]
    g = nn.maxpool3d_backward(np.ones_like(y), idx)
    assert g[0, 0, 0, 0, 0] == 1.0 and g.sum() == 1.0
    with pytest.raises(nn.ShapeError):
        nn.maxpool3d(np.zeros((1, 1, 3, 2, 2)))


def test_conv1x1(rng):
    x = rng.normal(size=(2, 3, 2, 2, 2))
    w = rng.normal(size=(4, 3))
    b = rng.normal(size=4)
    ref = np.einsum("oc,bcxyz->boxyz", w, x) + b[None, :, None, None, None]
    np.testing.assert_allclose(nn.conv1x1(x, w, b), ref, atol=1e-12)


def _fd_check(loss, arrays, analytic):
    errs = nn.grad_check(loss, arrays, analytic, epsilon=1e-6)
    assert max(errs.values()) < 1e-4, errs


def test_grad_conv3d(rng):
    x = rng.normal(size=(2, 2, 3, 4, 3))
    w = rng.normal(size=(3, 2, 3, 3, 3))
    b = rng.normal(size=3)
    r = rng.normal(size=(2, 3, 3, 4, 3))
    dx, dw, db = nn.conv3d_backward(r, x, w)
    _fd_check(lambda: float(np.sum(nn.conv3d(x, w, b) * r)), {"x": x, "w": w, "b": b}, {"x": dx, "w": dw, "b": db})


def test_grad_convtranspose(rng):
    x = rng.normal(size=(2, 3, 2, 2, 3))
    w = rng.normal(size=(3, 2, 2, 2, 2))
    b = rng.normal(size=2)
    r = rng.normal(size=(2, 2, 4, 4, 6))
    dx, dw, db = nn.convtranspose3d_backward(r, x, w)
    _fd_check(lambda: float(np.sum(nn.convtranspose3d(x, w, b) * r)), {"x": x, "w": w, "b": b},
              {"x": dx, "w": dw, "b": db})


def test_grad_conv1x1(rng):
    x = rng.normal(size=(2, 3, 2, 2, 2))
    w = rng.normal(size=(2, 3))
    b = rng.normal(size=2)
    r = rng.normal(size=(2, 2, 2, 2, 2))
    dx, dw, db = nn.conv1x1_backward(r, x, w)
    _fd_check(lambda: float(np.sum(nn.conv1x1(x, w, b) * r)), {"x": x, "w": w, "b": b}, {"x": dx, "w": dw, "b": db})


def test_grad_maxpool(rng):
    # distinct values keep the argmax stable under the perturbation
    x = rng.permutation(64).reshape(1, 1, 4, 4, 4).astype(np.float64)
    r = rng.normal(size=(1, 1, 2, 2, 2))
    _, idx = nn.maxpool3d(x)
    _fd_check(lambda: float(np.sum(nn.maxpool3d(x)[0] * r)), {"x": x}, {"x": nn.maxpool3d_backward(r, idx)})


def test_grad_relu(rng):
    x = rng.normal(size=(2, 3, 2, 2, 2))
    x[np.abs(x) < 1e-3] = 0.5
    r = rng.normal(size=x.shape)
    _fd_check(lambda: float(np.sum(nn.relu(x) * r)), {"x": x}, {"x": nn.relu_backward(r, x)})


def test_grad_dropout_fixed_mask(rng):
    cfg = nn.DropoutConfig(0.3)
    x = rng.normal(size=(2, 3, 2, 2, 2))
    mask = rng.random(x.shape) > 0.3
    r = rng.normal(size=x.shape)
    _fd_check(lambda: float(np.sum(nn.dropout(x, cfg, mask=mask)[0] * r)), {"x": x},
              {"x": nn.dropout_backward(r, mask, cfg)})


def test_grad_concat(rng):
    a = rng.normal(size=(1, 2, 2, 2, 2))
    b = rng.normal(size=(1, 3, 2, 2, 2))
    r = rng.normal(size=(1, 5, 2, 2, 2))
    da, db = nn.concat_backward(r, 2)
    _fd_check(lambda: float(np.sum(nn.concat_channels(a, b) * r)), {"a": a, "b": b}, {"a": da, "b": db})


def test_grad_check_rejects_float32():
    x = np.zeros(3, np.float32)
    with pytest.raises(TypeError):
        nn.grad_check(lambda: 0.0, {"x": x}, {"x": x})


def test_grad_check_detects_wrong_gradient(rng):
    x = rng.normal(size=5)
    errs = nn.grad_check(lambda: float(np.sum(x ** 2)), {"x": x}, {"x": 3 * x})
    assert errs["x"] > 0.1


def test_dropout_exhaustive_expectation():
    x = np.linspace(-2.0, 3.0, 10)
    for p in (0.2, 0.5):
        cfg = nn.DropoutConfig(p)
        mean = np.zeros(10)
        for bits in itertools.product((0, 1), repeat=10):
            keep = np.array(bits, bool)
            prob = np.prod(np.where(keep, 1 - p, p))
            mean += prob * nn.dropout(x, cfg, mask=keep)[0]
        np.testing.assert_allclose(mean, x, atol=1e-12)


def test_dropout_sampled_variance():
    x = np.linspace(0.5, 2.0, 10)
    for p in (0.2, 0.5):
        rng = np.random.default_rng(1)
        ys = np.stack([nn.dropout(x, nn.DropoutConfig(p), rng)[0] for _ in range(20000)])
        np.testing.assert_allclose(ys.var(axis=0), x ** 2 * p / (1 - p), rtol=0.08)


def test_dropout_inactive_and_p_zero_are_identity(rng):
    x = rng.normal(size=(3, 4))
    assert nn.dropout(x, nn.DropoutConfig(0.5), rng, active=False)[0] is x
    assert nn.dropout(x, nn.DropoutConfig(0.0), rng)[0] is x
    with pytest.raises(ValueError):
        nn.dropout(x, nn.DropoutConfig(0.5), None)


@pytest.mark.parametrize("p", [-0.1, 0.96, 1.0])
def test_dropout_rate_range(p):
    with pytest.raises(ValueError):
        nn.DropoutConfig(p)


def test_rng_stream_reproducible_and_site_independent():
    s = nn.RngStream(3, nn.derive_stream_id(1, 2))
    a = s.generator(0).random(5)
    assert np.array_equal(a, nn.RngStream(3, nn.derive_stream_id(1, 2)).generator(0).random(5))
    assert not np.array_equal(a, s.generator(1).random(5))
    assert nn.derive_stream_id(1, 2) != nn.derive_stream_id(2, 1)
    assert 0 <= nn.derive_stream_id(0, 0) < 2 ** 64


def test_dropout_mask_per_item_generators():
    gens = [nn.RngStream(0, k).generator(0) for k in range(3)]
    m = nn.dropout_mask((3, 4, 4), 0.5, gens)
    ref = nn.RngStream(0, 1).generator(0).random((4, 4), dtype=np.float32) >= 0.5
    np.testing.assert_array_equal(m[1], ref)
    with pytest.raises(nn.ShapeError):
        nn.dropout_mask((2, 4), 0.5, gens)


def test_concat_broadcasts_batch_one():
    out = nn.concat_channels(np.ones((3, 1, 2, 2, 2)), np.zeros((1, 2, 2, 2, 2)))
    assert out.shape == (3, 3, 2, 2, 2)
    with pytest.raises(nn.ShapeError):
        nn.concat_channels(np.ones((1, 1, 2, 2, 2)), np.ones((1, 1, 2, 2, 4)))


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 3), st.integers(0, 2 ** 31))
def test_conv_adjoint_property(cin, cout, size, seed):
    # <conv(x), y> == <x, dx(y)> for the linear part
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(1, cin, size, size + 1, 2))
    y = rng.normal(size=(1, cout, size, size + 1, 2))
    w = rng.normal(size=(cout, cin, 3, 3, 3))
    lhs = np.sum(nn.conv3d(x, w, np.zeros(cout)) * y)
    rhs = np.sum(x * nn.conv3d_backward(y, x, w)[0])
    assert lhs == pytest.approx(rhs, rel=1e-9, abs=1e-9)


def test_float32_preserved(rng):
    x = rng.normal(size=(1, 2, 4, 4, 4)).astype(np.float32)
    w = rng.normal(size=(2, 2, 3, 3, 3)).astype(np.float32)
    assert nn.conv3d(x, w, np.zeros(2, np.float32)).dtype == np.float32
    assert nn.maxpool3d(x)[0].dtype == np.float32
