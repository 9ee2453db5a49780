import numpy as np
import pytest

from kgraft import kernels
from kgraft.training import TrainConfig

from oracles import central_differences, conv2d_naive, maxpool_naive, relative_error

BACKENDS = sorted(kernels.BACKENDS)


@pytest.mark.parametrize("backend", BACKENDS)
@pytest.mark.parametrize("k,stride", [(1, 1), (3, 1), (3, 2), (2, 2)])
def test_conv_forward_matches_loops(backend, k, stride):
    kern = kernels.BACKENDS[backend]
    rng = np.random.default_rng(k * 10 + stride)
    x = rng.normal(size=(2, 7, 6, 3))
    w = rng.normal(size=(k, k, 3, 4))
    b = rng.normal(size=4)
    out, _ = kern.conv_forward(x, w, b, stride)
    ref = conv2d_naive(x, w, b, stride, "valid")
    assert out.shape == ref.shape
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("backend", BACKENDS)
@pytest.mark.parametrize("stride", [1, 2])
def test_conv_backward_matches_differences(backend, stride):
    kern = kernels.BACKENDS[backend]
    rng = np.random.default_rng(stride)
    x = rng.normal(size=(2, 5, 5, 2))
    w = rng.normal(size=(3, 3, 2, 3))
    b = rng.normal(size=3)
    out, ctx = kern.conv_forward(x, w, b, stride)
    g = rng.normal(size=out.shape)
    gx, gw, gb = kern.conv_backward(ctx, x, w, g, stride)
    loss = lambda: float((conv2d_naive(x, w, b, stride, "valid") * g).sum())
    nx, nw, nb = central_differences(loss, [x, w, b])
    assert relative_error(gx, nx) < 1e-6
    assert relative_error(gw, nw) < 1e-6
    assert relative_error(gb, nb) < 1e-6
    none, gw2, _ = kern.conv_backward(ctx, x, w, g, stride, need_input_grad=False)
    assert none is None and np.allclose(gw2, gw)


@pytest.mark.parametrize("backend", BACKENDS)
@pytest.mark.parametrize("window,stride", [(2, 2), (3, 1), (2, 1)])
def test_maxpool_forward_and_backward(backend, window, stride):
    kern = kernels.BACKENDS[backend]
    rng = np.random.default_rng(window + stride)
    x = rng.normal(size=(2, 6, 5, 3))
    out, arg = kern.maxpool_forward(x, window, stride)
    np.testing.assert_array_equal(out, maxpool_naive(x, window, stride))
    g = rng.normal(size=out.shape)
    gx = kern.maxpool_backward(g, arg, x.shape, window, stride)
    (nx,) = central_differences(lambda: float((maxpool_naive(x, window, stride) * g).sum()), [x])
    assert relative_error(gx, nx) < 1e-6


def _head_problem(seed, n=37, f=9, hidden=16, k=3):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, f))
    y = np.eye(k)[rng.integers(0, k, n)]
    params = [rng.normal(size=(f, hidden)) * 0.3, np.zeros(hidden),
              rng.normal(size=(hidden, k)) * 0.3, np.zeros(k)]
    order = rng.permutation(n)
    masks = (rng.random((n, hidden)) < 0.7) / 0.7
    return x, y, params, order, masks


@pytest.mark.skipif("numba" not in kernels.BACKENDS, reason="numba unavailable")
def test_fused_head_epoch_backends_agree():
    cfg = TrainConfig(batch_size=8, epochs=1)
    results = {}
    for name in ("numpy", "numba"):
        x, y, params, order, masks = _head_problem(0)
        moments = ([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])
        t, loss, correct, bad = kernels.BACKENDS[name].head_epoch(x, y, order, masks, params,
                                                                  moments, 0, cfg)
        results[name] = (t, loss, correct, bad, params)
    a, b = results["numpy"], results["numba"]
    assert a[0] == b[0] == 5 and a[2] == b[2] and a[3] == b[3] == -1
    assert abs(a[1] - b[1]) < 1e-10
    for pa, pb in zip(a[4], b[4]):
        np.testing.assert_allclose(pa, pb, rtol=1e-10, atol=1e-12)


@pytest.mark.parametrize("backend", BACKENDS)
def test_fused_head_epoch_flags_nonfinite_batch(backend):
    cfg = TrainConfig(batch_size=8, epochs=1)
    x, y, params, order, masks = _head_problem(1)
    x[order[10]] = np.nan
    moments = ([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])
    _, _, _, bad = kernels.BACKENDS[backend].head_epoch(x, y, order, masks, params, moments, 0, cfg)
    assert bad == 1
