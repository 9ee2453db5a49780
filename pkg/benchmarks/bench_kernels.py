"""Time the numba kernels against the numpy fallback on desk-donor shapes.

    python benchmarks/bench_kernels.py [--repeat 5] [--batch 16]

Each row reports the median wall time per call for both backends, the
speedup, and the largest absolute difference between their outputs. The
last row times one training epoch of the desk donor on 256 images with the
kernel module patched to each backend in turn.
"""

import argparse
import statistics
import time

import numpy as np

from kgraft import kernels, models, training
from kgraft.kernels import _numpy
from kgraft.rng import make_rng

try:
    from kgraft.kernels import _numba
except ImportError:  # pragma: no cover
    _numba = None


def median_time(fn, repeat):
    fn()  # warm up (JIT compile on first call)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def max_diff(a, b):
    if isinstance(a, tuple):
        return max(max_diff(x, y) for x, y in zip(a, b) if x is not None)
    return float(np.max(np.abs(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64))))


def conv_cases(batch, rng):
    # (H, W, Cin, Cout) of the six desk convolutions, input already padded for 'same'
    for h, cin, cout in ((32, 3, 8), (32, 8, 8), (16, 8, 16), (16, 16, 16), (8, 16, 32), (8, 32, 32)):
        xp = rng.normal(size=(batch, h + 2, h + 2, cin))
        w = rng.normal(size=(3, 3, cin, cout))
        yield f"conv {h}x{h}x{cin}->{cout}", xp, w, rng.normal(size=cout)


def kernel_rows(batch, repeat):
    rng = np.random.default_rng(0)
    rows = []
    for label, xp, w, b in conv_cases(batch, rng):
        out_np, ctx_np = _numpy.conv_forward(xp, w, b, 1)
        out_nb, ctx_nb = _numba.conv_forward(xp, w, b, 1)
        g = rng.normal(size=out_np.shape)
        rows.append((label + " fwd",
                     median_time(lambda: _numpy.conv_forward(xp, w, b, 1), repeat),
                     median_time(lambda: _numba.conv_forward(xp, w, b, 1), repeat),
                     max_diff(out_np, out_nb)))
        rows.append((label + " bwd",
                     median_time(lambda: _numpy.conv_backward(ctx_np, xp, w, g, 1), repeat),
                     median_time(lambda: _numba.conv_backward(ctx_nb, xp, w, g, 1), repeat),
                     max_diff(_numpy.conv_backward(ctx_np, xp, w, g, 1), _numba.conv_backward(ctx_nb, xp, w, g, 1))))
    x = rng.normal(size=(batch, 32, 32, 8))
    out_np, arg_np = _numpy.maxpool_forward(x, 2, 2)
    out_nb, arg_nb = _numba.maxpool_forward(x, 2, 2)
    g = rng.normal(size=out_np.shape)
    rows.append(("maxpool 32x32x8 fwd", median_time(lambda: _numpy.maxpool_forward(x, 2, 2), repeat),
                 median_time(lambda: _numba.maxpool_forward(x, 2, 2), repeat), max_diff(out_np, out_nb)))
    rows.append(("maxpool 32x32x8 bwd",
                 median_time(lambda: _numpy.maxpool_backward(g, arg_np, x.shape, 2, 2), repeat),
                 median_time(lambda: _numba.maxpool_backward(g, arg_nb, x.shape, 2, 2), repeat),
                 max_diff(_numpy.maxpool_backward(g, arg_np, x.shape, 2, 2),
                          _numba.maxpool_backward(g, arg_nb, x.shape, 2, 2))))
    rows.append(head_row(rng, repeat))
    return rows


def head_row(rng, repeat):
    n, width, hidden, k = 1200, 56, 256, 4
    x = rng.normal(size=(n, width))
    y = training.one_hot(rng.integers(0, k, n), k)
    order = rng.permutation(n)
    masks = (rng.random((n, hidden)) < 0.7) / 0.7
    cfg = training.TrainConfig()
    init = [rng.normal(size=(width, hidden)) * 0.1, np.zeros(hidden), rng.normal(size=(hidden, k)) * 0.1, np.zeros(k)]

    def run(backend):
        params = [a.copy() for a in init]
        moments = ([np.zeros_like(a) for a in params], [np.zeros_like(a) for a in params])
        backend.head_epoch(x, y, order, masks, params, moments, 0, cfg)
        return params

    return ("graft head epoch (1200x56)", median_time(lambda: run(_numpy), repeat),
            median_time(lambda: run(_numba), repeat), max_diff(tuple(run(_numpy)), tuple(run(_numba))))


def donor_epoch_row(repeat):
    spec = models.build_donor_spec()
    rng = np.random.default_rng(1)
    x = rng.uniform(size=(256, 32, 32, 3))
    y = training.one_hot(rng.integers(0, 4, 256), 4)
    names = ("conv_forward", "conv_backward", "maxpool_forward", "maxpool_backward")
    out = []
    for backend in (_numpy, _numba):
        saved = {n: getattr(kernels, n) for n in names}
        for n in names:
            setattr(kernels, n, getattr(backend, n))
        try:
            def epoch():
                params = models.init_params(spec, make_rng(0))
                training.train_model(models.Network(spec), params, (x, y), (x[:16], y[:16]),
                                     training.TrainConfig(epochs=1))
                return params
            out.append((median_time(epoch, max(1, repeat // 2)), epoch()))
        finally:
            for n, fn in saved.items():
                setattr(kernels, n, fn)
    diff = max(max_diff(out[0][1][k], out[1][1][k]) for k in out[0][1])
    return ("desk donor epoch (256 images)", out[0][0], out[1][0], diff)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--batch", type=int, default=16)
    ap.add_argument("--skip-epoch", action="store_true", help="skip the end-to-end donor epoch")
    args = ap.parse_args()
    if _numba is None:
        raise SystemExit("numba is not importable; nothing to compare")
    rows = kernel_rows(args.batch, args.repeat)
    if not args.skip_epoch:
        rows.append(donor_epoch_row(args.repeat))
    print(f"active backend by default: {kernels.BACKEND}")
    print(f"{'case':34s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s} {'max |diff|':>11s}")
    for label, t_np, t_nb, diff in rows:
        print(f"{label:34s} {1e3 * t_np:10.3f} {1e3 * t_nb:10.3f} {t_np / t_nb:7.2f}x {diff:11.2e}")


if __name__ == "__main__":
    main()
