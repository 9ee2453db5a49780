"""Pure numpy kernels. Reference path and fallback when numba is missing."""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _windows(xp, k, stride):
    # (N, Ho, Wo, C, k, k)
    win = sliding_window_view(xp, (k, k), axis=(1, 2))
    return win[:, ::stride, ::stride]


def conv_forward(xp, w, b, stride):
    """Valid cross-correlation of padded NHWC input with a (k,k,Cin,Cout) kernel.

    Returns (output, ctx); this backend keeps no context.
    """
    k = w.shape[0]
    win = _windows(xp, k, stride)
    out = np.tensordot(win, w, axes=([4, 5, 3], [0, 1, 2]))
    out += b
    return out, None


def conv_backward(ctx, xp, w, gout, stride, need_input_grad=True):
    k = w.shape[0]
    n, ho, wo, _ = gout.shape
    win = _windows(xp, k, stride)
    # (C, k, k, O) -> (k, k, C, O)
    gw = np.tensordot(win, gout, axes=([0, 1, 2], [0, 1, 2])).transpose(1, 2, 0, 3)
    gb = gout.sum(axis=(0, 1, 2))
    if not need_input_grad:
        return None, np.ascontiguousarray(gw), gb
    gxp = np.zeros_like(xp)
    for i in range(k):
        for j in range(k):
            gxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += gout @ w[i, j].T
    return gxp, np.ascontiguousarray(gw), gb


def maxpool_forward(x, window, stride):
    win = _windows(x, window, stride)
    n, ho, wo, c = win.shape[:4]
    flat = win.reshape(n, ho, wo, c, window * window)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    return out, arg


def maxpool_backward(gout, arg, x_shape, window, stride):
    gx = np.zeros(x_shape)
    n, ho, wo, c = gout.shape
    for i in range(window):
        for j in range(window):
            hit = np.where(arg == i * window + j, gout, 0.0)
            gx[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += hit
    return gx


def head_epoch(x, y, order, masks, params, moments, t, config):
    """numpy twin of the numba head-training epoch; same contract."""
    w1, b1, w2, b2 = params
    ms, vs = moments
    loss_sum, correct = 0.0, 0
    for nb, s in enumerate(range(0, order.size, config.batch_size)):
        idx = order[s:s + config.batch_size]
        bs = idx.size
        xb, yb = x[idx], y[idx]
        z1 = xb @ w1 + b1
        slope = np.where(z1 >= 0, 1.0, 0.0)
        if masks is not None:
            slope = slope * masks[s:s + bs]
        d = z1 * slope
        z2 = d @ w2 + b2
        z = z2 - z2.max(axis=1, keepdims=True)
        lp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        batch_loss = -(yb * lp).sum() / bs
        if not np.isfinite(batch_loss):
            return t, loss_sum, correct, nb
        correct += int((z2.argmax(axis=1) == yb.argmax(axis=1)).sum())
        g2 = (np.exp(lp) - yb) / bs
        gz1 = (g2 @ w2.T) * slope
        grads = (xb.T @ gz1, gz1.sum(axis=0), d.T @ g2, g2.sum(axis=0))
        if not all(np.all(np.isfinite(g)) for g in grads):
            return t, loss_sum, correct, nb
        t += 1
        c1 = 1.0 - config.beta1 ** t
        c2 = 1.0 - config.beta2 ** t
        for p, g, m, v in zip(params, grads, ms, vs):
            m *= config.beta1
            m += (1.0 - config.beta1) * g
            v *= config.beta2
            v += (1.0 - config.beta2) * g * g
            p -= config.learning_rate * (m / c1) / (np.sqrt(v / c2) + config.epsilon)
        loss_sum += float(batch_loss) * bs
    return t, loss_sum, correct, -1
