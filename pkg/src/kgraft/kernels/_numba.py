"""numba kernels; same signatures and semantics as the numpy ones."""

import numpy as np
from numba import njit


@njit(cache=True)
def _im2col(xp, k, stride, ho, wo):
    n = xp.shape[0]
    c = xp.shape[3]
    cols = np.empty((n * ho * wo, k * k * c))
    r = 0
    for s in range(n):
        for h in range(ho):
            for v in range(wo):
                q = 0
                for i in range(k):
                    for j in range(k):
                        for ch in range(c):
                            cols[r, q] = xp[s, h * stride + i, v * stride + j, ch]
                            q += 1
                r += 1
    return cols


@njit(cache=True)
def _col2im(gcols, shape, k, stride, ho, wo):
    n, hp, wp, c = shape
    gxp = np.zeros((n, hp, wp, c))
    r = 0
    for s in range(n):
        for h in range(ho):
            for v in range(wo):
                q = 0
                for i in range(k):
                    for j in range(k):
                        for ch in range(c):
                            gxp[s, h * stride + i, v * stride + j, ch] += gcols[r, q]
                            q += 1
                r += 1
    return gxp


@njit(cache=True)
def _conv_forward(xp, w, b, stride, ho, wo):
    k = w.shape[0]
    cout = w.shape[3]
    cols = _im2col(xp, k, stride, ho, wo)
    out = np.dot(cols, w.reshape(-1, cout))
    for r in range(out.shape[0]):
        for o in range(cout):
            out[r, o] += b[o]
    return out.reshape(xp.shape[0], ho, wo, cout), cols


@njit(cache=True)
def _conv_backward(cols, xshape, w, gout, stride, need_input_grad):
    n, ho, wo, cout = gout.shape
    k = w.shape[0]
    g2 = gout.reshape(n * ho * wo, cout)
    gw = np.dot(cols.T, g2).reshape(w.shape)
    gb = np.zeros(cout)
    for r in range(g2.shape[0]):
        for o in range(cout):
            gb[o] += g2[r, o]
    if need_input_grad:
        gcols = np.dot(g2, w.reshape(-1, cout).T)
        gxp = _col2im(gcols, xshape, k, stride, ho, wo)
    else:
        gxp = np.zeros((1, 1, 1, 1))
    return gxp, gw, gb


@njit(cache=True)
def _maxpool_forward(x, window, stride, ho, wo):
    n = x.shape[0]
    c = x.shape[3]
    out = np.empty((n, ho, wo, c))
    arg = np.empty((n, ho, wo, c), dtype=np.int64)
    for s in range(n):
        for h in range(ho):
            for v in range(wo):
                for ch in range(c):
                    best = x[s, h * stride, v * stride, ch]
                    where = 0
                    for i in range(window):
                        for j in range(window):
                            val = x[s, h * stride + i, v * stride + j, ch]
                            if val > best:
                                best = val
                                where = i * window + j
                    out[s, h, v, ch] = best
                    arg[s, h, v, ch] = where
    return out, arg


@njit(cache=True)
def _maxpool_backward(gout, arg, gx, window, stride):
    n, ho, wo, c = gout.shape
    for s in range(n):
        for h in range(ho):
            for v in range(wo):
                for ch in range(c):
                    a = arg[s, h, v, ch]
                    gx[s, h * stride + a // window, v * stride + a % window, ch] += gout[s, h, v, ch]
    return gx


def conv_forward(xp, w, b, stride):
    """Returns (output, ctx); ``ctx`` is the im2col matrix reused by backward."""
    k = w.shape[0]
    ho = (xp.shape[1] - k) // stride + 1
    wo = (xp.shape[2] - k) // stride + 1
    return _conv_forward(np.ascontiguousarray(xp), np.ascontiguousarray(w), b, stride, ho, wo)


def conv_backward(ctx, xp, w, gout, stride, need_input_grad=True):
    gxp, gw, gb = _conv_backward(ctx, xp.shape, np.ascontiguousarray(w),
                                 np.ascontiguousarray(gout), stride, need_input_grad)
    return (gxp if need_input_grad else None), gw, gb


def maxpool_forward(x, window, stride):
    ho = (x.shape[1] - window) // stride + 1
    wo = (x.shape[2] - window) // stride + 1
    return _maxpool_forward(np.ascontiguousarray(x), window, stride, ho, wo)


def maxpool_backward(gout, arg, x_shape, window, stride):
    return _maxpool_backward(np.ascontiguousarray(gout), arg, np.zeros(x_shape), window, stride)


@njit(cache=True)
def _adam(p, g, m, v, lr, beta1, beta2, eps, c1, c2):
    pf, gf, mf, vf = p.ravel(), g.ravel(), m.ravel(), v.ravel()
    for i in range(pf.size):
        mf[i] = beta1 * mf[i] + (1.0 - beta1) * gf[i]
        vf[i] = beta2 * vf[i] + (1.0 - beta2) * gf[i] * gf[i]
        pf[i] -= lr * (mf[i] / c1) / (np.sqrt(vf[i] / c2) + eps)


@njit(cache=True)
def _head_epoch(x, y, order, masks, w1, b1, w2, b2, ms, vs, t, lr, beta1, beta2, eps,
                batch_size, use_mask):
    n = order.size
    hidden = w1.shape[1]
    k = w2.shape[1]
    loss_sum = 0.0
    correct = 0
    bad = -1
    nb = 0
    for s in range(0, n, batch_size):
        idx = order[s:s + batch_size]
        bs = idx.size
        xb = np.empty((bs, x.shape[1]))
        yb = np.empty((bs, k))
        for r in range(bs):
            xb[r] = x[idx[r]]
            yb[r] = y[idx[r]]
        z1 = np.dot(xb, w1)
        slope = np.empty((bs, hidden))
        d = np.empty((bs, hidden))
        for r in range(bs):
            for u in range(hidden):
                z = z1[r, u] + b1[u]
                sl = 1.0 if z >= 0 else 0.0
                slope[r, u] = sl
                d[r, u] = z * sl
                if use_mask:
                    slope[r, u] *= masks[s + r, u]
                    d[r, u] *= masks[s + r, u]
        z2 = np.dot(d, w2)
        g2 = np.empty((bs, k))
        batch_loss = 0.0
        for r in range(bs):
            mx = z2[r, 0] + b2[0]
            for c in range(k):
                z2[r, c] += b2[c]
                if z2[r, c] > mx:
                    mx = z2[r, c]
            tot = 0.0
            for c in range(k):
                tot += np.exp(z2[r, c] - mx)
            lnorm = np.log(tot)
            best = 0
            for c in range(k):
                lp = z2[r, c] - mx - lnorm
                batch_loss -= yb[r, c] * lp
                g2[r, c] = (np.exp(lp) - yb[r, c]) / bs
                if z2[r, c] > z2[r, best]:
                    best = c
            if yb[r, best] == 1.0:
                correct += 1
        batch_loss /= bs
        if not np.isfinite(batch_loss):
            bad = nb
            break
        gw2 = np.dot(d.T, g2)
        gb2 = np.zeros(k)
        for r in range(bs):
            for c in range(k):
                gb2[c] += g2[r, c]
        gz1 = np.dot(g2, w2.T) * slope
        gw1 = np.dot(xb.T, gz1)
        gb1 = np.zeros(hidden)
        for r in range(bs):
            for u in range(hidden):
                gb1[u] += gz1[r, u]
        if not (np.all(np.isfinite(gw1)) and np.all(np.isfinite(gw2))):
            bad = nb
            break
        t += 1
        c1 = 1.0 - beta1 ** t
        c2 = 1.0 - beta2 ** t
        _adam(w1, gw1, ms[0], vs[0], lr, beta1, beta2, eps, c1, c2)
        _adam(b1, gb1, ms[1], vs[1], lr, beta1, beta2, eps, c1, c2)
        _adam(w2, gw2, ms[2], vs[2], lr, beta1, beta2, eps, c1, c2)
        _adam(b2, gb2, ms[3], vs[3], lr, beta1, beta2, eps, c1, c2)
        loss_sum += batch_loss * bs
        nb += 1
    return t, loss_sum, correct, bad


def head_epoch(x, y, order, masks, params, moments, t, config):
    """One epoch of dense-relu-dropout-dense training with Adam, params updated in place.

    ``params``: [w1, b1, w2, b2]; ``moments``: (m list, v list) of matching arrays;
    ``masks``: (n, hidden) inverted-dropout scale factors or None.
    Returns (t, loss_sum, correct, bad_batch) with bad_batch = -1 when finite.
    """
    w1, b1, w2, b2 = params
    use_mask = masks is not None
    if masks is None:
        masks = np.ones((1, 1))
    ms, vs = moments
    return _head_epoch(np.ascontiguousarray(x), np.ascontiguousarray(y), order, masks,
                       w1, b1, w2, b2, (ms[0], ms[1], ms[2], ms[3]), (vs[0], vs[1], vs[2], vs[3]),
                       t, config.learning_rate, config.beta1, config.beta2, config.epsilon,
                       config.batch_size, use_mask)
