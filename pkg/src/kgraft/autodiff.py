"""Reverse-mode automatic differentiation over a small fixed op vocabulary.

Values are float64 numpy arrays in NHWC layout (images) or NF (features).
A :class:`Tape` records every node in creation order, so tape order is a
topological order and :meth:`Tape.backward` is a single reverse sweep.

    tape = Tape()
    w = tape.parameter("w", np.ones(3))
    loss = reduce_sum(w)
    grads = tape.backward(loss)     # {"w": array([1., 1., 1.])}
"""

import math
import weakref

import numpy as np

from . import kernels
from .errors import ShapeError, UsageError, ValidationError

MAX_RANK = 4


def as_tensor(value):
    """Coerce to a float64 array and enforce the rank/extent invariants."""
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if arr.ndim > MAX_RANK:
        raise ShapeError(f"rank {arr.ndim} exceeds {MAX_RANK}")
    if any(d < 1 for d in arr.shape):
        raise ShapeError(f"all extents must be >= 1, got {arr.shape}")
    return arr


class Node:
    __slots__ = ("_tape", "id", "op", "value", "parents", "backward_fn", "name",
                 "trainable", "requires_grad")

    def __init__(self, tape, op, value, parents=(), backward_fn=None, name=None,
                 trainable=False):
        # weak, so a dropped tape (and the buffers its closures hold) is freed
        # by refcounting instead of waiting for the cycle collector
        self._tape = weakref.ref(tape)
        self.id = len(tape.nodes)
        self.op = op
        self.value = value
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.name = name
        self.trainable = trainable
        self.requires_grad = trainable or any(p.requires_grad for p in self.parents)

    @property
    def tape(self):
        return self._tape()

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(id={self.id}, op={self.op!r}, shape={self.value.shape})"


class Tape:
    def __init__(self):
        self.nodes = []
        self.params = {}

    def _record(self, op, value, parents=(), backward_fn=None, name=None, trainable=False):
        node = Node(self, op, value, parents, backward_fn, name, trainable)
        self.nodes.append(node)
        return node

    def parameter(self, name, value, trainable=True):
        if name in self.params:
            raise UsageError(f"parameter {name!r} already on tape")
        node = self._record("param", as_tensor(value), name=name, trainable=trainable)
        self.params[name] = node
        return node

    def constant(self, value):
        return self._record("const", as_tensor(value))

    def backward(self, loss):
        """Gradients of scalar ``loss`` for every trainable parameter on the tape.

        Parameters the loss does not reach get zeros of their own shape.
        """
        if loss.tape is not self:
            raise UsageError("loss node belongs to a different tape")
        if loss.value.size != 1:
            raise UsageError(f"backward needs a scalar loss, got shape {loss.value.shape}")
        grads = [None] * (loss.id + 1)
        grads[loss.id] = np.ones_like(loss.value)
        for node in reversed(self.nodes[:loss.id + 1]):
            g = grads[node.id]
            if g is None or node.backward_fn is None or not node.requires_grad:
                continue
            for parent, pg in zip(node.parents, node.backward_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                cur = grads[parent.id]
                grads[parent.id] = pg if cur is None else cur + pg
        out = {}
        for name, node in self.params.items():
            if not node.trainable:
                continue
            g = grads[node.id] if node.id <= loss.id else None
            out[name] = np.zeros_like(node.value) if g is None else g
        return out


def _tape_of(*nodes):
    return nodes[0].tape


# -- ops ---------------------------------------------------------------------

def _same_pad(size, k, stride):
    out = -(-size // stride)
    total = max((out - 1) * stride + k - size, 0)
    return total // 2, total - total // 2


def conv2d(x, w, b, stride=1, padding="same"):
    """NHWC cross-correlation with a (k, k, Cin, Cout) kernel."""
    xv, wv = x.value, w.value
    if xv.ndim != 4 or wv.ndim != 4:
        raise ShapeError(f"conv2d wants rank-4 input and kernel, got {xv.shape}, {wv.shape}")
    k = wv.shape[0]
    if wv.shape[1] != k:
        raise ShapeError(f"kernel must be square, got {wv.shape[:2]}")
    if wv.shape[2] != xv.shape[3]:
        raise ShapeError(f"kernel Cin {wv.shape[2]} != input channels {xv.shape[3]}")
    if b.value.shape != (wv.shape[3],):
        raise ShapeError(f"bias shape {b.value.shape} != ({wv.shape[3]},)")
    if stride < 1:
        raise ValidationError("stride must be positive")
    if padding == "same":
        ph, pw = _same_pad(xv.shape[1], k, stride), _same_pad(xv.shape[2], k, stride)
    elif padding == "valid":
        ph = pw = (0, 0)
    else:
        raise ValidationError(f"padding must be 'same' or 'valid', got {padding!r}")
    if k > xv.shape[1] + sum(ph) or k > xv.shape[2] + sum(pw):
        raise ShapeError(f"kernel {k} larger than padded input {xv.shape[1:3]}")
    xp = np.pad(xv, ((0, 0), ph, pw, (0, 0))) if ph != (0, 0) or pw != (0, 0) else xv
    out, ctx = kernels.conv_forward(xp, wv, b.value, stride)

    def backward(g):
        gxp, gw, gb = kernels.conv_backward(ctx, xp, wv, g, stride, need_input_grad=x.requires_grad)
        gx = None
        if gxp is not None:
            gx = gxp[:, ph[0]:gxp.shape[1] - ph[1], pw[0]:gxp.shape[2] - pw[1], :]
        return gx, gw, gb

    return _tape_of(x)._record("conv2d", out, (x, w, b), backward)


def maxpool2d(x, window=2, stride=None):
    stride = window if stride is None else stride
    xv = x.value
    if xv.ndim != 4:
        raise ShapeError(f"maxpool2d wants rank-4 input, got {xv.shape}")
    if window < 1 or stride < 1:
        raise ValidationError("window and stride must be positive")
    if window > xv.shape[1] or window > xv.shape[2]:
        raise ShapeError(f"window {window} exceeds spatial extent {xv.shape[1:3]}")
    out, arg = kernels.maxpool_forward(xv, window, stride)

    def backward(g):
        return (kernels.maxpool_backward(g, arg, xv.shape, window, stride),)

    return _tape_of(x)._record("maxpool2d", out, (x,), backward)


def dense(x, w, b):
    xv, wv = x.value, w.value
    if xv.ndim != 2 or wv.ndim != 2:
        raise ShapeError(f"dense wants rank-2 input and weights, got {xv.shape}, {wv.shape}")
    if xv.shape[1] != wv.shape[0]:
        raise ShapeError(f"input width {xv.shape[1]} != weight rows {wv.shape[0]}")
    if b.value.shape != (wv.shape[1],):
        raise ShapeError(f"bias shape {b.value.shape} != ({wv.shape[1]},)")
    out = xv @ wv + b.value

    def backward(g):
        gx = g @ wv.T if x.requires_grad else None
        return gx, xv.T @ g, g.sum(axis=0)

    return _tape_of(x)._record("dense", out, (x, w, b), backward)


def leaky_relu(x, alpha=0.3):
    if not 0.0 <= alpha < 1.0:
        raise ValidationError(f"alpha must lie in [0, 1), got {alpha}")
    xv = x.value
    slope = np.where(xv >= 0, 1.0, alpha)
    out = xv * slope
    return _tape_of(x)._record("leaky_relu", out, (x,), lambda g: (g * slope,))


def relu(x):
    return leaky_relu(x, 0.0)


def flatten(x):
    shape = x.value.shape
    out = x.value.reshape(shape[0], -1)
    return _tape_of(x)._record("flatten", out, (x,), lambda g: (g.reshape(shape),))


def global_average_pool(x):
    """(N,H,W,C) -> (N,C) spatial mean."""
    xv = x.value
    if xv.ndim != 4:
        raise ShapeError(f"global_average_pool wants rank 4, got rank {xv.ndim}")
    n, h, w, c = xv.shape
    out = xv.mean(axis=(1, 2))

    def backward(g):
        return (np.broadcast_to((g / (h * w))[:, None, None, :], xv.shape).copy(),)

    return _tape_of(x)._record("gap", out, (x,), backward)


def concat_features(parts):
    """Column-wise concatenation of (N, Fi) nodes in list order."""
    parts = list(parts)
    if not parts:
        raise UsageError("concat_features needs at least one part")
    n = parts[0].value.shape[0]
    for p in parts:
        if p.value.ndim != 2:
            raise ShapeError(f"concat parts must be rank 2, got {p.value.shape}")
        if p.value.shape[0] != n:
            raise ShapeError(f"leading extents differ: {p.value.shape[0]} vs {n}")
    if len(parts) == 1:
        return parts[0]
    widths = [p.value.shape[1] for p in parts]
    offsets = np.cumsum([0] + widths)
    out = np.concatenate([p.value for p in parts], axis=1)

    def backward(g):
        return tuple(g[:, offsets[i]:offsets[i + 1]] for i in range(len(parts)))

    return _tape_of(*parts)._record("concat", out, parts, backward)


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def check_one_hot(targets, k=None):
    t = np.asarray(targets)
    if t.ndim != 2 or (k is not None and t.shape[1] != k):
        raise ValidationError(f"targets must be (N, {k}) one-hot, got {t.shape}")
    if not (np.all((t == 0) | (t == 1)) and np.all(t.sum(axis=1) == 1)):
        bad = np.flatnonzero(~(np.all((t == 0) | (t == 1), axis=1) & (t.sum(axis=1) == 1)))
        raise ValidationError(f"target rows {bad[:5].tolist()} are not one-hot")
    return t


def softmax_cross_entropy(logits, targets):
    """Mean categorical cross-entropy of max-shifted softmax.

    Returns ``(loss_node, probabilities)``.
    """
    lv = logits.value
    if lv.ndim != 2 or lv.shape[1] < 2:
        raise ShapeError(f"logits must be (N, K>=2), got {lv.shape}")
    t = check_one_hot(targets, lv.shape[1]).astype(np.float64)
    if t.shape[0] != lv.shape[0]:
        raise ShapeError(f"{t.shape[0]} targets for {lv.shape[0]} logit rows")
    z = lv - lv.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1, keepdims=True))
    log_p = z - log_norm
    probs = np.exp(log_p)
    n = lv.shape[0]
    loss = np.array([-(t * log_p).sum() / n])

    def backward(g):
        return ((probs - t) * (g[0] / n),)

    return _tape_of(logits)._record("softmax_ce", loss, (logits,), backward), probs


def dropout(x, rate, mode, rng=None):
    """Inverted dropout: identity in eval mode, scaled survivors in train mode."""
    if not 0.0 <= rate < 1.0:
        raise ValidationError(f"dropout rate must lie in [0, 1), got {rate}")
    if mode not in ("train", "eval"):
        raise ValidationError(f"mode must be 'train' or 'eval', got {mode!r}")
    if mode == "eval" or rate == 0.0:
        return x
    if rng is None:
        raise UsageError("train-mode dropout needs an explicit generator")
    keep = 1.0 - rate
    mask = (rng.random(x.value.shape) < keep) / keep
    return _tape_of(x)._record("dropout", x.value * mask, (x,), lambda g: (g * mask,))


def reduce_sum(x):
    xv = x.value
    return _tape_of(x)._record("sum", np.array([xv.sum()]), (x,),
                               lambda g: (np.full(xv.shape, g[0]),))


def scale(x, factor):
    return _tape_of(x)._record("scale", x.value * factor, (x,), lambda g: (g * factor,))


def multiply(x, y):
    xv, yv = x.value, y.value
    if xv.shape != yv.shape:
        raise ShapeError(f"multiply shapes differ: {xv.shape} vs {yv.shape}")
    return _tape_of(x)._record("mul", xv * yv, (x, y), lambda g: (g * yv, g * xv))


# -- gradient checking --------------------------------------------------------

def numerical_gradient(f, params, step=1e-5):
    """Central differences of ``f(tape, nodes) -> scalar node`` w.r.t. every entry."""
    params = {k: as_tensor(v).copy() for k, v in params.items()}

    def value():
        tape = Tape()
        nodes = {k: tape.parameter(k, v) for k, v in params.items()}
        return float(f(tape, nodes).value[0])

    out = {}
    for name, arr in params.items():
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = value()
            flat[i] = orig - step
            down = value()
            flat[i] = orig
            gflat[i] = (up - down) / (2 * step)
        out[name] = g
    return out


def finite_difference_check(f, params, step=1e-5, floor=1e-5):
    """Max elementwise relative error between ``backward`` and central differences.

    ``params`` is a dict of arrays (a bare array is named ``"w"``). Relative
    error uses ``max(|analytic|, |numeric|, floor)`` as denominator so entries
    whose true gradient is ~0 are judged on absolute error.
    """
    if step <= 0:
        raise ValidationError("step must be positive")
    if not isinstance(params, dict):
        params = {"w": params}
    tape = Tape()
    nodes = {k: tape.parameter(k, v) for k, v in params.items()}
    analytic = tape.backward(f(tape, nodes))
    numeric = numerical_gradient(f, params, step)
    worst = 0.0
    for name in params:
        a, n = analytic[name], numeric[name]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        err = float(np.max(np.abs(a - n) / denom))
        if math.isnan(err):
            return math.inf
        worst = max(worst, err)
    return worst
