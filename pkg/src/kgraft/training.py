"""Adam, batched epoch training with per-epoch metrics, stratified splits."""

import csv
import io
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from . import kernels
from .errors import DivergenceError, ValidationError
from .rng import make_rng


@dataclass
class TrainConfig:
    batch_size: int = 16
    epochs: int = 18
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValidationError("epochs must be >= 1")
        if not self.learning_rate > 0:
            raise ValidationError("learning_rate must be positive")


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float


def adam_step(params, grads, state, config, context=None):
    """One bias-corrected Adam update, in place on the arrays in ``params``.

    ``params`` and ``grads`` map the same names to same-shaped arrays.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            where = "" if context is None else f" at epoch {context[0]}, batch {context[1]}"
            raise DivergenceError(f"non-finite gradient for {name}{where}",
                                  *(context or (None, None)))
    state.t += 1
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, g in grads.items():
        p = params[name]
        if p.shape != g.shape:
            raise ValidationError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= config.learning_rate * (m / c1) / (np.sqrt(v / c2) + config.epsilon)
    return params, state


def flat_params(params):
    """name -> array view over a {layer: (weight, bias)} store (same arrays)."""
    out = {}
    for layer, (w, b) in params.items():
        out[f"{layer}.weight"] = w
        out[f"{layer}.bias"] = b
    return out


def one_hot(labels, k):
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise ValidationError("labels must be a flat integer array")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValidationError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    if np.any(labels != np.round(labels)):
        raise ValidationError("labels must be integers")
    out = np.zeros((labels.size, k))
    out[np.arange(labels.size), labels.astype(np.int64)] = 1.0
    return out


def _largest_remainder(total, ratios):
    raw = [total * r for r in ratios]
    sizes = [math.floor(x) for x in raw]
    order = sorted(range(len(ratios)), key=lambda j: (-(raw[j] - sizes[j]), j))
    for j in order[:total - sum(sizes)]:
        sizes[j] += 1
    return sizes


def _controlled_rounding(counts, sizes):
    """Integer class x split table within one of sizes[j] * counts[c] / n.

    Rows sum to ``counts`` and columns to ``sizes``. Floors are taken first;
    the leftover units go to cells with a fractional target, chosen by
    augmenting paths on the bipartite class/split graph.
    """
    n = sum(counts)
    table = [[s * c // n for s in sizes] for c in counts]
    open_cell = [[(s * c) % n != 0 for s in sizes] for c in counts]
    row_need = [c - sum(r) for c, r in zip(counts, table)]
    col_need = [s - sum(table[i][j] for i in range(len(counts))) for j, s in enumerate(sizes)]
    extra = [[0] * len(sizes) for _ in counts]

    def augment(i, seen):
        for j in range(len(sizes)):
            if not open_cell[i][j] or extra[i][j] or j in seen:
                continue
            seen.add(j)
            if col_need[j] > 0:
                col_need[j] -= 1
                extra[i][j] = 1
                return True
            for k in range(len(counts)):  # reroute a unit already placed in column j
                if extra[k][j] and augment(k, seen):
                    extra[k][j], extra[i][j] = 0, 1
                    return True
        return False

    for i in range(len(counts)):
        for _ in range(row_need[i]):
            if not augment(i, set()):
                raise ValidationError("split allocation failed")  # unreachable for integer margins
    return [[t + e for t, e in zip(tr, er)] for tr, er in zip(table, extra)]


def split_dataset(labels, ratios=(0.6, 0.2, 0.2), seed=0):
    """Stratified, disjoint, covering split into len(ratios) sorted index arrays.

    Split sizes are the largest-remainder rounding of ``n * ratios``; each
    class contributes to each split within one sample of its global share.
    """
    labels = np.asarray(labels).astype(np.int64)
    n = labels.size
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValidationError(f"ratios must sum to 1, got {sum(ratios)}")
    if any(r < 0 for r in ratios):
        raise ValidationError("ratios must be nonnegative")
    if n < 5:
        raise ValidationError(f"need at least 5 samples to split, got {n}")
    classes, counts = np.unique(labels, return_counts=True)
    if counts.min() < 3:
        raise ValidationError(
            f"stratification needs >= 3 samples per class; class {classes[counts.argmin()]} has {counts.min()}")
    sizes = _largest_remainder(n, ratios)
    alloc = _controlled_rounding([int(c) for c in counts], sizes)
    rng = make_rng(seed, "split")
    parts = [[] for _ in sizes]
    for c, row in zip(classes, alloc):
        members = rng.permutation(np.flatnonzero(labels == c))
        bounds = np.cumsum([0] + row)
        for j in range(len(sizes)):
            parts[j].append(members[bounds[j]:bounds[j + 1]])
    return tuple(np.sort(np.concatenate(p)) for p in parts)


# -- training loop ---------------------------------------------------------------

def predict_logits(model, params, x, chunk=64):
    """Eval-mode logits in fixed-size chunks."""
    out = []
    for s in range(0, x.shape[0], chunk):
        tape = ad.Tape()
        out.append(model.logits(tape, params, x[s:s + chunk], "eval", None, trainable=False).value)
    return np.concatenate(out)


def loss_and_accuracy(logits, targets):
    probs = ad.softmax(logits)
    rows = np.arange(logits.shape[0])
    labels = targets.argmax(axis=1)
    z = logits - logits.max(axis=1, keepdims=True)
    log_p = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = float(-log_p[rows, labels].mean())
    acc = float((probs.argmax(axis=1) == labels).mean())
    return loss, acc


def train_model(model, params, train, val, config, on_epoch=None, engine="auto"):
    """Train ``params`` in place with Adam + categorical cross-entropy.

    ``model`` provides ``logits(tape, params, x, mode, rng, trainable=True)``.
    ``train``/``val`` are ``(x, one_hot_targets)``. Training metrics are the
    running train-mode averages over the epoch's batches; validation metrics
    come from an eval-mode pass after the epoch. Returns (params, history).

    Models exposing ``fused_arrays`` (the graft head) train through the fused
    kernel unless ``engine="tape"``; both consume the same random streams.
    """
    if engine not in ("auto", "tape"):
        raise ValidationError(f"engine must be 'auto' or 'tape', got {engine!r}")
    if engine == "auto" and hasattr(model, "fused_arrays"):
        return _train_fused(model, params, train, val, config, on_epoch)
    xtr, ytr = train
    xva, yva = val
    ad.check_one_hot(ytr)
    ad.check_one_hot(yva, ytr.shape[1])
    n = xtr.shape[0]
    if n == 0 or xva.shape[0] == 0:
        raise ValidationError("train and validation splits must be nonempty")
    shuffle_rng = make_rng(config.seed, "shuffle")
    dropout_rng = make_rng(config.seed, "dropout")
    state = AdamState()
    flat = flat_params(params)
    history = []
    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(n)
        loss_sum, correct = 0.0, 0
        for b, s in enumerate(range(0, n, config.batch_size)):
            sel = order[s:s + config.batch_size]
            tape = ad.Tape()
            logits = model.logits(tape, params, xtr[sel], "train", dropout_rng)
            loss, probs = ad.softmax_cross_entropy(logits, ytr[sel])
            value = float(loss.value[0])
            if not math.isfinite(value):
                raise DivergenceError(f"non-finite loss at epoch {epoch}, batch {b}", epoch, b, history)
            grads = tape.backward(loss)
            try:
                adam_step(flat, grads, state, config, (epoch, b))
            except DivergenceError as exc:
                exc.history = list(history)
                raise
            loss_sum += value * sel.size
            correct += int((probs.argmax(axis=1) == ytr[sel].argmax(axis=1)).sum())
        val_loss, val_acc = loss_and_accuracy(predict_logits(model, params, xva), yva)
        m = EpochMetrics(epoch + 1, loss_sum / n, correct / n, val_loss, val_acc)
        history.append(m)
        if on_epoch is not None:
            on_epoch(m)
    return params, history


def _train_fused(model, params, train, val, config, on_epoch):
    xtr, ytr = train
    xva, yva = val
    ad.check_one_hot(ytr)
    ad.check_one_hot(yva, ytr.shape[1])
    n = xtr.shape[0]
    if n == 0 or xva.shape[0] == 0:
        raise ValidationError("train and validation splits must be nonempty")
    shuffle_rng = make_rng(config.seed, "shuffle")
    dropout_rng = make_rng(config.seed, "dropout")
    arrays = model.fused_arrays(params)
    moments = ([np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays])
    rate, hidden = model.dropout_rate, arrays[0].shape[1]
    xtr = np.ascontiguousarray(xtr, dtype=np.float64)
    ytr = np.ascontiguousarray(ytr, dtype=np.float64)
    t, history = 0, []
    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(n)
        masks = None
        if rate > 0:
            masks = (dropout_rng.random((n, hidden)) < 1.0 - rate) / (1.0 - rate)
        t, loss_sum, correct, bad = kernels.head_epoch(xtr, ytr, order, masks, arrays, moments,
                                                       t, config)
        if bad >= 0:
            raise DivergenceError(f"non-finite loss or gradient at epoch {epoch}, batch {bad}",
                                  epoch, bad, history)
        val_loss, val_acc = loss_and_accuracy(predict_logits(model, params, xva), yva)
        m = EpochMetrics(epoch + 1, loss_sum / n, correct / n, val_loss, val_acc)
        history.append(m)
        if on_epoch is not None:
            on_epoch(m)
    return params, history


METRIC_FIELDS = ("epoch", "train_loss", "train_acc", "val_loss", "val_acc")


def metrics_csv(history):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_FIELDS)
    for m in history:
        w.writerow([m.epoch] + [f"{getattr(m, k):.6f}" for k in METRIC_FIELDS[1:]])
    return buf.getvalue()


def metrics_records(history):
    return [asdict(m) for m in history]
