"""Test-set metrics, size accounting and donor/rootstock comparison documents.

All size arithmetic is exact (integers and ``Fraction``); rounding to the
displayed decimals happens once, at formatting time.
"""

import csv
import io
from dataclasses import dataclass
from decimal import ROUND_DOWN, Decimal
from fractions import Fraction

import numpy as np

from . import autodiff as ad
from .errors import ValidationError

BYTES_PER_PARAM = 4
MIB = 2 ** 20


def round_half_up(x, places):
    """Exact decimal rounding, halves away from zero (x: int, Fraction or float)."""
    x = Fraction(x)
    scaled = abs(x) * 10 ** places
    whole, rem = divmod(scaled.numerator, scaled.denominator)
    if 2 * rem >= scaled.denominator:
        whole += 1
    return Decimal(whole if x >= 0 else -whole).scaleb(-places).quantize(Decimal(1).scaleb(-places))


def truncate(x, places):
    """Exact decimal truncation toward zero."""
    x = Fraction(x)
    scaled = x * 10 ** places
    whole = abs(scaled.numerator) // scaled.denominator
    return (Decimal(whole if x >= 0 else -whole).scaleb(-places)
            .quantize(Decimal(1).scaleb(-places), rounding=ROUND_DOWN))


def mebibytes(params):
    return Fraction(params * BYTES_PER_PARAM, MIB)


# -- size accounting ---------------------------------------------------------------

@dataclass(frozen=True)
class SizeReport:
    donor_params: int
    rootstock_params: int

    def __post_init__(self):
        for name in ("donor_params", "rootstock_params"):
            v = getattr(self, name)
            if int(v) != v or v <= 0:
                raise ValidationError(f"{name} must be a positive integer, got {v!r}")
            object.__setattr__(self, name, int(v))

    @property
    def donor_bytes(self):
        return self.donor_params * BYTES_PER_PARAM

    @property
    def rootstock_bytes(self):
        return self.rootstock_params * BYTES_PER_PARAM

    @property
    def reduction_params(self):
        return self.donor_params - self.rootstock_params

    @property
    def donor_mb(self):
        return mebibytes(self.donor_params)

    @property
    def rootstock_mb(self):
        return mebibytes(self.rootstock_params)

    @property
    def reduction_mb(self):
        return mebibytes(self.reduction_params)

    @property
    def percent_reduction(self):
        return 100 * (1 - Fraction(self.rootstock_params, self.donor_params))

    @property
    def size_ratio(self):
        return Fraction(self.donor_params, self.rootstock_params)

    def formatted(self):
        """Display strings: MB and percent rounded half-up, ratio truncated, to 2 decimals."""
        return {
            "donor_params": f"{self.donor_params:,}",
            "rootstock_params": f"{self.rootstock_params:,}",
            "reduction_params": f"{self.reduction_params:,}",
            "donor_mb": str(round_half_up(self.donor_mb, 2)),
            "rootstock_mb": str(round_half_up(self.rootstock_mb, 2)),
            "reduction_mb": str(round_half_up(self.reduction_mb, 2)),
            "percent_reduction": str(round_half_up(self.percent_reduction, 2)),
            "size_ratio": str(truncate(self.size_ratio, 2)),
        }


def size_report(params_donor, params_rootstock):
    return SizeReport(params_donor, params_rootstock)


# -- classification metrics ------------------------------------------------------

def roc_auc_trapezoid(scores, positive):
    """Area under the exact ROC step curve by the trapezoid rule, as a Fraction.

    Tied scores form one threshold, which the trapezoid credits with half.
    Returns None when either class is absent.
    """
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    order = np.argsort(-scores, kind="stable")
    s, p = scores[order], positive[order]
    cut = np.flatnonzero(np.diff(s)) + 1
    tp = np.add.reduceat(p.astype(np.int64), np.r_[0, cut]).cumsum()
    fp = np.add.reduceat((~p).astype(np.int64), np.r_[0, cut]).cumsum()
    tp = np.r_[0, tp].tolist()
    fp = np.r_[0, fp].tolist()
    twice = sum((fp[j] - fp[j - 1]) * (tp[j] + tp[j - 1]) for j in range(1, len(tp)))
    return Fraction(twice, 2 * n_pos * n_neg)


def mann_whitney_auc(scores, positive):
    """P(score_pos > score_neg) + 0.5 P(tie), by counting every pair."""
    scores = list(map(float, scores))
    positive = list(map(bool, positive))
    pos = [s for s, y in zip(scores, positive) if y]
    neg = [s for s, y in zip(scores, positive) if not y]
    if not pos or not neg:
        return None
    twice = 0
    for a in pos:
        for b in neg:
            twice += 2 if a > b else (1 if a == b else 0)
    return Fraction(twice, 2 * len(pos) * len(neg))


def confusion_matrix(labels, predictions, k):
    cm = np.zeros((k, k), dtype=np.int64)
    np.add.at(cm, (labels, predictions), 1)
    return cm


@dataclass
class EvalReport:
    loss: float
    accuracy: float
    precision: float
    recall: float
    auc: object  # float, or None when no class has both positives and negatives
    confusion: list
    sample_count: int

    def to_dict(self):
        r6 = lambda v: None if v is None else float(f"{v:.6f}")
        return {"loss": r6(self.loss), "accuracy": r6(self.accuracy),
                "precision": r6(self.precision), "recall": r6(self.recall),
                "auc": r6(self.auc), "confusion": self.confusion,
                "sample_count": self.sample_count}


def evaluate_logits(logits, labels, k):
    """EvalReport from eval-mode logits and integer labels.

    Precision and recall are macro averages over the classes that occur in the
    labels or the predictions; a zero denominator contributes 0. AUC is the
    macro one-vs-rest average over classes with both positives and negatives.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    if logits.ndim != 2 or logits.shape[0] == 0:
        raise ValidationError(f"need a nonempty (N, K) logit matrix, got {logits.shape}")
    if logits.shape[1] != k:
        raise ValidationError(f"model emits {logits.shape[1]} classes, expected K={k}")
    if labels.shape != (logits.shape[0],):
        raise ValidationError(f"{labels.shape} labels for {logits.shape[0]} rows")
    if labels.min() < 0 or labels.max() >= k:
        raise ValidationError(f"labels must lie in [0, {k})")
    labels = labels.astype(np.int64)
    probs = ad.softmax(logits)
    pred = probs.argmax(axis=1)
    cm = confusion_matrix(labels, pred, k)
    n = labels.size
    z = logits - logits.max(axis=1, keepdims=True)
    log_p = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = float(-log_p[np.arange(n), labels].mean())
    tp = np.diag(cm)
    predicted, actual = cm.sum(axis=0), cm.sum(axis=1)
    seen = (predicted > 0) | (actual > 0)
    prec = np.where(predicted > 0, tp / np.maximum(predicted, 1), 0.0)
    rec = np.where(actual > 0, tp / np.maximum(actual, 1), 0.0)
    aucs = [roc_auc_trapezoid(probs[:, c], labels == c) for c in range(k)]
    aucs = [a for a in aucs if a is not None]
    return EvalReport(
        loss=loss,
        accuracy=float(Fraction(int(np.trace(cm)), n)),
        precision=float(prec[seen].mean()),
        recall=float(rec[seen].mean()),
        auc=float(sum(aucs) / len(aucs)) if aucs else None,
        confusion=cm.tolist(),
        sample_count=int(n),
    )


def evaluate(model, params, x, labels, k, chunk=64):
    """Eval-mode forward of ``model`` over ``x`` then :func:`evaluate_logits`."""
    from .training import predict_logits
    if len(x) == 0:
        raise ValidationError("evaluation split is empty")
    return evaluate_logits(predict_logits(model, params, x, chunk), labels, k)


def recall_from_aggregates(accuracy, fpr, prevalence):
    """Invert acc = p*TPR + (1-p)*(1-FPR) for TPR.

    Returns (recall, clamped) where ``clamped`` flags an out-of-range raw value.
    """
    if not 0 < prevalence < 1:
        raise ValidationError(f"positive prevalence must lie in (0, 1), got {prevalence}")
    for name, v in (("accuracy", accuracy), ("fpr", fpr)):
        if not 0 <= v <= 1:
            raise ValidationError(f"{name} must lie in [0, 1], got {v}")
    raw = (accuracy - (1 - prevalence) * (1 - fpr)) / prevalence
    clamped = min(max(raw, 0.0), 1.0)
    return clamped, clamped != raw


def accuracy_from_rates(tpr, fpr, prevalence):
    return prevalence * tpr + (1 - prevalence) * (1 - fpr)


# -- comparison documents ------------------------------------------------------

@dataclass
class ComparisonSide:
    name: str
    params: int
    eval: EvalReport = None


METRIC_ROWS = (("loss", "Test loss"), ("accuracy", "Test accuracy"), ("precision", "Precision"),
               ("recall", "Recall"), ("auc", "AUC"))


def _fmt6(v):
    return "n/a" if v is None else f"{v:.6f}"


def _metric_rows(donor, rootstock):
    if donor.eval is None or rootstock.eval is None:
        return []
    rows = []
    for key, label in METRIC_ROWS:
        a, b = getattr(donor.eval, key), getattr(rootstock.eval, key)
        diff = None if a is None or b is None else a - b
        rows.append((key, label, _fmt6(a), _fmt6(b), _fmt6(diff)))
    return rows


def _json_value(v, indent):
    pad = " " * indent
    if isinstance(v, dict):
        if not v:
            return "{}"
        items = [f'{pad} "{k}": {_json_value(v[k], indent + 1)}' for k in v]
        return "{\n" + ",\n".join(items) + "\n" + pad + "}"
    if isinstance(v, list):
        return "[" + ", ".join(_json_value(x, indent) for x in v) + "]"
    if v is None:
        return "null"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, Decimal)):
        return str(v)
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    raise TypeError(f"cannot serialize {type(v).__name__}")


def emit_comparison(donor, rootstock, fmt):
    """Donor vs rootstock document in ``json``, ``csv`` or ``markdown``.

    Field order is fixed; numbers keep their fixed decimal counts in every format.
    """
    sr = size_report(donor.params, rootstock.params)
    f = sr.formatted()
    metrics = _metric_rows(donor, rootstock)
    if fmt == "markdown":
        lines = [f"| Metric | {donor.name} | {rootstock.name} | Absolute Reduction |",
                 "|---|---|---|---|",
                 f"| Total Parameters | {f['donor_params']} | {f['rootstock_params']} | {f['reduction_params']} |",
                 f"| Model Size (MB) | {f['donor_mb']} | {f['rootstock_mb']} | {f['reduction_mb']} |"]
        lines += [f"| {label} | {a} | {b} | {d} |" for _, label, a, b, d in metrics]
        lines += ["", f"Size reduction: {f['percent_reduction']}%",
                  f"Size ratio: {f['size_ratio']}x smaller", ""]
        return "\n".join(lines)
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "donor", "rootstock", "reduction"])
        w.writerow(["total_params", sr.donor_params, sr.rootstock_params, sr.reduction_params])
        w.writerow(["size_mb", f["donor_mb"], f["rootstock_mb"], f["reduction_mb"]])
        w.writerow(["percent_reduction", "", "", f["percent_reduction"]])
        w.writerow(["size_ratio", "", "", f["size_ratio"]])
        for key, _, a, b, d in metrics:
            w.writerow([key, a, b, d])
        return buf.getvalue()
    if fmt == "json":
        doc = {
            "donor": {"name": donor.name, "params": sr.donor_params, "bytes": sr.donor_bytes,
                      "size_mb": Decimal(f["donor_mb"])},
            "rootstock": {"name": rootstock.name, "params": sr.rootstock_params,
                          "bytes": sr.rootstock_bytes, "size_mb": Decimal(f["rootstock_mb"])},
            "reduction": {"params": sr.reduction_params, "size_mb": Decimal(f["reduction_mb"]),
                          "percent": Decimal(f["percent_reduction"]),
                          "size_ratio": Decimal(f["size_ratio"])},
        }
        if metrics:
            doc["metrics"] = {key: {"donor": _num(a), "rootstock": _num(b), "difference": _num(d)}
                              for key, _, a, b, d in metrics}
        return _json_value(doc, 0) + "\n"
    raise ValidationError(f"format must be json, csv or markdown, got {fmt!r}")


def _num(text):
    return None if text == "n/a" else Decimal(text)
