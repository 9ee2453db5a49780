"""End-to-end steps over a run directory: data, donor, graft, search, evaluation.

Each step reads its inputs from disk and writes its outputs under one
directory, so a step is reproducible from the files alone. Recorded paths are
relative to the output directory that records them.
"""

import json
import os

import numpy as np

from . import data as dataset
from . import grafting, metrics, models, selection, training
from .errors import FormatError, InfeasibleError, UsageError, ValidationError
from .rng import make_rng

SPLITS = ("train", "val", "test")


def write_json(path, doc):
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def write_text(path, text):
    with open(path, "w") as fh:
        fh.write(text)


# -- data ----------------------------------------------------------------------

def gen_data(out_dir, config, seed, split_seed=None, ratios=(0.6, 0.2, 0.2)):
    images, labels, manifest = dataset.generate_synthetic(config, seed)
    split_seed = seed if split_seed is None else split_seed
    parts = training.split_dataset(labels, ratios, split_seed)
    splits = {"seed": split_seed, "ratios": list(ratios), "indices": dict(zip(SPLITS, parts))}
    return dataset.save_dataset(out_dir, images, labels, manifest, splits)


def load_splits(data_dir):
    """{split: (images, labels)} plus the manifest."""
    images, labels, doc = dataset.load_dataset(data_dir)
    if "splits" not in doc:
        raise FormatError("dataset has no split indices", "manifest.splits")
    idx = doc["splits"].get("indices", {})
    out = {}
    for name in SPLITS:
        if name not in idx:
            raise FormatError("missing", f"manifest.splits.indices.{name}")
        rows = np.asarray(idx[name], dtype=np.int64)
        if rows.size and (rows.min() < 0 or rows.max() >= labels.size):
            raise FormatError("index out of range", f"manifest.splits.indices.{name}")
        out[name] = (images[rows], labels[rows])
    return out, doc


# -- donor ---------------------------------------------------------------------

def cultivate(data_dir, out_dir, donor_kwargs, train_config, log=print):
    """Train a donor on the dataset's train split; write model, metrics and summary."""
    splits, doc = load_splits(data_dir)
    k = len(doc["class_names"])
    spec = models.build_donor_spec(tuple(doc["image_shape"]), k, **donor_kwargs)
    params = models.init_params(spec, make_rng(train_config.seed, "donor-init"))
    (xtr, ytr), (xva, yva) = splits["train"], splits["val"]
    net = models.Network(spec)
    _, history = training.train_model(
        net, params, (xtr, training.one_hot(ytr, k)), (xva, training.one_hot(yva, k)), train_config,
        on_epoch=lambda m: log(f"donor epoch {m.epoch}: train_acc={m.train_acc:.4f} val_acc={m.val_acc:.4f}"))
    models.save_model(spec, params, out_dir)
    write_text(os.path.join(out_dir, "metrics.csv"), training.metrics_csv(history))
    spec, params = models.load_model(out_dir)
    summary = {
        "data": os.path.relpath(data_dir, out_dir),
        "parameter_count": models.count_parameters(spec).total,
        "train_config": _config_dict(train_config),
        "donor_config": _jsonable(donor_kwargs),
        "history": training.metrics_records(history),
        "test": metrics.evaluate(net, params, *splits["test"], k).to_dict(),
    }
    write_json(os.path.join(out_dir, "summary.json"), summary)
    return summary


def default_candidate_taps(spec):
    """Post-activation outputs of every conv layer ahead of the flatten."""
    taps = []
    for i, layer in enumerate(spec.layers):
        if layer.kind == "flatten":
            break
        if i > 0 and spec.layers[i - 1].kind == "conv" and layer.kind in ("leaky_relu", "relu"):
            taps.append(i)
    return taps


# -- graft -----------------------------------------------------------------------

def graft(data_dir, donor_dir, out_dir, donor_selection, head, train_config, log=print):
    """Build a graft from ``donor_selection`` (donor-level indices), train, evaluate, report."""
    splits, doc = load_splits(data_dir)
    spec, params = models.load_model(donor_dir)
    k = spec.class_count
    if len(doc["class_names"]) != k:
        raise ValidationError(f"dataset has {len(doc['class_names'])} classes, donor has {k}")
    if not donor_selection:
        raise UsageError("empty selection: pass at least one donor layer index")
    s = grafting.SelectionVector.from_indices(donor_selection, len(spec.layers))
    g_spec, head_params = grafting.build_grafted_model(
        spec, params, s, head, make_rng(train_config.seed, "graft-init"),
        os.path.relpath(donor_dir, out_dir))
    cache = grafting.build_feature_cache(spec, params, s, {n: splits[n][0] for n in SPLITS})
    grafting.save_cache(cache, os.path.join(out_dir, "cache"))
    cache = grafting.load_cache(os.path.join(out_dir, "cache"))
    cache.check(g_spec)
    gh = grafting.GraftHead(head, g_spec.input_width)
    tr = (cache.features["train"], training.one_hot(splits["train"][1], k))
    va = (cache.features["val"], training.one_hot(splits["val"][1], k))
    _, history = training.train_model(
        gh, head_params, tr, va, train_config,
        on_epoch=lambda m: log(f"graft epoch {m.epoch}: train_acc={m.train_acc:.4f} val_acc={m.val_acc:.4f}"))
    grafting.save_graft(g_spec, head_params, out_dir)
    write_text(os.path.join(out_dir, "metrics.csv"), training.metrics_csv(history))
    g_spec, head_params = grafting.load_graft(out_dir)
    test_eval = metrics.evaluate_logits(
        grafting.grafted_forward(g_spec, head_params, features=(cache, "test")), splits["test"][1], k)
    donor_eval = metrics.evaluate(models.Network(spec), params, *splits["test"], k)
    donor_n = models.count_parameters(spec).total
    sides = (metrics.ComparisonSide("Donor", donor_n, donor_eval),
             metrics.ComparisonSide("Rootstock", g_spec.parameter_count(), test_eval))
    emit_reports(out_dir, *sides)
    summary = {
        "data": os.path.relpath(data_dir, out_dir),
        "donor": os.path.relpath(donor_dir, out_dir),
        "selection": list(g_spec.scion),
        "widths": list(g_spec.widths),
        "head_parameters": g_spec.head_parameter_count(),
        "donor_prefix_parameters": g_spec.donor_prefix_params,
        "parameter_count": g_spec.parameter_count(),
        "donor_parameter_count": donor_n,
        "train_config": _config_dict(train_config),
        "history": training.metrics_records(history),
        "test": test_eval.to_dict(),
        "donor_test": donor_eval.to_dict(),
    }
    write_json(os.path.join(out_dir, "summary.json"), summary)
    return summary


def emit_reports(out_dir, donor_side, rootstock_side):
    for fmt, name in (("markdown", "comparison.md"), ("json", "comparison.json"),
                      ("csv", "comparison.csv")):
        write_text(os.path.join(out_dir, name), metrics.emit_comparison(donor_side, rootstock_side, fmt))


# -- search ----------------------------------------------------------------------

def parse_budget(text, donor_bytes):
    """Bytes from ``"123456"`` or a share of the donor's size from ``"25%"``."""
    text = str(text).strip()
    try:
        if text.endswith("%"):
            share = float(text[:-1])
            if not 0 <= share <= 100:
                raise ValueError
            return int(donor_bytes * share // 100)
        value = int(text)
        if value < 0:
            raise ValueError
        return value
    except ValueError:
        raise UsageError(f"budget must be a byte count or a percentage in [0, 100], got {text!r}") from None


def search(data_dir, donor_dir, out_dir, objective, strategy, head, candidates=None, search_epochs=6,
           seed=0, ga=None, final_config=None, log=print):
    """Search candidate taps, write report.json; retrain the winner into ``out_dir/winner``.

    Raises InfeasibleError (after writing the report) when nothing satisfies
    the constraint.
    """
    splits, doc = load_splits(data_dir)
    spec, params = models.load_model(donor_dir)
    k = spec.class_count
    taps = default_candidate_taps(spec) if candidates is None else sorted(set(candidates))
    if not taps:
        raise UsageError("no candidate taps")
    bad = [t for t in taps if not 0 <= t < len(spec.layers)]
    if bad:
        raise UsageError(f"candidate taps {bad} outside valid range 0..{len(spec.layers) - 1}")
    if strategy == "exhaustive" and len(taps) > selection.EXHAUSTIVE_LIMIT:
        raise UsageError(f"exhaustive search over {len(taps)} taps exceeds the limit of "
                         f"{selection.EXHAUSTIVE_LIMIT}; use greedy or genetic")
    images = np.concatenate([splits["train"][0], splits["val"][0]])
    bank = models.compute_taps(spec, params, images, taps, reduce=grafting.pool_tap)
    ntr = splits["train"][0].shape[0]
    rows_tr, rows_va = np.arange(ntr), np.arange(ntr, images.shape[0])
    evaluator = selection.GraftEvaluator(
        spec, taps, bank, (rows_tr, training.one_hot(splits["train"][1], k)),
        (rows_va, training.one_hot(splits["val"][1], k)), head, search_epochs, seed,
        objective.perf_metric)
    report = selection.run_search(strategy, objective, len(taps), evaluator, ga)
    report.seed = seed if report.seed is None else report.seed
    os.makedirs(out_dir, exist_ok=True)
    doc_out = report.to_dict()
    doc_out["candidate_taps"] = list(taps)
    doc_out["search_epochs"] = search_epochs
    doc_out["donor"] = os.path.relpath(donor_dir, out_dir)
    doc_out["donor_parameter_count"] = models.count_parameters(spec).total
    if report.best is not None:
        doc_out["winner_layers"] = list(grafting.scion_from_selection(evaluator.donor_selection(report.best.selection)))
    write_json(os.path.join(out_dir, "report.json"), doc_out)
    for line in report.cost_lines():
        log(f"candidate {line}")
    if report.best is None:
        raise InfeasibleError(f"no candidate satisfies the {objective.mode} constraint "
                              f"({report.evaluations} evaluated); see {os.path.join(out_dir, 'report.json')}")
    winner = grafting.scion_from_selection(evaluator.donor_selection(report.best.selection))
    log(f"winner layers {list(winner)}; retraining at full budget")
    summary = graft(data_dir, donor_dir, os.path.join(out_dir, "winner"), winner, head,
                    final_config or training.TrainConfig(seed=seed), log)
    return doc_out, summary


# -- evaluation -------------------------------------------------------------------

def load_any(model_dir):
    """("donor", spec, params) or ("graft", g_spec, head_params, donor spec, donor params)."""
    if os.path.exists(os.path.join(model_dir, "graft.json")):
        g_spec, head_params = grafting.load_graft(model_dir)
        spec, params = models.load_model(os.path.normpath(os.path.join(model_dir, g_spec.donor_path)))
        return "graft", g_spec, head_params, spec, params
    if os.path.exists(os.path.join(model_dir, "model.json")):
        spec, params = models.load_model(model_dir)
        return ("donor", spec, params)
    raise FormatError(f"{model_dir} holds neither model.json nor graft.json", "model")


def evaluate_model(model_dir, data_dir, split="test", k=None):
    if split not in SPLITS:
        raise UsageError(f"split must be one of {SPLITS}, got {split!r}")
    splits, doc = load_splits(data_dir)
    x, y = splits[split]
    if x.shape[0] == 0:
        raise ValidationError(f"{split} split is empty")
    loaded = load_any(model_dir)
    classes = len(doc["class_names"])
    k = classes if k is None else k
    if k != classes:
        raise ValidationError(f"expected K={k} but the dataset has {classes} classes")
    if loaded[0] == "donor":
        _, spec, params = loaded
        if spec.class_count != k:
            raise ValidationError(f"model has {spec.class_count} classes, expected K={k}")
        report = metrics.evaluate(models.Network(spec), params, x, y, k)
        n = models.count_parameters(spec).total
    else:
        _, g_spec, head_params, spec, params = loaded
        if g_spec.head.class_count != k:
            raise ValidationError(f"graft has {g_spec.head.class_count} classes, expected K={k}")
        logits = _chunked(lambda b: grafting.grafted_forward(g_spec, head_params, images=b,
                                                             donor=(spec, params)), x)
        report = metrics.evaluate_logits(logits, y, k)
        n = g_spec.parameter_count()
    doc = report.to_dict()
    doc.update({"kind": loaded[0], "split": split, "parameter_count": n})
    return doc


def _chunked(fn, x, chunk=256):
    return np.concatenate([fn(x[s:s + chunk]) for s in range(0, x.shape[0], chunk)])


def _config_dict(cfg):
    return {k: getattr(cfg, k) for k in cfg.__dataclass_fields__}


def _jsonable(d):
    return json.loads(json.dumps(d, default=list))
