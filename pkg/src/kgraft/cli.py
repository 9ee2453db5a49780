"""Command line: ``kgraft <command> --name RUN [flags]``.

Every command writes only under ``<runs-root>/<name>/`` and echoes its
resolved settings to ``config/<command>.json`` there. Timestamps go to the
sidecar ``run.log`` and nowhere else.

Exit codes: 0 ok, 2 usage, 3 data/format, 4 infeasible search, 5 divergence.
"""

import argparse
import datetime
import json
import os
import sys

from . import __version__, pipeline, selection
from .data import FAMILIES, SyntheticConfig
from .errors import FormatError, GraftError, UsageError
from .grafting import HeadSpec, SelectionVector
from .training import TrainConfig

CONFIG_VERSION = 1


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _int_list(text):
    try:
        out = [int(t) for t in text.replace(" ", "").split(",") if t]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    return out


def _blocks(text):
    """'8,8;16,16' -> ((8, 8), (16, 16))."""
    try:
        return tuple(tuple(_int_list(b)) for b in text.split(";") if b.strip())
    except argparse.ArgumentTypeError:
        raise argparse.ArgumentTypeError(f"expected blocks like '8,8;16,16', got {text!r}") from None


def _train_flags(p, epochs=18):
    g = p.add_argument_group("training")
    g.add_argument("--epochs", type=int, default=epochs)
    g.add_argument("--batch-size", type=int, default=16)
    g.add_argument("--lr", type=float, default=1e-3, help="Adam learning rate")


def _head_flags(p):
    g = p.add_argument_group("graft head")
    g.add_argument("--hidden-units", type=int, default=256)
    g.add_argument("--head-dropout", type=float, default=0.3)


def _io_flags(p, donor=True):
    p.add_argument("--data", help="dataset directory (default: <run>/data)")
    if donor:
        p.add_argument("--donor", help="donor model directory (default: <run>/donor)")


def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--name", default="default", help="run name; outputs go to <runs-root>/<name>/")
    common.add_argument("--runs-root", default="runs")
    common.add_argument("--config", help="JSON settings file (flags override it)")
    common.add_argument("--seed", type=int, default=0)

    parser = _Parser(prog="kgraft", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"kgraft {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("gen-data", parents=[common], help="generate the synthetic dataset")
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--per-class", type=int, default=500)
    p.add_argument("--image-size", type=int, default=32)
    p.add_argument("--channels", type=int, default=3)
    p.add_argument("--noise", type=float, default=0.15, help="pixel noise sigma")
    p.add_argument("--family", choices=FAMILIES, default="grating")
    p.add_argument("--jitter", type=float, default=0.9, help="orientation jitter, fraction of class spacing")
    p.add_argument("--contrast", type=float, nargs=2, default=(0.06, 0.18), metavar=("LO", "HI"))
    p.add_argument("--split-seed", type=int, help="default: --seed")
    p.add_argument("--ratios", type=float, nargs=3, default=(0.6, 0.2, 0.2),
                   metavar=("TRAIN", "VAL", "TEST"))

    p = sub.add_parser("cultivate", parents=[common], help="train the donor CNN")
    _io_flags(p, donor=False)
    _train_flags(p)
    p.add_argument("--conv-blocks", type=_blocks, default=((8, 8), (16, 16), (32, 32)),
                   help="filters per conv, blocks separated by ';' (default 8,8;16,16;32,32)")
    p.add_argument("--dense-units", type=int, default=256)
    p.add_argument("--dropout", type=float, default=0.3)
    p.add_argument("--alpha", type=float, default=0.3, help="LeakyReLU slope")
    p.add_argument("--freeze-depth", type=int, default=0)

    p = sub.add_parser("graft", parents=[common], help="graft selected donor layers onto a new head")
    _io_flags(p)
    sel = p.add_mutually_exclusive_group()
    sel.add_argument("--select", type=_int_list, help="donor layer indices, e.g. 8,9,10")
    sel.add_argument("--selection-file",
                     help="search report.json (its winner) or a file holding a 0/1 string over donor layers")
    p.add_argument("--out", default="graft", help="subdirectory of the run (default graft)")
    _head_flags(p)
    _train_flags(p)

    p = sub.add_parser("search", parents=[common], help="search donor taps under a size or accuracy constraint")
    _io_flags(p)
    p.add_argument("--mode", choices=("size", "perf"),
                   help="size: smallest graft reaching --min-perf; perf: best graft within --budget")
    p.add_argument("--budget", help="byte limit, or a share of the donor size such as 25%%")
    p.add_argument("--min-perf", type=float, help="validation accuracy floor")
    p.add_argument("--metric", choices=("val_accuracy", "neg_val_loss"), default="val_accuracy")
    p.add_argument("--strategy", choices=selection.STRATEGIES, default="exhaustive")
    p.add_argument("--candidates", type=_int_list,
                   help="donor tap indices to search over (default: post-activation conv outputs)")
    p.add_argument("--search-epochs", type=int, default=6, help="head epochs per candidate")
    p.add_argument("--population", type=int, default=20)
    p.add_argument("--generations", type=int, default=30)
    p.add_argument("--crossover-rate", type=float, default=0.9)
    p.add_argument("--mutation-rate", type=float, help="default 1/m")
    p.add_argument("--elitism", type=int, default=1)
    p.add_argument("--out", default="search")
    _head_flags(p)
    _train_flags(p)

    p = sub.add_parser("evaluate", parents=[common], help="test-set metrics for a donor or graft")
    p.add_argument("--model", default="graft", help="model directory, or donor/graft inside the run")
    p.add_argument("--data")
    p.add_argument("--split", choices=pipeline.SPLITS, default="test")
    p.add_argument("--classes", type=int, help="expected class count K")

    p = sub.add_parser("report", parents=[common], help="donor vs rootstock comparison documents")
    p.add_argument("--donor-params", type=int, help="override the donor parameter count")
    p.add_argument("--rootstock-params", type=int, help="override the rootstock parameter count")
    p.add_argument("--donor-eval", help="evaluate JSON for the donor")
    p.add_argument("--rootstock-eval", help="evaluate JSON for the rootstock")
    p.add_argument("--graft", default="graft", help="graft directory inside the run")
    return parser


def _load_config(path, command):
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(doc, dict) or doc.get("config_version") != CONFIG_VERSION:
        raise UsageError(f"config {path} must be an object with config_version {CONFIG_VERSION}")
    settings = {k: v for k, v in doc.items() if k != "config_version" and not isinstance(v, dict)}
    settings.update(doc.get(command, {}))
    return {k.replace("-", "_"): v for k, v in settings.items()}


def parse_args(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        settings = _load_config(args.config, args.command)
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in sub._actions}
        unknown = sorted(set(settings) - known)
        if unknown:
            raise UsageError(f"config keys not valid for {args.command}: {unknown}")
        sub.set_defaults(**settings)
        args = parser.parse_args(argv)
    return args


class Run:
    def __init__(self, args):
        if not args.name or os.sep in args.name or args.name in (".", ".."):
            raise UsageError(f"run name must be a plain directory name, got {args.name!r}")
        self.root = os.path.join(args.runs_root, args.name)
        os.makedirs(self.root, exist_ok=True)
        self.command = args.command

    def path(self, *parts):
        return os.path.join(self.root, *parts)

    def log(self, message):
        stamp = datetime.datetime.now().isoformat(timespec="seconds")
        with open(self.path("run.log"), "a") as fh:
            fh.write(f"{stamp} {self.command}: {message}\n")
        print(message, file=sys.stderr)

    def echo_config(self, args):
        os.makedirs(self.path("config"), exist_ok=True)
        settings = {k: v for k, v in sorted(vars(args).items()) if k not in ("config",)}
        doc = {"config_version": CONFIG_VERSION, "command": self.command,
               "settings": json.loads(json.dumps(settings, default=list))}
        pipeline.write_json(self.path("config", f"{self.command}.json"), doc)


def _train_config(args):
    return TrainConfig(batch_size=args.batch_size, epochs=args.epochs, learning_rate=args.lr, seed=args.seed)


def _head(args, k):
    return HeadSpec(k, args.hidden_units, args.head_dropout)


def _data_dir(run, args):
    return args.data or run.path("data")


def _donor_dir(run, args):
    return args.donor or run.path("donor")


def cmd_gen_data(run, args):
    cfg = SyntheticConfig(args.classes, args.per_class, args.image_size, args.channels, args.noise,
                          args.family, args.jitter, tuple(args.contrast))
    doc = pipeline.gen_data(run.path("data"), cfg, args.seed, args.split_seed, tuple(args.ratios))
    run.log(f"wrote {doc['sample_count']} samples to {run.path('data')}")


def cmd_cultivate(run, args):
    kwargs = {"conv_blocks": args.conv_blocks, "head_units": args.dense_units,
              "dropout_rate": args.dropout, "alpha": args.alpha, "freeze_depth": args.freeze_depth}
    s = pipeline.cultivate(_data_dir(run, args), run.path("donor"), kwargs, _train_config(args), run.log)
    run.log(f"donor: {s['parameter_count']} parameters, test accuracy {s['test']['accuracy']:.4f}")


def _selection_from_file(path, donor_dir):
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise UsageError(f"cannot read selection file {path}: {exc.strerror}") from None
    stripped = text.strip()
    if stripped.startswith("{"):
        doc = json.loads(stripped)
        if not doc.get("winner_layers"):
            raise UsageError(f"{path} has no winner (was the search infeasible?)")
        return doc["winner_layers"]
    from .models import load_model
    spec, _ = load_model(donor_dir)
    s = SelectionVector.from_string(stripped)
    if len(s) != len(spec.layers):
        raise UsageError(f"selection string has {len(s)} bits, donor has {len(spec.layers)} layers")
    return [i for i, b in enumerate(s.bits) if b]


def cmd_graft(run, args):
    from .models import load_model
    donor_dir = _donor_dir(run, args)
    if args.selection_file:
        layers = _selection_from_file(args.selection_file, donor_dir)
    elif args.select is not None:
        layers = args.select
    else:
        raise UsageError("pass --select or --selection-file")
    if not layers:
        raise UsageError("empty selection: pass at least one donor layer index")
    spec, _ = load_model(donor_dir)
    s = pipeline.graft(_data_dir(run, args), donor_dir, run.path(args.out), layers,
                       _head(args, spec.class_count), _train_config(args), run.log)
    run.log(f"graft {s['selection']}: {s['parameter_count']} parameters "
            f"({100 * s['parameter_count'] / s['donor_parameter_count']:.2f}% of donor), "
            f"test accuracy {s['test']['accuracy']:.4f}")


def cmd_search(run, args):
    from .models import count_parameters, load_model
    if args.mode is None:
        raise UsageError("--mode is required (size or perf)")
    if args.mode == "perf" and (args.budget is None or args.min_perf is not None):
        raise UsageError("--mode perf takes --budget and no --min-perf")
    if args.mode == "size" and (args.min_perf is None or args.budget is not None):
        raise UsageError("--mode size takes --min-perf and no --budget")
    donor_dir = _donor_dir(run, args)
    spec, _ = load_model(donor_dir)
    if args.mode == "perf":
        budget = pipeline.parse_budget(args.budget, count_parameters(spec).total * 4)
        objective = selection.ObjectiveSpec(selection.MAX_PERF, size_max=budget, perf_metric=args.metric)
    else:
        objective = selection.ObjectiveSpec(selection.MIN_SIZE, perf_min=args.min_perf, perf_metric=args.metric)
    ga = selection.GeneticConfig(args.population, args.generations, args.crossover_rate,
                                 args.mutation_rate, args.elitism, args.seed)
    doc, s = pipeline.search(_data_dir(run, args), donor_dir, run.path(args.out), objective, args.strategy,
                             _head(args, spec.class_count), args.candidates, args.search_epochs,
                             args.seed, ga, _train_config(args), run.log)
    run.log(f"search: {doc['evaluations']} candidates, winner layers {doc['winner_layers']}, "
            f"test accuracy {s['test']['accuracy']:.4f}")


def _model_dir(run, name):
    return run.path(name) if name in ("donor", "graft") or not os.path.exists(name) else name


def cmd_evaluate(run, args):
    model_dir = _model_dir(run, args.model)
    doc = pipeline.evaluate_model(model_dir, _data_dir(run, args), args.split, args.classes)
    os.makedirs(run.path("eval"), exist_ok=True)
    label = os.path.basename(os.path.normpath(model_dir))
    out = run.path("eval", f"{label}_{args.split}.json")
    pipeline.write_json(out, doc)
    print(json.dumps(doc, sort_keys=True))
    run.log(f"wrote {out}")


def _read_eval(path):
    from .metrics import EvalReport
    from .models import read_json
    d = read_json(path, path)
    try:
        return EvalReport(d["loss"], d["accuracy"], d["precision"], d["recall"], d["auc"],
                          d["confusion"], d["sample_count"])
    except KeyError as exc:
        raise FormatError(f"evaluation file lacks {exc}", path) from None


def cmd_report(run, args):
    from .metrics import ComparisonSide
    from .models import read_json
    donor_n, root_n = args.donor_params, args.rootstock_params
    donor_eval = _read_eval(args.donor_eval) if args.donor_eval else None
    root_eval = _read_eval(args.rootstock_eval) if args.rootstock_eval else None
    if donor_n is None or root_n is None:
        summary = read_json(run.path(args.graft, "summary.json"), "graft summary.json")
        donor_n = summary["donor_parameter_count"] if donor_n is None else donor_n
        root_n = summary["parameter_count"] if root_n is None else root_n
    if donor_n <= 0 or root_n <= 0:
        raise UsageError("parameter counts must be positive")
    out = run.path("report")
    os.makedirs(out, exist_ok=True)
    pipeline.emit_reports(out, ComparisonSide("Donor", donor_n, donor_eval),
                          ComparisonSide("Rootstock", root_n, root_eval))
    with open(os.path.join(out, "comparison.md")) as fh:
        print(fh.read(), end="")
    run.log(f"wrote comparison documents to {out}")


COMMANDS = {"gen-data": cmd_gen_data, "cultivate": cmd_cultivate, "graft": cmd_graft,
            "search": cmd_search, "evaluate": cmd_evaluate, "report": cmd_report}


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
        run = Run(args)
        run.echo_config(args)
        run.log(f"start: {' '.join(argv)}")
        COMMANDS[args.command](run, args)
        run.log("done")
        return 0
    except SystemExit as exc:  # --help / --version
        return exc.code or 0
    except GraftError as exc:
        print(f"kgraft: error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
