"""Command-line entry point: synth, mask, train, impute, evaluate, report, transitions.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical failure.
Failures print one line ``error: <category>: <message>`` to stderr.
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from dataclasses import asdict

import numpy as np

from .data import DataError, load_availability, load_speed_matrix, save_speed_matrix, synthesize_dataset
from .evaluation import (
    MetricsReport,
    export_transition_weights,
    run_experiment,
    sliding_impute,
    split,
    write_transition_weights,
)
from .graph import load_graph, save_graph
from .masking import Pattern, generate_mask, save_mask
from .model import ModelConfig
from .training import TrainConfig, TrainedModel, TrainingDiverged, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
CHECKPOINT_NAME = "model.ckpt"
METRICS = ("mae", "rmse", "mape")


class CliError(Exception):
    def __init__(self, category: str, message: str, code: int):
        super().__init__(message)
        self.category, self.code = category, code


def usage_error(message):
    return CliError("usage", message, EXIT_USAGE)


def shape_mismatch(message):
    return CliError("shape-mismatch", message, EXIT_DATA)


# --- config files --------------------------------------------------------

def read_config_file(path) -> dict:
    """``key = value`` lines; ``#`` starts a comment."""
    values = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise usage_error(f"{path}:{lineno}: expected 'key = value'")
            values[key.strip().replace("-", "_")] = value.strip()
    return values


def write_config_file(path, values: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for key, value in values.items():
            fh.write(f"{key} = {value}\n")


def _apply_config(parser: argparse.ArgumentParser, config: dict) -> None:
    actions = {a.dest: a for a in parser._actions if a.dest not in ("help", "config")}
    unknown = sorted(set(config) - set(actions))
    if unknown:
        raise usage_error(f"unknown config keys: {', '.join(unknown)}")
    defaults = {}
    for key, raw in config.items():
        action = actions[key]
        if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
            if raw.lower() not in ("true", "false"):
                raise usage_error(f"config key {key} expects true/false, got {raw!r}")
            defaults[key] = raw.lower() == "true"
        else:
            try:
                defaults[key] = action.type(raw) if action.type else raw
            except (TypeError, ValueError, argparse.ArgumentTypeError) as exc:
                raise usage_error(f"config key {key}: {exc}") from None
    parser.set_defaults(**defaults)


# --- argument types --------------------------------------------------------

def _ratio(text):
    value = float(text)
    if not 0 <= value < 1:
        raise argparse.ArgumentTypeError(f"ratio must lie in [0, 1), got {text}")
    return value


def _ratio_list(text):
    return [_ratio(x) for x in text.split(",") if x.strip()]


def _pattern(text):
    try:
        return Pattern.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _pattern_list(text):
    return [_pattern(x) for x in text.split(",") if x.strip()]


def _shape(text):
    try:
        n, t = (int(x) for x in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"shape must look like NxT, got {text!r}") from None
    if n < 1 or t < 1:
        raise argparse.ArgumentTypeError("shape dimensions must be positive")
    return n, t


def _positive_int(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def _optional_float(text):
    return None if text.lower() in ("", "none") else float(text)


# --- parser ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dstgcn", description="Traffic speed imputation with DSTGCN.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write the synthetic ring-road dataset")
    p.add_argument("--nodes", type=_positive_int, required=True, help="number of nodes N")
    p.add_argument("--steps", type=_positive_int, required=True, help="number of time steps P")
    p.add_argument("--seed", type=int, required=True, help="random seed")
    p.add_argument("--noise", type=float, default=1.0, help="noise standard deviation (default 1)")
    p.add_argument("--steps-per-day", type=_positive_int, default=288, help="steps per daily period")
    p.add_argument("--out", required=True, help="output directory (speeds.csv, graph.csv)")

    p = sub.add_parser("mask", help="generate a missing-pattern mask")
    p.add_argument("--pattern", type=_pattern, required=True, help="rm, tcm, scm or bm")
    p.add_argument("--ratio", type=_ratio, required=True, help="missing ratio in [0, 1)")
    p.add_argument("--seed", type=int, required=True, help="random seed")
    p.add_argument("--graph", help="adjacency triplet file (required for scm/bm)")
    p.add_argument("--distances", help="distance triplet file (sensor graphs)")
    p.add_argument("--shape", type=_shape, required=True, help="mask shape NxT")
    p.add_argument("--out", required=True, help="output CSV of 0/1 values")

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", help="key = value file; command-line flags take precedence")
    p.add_argument("--data", help="speed matrix file")
    p.add_argument("--graph", help="adjacency triplet file")
    p.add_argument("--distances", help="distance triplet file (sensor graphs)")
    p.add_argument("--availability", help="0/1 file marking genuinely observed training entries")
    p.add_argument("--pattern", type=_pattern, default=Pattern.RM, help="training mask pattern (default rm)")
    p.add_argument("--window", type=_positive_int, default=72, help="imputation window T (default 72)")
    p.add_argument("--blocks", type=_positive_int, default=2, help="ST-blocks S (default 2)")
    p.add_argument("--diffusion-steps", type=_positive_int, default=2, help="diffusion steps K (default 2)")
    p.add_argument("--hidden", type=_positive_int, default=128, help="recurrent hidden size (default 128)")
    p.add_argument("--out-dim", type=_positive_int, default=64, help="block output width (default 64)")
    p.add_argument("--gse-hidden", type=_positive_int, default=32,
                   help="hidden width of the structure estimators (default 32)")
    p.add_argument("--no-gse", action="store_true", help="ablation: fixed transitions only")
    p.add_argument("--no-dgcn", action="store_true", help="ablation: linear layer instead of diffusion")
    p.add_argument("--lr", type=float, default=1e-4, help="Adam learning rate (default 1e-4)")
    p.add_argument("--batch", type=_positive_int, default=4, help="batch size (default 4)")
    p.add_argument("--iters", type=_positive_int, help="training iterations (required)")
    p.add_argument("--seed", type=int, help="random seed (required)")
    p.add_argument("--grad-clip", type=_optional_float, default=None, help="global gradient-norm clip")
    p.add_argument("--val-every", type=_positive_int, default=100, help="validation interval")
    p.add_argument("--dtype", choices=("float32", "float64"), default="float32", help="training precision")
    p.add_argument("--out", help="run directory")

    p = sub.add_parser("impute", help="reconstruct a speed matrix with a trained model")
    p.add_argument("--model", required=True, help="run directory from 'train'")
    p.add_argument("--data", required=True, help="speed matrix with zeros at missing entries")
    p.add_argument("--graph", required=True, help="adjacency triplet file")
    p.add_argument("--distances", help="distance triplet file")
    p.add_argument("--availability", help="0/1 observed-entry file (default: nonzero entries)")
    p.add_argument("--out", required=True, help="output speed matrix")

    p = sub.add_parser("evaluate", help="score a model over missing patterns and ratios")
    p.add_argument("--model", required=True, help="run directory from 'train'")
    p.add_argument("--data", required=True, help="complete speed matrix")
    p.add_argument("--graph", required=True, help="adjacency triplet file")
    p.add_argument("--distances", help="distance triplet file")
    p.add_argument("--patterns", type=_pattern_list, default=_pattern_list("rm,tcm,scm,bm"),
                   help="comma-separated patterns (default rm,tcm,scm,bm)")
    p.add_argument("--ratios", type=_ratio_list, default=_ratio_list("0.2,0.4,0.6,0.8"),
                   help="comma-separated ratios (default 0.2,0.4,0.6,0.8)")
    p.add_argument("--seed", type=int, required=True, help="random seed")
    p.add_argument("--split", choices=("test", "all"), default="test",
                   help="evaluate on the last 20%% of steps (default) or the whole file")
    p.add_argument("--period", type=_positive_int, default=288, help="steps per day for the historical average")
    p.add_argument("--jobs", type=_positive_int, default=1, help="parallel experiment cells")
    p.add_argument("--plot-data", action="store_true", help="also write per-cell (true, predicted) pairs")
    p.add_argument("--out", required=True, help="output directory (report.csv)")

    p = sub.add_parser("report", help="turn a report into metric-vs-ratio plot data")
    p.add_argument("--report", required=True, help="report.csv from 'evaluate'")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("transitions", help="export learned transition weights of one node")
    p.add_argument("--model", required=True, help="run directory from 'train'")
    p.add_argument("--data", required=True, help="speed matrix; the window starts at --start")
    p.add_argument("--graph", required=True, help="adjacency triplet file")
    p.add_argument("--distances", help="distance triplet file")
    p.add_argument("--node", required=True, help="node id")
    p.add_argument("--start", type=int, default=0, help="first step of the window")
    p.add_argument("--times", default="0", help="comma-separated steps within the window")
    p.add_argument("--block", type=int, default=-1, help="ST-block index (default last)")
    p.add_argument("--out", required=True, help="output CSV")
    return parser


def _subparser(parser, name) -> argparse.ArgumentParser:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[name]
    raise KeyError(name)


# --- commands --------------------------------------------------------------

def _load_inputs(args, require_graph_match=True):
    data = load_speed_matrix(args.data)
    graph = load_graph(args.graph, getattr(args, "distances", None), node_ids=data.node_ids)
    return data, graph


def cmd_synth(args) -> int:
    os.makedirs(args.out, exist_ok=True)
    matrix, graph = synthesize_dataset(args.nodes, args.steps, args.seed, args.noise, args.steps_per_day)
    save_speed_matrix(matrix, os.path.join(args.out, "speeds.csv"))
    save_graph(graph, os.path.join(args.out, "graph.csv"))
    return EXIT_OK


def cmd_mask(args) -> int:
    n, t = args.shape
    graph = None
    if args.pattern in (Pattern.SCM, Pattern.BM):
        if not args.graph:
            raise usage_error(f"--graph is required for pattern {args.pattern.value}")
    if args.graph:
        graph = load_graph(args.graph, args.distances)
        if graph.num_nodes != n:
            raise shape_mismatch(f"graph has {graph.num_nodes} nodes, --shape asks for {n}")
    mask = generate_mask(args.pattern, n, t, args.ratio, np.random.default_rng(args.seed), graph)
    save_mask(mask, args.out)
    return EXIT_OK


def cmd_train(args) -> int:
    for flag in ("data", "graph", "iters", "seed", "out"):
        if getattr(args, flag) is None:
            raise usage_error(f"--{flag} is required (flag or config file)")
    data, graph = _load_inputs(args)
    model_config = ModelConfig(
        num_nodes=data.num_nodes, window=args.window, blocks=args.blocks,
        diffusion_steps=args.diffusion_steps, hidden=args.hidden, out_dim=args.out_dim,
        gse_hidden=args.gse_hidden, use_gse=not args.no_gse, use_dgcn=not args.no_dgcn,
    )
    train_config = TrainConfig(
        iterations=args.iters, learning_rate=args.lr, batch_size=args.batch, pattern=args.pattern,
        seed=args.seed, dtype=args.dtype, grad_clip=args.grad_clip, val_every=args.val_every,
    )
    available = None
    if args.availability:
        available = load_availability(args.availability, data.values.shape)
    X_train, X_val, _ = split(data.values)
    if X_train.shape[1] < args.window:
        raise shape_mismatch(f"training slice has {X_train.shape[1]} steps, window is {args.window}")
    avail_train = avail_val = None
    if available is not None:
        avail_train, avail_val, _ = split(available)
    if X_val.shape[1] < args.window:
        X_val = avail_val = None

    os.makedirs(args.out, exist_ok=True)
    snapshot = {"data": args.data, "graph": args.graph}
    snapshot.update(model_config.to_record())
    snapshot.update({k: (v.value if isinstance(v, Pattern) else v) for k, v in asdict(train_config).items()})
    write_config_file(os.path.join(args.out, "config.txt"), snapshot)

    log_path = os.path.join(args.out, "loss.csv")
    with open(log_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["iteration", "loss", "val_rmse"])

        def record(it, loss, val_rmse):
            writer.writerow([it, repr(loss), "" if val_rmse is None else repr(val_rmse)])

        try:
            model = train(X_train, graph, model_config, train_config, available=avail_train,
                          X_val=X_val, val_available=avail_val, on_iteration=record)
        except TrainingDiverged as exc:
            if exc.model is not None and exc.model.params is not None:
                exc.model.save(os.path.join(args.out, "last_finite.ckpt"))
            raise
    model.save(os.path.join(args.out, CHECKPOINT_NAME), {"best_iteration": model.best_iteration})
    return EXIT_OK


def _load_model(model_dir, graph) -> TrainedModel:
    path = os.path.join(model_dir, CHECKPOINT_NAME) if os.path.isdir(model_dir) else model_dir
    if not os.path.exists(path):
        raise CliError("data-error", f"no checkpoint at {path}", EXIT_DATA)
    try:
        return TrainedModel.load(path, graph)
    except ValueError as exc:
        if "nodes" in str(exc):
            raise shape_mismatch(str(exc)) from None
        raise


def cmd_impute(args) -> int:
    data, graph = _load_inputs(args)
    model = _load_model(args.model, graph)
    if data.num_nodes != model.config.num_nodes:
        raise shape_mismatch(f"data has {data.num_nodes} nodes, model expects {model.config.num_nodes}")
    if data.num_steps < model.window:
        raise shape_mismatch(f"data has {data.num_steps} steps, model window is {model.window}")
    observed = None
    if args.availability:
        observed = load_availability(args.availability, data.values.shape)
    recon = sliding_impute(model, data.values, model.window, observed)
    save_speed_matrix(data.with_values(recon), args.out)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    data, graph = _load_inputs(args)
    model = _load_model(args.model, graph)
    if data.num_nodes != model.config.num_nodes:
        raise shape_mismatch(f"data has {data.num_nodes} nodes, model expects {model.config.num_nodes}")
    X = split(data.values)[2] if args.split == "test" else data.values
    if X.shape[1] < model.window:
        raise shape_mismatch(f"evaluation horizon has {X.shape[1]} steps, model window is {model.window}")
    for r in args.ratios:
        if r == 0:
            raise usage_error("evaluation ratios must be positive")
    os.makedirs(args.out, exist_ok=True)
    plot_dir = None
    if args.plot_data:
        plot_dir = os.path.join(args.out, "pairs")
        os.makedirs(plot_dir, exist_ok=True)
    report = run_experiment(X, graph, model, args.patterns, args.ratios, args.seed,
                            period=args.period, jobs=args.jobs, plot_dir=plot_dir)
    report.write(os.path.join(args.out, "report.csv"))
    return EXIT_OK


def write_plot_data(report: MetricsReport, out_dir) -> list:
    """One file per (pattern, metric): ``ratio`` then one column per model."""
    os.makedirs(out_dir, exist_ok=True)
    models = report.models()
    written = []
    for pattern in dict.fromkeys(r.pattern for r in report.rows):
        rows = [r for r in report.rows if r.pattern == pattern]
        ratios = sorted({r.ratio for r in rows})
        lookup = {(r.ratio, r.model): r for r in rows}
        for metric in METRICS:
            path = os.path.join(out_dir, f"{pattern}_{metric}.csv")
            with open(path, "w", newline="", encoding="utf-8") as fh:
                writer = csv.writer(fh, lineterminator="\n")
                writer.writerow(["ratio", *models])
                for ratio in ratios:
                    cells = []
                    for m in models:
                        row = lookup.get((ratio, m))
                        cells.append("" if row is None else repr(getattr(row, metric)))
                    writer.writerow([repr(ratio), *cells])
            written.append(path)
    return written


def cmd_report(args) -> int:
    try:
        report = MetricsReport.read(args.report)
    except (ValueError, IndexError) as exc:
        raise CliError("data-error", str(exc), EXIT_DATA) from None
    if not len(report):
        raise CliError("data-error", f"{args.report}: no rows", EXIT_DATA)
    write_plot_data(report, args.out)
    return EXIT_OK


def cmd_transitions(args) -> int:
    data, graph = _load_inputs(args)
    model = _load_model(args.model, graph)
    if args.node not in data.node_ids:
        raise CliError("data-error", f"unknown node {args.node!r}", EXIT_DATA)
    stop = args.start + model.window
    if args.start < 0 or stop > data.num_steps:
        raise shape_mismatch(f"window [{args.start}, {stop}) outside {data.num_steps} steps")
    times = [int(t) for t in args.times.split(",") if t.strip()]
    records = export_transition_weights(model, data.values[:, args.start:stop], args.node, times,
                                        node_ids=data.node_ids, block=args.block)
    write_transition_weights(records, args.out, data.node_ids)
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "mask": cmd_mask,
    "train": cmd_train,
    "impute": cmd_impute,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
    "transitions": cmd_transitions,
}


def _fail(category: str, message: str, code: int) -> int:
    print(f"error: {category}: {message}".replace("\n", " "), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed usage
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if getattr(args, "config", None):
            sub = _subparser(parser, args.command)
            _apply_config(sub, read_config_file(args.config))
            args = parser.parse_args(argv)
        return COMMANDS[args.command](args)
    except CliError as exc:
        return _fail(exc.category, str(exc), exc.code)
    except (TrainingDiverged, FloatingPointError) as exc:
        return _fail("numerical-failure", str(exc), EXIT_NUMERIC)
    except (DataError, OSError) as exc:
        return _fail("data-error", str(exc), EXIT_DATA)
    except ValueError as exc:
        return _fail("data-error", str(exc), EXIT_DATA)
    except KeyError as exc:
        return _fail("data-error", str(exc.args[0]) if exc.args else "missing key", EXIT_DATA)


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
