"""
Command-line interface: toy data generation, training, evaluation,
benchmark grids, plot data and timing.
"""

from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence
import argparse
import logging
import sys
import time

import numpy as np
from rich.console import Console
from rich.panel import Panel
from rich.table import Table

from .core.checkpoint import load_checkpoint
from .core.errors import (
    CheckpointError,
    ConfigurationError,
    ContractError,
    DTGPError,
    IngestionError,
    TrainingAborted,
)
from .core.flows import FlowSpec
from .core.noise import NoiseSource
from .core.trainer import EVAL_STEP, evaluate, fit, time_iterations
from .data.datasets import NormStats, gen_toy_step, load_csv, make_split, standardize, write_csv
from .data.results import ResultRow, summarize_results, write_results
from .utils.config_loader import ConfigLoader

logger = logging.getLogger(__name__)
console = Console()

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2
REFERENCE_ITERATIONS = 80000
LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"


# ---------------------------------------------------------------------------
# Argument types
# ---------------------------------------------------------------------------

def positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}")
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {value}")
    return value


def nonnegative_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}")
    if value < 0:
        raise argparse.ArgumentTypeError(f"expected a nonnegative integer, got {value}")
    return value


def positive_float(text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}")
    if not np.isfinite(value) or value <= 0.0:
        raise argparse.ArgumentTypeError(f"expected a positive number, got {value}")
    return value


def nonnegative_float(text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}")
    if not np.isfinite(value) or value < 0.0:
        raise argparse.ArgumentTypeError(f"expected a nonnegative number, got {value}")
    return value


def finite_float(text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}")
    if not np.isfinite(value):
        raise argparse.ArgumentTypeError(f"expected a finite number, got {text!r}")
    return value


def fraction(text: str) -> float:
    value = positive_float(text)
    if value >= 1.0:
        raise argparse.ArgumentTypeError(f"expected a fraction in (0, 1), got {value}")
    return value


def int_list(text: str) -> List[int]:
    return [positive_int(part) for part in text.split(",") if part.strip()]


def flow_text(text: str) -> str:
    try:
        return str(FlowSpec.parse(text))
    except ConfigurationError as e:
        raise argparse.ArgumentTypeError("; ".join(e.errors))


def flow_list(text: str) -> List[str]:
    return [flow_text(part) for part in text.split(",") if part.strip()]


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    """ArgumentParser that raises instead of exiting, so main() returns exit codes."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise _UsageError(f"{self.prog}: error: {message}")


class _UsageError(Exception):
    pass


def _add_model_flags(parser: argparse.ArgumentParser):
    parser.add_argument("--config", help="Experiment YAML file (flags override its values)")
    parser.add_argument("--flow", type=flow_text, help="Inner-layer flow, e.g. identity, arcsinh:1, steptanh:3:1+id")
    parser.add_argument("--m", type=positive_int, help="Inducing points per layer")
    parser.add_argument("--batch", type=positive_int, help="Minibatch size")
    parser.add_argument("--lr", type=positive_float, help="Adam learning rate")
    parser.add_argument("--iters", type=nonnegative_int, help="Training iterations")
    parser.add_argument("--s-train", type=positive_int, help="Samples per ELBO evaluation")
    parser.add_argument("--s-test", type=positive_int, help="Samples of the predictive mixture")


def _add_data_flags(parser: argparse.ArgumentParser, required: bool = True):
    parser.add_argument("--data", required=required, help="CSV file with a header row")
    parser.add_argument("--target", help="Target column name or index (default: last column)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="dtgp",
        description="Deep transformed Gaussian processes for regression",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  # Toy step data, then a 2-layer model with a steptanh flow
  dtgp gen-toy --n 100 --seed 1 --out data/toy.csv
  dtgp train --data data/toy.csv --layers 2 --flow steptanh --out-checkpoint runs/toy.npz

  # Evaluate a checkpoint on its test split
  dtgp eval --checkpoint runs/toy.npz --data data/toy.csv

  # Grid of layers x seeds, 4 worker processes
  dtgp benchmark --data data/boston.csv --layers-list 2,3 --seeds 3 --iters 20000 --workers 4

  # Per-layer timing
  dtgp time --data data/boston.csv --layers 2,4 --flow identity,arcsinh --iters 1000
        """,
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="Debug logging and tape dumps")
    parser.add_argument("-q", "--quiet", action="store_true", help="Only warnings and errors")
    parser.add_argument("--env-file", help="Load environment variables from this .env file")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("gen-toy", help="Write the toy step-function dataset")
    p.add_argument("--n", type=positive_int, default=100)
    p.add_argument("--noise", type=nonnegative_float, default=0.05)
    p.add_argument("--seed", type=nonnegative_int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="Train one model on one split")
    _add_data_flags(p)
    _add_model_flags(p)
    p.add_argument("--layers", type=positive_int)
    p.add_argument("--seed", type=nonnegative_int, help="Training and split seed")
    p.add_argument("--split-seed", type=nonnegative_int, help="Split seed (default: --seed)")
    p.add_argument("--test-frac", type=fraction)
    p.add_argument("--log-every", type=positive_int)
    p.add_argument("--out-checkpoint")
    p.add_argument("--metrics", help="JSON-lines metrics file")

    p = sub.add_parser("eval", help="Evaluate a checkpoint on the test split")
    p.add_argument("--checkpoint", required=True)
    _add_data_flags(p)
    p.add_argument("--split-seed", type=nonnegative_int)
    p.add_argument("--s-test", type=positive_int)

    p = sub.add_parser("benchmark", help="Run a dataset x layers x seed grid")
    p.add_argument("--data", required=True, help="CSV file(s), comma separated")
    p.add_argument("--target")
    _add_model_flags(p)
    p.add_argument("--layers-list", type=int_list, default=[2])
    p.add_argument("--seeds", type=positive_int, default=3, help="Number of split seeds (0..n-1)")
    p.add_argument("--test-frac", type=fraction)
    p.add_argument("--workers", type=positive_int, default=1)
    p.add_argument("--out", default="results/benchmark.jsonl")

    p = sub.add_parser("plot-data", help="Predictive mean and +/-2 std on a 1-D grid")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--grid-min", type=finite_float, default=-2.0)
    p.add_argument("--grid-max", type=finite_float, default=2.0)
    p.add_argument("--grid-n", type=positive_int, default=200)
    p.add_argument("--s-test", type=positive_int)
    p.add_argument("--out", required=True)
    p.add_argument("--flow-curve", help="Also write f against G(f) for every hidden layer to this file")
    p.add_argument("--f-min", type=finite_float, default=-3.0)
    p.add_argument("--f-max", type=finite_float, default=3.0)

    p = sub.add_parser("time", help="Wall-clock time of training iterations")
    _add_data_flags(p)
    p.add_argument("--config", help="Experiment YAML file (flags override its values)")
    p.add_argument("--layers", type=int_list, help="Comma-separated layer counts (default: from the config)")
    p.add_argument("--flow", type=flow_list, help="Comma-separated flows (default: from the config)")
    p.add_argument("--m", type=positive_int)
    p.add_argument("--batch", type=positive_int)
    p.add_argument("--iters", type=nonnegative_int, default=1000)
    p.add_argument("--seed", type=nonnegative_int)
    return parser


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------

def setup_logging(level: str = "INFO", fmt: str = LOG_FORMAT):
    logging.basicConfig(level=getattr(logging, str(level).upper(), logging.INFO), format=fmt, force=True)


def _load_config(args) -> Dict[str, Any]:
    if getattr(args, "config", None):
        return ConfigLoader.load_experiment_config(args.config)
    return ConfigLoader.get_default_config()


def _apply_flags(config: Dict[str, Any], args) -> Dict[str, Any]:
    """CLI flags override the configuration file."""
    model = config["model"]
    training = config["training"]
    overrides = {
        ("model", "layers"): getattr(args, "layers", None),
        ("model", "flow"): getattr(args, "flow", None),
        ("model", "m_inducing"): getattr(args, "m", None),
        ("model", "n_samples_train"): getattr(args, "s_train", None),
        ("model", "n_samples_test"): getattr(args, "s_test", None),
        ("training", "batch_size"): getattr(args, "batch", None),
        ("training", "learning_rate"): getattr(args, "lr", None),
        ("training", "iterations"): getattr(args, "iters", None),
        ("training", "seed"): getattr(args, "seed", None),
        ("training", "log_every"): getattr(args, "log_every", None),
        ("data", "test_fraction"): getattr(args, "test_frac", None),
        ("data", "target"): getattr(args, "target", None),
    }
    sections = {"model": model, "training": training, "data": config["data"]}
    for (section, key), value in overrides.items():
        if value is not None:
            sections[section][key] = value
    if getattr(args, "layers", None) is not None or getattr(args, "flow", None) is not None:
        model["layer_flows"] = []
    return config


def _print_metrics(title: str, values: Dict[str, Any]):
    table = Table(title=title)
    table.add_column("Metric", style="cyan", no_wrap=True)
    table.add_column("Value", style="white")
    for key, value in values.items():
        table.add_row(key, f"{value:.6g}" if isinstance(value, float) else str(value))
    console.print(table)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_gen_toy(args) -> int:
    dataset = gen_toy_step(args.n, args.noise, args.seed)
    path = write_csv(dataset, args.out)
    console.print(f"✅ Wrote {dataset.n} toy points to {path}")
    return EXIT_OK


def cmd_train(args) -> int:
    config = _apply_flags(_load_config(args), args)
    model_config, train_config = ConfigLoader.to_configs(config)
    if args.verbose:
        train_config.debug_tape = True
    dataset = load_csv(args.data, config["data"].get("target"))
    split_seed = args.split_seed if args.split_seed is not None else train_config.seed
    split = standardize(dataset, make_split(dataset.n, split_seed, config["data"]["test_fraction"]))

    result = fit(model_config, train_config, split, metrics_path=args.metrics, checkpoint_path=args.out_checkpoint)
    final = result.metrics[-1]
    _print_metrics(f"{model_config.tag} on {dataset.name} (split seed {split_seed})", {
        "iterations": final.iteration,
        "elbo": final.elbo_estimate,
        "test_nll": final.test_nll,
        "test_rmse": final.test_rmse,
        "coverage_95": result.evaluation.coverage if result.evaluation else float("nan"),
        "skipped_batches": result.skipped_steps,
        "elapsed_s": final.elapsed_seconds,
    })
    if args.out_checkpoint:
        console.print(f"✅ Checkpoint saved to: {args.out_checkpoint}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model, metadata = load_checkpoint(args.checkpoint)
    dataset = load_csv(args.data, args.target)
    if dataset.input_dim != model.input_dim:
        raise ContractError(f"data has {dataset.input_dim} features, model expects {model.input_dim}")
    split_seed = args.split_seed if args.split_seed is not None else int(metadata.get("split_seed", 0))
    test_fraction = float(metadata.get("test_fraction", 0.1))
    split = standardize(dataset, make_split(dataset.n, split_seed, test_fraction))
    result = evaluate(model, split.x_test, split.y_test, args.s_test, split.norm.mean_y, split.norm.std_y,
                      seed=split_seed)
    _print_metrics(f"{model.config.tag} on {dataset.name} (split seed {split_seed})", {
        "test_points": result.n_points,
        "nll": result.nll,
        "rmse": result.rmse,
        "coverage_95": result.coverage,
    })
    return EXIT_OK


def run_benchmark_cell(cell: Dict[str, Any]) -> Dict[str, Any]:
    """One (dataset, layers, seed) run; top level so worker processes can import it."""
    config = cell["config"]
    model_config, train_config = ConfigLoader.to_configs(config)
    dataset = load_csv(cell["data"], config["data"].get("target"))
    split = standardize(dataset, make_split(dataset.n, cell["seed"], config["data"]["test_fraction"]))
    start = time.perf_counter()
    result = fit(model_config, train_config, split, metrics_path=cell.get("metrics_path"))
    elapsed = time.perf_counter() - start
    row = ResultRow(
        dataset=dataset.name,
        split_seed=cell["seed"],
        model_tag=model_config.tag,
        flow=model_config.flow,
        layers=model_config.layers,
        m_inducing=model_config.m_inducing,
        iterations=train_config.iterations,
        nll=result.evaluation.nll,
        rmse=result.evaluation.rmse,
        elapsed_s=elapsed,
    )
    return asdict(row)


def _benchmark_cells(args, config: Dict[str, Any]) -> List[Dict[str, Any]]:
    out = Path(args.out)
    cells = []
    for data in [d.strip() for d in args.data.split(",") if d.strip()]:
        for layers in args.layers_list:
            for seed in range(args.seeds):
                cell_config = {
                    "model": dict(config["model"], layers=layers, layer_flows=[], widths=[]),
                    "training": dict(config["training"], seed=seed),
                    "data": dict(config["data"]),
                }
                metrics_path = out.parent / f"{out.stem}_cells" / f"{Path(data).stem}_L{layers}_seed{seed}.jsonl"
                cells.append({"data": data, "seed": seed, "config": cell_config, "metrics_path": str(metrics_path)})
    return cells


def cmd_benchmark(args) -> int:
    config = _apply_flags(_load_config(args), args)
    ConfigLoader.to_configs(config)
    cells = _benchmark_cells(args, config)
    console.print(Panel.fit(
        f"📊 {len(cells)} runs: layers {args.layers_list} x {args.seeds} seeds, "
        f"flow {config['model']['flow']}, {config['training']['iterations']} iterations each",
        style="bold blue",
    ))

    if args.workers > 1:
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            raw_rows = list(pool.map(run_benchmark_cell, cells))
    else:
        raw_rows = [run_benchmark_cell(cell) for cell in cells]
    rows = [ResultRow.from_dict(r) for r in raw_rows]
    results_path, summary_path = write_results(rows, args.out)

    summary = summarize_results(rows)
    table = Table(title="Benchmark summary (mean ± std/√n)")
    for column, style in [("Dataset", "cyan"), ("Model", "green"), ("NLL", "white"), ("RMSE", "white"), ("n", "yellow")]:
        table.add_column(column, style=style)
    for record in summary.itertuples(index=False):
        table.add_row(
            record.dataset, record.model_tag,
            f"{record.nll_mean:.4f} ± {record.nll_err:.4f}",
            f"{record.rmse_mean:.4f} ± {record.rmse_err:.4f}",
            str(record.n),
        )
    console.print(table)
    iterations = config["training"]["iterations"]
    if iterations < REFERENCE_ITERATIONS:
        console.print(
            f"⚠️  Desk-scale run: {iterations} iterations per cell versus {REFERENCE_ITERATIONS} "
            f"(and 20 splits) in the reference protocol; treat the numbers as a sanity band."
        )
    console.print(f"✅ Results: {results_path}  Summary: {summary_path}")
    return EXIT_OK


def cmd_plot_data(args) -> int:
    model, metadata = load_checkpoint(args.checkpoint)
    if model.input_dim != 1:
        raise ContractError(f"plot-data needs a 1-D input model, checkpoint has {model.input_dim} inputs")
    if args.grid_max <= args.grid_min:
        raise ContractError("--grid-max must exceed --grid-min")
    if args.flow_curve:
        if args.f_max <= args.f_min:
            raise ContractError("--f-max must exceed --f-min")
        if len(model.layers) < 2:
            raise ContractError("--flow-curve needs a model with at least one hidden layer")
    norm = NormStats.from_dict(metadata["norm_stats"]) if "norm_stats" in metadata else None

    grid = np.linspace(args.grid_min, args.grid_max, args.grid_n)
    x = grid[:, None] if norm is None else norm.standardize_x(grid[:, None])
    mixture = model.predict(x, NoiseSource(int(metadata.get("split_seed", 0))), args.s_test, step=EVAL_STEP)
    if norm is not None:
        mixture = mixture.rescaled(norm.mean_y, norm.std_y)
    mean = mixture.mean()
    std = np.sqrt(mixture.variance())
    columns = np.column_stack([grid, mean, mean - 2.0 * std, mean + 2.0 * std])

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    np.savetxt(out, columns, fmt="%.10g", header="x mean lower upper", comments="")
    console.print(f"✅ Wrote {args.grid_n} grid points to {out}")

    if args.flow_curve:
        f = np.linspace(args.f_min, args.f_max, args.grid_n)
        curves = model.flow_curves(f)
        curve_out = Path(args.flow_curve)
        curve_out.parent.mkdir(parents=True, exist_ok=True)
        np.savetxt(curve_out, np.column_stack([f] + list(curves.values())), fmt="%.10g",
                   header=" ".join(["f"] + list(curves)), comments="")
        console.print(f"✅ Wrote flow curves of {len(curves)} hidden output(s) to {curve_out}")
    return EXIT_OK


def cmd_time(args) -> int:
    config = _apply_flags(_load_config(args), argparse.Namespace(
        m=args.m, batch=args.batch, seed=args.seed, target=args.target))
    base, train_config = ConfigLoader.to_configs(config)
    dataset = load_csv(args.data, config["data"].get("target"))
    split = standardize(dataset, make_split(dataset.n, train_config.seed, config["data"]["test_fraction"]))

    table = Table(title=f"{args.iters} training iterations (M={base.m_inducing}, B={train_config.batch_size})")
    for column in ("Layers", "Flow", "Seconds", "ms / iteration"):
        table.add_column(column)
    timings = {}
    for layers in args.layers or [base.layers]:
        for flow in args.flow or [base.flow]:
            model_config = base
            if args.layers or args.flow:
                widths = base.widths if layers == base.layers else []
                model_config = replace(base, layers=layers, flow=flow, widths=widths, layer_flows=[]).check()
            elapsed = time_iterations(model_config, split, args.iters, train_config)
            timings[(layers, flow)] = elapsed
            per_iter = 1000.0 * elapsed / args.iters if args.iters else 0.0
            table.add_row(str(layers), flow, f"{elapsed:.3f}", f"{per_iter:.3f}")
    console.print(table)
    baseline_key = next(iter(timings))
    baseline = timings[baseline_key]
    if len(timings) > 1 and baseline > 0.0:
        for (layers, flow), elapsed in timings.items():
            if (layers, flow) != baseline_key:
                console.print(f"  {layers}-layer {flow} / {baseline_key[0]}-layer {baseline_key[1]}: "
                              f"{elapsed / baseline:.2f}x")
    return EXIT_OK


COMMANDS = {
    "gen-toy": cmd_gen_toy,
    "train": cmd_train,
    "eval": cmd_eval,
    "benchmark": cmd_benchmark,
    "plot-data": cmd_plot_data,
    "time": cmd_time,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(list(argv) if argv is not None else None)
    except _UsageError as e:
        console.print(f"❌ {e}", soft_wrap=True)
        return EXIT_USAGE
    except SystemExit as e:
        # --help
        return int(e.code or 0)

    if args.env_file:
        ConfigLoader.load_environment(args.env_file)
    level = "DEBUG" if args.verbose else "WARNING" if args.quiet else "INFO"
    if getattr(args, "config", None) and not (args.verbose or args.quiet):
        try:
            level = ConfigLoader.load_experiment_config(args.config)["logging"]["level"]
        except ConfigurationError:
            pass
    setup_logging(level)

    try:
        return COMMANDS[args.command](args)
    except (ConfigurationError, ContractError, IngestionError) as e:
        console.print(Panel(str(e), title="❌ Invalid input", style="red"))
        return EXIT_USAGE
    except TrainingAborted as e:
        console.print(Panel(f"{e}\n{len(e.metrics)} metric row(s) were kept.", title="❌ Training aborted", style="red"))
        return EXIT_RUNTIME
    except (CheckpointError, DTGPError, ArithmeticError, OSError) as e:
        logger.error(f"{args.command} failed: {e}", exc_info=args.verbose)
        console.print(Panel(str(e), title="❌ Error", style="red"))
        return EXIT_RUNTIME
    except KeyboardInterrupt:
        console.print("\n👋 Interrupted")
        return EXIT_RUNTIME
