"""
Command line entry point.

Usage:
    nutriscreen prepare --input survey.csv --out dataset.csv
    nutriscreen synth --n 6416 --mode marginal --out synth.csv
    nutriscreen select --dataset dataset.csv --out features.json
    nutriscreen train --dataset dataset.csv --model tabnet --out tabnet.json
    nutriscreen evaluate --dataset test.csv --model-file tabnet.json
    nutriscreen --config bench.json --out-dir runs/demo benchmark --dataset dataset.csv
    nutriscreen report --run-dir runs/demo
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Sequence

from .const import (
    CALIBRATION_BINS,
    DEFAULT_BORUTA_ALPHA,
    DEFAULT_BORUTA_ITERATIONS,
    DEFAULT_OVERRIDES,
    DEFAULT_RANK_THRESHOLD,
    DEFAULT_SEED,
    DEFAULT_SELECTION_METHODS,
    DEFAULT_SYNTH_ROWS,
    DEFAULT_SYNTH_SEED,
)
from .data_model import Dataset
from .errors import ConfigInvalid, ExitCode, NutriscreenError, ValidationError
from .feature_select import run_selection
from .harness import (
    BenchmarkConfig,
    MODEL_CATALOG,
    emit_report,
    load_model,
    run_benchmark,
    save_model,
    train_model,
    write_run,
)
from .metrics_eval import calibration_curve, evaluate_model
from .preprocess import derive_labels, encode, load_schema, province_prevalence, read_survey_csv
from .synth import MODE_MARGINAL, MODE_PLANTED, SynthRequest

_LOGGER = logging.getLogger(__name__)


def _csv_list(value: str) -> list[str]:
    return [item.strip() for item in value.split(",") if item.strip()]


def _load_features(path: str | None) -> list[str] | None:
    """Feature names from a select output (its "selected" list) or a plain JSON list."""
    if path is None:
        return None
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    return list(data["selected"] if isinstance(data, dict) else data)


def _read_config(args: argparse.Namespace) -> dict[str, Any]:
    if not args.config:
        return {}
    try:
        return json.loads(Path(args.config).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as err:
        raise ConfigInvalid(f"cannot read config {args.config}: {err}") from err


def _out(args: argparse.Namespace, given: str | None, default_name: str) -> Path:
    return Path(given) if given else Path(args.out_dir or ".") / default_name


# =============================================================================
# Subcommands
# =============================================================================

def cmd_prepare(args: argparse.Namespace) -> int:
    raw = read_survey_csv(args.input)
    schema, encodings = load_schema(args.schema)
    dataset = encode(raw, schema, encodings)
    out = _out(args, args.out, "dataset.csv")
    dataset.to_csv(out)
    print(f"Encoded {dataset.n_rows} rows x {dataset.n_cols} features -> {out}")
    print(f"Malnourished: {int(dataset.labels.sum())} ({dataset.prevalence:.2%})")

    if "province" in raw.columns and all(c in raw.columns for c in ("waz", "haz", "whz")):
        table = province_prevalence(raw)
        table_path = out.parent / "province_prevalence.csv"
        table.to_csv(table_path, index=False, float_format="%.6g")
        print(f"Province prevalence -> {table_path}")
        labels = derive_labels(raw)
        for column in ("underweight", "stunted", "wasted"):
            print(f"  {column}: {labels[column].mean():.2%}")
    return ExitCode.SUCCESS


def cmd_synth(args: argparse.Namespace) -> int:
    seed = args.seed if args.seed is not None else DEFAULT_SYNTH_SEED
    frame = SynthRequest(n=args.n, seed=seed, mode=args.mode, strength=args.strength).run()
    out = _out(args, args.out, "synth.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(out, index=False, lineterminator="\n")
    print(f"Generated {len(frame)} synthetic rows ({args.mode}, seed {seed}) -> {out}")
    return ExitCode.SUCCESS


def cmd_select(args: argparse.Namespace) -> int:
    dataset = Dataset.read_csv(args.dataset)
    result = run_selection(
        dataset,
        methods=args.methods,
        iterations=args.boruta_iters,
        alpha=args.alpha,
        rank_threshold=args.rank_threshold,
        overrides=args.overrides,
        seed=args.seed if args.seed is not None else DEFAULT_SEED,
        n_jobs=args.n_jobs,
    )
    out = _out(args, args.out, "features.json")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(result.to_json(), encoding="utf-8")
    selected = result.consensus.selected_features
    print(f"Selected {len(selected)} of {dataset.n_cols} features -> {out}")
    for name in selected:
        print(f"  {name}")
    return ExitCode.SUCCESS


def cmd_train(args: argparse.Namespace) -> int:
    dataset = Dataset.read_csv(args.dataset)
    features = _load_features(args.features)
    if features:
        dataset = dataset.select(features)
    params = json.loads(args.params) if args.params else {}
    seed = args.seed if args.seed is not None else DEFAULT_SEED
    model = train_model(args.model, dataset, seed, params)
    out = _out(args, args.out, f"{args.model}.json")
    save_model(model, out, args.model)
    print(f"Trained {args.model} on {dataset.n_rows} rows -> {out}")
    return ExitCode.SUCCESS


def cmd_evaluate(args: argparse.Namespace) -> int:
    dataset = Dataset.read_csv(args.dataset)
    model = load_model(args.model_file)
    features = _load_features(args.features)
    if features:
        dataset = dataset.select(features)
    name = args.name or Path(args.model_file).stem
    report = evaluate_model(model, dataset, name=name, split=args.split)
    out = _out(args, args.out, f"{name}_report.json")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.to_json(), encoding="utf-8")
    curve = calibration_curve(dataset.labels, model.score(dataset.features), args.bins)
    curve.to_frame().to_csv(out.with_name(f"{name}_calibration.csv"), index=False, float_format="%.10g")
    for metric, value in report.metrics.to_dict().items():
        if metric != "undefined":
            print(f"{metric:>18}: {value:.4f}")
    return ExitCode.SUCCESS


def cmd_benchmark(args: argparse.Namespace) -> int:
    settings = _read_config(args)
    if args.seed is not None:
        settings["seed"] = args.seed
    if args.roster:
        settings["roster"] = args.roster
    if args.protocol:
        settings["protocol"] = args.protocol
    if args.folds:
        settings["folds"] = args.folds
    if args.n_jobs:
        settings["n_jobs"] = args.n_jobs
    if args.no_consensus:
        settings["consensus"] = False
    if args.tune:
        settings["tune"] = True
    features = _load_features(args.features)
    if features:
        settings["features"] = features
    if args.out_dir:
        settings["out_dir"] = args.out_dir
    cfg = BenchmarkConfig.from_mapping(settings)

    dataset = Dataset.read_csv(args.dataset)
    result = run_benchmark(cfg, dataset)
    run_dir = write_run(result, cfg.out_dir)
    report = emit_report(run_dir)
    print(result.leaderboard[["model", "family", "status", "f1", "recall", "roc_auc"]].to_string(index=False))
    print(f"\nReport -> {report}")
    if result.failures:
        print(f"{len(result.failures)} model(s) failed: {', '.join(sorted(result.failures))}")
        return ExitCode.PARTIAL_FAILURE
    return ExitCode.SUCCESS


def cmd_report(args: argparse.Namespace) -> int:
    run_dir = args.run_dir or args.out_dir
    if not run_dir:
        raise ConfigInvalid("report needs --run-dir or --out-dir")
    print(f"Report -> {emit_report(run_dir)}")
    return ExitCode.SUCCESS


# =============================================================================
# Parser
# =============================================================================

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nutriscreen",
        description="Child malnutrition screening from household survey data",
    )
    parser.add_argument("--seed", type=int, default=None, help="Random seed (overrides config)")
    parser.add_argument("--config", help="Benchmark config JSON file")
    parser.add_argument("--out-dir", help="Output directory")
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true", help="Debug logging")
    verbosity.add_argument("-q", "--quiet", action="store_true", help="Warnings only")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="Encode a raw survey extract")
    p.add_argument("--input", required=True, help="Raw survey CSV")
    p.add_argument("--schema", help="Schema JSON (bundled default when omitted)")
    p.add_argument("--out", help="Encoded dataset CSV")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("synth", help="Generate a synthetic survey extract")
    p.add_argument("--n", type=int, default=DEFAULT_SYNTH_ROWS, help="Rows to generate")
    p.add_argument("--mode", choices=(MODE_MARGINAL, MODE_PLANTED), default=MODE_MARGINAL)
    p.add_argument("--strength", choices=("moderate", "strong"), default="moderate")
    p.add_argument("--out", help="Output CSV")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("select", help="Run the feature-selection ensemble")
    p.add_argument("--dataset", required=True)
    p.add_argument("--boruta-iters", type=int, default=DEFAULT_BORUTA_ITERATIONS)
    p.add_argument("--alpha", type=float, default=DEFAULT_BORUTA_ALPHA)
    p.add_argument("--rank-threshold", type=float, default=DEFAULT_RANK_THRESHOLD)
    p.add_argument("--overrides", type=_csv_list, default=list(DEFAULT_OVERRIDES))
    p.add_argument("--methods", type=_csv_list, default=list(DEFAULT_SELECTION_METHODS))
    p.add_argument("--n-jobs", type=int, default=1)
    p.add_argument("--out", help="Output JSON")
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("train", help="Train one catalog model")
    p.add_argument("--dataset", required=True)
    p.add_argument("--model", required=True, choices=sorted(MODEL_CATALOG))
    p.add_argument("--features", help="features.json from select")
    p.add_argument("--params", help="Hyperparameter overrides as a JSON object")
    p.add_argument("--out", help="Model JSON")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="Evaluate a saved model")
    p.add_argument("--dataset", required=True)
    p.add_argument("--model-file", required=True)
    p.add_argument("--features", help="features.json used at training time")
    p.add_argument("--name", help="Model name in the report")
    p.add_argument("--split", default="test")
    p.add_argument("--bins", type=int, default=CALIBRATION_BINS)
    p.add_argument("--out", help="Report JSON")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("benchmark", help="Train and evaluate the model roster")
    p.add_argument("--dataset", required=True)
    p.add_argument("--features", help="features.json from select")
    p.add_argument("--roster", type=_csv_list, help="Comma-separated model names")
    p.add_argument("--protocol", choices=("holdout", "kfold"))
    p.add_argument("--folds", type=int)
    p.add_argument("--n-jobs", type=int)
    p.add_argument("--tune", action="store_true", help="Inner 3-fold grid search per model")
    p.add_argument("--no-consensus", action="store_true", help="Skip consensus importance")
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("report", help="Render report.md for a run directory")
    p.add_argument("--run-dir")
    p.set_defaults(func=cmd_report)
    return parser


def configure_logging(verbose: bool, quiet: bool) -> None:
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.verbose, args.quiet)
    try:
        return int(args.func(args))
    except ValidationError as err:
        _LOGGER.error("%s", err)
        return ExitCode.VALIDATION_ERROR
    except NutriscreenError as err:
        _LOGGER.error("Computation failed: %s", err)
        return ExitCode.INTERNAL_ERROR
    except (OSError, json.JSONDecodeError) as err:
        _LOGGER.error("%s", err)
        return ExitCode.VALIDATION_ERROR


if __name__ == "__main__":
    sys.exit(main())
