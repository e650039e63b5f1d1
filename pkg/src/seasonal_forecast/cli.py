"""Command-line entry point.

Exit codes: 0 success, 2 unreadable input (format or formula syntax),
3 invalid data or arguments, 4 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .expr import (
    VARIABLES,
    ExprSyntaxError,
    FunctionSet,
    MutationRates,
    TerminalSet,
    UnknownVariableError,
    evaluate_columns,
    load_formulas,
    to_text,
)
from .gp_engine import GPConfig, archive_tsv, evaluate_archive, evolve, split_train_validation
from .metrics import FoldError, cross_validate, sensitivity, sensitivity_csv
from .mlp import MLPModel, TrainConfig, TrainingDiverged, load_model, predict_encoded, save_model, size_search
from .weather_data import (
    DataFormatError,
    DataValidationError,
    StationConflictError,
    aggregate_station,
    build_dataset,
    columns,
    format_feature_csv,
    monthly_from_daily,
    parse_daily_csv,
    parse_feature_csv,
    parse_monthly_csv,
    parse_offsets_csv,
    read_feature_columns,
)

log = logging.getLogger("seasonal_forecast")

EXIT_OK, EXIT_FORMAT, EXIT_VALIDATION, EXIT_RUNTIME = 0, 2, 3, 4


class CLIError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _read(path: str) -> str:
    try:
        return Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise CLIError(f"cannot read {path}: {exc.strerror}", EXIT_VALIDATION) from None


def _write(out_dir: Path, name: str, text: str) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / name
    path.write_text(text, encoding="utf-8")
    return path


def _echo(command: str, config: dict) -> list[str]:
    return [f"seasonal-forecast {__version__} {command}", "config: " + json.dumps(config, sort_keys=True)]


def _with_header(lines: Sequence[str], body: str) -> str:
    return "".join(f"# {ln}\n" for ln in lines) + body


def _load_rows(path: str, need_target: bool = True):
    rows = parse_feature_csv(_read(path))
    if need_target and any(r.mstny is None for r in rows):
        raise CLIError(f"{path}: every row needs an mstny target", EXIT_VALIDATION)
    return rows


def _overrides(args, mapping: dict[str, str]) -> dict:
    out = {}
    for attr, key in mapping.items():
        v = getattr(args, attr, None)
        if v is not None:
            out[key] = v
    return out


# -- commands --------------------------------------------------------------------------


def cmd_features(args, cfg: dict) -> int:
    if not args.daily and not args.monthly:
        raise CLIError("give at least one --daily or --monthly file", EXIT_VALIDATION)
    threshold = args.rainy_threshold if args.rainy_threshold is not None else cfg.get("rainy_threshold_mm", 1.0)
    coverage = args.min_coverage if args.min_coverage is not None else cfg.get("min_coverage", 0.8)

    by_station: dict[str, list] = {}
    for path in args.daily or []:
        daily = parse_daily_csv(_read(path))
        groups: dict[str, list] = {}
        for r in daily:
            groups.setdefault(r.station_id, []).append(r)
        for sid, recs in groups.items():
            by_station.setdefault(sid, []).extend(monthly_from_daily(recs, threshold))
    for path in args.monthly or []:
        for m in parse_monthly_csv(_read(path)):
            by_station.setdefault(m.station_id, []).append(m)

    for sid, months in by_station.items():
        keys = [(m.year, m.month) for m in months]
        if len(keys) != len(set(keys)):
            raise CLIError(f"station {sid}: the same month is supplied more than once", EXIT_VALIDATION)

    offsets = parse_offsets_csv(_read(args.offsets)) if args.offsets else None
    stations = {sid: aggregate_station(months, coverage) for sid, months in sorted(by_station.items())}
    rows = build_dataset(stations, offsets)

    params = {"rainy_threshold_mm": threshold, "min_coverage": coverage}
    path = _write(args.out, "features.csv", _with_header(_echo("features", params), format_feature_csv(rows)))
    print(f"{len(rows)} feature rows written to {path}")
    for sid, st in stations.items():
        print(f"station {sid}: {len(st.missing_seasons)} season(s) and {len(st.missing_years)} year(s) skipped for low coverage")
        if st.missing_years:
            print(f"  years without a yearly mean: {_ranges(st.missing_years)}")
    return EXIT_OK


def _ranges(years: Sequence[int]) -> str:
    years = sorted(years)
    out, start = [], years[0]
    for a, b in zip(years, years[1:] + [None]):
        if b != a + 1:
            out.append(str(start) if start == a else f"{start}-{a}")
            start = b
    return ", ".join(out)


def _train_config(args, cfg: dict, seed: int) -> TrainConfig:
    base = {f.name: getattr(TrainConfig(), f.name) for f in fields(TrainConfig)}
    base.update(cfg.get("mlp", {}))
    base.update(_overrides(args, {
        "learning_rate": "learning_rate", "momentum": "momentum",
        "epochs": "epochs", "init_range": "init_range",
    }))
    base["seed"] = seed
    return TrainConfig(**base)


def cmd_train_mlp(args, cfg: dict) -> int:
    rows = _load_rows(args.features)
    seed = _seed(args, cfg)
    k = args.k if args.k is not None else cfg.get("k", 10)
    jobs = _jobs(args, cfg)
    if k < 2 or len(rows) < 2 * k:
        raise CLIError(f"need k >= 2 and at least 2*k rows (k={k}, rows={len(rows)})", EXIT_VALIDATION)
    tc = _train_config(args, cfg, seed)
    hidden = args.hidden if args.hidden is not None else cfg.get("hidden")

    search_csv = None
    if hidden is None:
        tr, va = split_train_validation(rows, 0.9, seed)
        result = size_search(tr, va, tc)
        hidden = result.hidden
        search_csv = "hidden,train_error_pct,validation_error_pct\n" + "".join(
            f"{h},{a!r},{b!r}\n" for h, a, b in result.history
        )
    params = {"seed": seed, "k": k, "hidden": hidden, "mlp": asdict(tc)}
    header = _echo("train-mlp", params)

    def factory(train_rows, fold_seed):
        model = MLPModel.fit(train_rows, (hidden,), replace(tc, seed=fold_seed))
        return model.predict

    report = cross_validate(factory, rows, k, seed, n_jobs=jobs)
    final = MLPModel.fit(rows, (hidden,), tc)
    pred = final.predict(rows)

    _write(args.out, "cv_report.csv", _with_header(header, report.to_csv()))
    _write(args.out, "model.mlp", save_model(final))
    _write(args.out, "mlp_pairs.csv", _with_header(header, _pairs(rows, pred)))
    if search_csv:
        _write(args.out, "size_search.csv", _with_header(header, search_csv))
    print(f"architecture 8-{hidden}-1; {k}-fold mean error {report.mean_error:.2f}%, mean R^2 {report.mean_r2:.3f}")
    return EXIT_OK


def _pairs(rows, pred) -> str:
    return "expected,predicted\n" + "".join(f"{r.mstny!r},{float(p)!r}\n" for r, p in zip(rows, pred))


def _gp_config(args, cfg: dict, seed: int, jobs: int) -> GPConfig:
    base = dict(cfg.get("gp", {}))
    try:
        if "init_depth" in base:
            base["init_depth"] = tuple(base["init_depth"])
        if "mutation" in base:
            base["mutation"] = MutationRates(**base["mutation"])
        if "terminals" in base:
            terms = dict(base["terminals"])
            if "variables" in terms:
                terms["variables"] = tuple(terms["variables"])
            base["terminals"] = TerminalSet(**terms)
    except (TypeError, ValueError) as exc:
        raise CLIError(f"inconsistent GP configuration: {exc}", EXIT_RUNTIME) from None
    base.update(_overrides(args, {
        "population": "population_size", "generations": "generations",
        "tournament": "tournament_size", "depth_max": "depth_max",
        "split": "split_fraction", "stop_mse": "stop_mse",
    }))
    base["seed"] = seed
    base["n_jobs"] = jobs
    try:
        return GPConfig(**base)
    except (TypeError, ValueError) as exc:
        raise CLIError(f"inconsistent GP configuration: {exc}", EXIT_RUNTIME) from None


def cmd_evolve(args, cfg: dict) -> int:
    rows = _load_rows(args.features)
    if len(rows) < 10:
        raise CLIError(f"evolve needs at least 10 rows, got {len(rows)}", EXIT_VALIDATION)
    seed = _seed(args, cfg)
    gc = _gp_config(args, cfg, seed, _jobs(args, cfg))
    gaussian = bool(args.enable_gaussian or cfg.get("enable_gaussian", False))
    fs = FunctionSet.standard(gaussian=gaussian)
    train_rows, valid_rows = split_train_validation(rows, gc.split_fraction, seed)

    progress = ["generation,best_mse,archive_size"]
    archive = evolve(gc, train_rows, fs, lambda g, b, a: progress.append(f"{g},{b!r},{a}"))
    reports = evaluate_archive(archive, valid_rows)

    params = gc.describe()
    params.pop("n_jobs")
    header = _echo("evolve", {"gp": params}) + [
        "function_set: " + " ".join(fs.primitives) + (" (extended with gauss)" if gaussian else ""),
        f"rows: {len(train_rows)} train, {len(valid_rows)} validation",
        "complexity\ttrain_mse\tvalidation_mse\tr2\tformula",
    ]
    _write(args.out, "archive.tsv", archive_tsv(reports, header))
    _write(args.out, "progress.csv", "\n".join(progress) + "\n")
    if args.select is not None:
        try:
            member = archive.by_complexity(args.select)
        except KeyError as exc:
            raise CLIError(str(exc.args[0]), EXIT_VALIDATION) from None
        pred = evaluate_columns(member.tree, columns(rows), len(rows))
        _write(args.out, "gp_pairs.csv", _with_header(header[:2] + [f"formula: {to_text(member.tree)}"], _pairs(rows, pred)))
    for r in reports:
        print(f"{r.complexity:4d}  train {r.train_mse:.4g}  valid {r.validation_mse:.4g}  R2 {r.r2:.3f}  {r.formula}")
    return EXIT_OK


def _first_formula(path: str):
    formulas = load_formulas(_read(path))
    if not formulas:
        raise CLIError(f"{path}: no formula found", EXIT_FORMAT)
    return formulas[0]


def cmd_sensitivity(args, cfg: dict) -> int:
    formula = _first_formula(args.formula)
    rows = _load_rows(args.features, need_target=False)
    try:
        table = sensitivity(formula, rows)
    except ValueError as exc:
        raise CLIError(f"sensitivity failed: {exc}", EXIT_RUNTIME) from None
    header = _echo("sensitivity", {}) + [f"formula: {to_text(formula)}"]
    _write(args.out, "sensitivity.csv", _with_header(header, sensitivity_csv(table)))
    for r in table:
        print(
            f"{r.variable:6s} {r.sensitivity:.5g}  +{r.pct_positive:.0f}% ({r.positive_magnitude:.5g})"
            f"  -{r.pct_negative:.0f}% ({r.negative_magnitude:.5g})"
        )
    return EXIT_OK


def cmd_predict(args, cfg: dict) -> int:
    text = _read(args.model)
    cols, actual, keys = read_feature_columns(_read(args.features))
    n = len(keys)
    first = next((ln.strip() for ln in text.splitlines() if ln.strip()), "")
    if first == "mlp v1":
        model = load_model(text)
        missing = [v for v in VARIABLES if v not in cols]
        if missing:
            raise CLIError(f"features file lacks columns for {missing}", EXIT_VALIDATION)
        raw = np.column_stack([cols[v] for v in VARIABLES]) if n else np.zeros((0, 8))
        pred = predict_encoded(model.net, model.scaler.transform(raw)) if n else np.zeros(0)
        source = "mlp"
    else:
        formula = _first_formula(args.model)
        try:
            pred = evaluate_columns(formula, cols, n)
        except UnknownVariableError as exc:
            raise CLIError(f"formula uses {exc.args[0]}, which the features file does not provide", EXIT_VALIDATION) from None
        source = to_text(formula)
    lines = ["year,season_code,predicted_mstny" + (",actual" if actual is not None else "")]
    for i, (y, s) in enumerate(keys):
        line = f"{y},{s},{float(pred[i])!r}"
        if actual is not None:
            line += f",{float(actual[i])!r}"
        lines.append(line)
    header = _echo("predict", {}) + [f"model: {source}"]
    path = _write(args.out, "predictions.csv", _with_header(header, "\n".join(lines) + "\n"))
    print(f"{n} predictions written to {path}")
    return EXIT_OK


# -- plumbing --------------------------------------------------------------------------


def _seed(args, cfg) -> int:
    return args.seed if args.seed is not None else int(cfg.get("seed", 0))


def _jobs(args, cfg) -> int:
    return args.jobs if args.jobs is not None else int(cfg.get("jobs", 1))


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="random seed (default 0)")
    common.add_argument("--config", default=argparse.SUPPRESS, help="JSON config file; flags override it")
    common.add_argument("--out", type=Path, default=argparse.SUPPRESS, help="output directory (default .)")
    common.add_argument("--jobs", type=int, default=argparse.SUPPRESS, help="worker threads (results do not depend on it)")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    parser = argparse.ArgumentParser(prog="seasonal-forecast", parents=[common], description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("features", parents=[common], help="build the feature CSV from station records")
    p.add_argument("--daily", action="append", help="daily CSV (repeatable)")
    p.add_argument("--monthly", action="append", help="monthly CSV (repeatable)")
    p.add_argument("--offsets", help="station offset CSV")
    p.add_argument("--rainy-threshold", type=float, help="wet-day threshold in mm (default 1.0)")
    p.add_argument("--min-coverage", type=float, help="minimum day coverage for an aggregate (default 0.8)")
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("train-mlp", parents=[common], help="size, cross-validate and fit the perceptron")
    p.add_argument("features")
    p.add_argument("--k", type=int, help="folds (default 10)")
    p.add_argument("--hidden", type=int, help="fix the hidden width and skip the size search")
    p.add_argument("--epochs", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--init-range", type=float)
    p.set_defaults(func=cmd_train_mlp)

    p = sub.add_parser("evolve", parents=[common], help="run symbolic regression and export the Pareto archive")
    p.add_argument("features")
    p.add_argument("--population", type=int)
    p.add_argument("--generations", type=int)
    p.add_argument("--tournament", type=int)
    p.add_argument("--depth-max", type=int)
    p.add_argument("--split", type=float, help="training fraction (default 0.9)")
    p.add_argument("--stop-mse", type=float, help="stop once the best training MSE reaches this")
    p.add_argument("--enable-gaussian", action="store_true", help="add gauss(x) = exp(-x^2) to the function set")
    p.add_argument("--select", type=int, metavar="COMPLEXITY", help="export expected/predicted pairs for this member")
    p.set_defaults(func=cmd_evolve)

    p = sub.add_parser("sensitivity", parents=[common], help="variable sensitivity of a formula")
    p.add_argument("formula", help="file holding the formula")
    p.add_argument("features")
    p.set_defaults(func=cmd_sensitivity)

    p = sub.add_parser("predict", parents=[common], help="predict with a saved model or a formula file")
    p.add_argument("model")
    p.add_argument("features")
    p.set_defaults(func=cmd_predict)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    for name, default in (("seed", None), ("config", None), ("out", Path(".")), ("jobs", None), ("verbose", False)):
        if not hasattr(args, name):
            setattr(args, name, default)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = {}
        if args.config:
            try:
                cfg = json.loads(_read(args.config))
            except json.JSONDecodeError as exc:
                raise CLIError(f"{args.config}: {exc}", EXIT_FORMAT) from None
        return args.func(args, cfg)
    except CLIError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (DataFormatError, ExprSyntaxError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except (DataValidationError, StationConflictError, UnknownVariableError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (TrainingDiverged, FoldError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
