"""Error measures, k-fold cross-validation and variable sensitivity."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .expr import Node, evaluate_columns, variables_of
from .weather_data import FeatureVector, columns, kfold_split, targets

PERCENT_ERROR_EPS = 0.1  # degrees C


def _pair(pred, actual) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=float)
    actual = np.asarray(actual, dtype=float)
    if pred.shape != actual.shape or pred.ndim != 1 or pred.size == 0:
        raise ValueError("pred and actual must be equal-length non-empty 1-D sequences")
    return pred, actual


def mse(pred, actual) -> float:
    pred, actual = _pair(pred, actual)
    return float(np.mean(np.square(pred - actual)))


def r_squared(pred, actual) -> float:
    """1 - SS_res / SS_tot, with SS_tot taken about the mean of ``actual``."""
    pred, actual = _pair(pred, actual)
    ss_tot = float(np.sum(np.square(actual - actual.mean())))
    if ss_tot == 0.0:
        raise ValueError("R^2 is undefined for zero-variance actuals")
    ss_res = float(np.sum(np.square(pred - actual)))
    return 1.0 - ss_res / ss_tot


def percent_error_detail(pred, actual, eps: float = PERCENT_ERROR_EPS) -> tuple[float, int]:
    """Mean absolute percentage error and the number of skipped elements.

    Elements with ``|actual| <= eps`` are skipped.
    """
    pred, actual = _pair(pred, actual)
    keep = np.abs(actual) > eps
    if not keep.any():
        raise ValueError("every actual value is within eps of zero")
    rel = np.abs(pred[keep] - actual[keep]) / np.abs(actual[keep])
    return float(100.0 * np.mean(rel)), int((~keep).sum())


def percent_error(pred, actual, eps: float = PERCENT_ERROR_EPS) -> float:
    return percent_error_detail(pred, actual, eps)[0]


# -- cross-validation ------------------------------------------------------------

Predictor = Callable[[Sequence[FeatureVector]], np.ndarray]
ModelFactory = Callable[[Sequence[FeatureVector], int], Predictor]


CV_HEADER = "trial,train_rows,validation_error_pct,r2"


class FoldError(RuntimeError):
    def __init__(self, fold: int, cause: BaseException):
        super().__init__(f"fold {fold + 1}: {cause}")
        self.fold = fold


@dataclass(frozen=True)
class CVReport:
    fold_errors: tuple[float, ...]
    fold_r2: tuple[float, ...]
    fold_train_sizes: tuple[int, ...]
    skipped: int = 0

    @property
    def k(self) -> int:
        return len(self.fold_errors)

    @property
    def mean_error(self) -> float:
        return float(np.mean(self.fold_errors))

    @property
    def mean_r2(self) -> float:
        return float(np.mean(self.fold_r2))

    def to_csv(self) -> str:
        lines = [CV_HEADER]
        for i, (n, e, r) in enumerate(zip(self.fold_train_sizes, self.fold_errors, self.fold_r2), 1):
            lines.append(f"{i},{n},{e!r},{r!r}")
        lines.append(f"mean,,{self.mean_error!r},{self.mean_r2!r}")
        return "\n".join(lines) + "\n"


def parse_cv_csv(text: str) -> CVReport:
    """Read back a report written by ``CVReport.to_csv``; ``#`` lines are skipped."""
    lines = [ln for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
    if not lines or lines[0] != CV_HEADER:
        raise ValueError("not a cross-validation report")
    sizes, errors, r2 = [], [], []
    for ln in lines[1:]:
        trial, n, e, r = ln.split(",")
        if trial == "mean":
            continue
        sizes.append(int(n))
        errors.append(float(e))
        r2.append(float(r))
    return CVReport(tuple(errors), tuple(r2), tuple(sizes))


def fold_seed(seed: int, fold: int) -> int:
    return int(np.random.SeedSequence([seed, fold]).generate_state(1)[0])


def cross_validate(
    factory: ModelFactory,
    rows: Sequence[FeatureVector],
    k: int = 10,
    seed: int = 0,
    n_jobs: int = 1,
    eps: float = PERCENT_ERROR_EPS,
) -> CVReport:
    """k-fold CV: train on k-1 folds, score percent error and R^2 on the held-out one.

    ``factory(train_rows, seed)`` must return a callable mapping rows to
    predictions. Folds may run in threads; the report is always assembled in
    fold order.
    """
    if k < 2:
        raise ValueError("k must be at least 2")
    rows = list(rows)
    folds = kfold_split(len(rows), k, seed)

    def run(i: int):
        held = set(folds[i].tolist())
        train = [r for j, r in enumerate(rows) if j not in held]
        valid = [rows[j] for j in folds[i]]
        try:
            predict = factory(train, fold_seed(seed, i))
            pred = np.asarray(predict(valid), dtype=float)
        except Exception as exc:
            raise FoldError(i, exc) from exc
        actual = targets(valid)
        err, skipped = percent_error_detail(pred, actual, eps)
        return err, r_squared(pred, actual), len(train), skipped

    if n_jobs > 1:
        with ThreadPoolExecutor(n_jobs) as pool:
            results = list(pool.map(run, range(k)))
    else:
        results = [run(i) for i in range(k)]
    return CVReport(
        fold_errors=tuple(r[0] for r in results),
        fold_r2=tuple(r[1] for r in results),
        fold_train_sizes=tuple(r[2] for r in results),
        skipped=sum(r[3] for r in results),
    )


# -- sensitivity -------------------------------------------------------------------


@dataclass(frozen=True)
class SensitivityRow:
    variable: str
    sensitivity: float
    pct_positive: float
    positive_magnitude: float
    pct_negative: float
    negative_magnitude: float


SENSITIVITY_HEADER = "variable,sensitivity,pct_positive,positive_mag,pct_negative,negative_mag"


def partial_derivatives(formula: Node, cols: dict[str, np.ndarray], var: str, h: float) -> np.ndarray:
    """Central differences of ``formula`` with respect to ``var`` at every row."""
    n = len(cols[var])
    up = dict(cols)
    down = dict(cols)
    up[var] = cols[var] + h
    down[var] = cols[var] - h
    return (evaluate_columns(formula, up, n) - evaluate_columns(formula, down, n)) / (2.0 * h)


def sensitivity(formula: Node, rows: Sequence[FeatureVector] | dict[str, np.ndarray]) -> list[SensitivityRow]:
    """Per-variable impact of ``formula``'s inputs on its output.

    For each variable v in the formula, with d_j the central difference at
    row j (step 1e-4 * std(v)) and scale = std(v) / std(f):

    * sensitivity = mean_j |d_j| * scale
    * pct_positive / pct_negative = share of rows with d_j > 0 / d_j < 0
    * positive / negative magnitude = mean |d_j| * scale over those rows

    Variables with zero spread report an all-zero row.
    """
    cols = rows if isinstance(rows, dict) else columns(rows)
    n = len(next(iter(cols.values())))
    if n < 2:
        raise ValueError("sensitivity needs at least two rows")
    f = evaluate_columns(formula, cols, n)
    if not np.all(np.isfinite(f)):
        raise ValueError("formula is not finite on every row")
    std_f = float(np.std(f))
    if std_f == 0.0:
        raise ValueError("sensitivity is undefined for a constant model (std(f) = 0)")

    out = []
    for var in variables_of(formula):
        std_v = float(np.std(cols[var]))
        if std_v == 0.0:
            out.append(SensitivityRow(var, 0.0, 0.0, 0.0, 0.0, 0.0))
            continue
        d = partial_derivatives(formula, cols, var, 1e-4 * std_v)
        if not np.all(np.isfinite(d)):
            raise ValueError(f"non-finite derivative with respect to {var}")
        scale = std_v / std_f
        mag = np.abs(d)
        pos, neg = d > 0, d < 0
        out.append(SensitivityRow(
            variable=var,
            sensitivity=float(np.mean(mag)) * scale,
            pct_positive=float(100.0 * pos.sum() / n),
            positive_magnitude=float(np.mean(mag[pos])) * scale if pos.any() else 0.0,
            pct_negative=float(100.0 * neg.sum() / n),
            negative_magnitude=float(np.mean(mag[neg])) * scale if neg.any() else 0.0,
        ))
    return out


def sensitivity_csv(table: Sequence[SensitivityRow]) -> str:
    lines = [SENSITIVITY_HEADER]
    for r in table:
        lines.append(
            f"{r.variable},{r.sensitivity!r},{r.pct_positive!r},{r.positive_magnitude!r},"
            f"{r.pct_negative!r},{r.negative_magnitude!r}"
        )
    return "\n".join(lines) + "\n"
