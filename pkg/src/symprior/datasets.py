"""Synthetic benchmarks, CSV ingestion, splitting and test-input noise."""

from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import metrics
from .expr import evaluate_batch, parse_postfix
from .utils import atomic_write_text, derive_seed


DEFAULT_BOX = (1.0, 5.0)


class DatasetError(ValueError):
    pass


class NonFiniteTarget(DatasetError):
    pass


class MissingTarget(DatasetError):
    pass


class NonNumericCell(DatasetError):
    def __init__(self, row: int, col: str):
        super().__init__(f"non-numeric or missing value at row {row}, column {col!r}")
        self.row, self.col = row, col


class EmptyFile(DatasetError):
    pass


class DegenerateFeatureWarning(UserWarning):
    pass


@dataclass(frozen=True, eq=False)
class Dataset:
    X: np.ndarray
    y: np.ndarray
    feature_names: tuple[str, ...]
    input_box: tuple[tuple[float, float], ...]
    split: str = "train"
    name: str = ""

    def __post_init__(self):
        X = np.asarray(self.X, dtype=np.float64)
        y = np.asarray(self.y, dtype=np.float64).ravel()
        if X.ndim != 2 or X.shape[0] < 1 or X.shape[1] < 1:
            raise DatasetError(f"X must be N x d with N, d >= 1, got {X.shape}")
        if y.shape[0] != X.shape[0]:
            raise DatasetError("X and y row counts differ")
        if not (np.isfinite(X).all() and np.isfinite(y).all()):
            raise DatasetError("dataset contains non-finite entries")
        X.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]


@dataclass(frozen=True)
class BenchmarkSpec:
    """Ground truth as a postfix string with literal constants, e.g.
    ``"2.5 x0 mul 1.3 x1 mul sin add"``."""

    name: str
    expression: str
    d: int
    tier: str = "easy"
    train_n: int = 200
    test_n: int = 200
    input_box: tuple[tuple[float, float], ...] | None = None
    seed: int = 0

    def box(self) -> tuple[tuple[float, float], ...]:
        return self.input_box if self.input_box is not None else (DEFAULT_BOX,) * self.d

    def as_record(self) -> dict:
        return {
            "name": self.name,
            "tier": self.tier,
            "d": self.d,
            "expression": self.expression,
            "box": [list(b) for b in self.box()],
            "seeds": [self.seed],
        }


DESK_SUITE = (
    BenchmarkSpec("easy-1", "2.5 x0 mul 1.3 x1 mul sin add", 2, "easy"),
    BenchmarkSpec("easy-2", "1.5 x0 mul 0.8 x1 mul add", 2, "easy"),
    BenchmarkSpec("easy-3", "x0 x1 div 1.2 add", 2, "easy"),
    BenchmarkSpec("medium-1", "1.2 x0 mul x1 mul 0.9 x2 mul sin add", 3, "medium"),
    BenchmarkSpec("medium-2", "1.5 x0 mul sin 0.8 x1 mul cos x2 mul add", 3, "medium"),
    BenchmarkSpec("medium-3", "2.0 x0 mul x1 x2 mul sub", 3, "medium"),
    BenchmarkSpec("hard-1", "0.8 x0 mul x1 mul x2 div 1.1 x3 mul cos add", 4, "hard"),
    BenchmarkSpec("hard-2", "0.5 x0 mul sin 0.5 x1 mul cos mul x2 x3 mul add", 4, "hard"),
    BenchmarkSpec("hard-3", "x0 x1 sub x2 x3 add mul 1.5 div", 4, "hard"),
)


def desk_spec(name: str) -> BenchmarkSpec:
    for s in DESK_SUITE:
        if s.name == name:
            return s
    raise KeyError(f"unknown desk benchmark {name!r}; choose from {[s.name for s in DESK_SUITE]}")


def _sample_split(spec: BenchmarkSpec, tokens, n: int, split: str) -> Dataset:
    box = spec.box()
    rng = np.random.default_rng(derive_seed(spec.seed, spec.name, split))
    lo = np.array([b[0] for b in box])
    hi = np.array([b[1] for b in box])
    X = lo + (hi - lo) * rng.random((n, spec.d))
    y = evaluate_batch(tokens, np.zeros((1, 0)), X)[0]
    if not np.isfinite(y).all():
        raise NonFiniteTarget(f"{spec.name}: ground truth is undefined inside the input box")
    return Dataset(X, y, tuple(f"x{i}" for i in range(spec.d)), box, split, spec.name)


def generate_synthetic(spec: BenchmarkSpec) -> tuple[Dataset, Dataset]:
    """Noiseless train/test samples drawn uniformly over the input box."""
    tokens = tuple(spec.expression.split())
    parse_postfix(tokens, allow_constants=True)
    return _sample_split(spec, tokens, spec.train_n, "train"), _sample_split(spec, tokens, spec.test_n, "test")


def load_csv(path, target_column: str, split: str = "train", input_box=None) -> Dataset:
    """Numeric CSV with a header row; every non-target column is a feature."""
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as f:
        rows = list(csv.reader(f))
    if not rows or not any(cell.strip() for cell in rows[0]):
        raise EmptyFile(str(path))
    header = [h.strip() for h in rows[0]]
    if target_column not in header:
        raise MissingTarget(f"{target_column!r} not in header {header}")
    body = [r for r in rows[1:] if any(c.strip() for c in r)]
    if not body:
        raise EmptyFile(f"{path} has a header but no data rows")
    t = header.index(target_column)
    data = np.empty((len(body), len(header)))
    for i, r in enumerate(body, start=2):
        if len(r) != len(header):
            raise NonNumericCell(i, header[min(len(r), len(header) - 1)])
        for j, cell in enumerate(r):
            try:
                v = float(cell)
            except ValueError:
                raise NonNumericCell(i, header[j]) from None
            if not np.isfinite(v):
                raise NonNumericCell(i, header[j])
            data[i - 2, j] = v
    feats = [j for j in range(len(header)) if j != t]
    X = data[:, feats]
    if input_box is None:
        input_box = tuple((float(X[:, j].min()), float(X[:, j].max())) for j in range(X.shape[1]))
    return Dataset(X, data[:, t], tuple(header[j] for j in feats), tuple(input_box), split, path.stem)


def write_csv(path, ds: Dataset, target_column: str = "y") -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(list(ds.feature_names) + [target_column])
    for row, yv in zip(ds.X, ds.y):
        w.writerow([repr(float(v)) for v in row] + [repr(float(yv))])
    atomic_write_text(path, buf.getvalue())


def holdout_split(ds: Dataset, fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Carve a validation split out of ``ds``."""
    n_val = int(round(fraction * ds.n))
    if not 0 < n_val < ds.n:
        raise DatasetError(f"holdout fraction {fraction} leaves an empty split")
    perm = np.random.default_rng(derive_seed(seed, "holdout")).permutation(ds.n)
    val, fit = np.sort(perm[:n_val]), np.sort(perm[n_val:])
    return (
        replace(ds, X=ds.X[fit], y=ds.y[fit], split="train"),
        replace(ds, X=ds.X[val], y=ds.y[val], split="validation"),
    )


def feature_std(train: Dataset) -> np.ndarray:
    """Per-feature sample standard deviation (N-1 denominator)."""
    if train.n < 2:
        return np.zeros(train.d)
    return train.X.std(axis=0, ddof=1)


def perturb_features(test: Dataset, train: Dataset, eta: float, seed: int) -> Dataset:
    """Add N(0, (eta * sigma_j)^2) noise to each test feature, sigma from ``train``.

    The same standard-normal draw is used for every ``eta`` at a given seed.
    """
    if not 0.0 <= eta <= 1.0:
        raise DatasetError(f"eta must lie in [0, 1], got {eta}")
    if test.d != train.d:
        raise DatasetError("train and test feature counts differ")
    sigma = feature_std(train)
    degenerate = sigma == 0
    if degenerate.any():
        names = [train.feature_names[j] for j in np.flatnonzero(degenerate)]
        warnings.warn(f"zero training variance, left unperturbed: {names}", DegenerateFeatureWarning, stacklevel=2)
    if eta == 0.0:
        return replace(test, X=test.X.copy())
    z = np.random.default_rng(derive_seed(seed, "perturb")).standard_normal(test.X.shape)
    X = test.X + z * (eta * sigma)
    return replace(test, X=X)


@dataclass(frozen=True)
class NoiseRow:
    eta: float
    report: metrics.MetricReport

    def as_dict(self) -> dict:
        return {"eta": self.eta, "ln_mse": self.report.log_mse, "r2": self.report.r2, "pearson": self.report.pearson}


def noise_sweep(equation, train: Dataset, test: Dataset, etas, seed: int) -> list[NoiseRow]:
    """Evaluate a frozen fitted equation on increasingly perturbed test inputs."""
    rows = []
    for eta in etas:
        pert = perturb_features(test, train, float(eta), seed)
        pred = evaluate_batch(equation.template.tokens, np.asarray(equation.w).reshape(1, -1), pert.X)[0]
        rows.append(NoiseRow(float(eta), metrics.report(pred, pert.y)))
    return rows


ETA_GRID = tuple(round(0.1 * i, 1) for i in range(11))
