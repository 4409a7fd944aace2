"""Regression metrics reported for fitted equations."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

LOG_FLOOR = 1e-300


class MetricError(ValueError):
    pass


class LengthMismatch(MetricError):
    pass


class NonFiniteInput(MetricError):
    pass


class ZeroTargetVariance(MetricError):
    pass


class NegativeInput(MetricError):
    pass


def _pair(pred, target):
    pred = np.asarray(pred, dtype=np.float64).ravel()
    target = np.asarray(target, dtype=np.float64).ravel()
    if pred.shape != target.shape:
        raise LengthMismatch(f"{pred.shape[0]} predictions vs {target.shape[0]} targets")
    if pred.size == 0:
        raise LengthMismatch("empty input")
    if not (np.isfinite(pred).all() and np.isfinite(target).all()):
        raise NonFiniteInput("predictions and targets must be finite")
    return pred, target


def mse(pred, target) -> float:
    pred, target = _pair(pred, target)
    d = pred - target
    return float(np.mean(d * d))


def r2(pred, target) -> float:
    """1 - SS_res / SS_tot; may be negative."""
    pred, target = _pair(pred, target)
    dev = target - target.mean()
    ss_tot = float(np.dot(dev, dev))
    if ss_tot == 0.0:
        raise ZeroTargetVariance("target has zero variance")
    d = pred - target
    return 1.0 - float(np.dot(d, d)) / ss_tot


def pearson(pred, target) -> float | None:
    """Sample correlation, or None when either side has zero variance."""
    pred, target = _pair(pred, target)
    a = pred - pred.mean()
    b = target - target.mean()
    saa, sbb = float(np.dot(a, a)), float(np.dot(b, b))
    if saa == 0.0 or sbb == 0.0:
        return None
    rho = float(np.dot(a, b)) / math.sqrt(saa * sbb)
    return max(-1.0, min(1.0, rho))


def log_mse(mse_value: float) -> float:
    """Natural log of the MSE, floored at 1e-300."""
    if mse_value < 0:
        raise NegativeInput(mse_value)
    return math.log(max(mse_value, LOG_FLOOR))


@dataclass(frozen=True)
class MetricReport:
    mse: float
    log_mse: float
    r2: float
    pearson: float | None
    n: int

    def as_dict(self) -> dict:
        return {"mse": self.mse, "ln_mse": self.log_mse, "r2": self.r2, "pearson": self.pearson, "n": self.n}


def report(pred, target) -> MetricReport:
    m = mse(pred, target)
    return MetricReport(m, log_mse(m), r2(pred, target), pearson(pred, target), len(np.ravel(target)))


def pearson_key(rho: float | None) -> float:
    """Sort key placing undefined correlations below every defined value."""
    return -math.inf if rho is None else rho
