"""Coefficient fitting for fixed templates and final equation selection."""

from __future__ import annotations

import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import metrics
from .expr import DEFAULT_PENALTY, PostfixTemplate, evaluate_batch, loss_and_grad_batch
from .utils import derive_seed


class FitError(RuntimeError):
    pass


class AllRestartsNonFinite(FitError):
    pass


class NoFeasibleCandidate(FitError):
    pass


@dataclass(frozen=True)
class FitConfig:
    optimizer: str = "gradient"  # or "hillclimb"
    init_range: tuple[float, float] = (-3.0, 3.0)
    num_restarts: int = 5
    max_iters: int = 2000
    learning_rate: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    plateau_patience: int = 100
    plateau_tol: float = 1e-10
    hc_step_sigma: float = 0.1
    loss_eval_budget: int = 20000
    penalty: float = DEFAULT_PENALTY
    seed: int = 0

    def __post_init__(self):
        if self.optimizer not in ("gradient", "hillclimb"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        lo, hi = self.init_range
        if not (math.isfinite(lo) and math.isfinite(hi) and lo <= hi):
            raise ValueError("init_range must be a finite interval")
        if self.max_iters < 1 or self.num_restarts < 1 or self.loss_eval_budget < 1 or self.plateau_patience < 1:
            raise ValueError("iteration budgets must be >= 1")


@dataclass
class FitResult:
    w: np.ndarray
    train_mse: float
    trace: list[tuple[int, float]]
    evals: int  # loss-evaluation charge (gradient step = 2)
    init_loss: float = math.nan


def _as_template(template) -> PostfixTemplate:
    return template if isinstance(template, PostfixTemplate) else PostfixTemplate(tuple(template))


def _init(config: FitConfig, m: int, rng: np.random.Generator) -> np.ndarray:
    lo, hi = config.init_range
    return lo + (hi - lo) * rng.random((config.num_restarts, m))


def fit_gradient(template, X, y, config: FitConfig = FitConfig(), rng=None) -> FitResult:
    """Adam on the penalized MSE from ``num_restarts`` uniform initializations.

    Restarts run side by side with independent optimizer state and stopping;
    the best final loss wins (lowest restart index on ties).
    """
    template = _as_template(template)
    rng = np.random.default_rng(config.seed) if rng is None else rng
    tokens = template.tokens
    m = template.num_cof
    if m == 0:
        loss, _, n_fin = loss_and_grad_batch(tokens, np.zeros((1, 0)), X, y, config.penalty)
        if n_fin[0] == 0:
            raise AllRestartsNonFinite(str(template))
        return FitResult(np.zeros(0), float(loss[0]), [(0, float(loss[0]))], 1, float(loss[0]))

    W = _init(config, m, rng)
    R = W.shape[0]
    mom = np.zeros_like(W)
    vel = np.zeros_like(W)
    best_loss = np.full(R, np.inf)
    best_W = W.copy()
    stale = np.zeros(R, dtype=int)
    active = np.ones(R, dtype=bool)
    steps = np.zeros(R)
    b1, b2, lr = config.beta1, config.beta2, config.learning_rate
    init_loss = None
    trace = []
    evals = 0
    for it in range(config.max_iters + 1):
        # frozen restarts are recomputed but never updated or charged
        loss, grad, n_fin = loss_and_grad_batch(tokens, W, X, y, config.penalty)
        evals += 2 * int(active.sum())
        loss = np.where(n_fin > 0, loss, np.inf)
        if init_loss is None:
            init_loss = loss.copy()
        with np.errstate(invalid="ignore"):
            improved = (loss < best_loss - config.plateau_tol * best_loss) | (
                np.isinf(best_loss) & np.isfinite(loss)
            )
        better = active & (loss < best_loss)
        best_loss = np.where(better, loss, best_loss)
        best_W[better] = W[better]
        stale = np.where(active, np.where(improved, 0, stale + 1), stale)
        trace.append((it, float(best_loss.min())))
        if it == config.max_iters:
            break
        active &= (stale < config.plateau_patience) & np.isfinite(loss) & (loss > 0.0)
        if not active.any():
            break
        a = active[:, None]
        steps += active
        mom = np.where(a, b1 * mom + (1 - b1) * grad, mom)
        vel = np.where(a, b2 * vel + (1 - b2) * grad * grad, vel)
        t = np.maximum(steps, 1)[:, None]
        step = lr * (mom / (1 - b1**t)) / (np.sqrt(vel / (1 - b2**t)) + 1e-12)
        W_new = W - step
        W = np.where(a & np.isfinite(W_new), W_new, W)

    if not np.isfinite(best_loss).any():
        raise AllRestartsNonFinite(str(template))
    k = int(np.argmin(best_loss))
    w = best_W[k].copy()
    mse_val = float(best_loss[k])
    return FitResult(w, mse_val, trace, evals, float(init_loss[k]))


def fit_hillclimb(template, X, y, config: FitConfig = FitConfig(), rng=None) -> FitResult:
    """Gaussian random search accepting strictly loss-decreasing moves.

    Spends exactly ``loss_eval_budget`` loss evaluations split evenly over the
    restarts; each restart's starting point costs one evaluation.
    """
    template = _as_template(template)
    rng = np.random.default_rng(config.seed) if rng is None else rng
    tokens = template.tokens
    m = template.num_cof
    budget = config.loss_eval_budget
    if m == 0:
        loss, _, n_fin = loss_and_grad_batch(tokens, np.zeros((1, 0)), X, y, config.penalty)
        if n_fin[0] == 0:
            raise AllRestartsNonFinite(str(template))
        return FitResult(np.zeros(0), float(loss[0]), [(0, float(loss[0]))], budget, float(loss[0]))

    W0 = _init(config, m, rng)
    R = min(config.num_restarts, budget)
    shares = [budget // R + (1 if r < budget % R else 0) for r in range(R)]
    best_w, best = None, math.inf
    first_loss = None
    trace = []
    evals = 0

    def loss_of(w):
        nonlocal evals
        evals += 1
        loss, _, n_fin = loss_and_grad_batch(tokens, w.reshape(1, -1), X, y, config.penalty)
        return float(loss[0]) if n_fin[0] > 0 else math.inf

    for r in range(R):
        w = W0[r].copy()
        cur = loss_of(w)
        if first_loss is None:
            first_loss = cur
        trace.append((evals, cur))
        for _ in range(shares[r] - 1):
            cand = w + rng.normal(0.0, config.hc_step_sigma, size=m)
            lc = loss_of(cand)
            if lc < cur:
                w, cur = cand, lc
                trace.append((evals, cur))
        if cur < best:
            best, best_w = cur, w
    if best_w is None:
        raise AllRestartsNonFinite(str(template))
    return FitResult(best_w, best, trace, evals, first_loss)


def fit(template, X, y, config: FitConfig, rng=None) -> FitResult:
    if config.optimizer == "hillclimb":
        return fit_hillclimb(template, X, y, config, rng)
    return fit_gradient(template, X, y, config, rng)


@dataclass
class FittedEquation:
    template: PostfixTemplate
    w: np.ndarray
    train_mse: float
    test: metrics.MetricReport | None
    complexity: int
    proxy_score: float = math.nan
    status: str = "ok"
    fit_seconds: float = 0.0
    fit_trace: list = field(default_factory=list, repr=False)

    @property
    def feasible(self) -> bool:
        return (
            self.status == "ok"
            and self.test is not None
            and math.isfinite(self.test.r2)
            and math.isfinite(self.test.mse)
            and np.isfinite(self.w).all()
        )

    def predict(self, X) -> np.ndarray:
        return evaluate_batch(self.template.tokens, np.asarray(self.w).reshape(1, -1), X)[0]


def candidate_seed(seed: int, index: int) -> int:
    return derive_seed(seed, "fit", index)


def fit_candidate(template, train, test, config: FitConfig, index: int, proxy_score: float = math.nan) -> FittedEquation:
    """Fit one template on ``train`` and score it on ``test``."""
    template = _as_template(template)
    t0 = time.perf_counter()
    rng = np.random.default_rng(candidate_seed(config.seed, index))
    try:
        res = fit(template, train.X, train.y, config, rng)
    except FitError as e:
        return FittedEquation(template, np.full(template.num_cof, np.nan), math.inf, None, template.complexity,
                              proxy_score, f"fit-failed: {type(e).__name__}", time.perf_counter() - t0)
    eq = FittedEquation(template, res.w, res.train_mse, None, template.complexity, proxy_score,
                        "ok", 0.0, res.trace)
    pred = eq.predict(test.X)
    if not np.isfinite(pred).all():
        eq.status = "non-finite-test"
    else:
        try:
            eq.test = metrics.report(pred, test.y)
        except metrics.MetricError as e:
            eq.status = f"metric-failed: {type(e).__name__}"
    eq.fit_seconds = time.perf_counter() - t0
    return eq


def fit_pool(pool, train, test, config: FitConfig, jobs: int = 1) -> list[FittedEquation]:
    """Fit every candidate; candidate ``i`` uses a seed derived from (seed, i)."""
    items = [(getattr(c, "template", c), getattr(c, "proxy_score", math.nan)) for c in pool]
    if jobs > 1 and len(items) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            futs = [ex.submit(fit_candidate, t, train, test, config, i, s) for i, (t, s) in enumerate(items)]
            return [f.result() for f in futs]
    return [fit_candidate(t, train, test, config, i, s) for i, (t, s) in enumerate(items)]


def selection_key(eq: FittedEquation):
    return (-eq.test.r2, eq.complexity, eq.test.mse, " ".join(eq.template.tokens))


def select_final(fitted: list[FittedEquation], c_max: int) -> FittedEquation:
    """Highest test R^2 among feasible entries with complexity <= c_max.

    Ties go to lower complexity, then lower test MSE, then token string.
    """
    feasible = [e for e in fitted if e.complexity <= c_max and e.feasible]
    if not feasible:
        raise NoFeasibleCandidate(f"none of {len(fitted)} fitted candidates is feasible under C_max={c_max}")
    return min(feasible, key=selection_key)
