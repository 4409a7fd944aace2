"""End-to-end orchestration: bootstrap -> prior -> search -> fit -> select,
plus the experiment drivers behind the CLI."""

from __future__ import annotations

import json
import logging
import math
import statistics
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import __version__, metrics
from . import prior as prior_mod
from .datasets import DESK_SUITE, ETA_GRID, Dataset, desk_spec, generate_synthetic, holdout_split, load_csv, noise_sweep
from .expr import PostfixTemplate, Vocab, evaluate_batch, parse_postfix, render_infix
from .fit import FitConfig, FittedEquation, fit_gradient, fit_hillclimb, fit_pool, select_final
from .gp import CorpusEntry, GpConfig, build_corpus
from .prior import PriorConfig
from .search import Candidate, Pool, SamplerConfig, check_candidate, generate_pool, probe_points
from .utils import atomic_write_text, derive_seed, read_jsonl, sha256_file, write_jsonl

log = logging.getLogger(__name__)


@dataclass
class RunConfig:
    out_dir: str = "runs/default"
    seed: int = 0
    dataset: str = "easy-1"
    train_csv: str | None = None
    test_csv: str | None = None
    target: str = "y"
    corpus_benchmark: str = "desk"  # "desk" or "none"
    corpus_m: int = 1000
    corpus_l_max: int = 64
    corpus_min_entries: int = 1
    corpus_relabel: int = 3
    max_vars: int = 4
    c_max: int = 12
    holdout: float = 0.0
    jobs: int = 1
    corpus_path: str | None = None
    checkpoint_path: str | None = None
    pool_path: str | None = None
    results_path: str | None = None
    gp: GpConfig = field(default_factory=GpConfig)
    prior: PriorConfig = field(default_factory=PriorConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    fit: FitConfig = field(default_factory=FitConfig)

    def path(self, kind: str) -> Path:
        explicit = getattr(self, f"{kind}_path")
        if explicit:
            return Path(explicit)
        names = {"corpus": "corpus.jsonl", "checkpoint": "prior.ckpt", "pool": "pool.jsonl", "results": "results.jsonl"}
        return Path(self.out_dir) / names[kind]

    # stage seeds derive from the global seed only
    def gp_config(self) -> GpConfig:
        return replace(self.gp, seed=derive_seed(self.seed, "bootstrap"))

    def prior_config(self) -> PriorConfig:
        return replace(self.prior, seed=derive_seed(self.seed, "prior"))

    def sampler_config(self) -> SamplerConfig:
        return replace(self.sampler, seed=derive_seed(self.seed, "search"), c_max=min(self.c_max, self.sampler.l_max))

    def fit_config(self) -> FitConfig:
        return replace(self.fit, seed=derive_seed(self.seed, "fit"))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        sub = {"gp": GpConfig, "prior": PriorConfig, "sampler": SamplerConfig, "fit": FitConfig}
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kw = {}
        for k, v in d.items():
            if k in sub:
                kw[k] = _build(sub[k], v)
            else:
                kw[k] = v
        return cls(**kw)


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    pass


def _build(cls, d: dict):
    names = {f.name for f in fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
    try:
        return cls(**kw)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{cls.__name__}: {e}") from None


def load_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as f:
        return RunConfig.from_dict(json.load(f))


# ---------------------------------------------------------------- data


def load_target(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    if cfg.train_csv:
        if not cfg.test_csv:
            raise ConfigError("--train-csv requires --test-csv")
        train = load_csv(cfg.train_csv, cfg.target, "train")
        test = load_csv(cfg.test_csv, cfg.target, "test", input_box=train.input_box)
        return train, test
    try:
        return generate_synthetic(desk_spec(cfg.dataset))
    except KeyError as e:
        raise ConfigError(str(e)) from None


def corpus_datasets(cfg: RunConfig, train: Dataset | None) -> list[tuple[str, np.ndarray, np.ndarray]]:
    out = []
    if cfg.corpus_benchmark == "desk":
        for spec in DESK_SUITE:
            tr, _ = generate_synthetic(spec)
            out.append((spec.name, tr.X, tr.y))
    elif cfg.corpus_benchmark != "none":
        raise ConfigError(f"unknown corpus benchmark {cfg.corpus_benchmark!r}")
    if train is not None and train.name not in {name for name, _, _ in out}:
        out.append((train.name or "target", train.X, train.y))
    return out


def vocab_for(cfg: RunConfig, *datasets) -> Vocab:
    d = max([cfg.max_vars] + [ds.d for ds in datasets if ds is not None])
    return Vocab(d)


# ---------------------------------------------------------------- stages


def stage_bootstrap(cfg: RunConfig, train: Dataset | None = None) -> list[CorpusEntry]:
    data = corpus_datasets(cfg, train)
    try:
        corpus = build_corpus(
            data, cfg.gp_config(), cfg.corpus_m, cfg.corpus_l_max, cfg.corpus_min_entries, cfg.corpus_relabel
        )
    except Exception as e:
        raise StageError(f"bootstrap over {[n for n, _, _ in data]}: {e}") from e
    write_jsonl(cfg.path("corpus"), [e.as_record() for e in corpus], kind="corpus")
    return corpus


def read_corpus(path) -> list[CorpusEntry]:
    _, recs = read_jsonl(path)
    return [CorpusEntry.from_record(r) for r in recs]


def stage_train_prior(cfg: RunConfig, corpus, vocab: Vocab) -> prior_mod.PriorModel:
    model = prior_mod.train(cfg.prior_config(), corpus, vocab)
    ckpt = cfg.path("checkpoint")
    prior_mod.save(model, ckpt)
    atomic_write_text(ckpt.with_suffix(".loss.csv"), prior_mod.history_csv(model))
    return model


def pool_header(cfg: RunConfig, train: Dataset) -> dict:
    return {"num_vars": train.d, "input_box": [list(b) for b in train.input_box], "sampler": asdict(cfg.sampler_config())}


def write_pool(path, pool: Pool, header: dict) -> None:
    write_jsonl(path, [c.as_record() for c in pool] + [{"rejection_stats": pool.stats}], kind="pool", **header)


def read_pool(path) -> tuple[dict, Pool]:
    header, recs = read_jsonl(path)
    cands, stats = [], {}
    for r in recs:
        if "rejection_stats" in r:
            stats = r["rejection_stats"]
            continue
        toks = tuple(r["tokens"].split())
        cands.append(Candidate(PostfixTemplate(toks), toks, float(r["proxy_score"])))
    return header or {}, Pool(cands, stats)


def stage_search(cfg: RunConfig, model, train: Dataset) -> Pool:
    pool = generate_pool(model, cfg.sampler_config(), train.d, train.input_box)
    write_pool(cfg.path("pool"), pool, pool_header(cfg, train))
    return pool


def equation_record(eq: FittedEquation) -> dict:
    t = eq.test
    return {
        "tokens": " ".join(eq.template.tokens),
        "infix": render_infix(eq.template, eq.w) if np.isfinite(eq.w).all() else None,
        "w": [float(v) for v in eq.w],
        "train_mse": eq.train_mse,
        "test_mse": t.mse if t else None,
        "test_ln_mse": t.log_mse if t else None,
        "test_r2": t.r2 if t else None,
        "test_pearson": t.pearson if t else None,
        "complexity": eq.complexity,
        "proxy_score": eq.proxy_score,
        "status": eq.status,
    }


def data_header(cfg: RunConfig) -> dict:
    if cfg.train_csv:
        return {"train_csv": cfg.train_csv, "test_csv": cfg.test_csv, "target": cfg.target}
    return {"dataset": cfg.dataset}


@dataclass
class FitOutcome:
    fitted: list[FittedEquation]
    selected: FittedEquation
    selection_split: str


def fit_and_select(cfg: RunConfig, pool, train: Dataset, test: Dataset) -> FitOutcome:
    fc = cfg.fit_config()
    if cfg.holdout > 0:
        fit_split, val = holdout_split(train, cfg.holdout, derive_seed(cfg.seed, "holdout"))
        scored = fit_pool(pool, fit_split, val, fc, cfg.jobs)
        chosen = select_final(scored, cfg.c_max)
        fitted = []
        for eq in scored:
            eq2 = replace(eq)
            pred = eq.predict(test.X) if eq.status == "ok" else None
            eq2.test = metrics.report(pred, test.y) if pred is not None and np.isfinite(pred).all() else None
            fitted.append(eq2)
        selected = fitted[scored.index(chosen)]
        return FitOutcome(fitted, selected, "validation")
    fitted = fit_pool(pool, train, test, fc, cfg.jobs)
    return FitOutcome(fitted, select_final(fitted, cfg.c_max), "test")


def stage_fit(cfg: RunConfig, pool, train: Dataset, test: Dataset) -> FitOutcome:
    outcome = fit_and_select(cfg, pool, train, test)
    recs = [equation_record(e) for e in outcome.fitted]
    recs.append({"selected": equation_record(outcome.selected), "selection_split": outcome.selection_split})
    write_jsonl(cfg.path("results"), recs, kind="results", c_max=cfg.c_max, **data_header(cfg))
    return outcome


def read_results(path) -> tuple[dict, list[dict], dict | None]:
    header, recs = read_jsonl(path)
    sel = None
    rows = []
    for r in recs:
        if "selected" in r:
            sel = r["selected"]
        else:
            rows.append(r)
    return header or {}, rows, sel


def equation_from_record(rec: dict) -> FittedEquation:
    t = PostfixTemplate.from_string(rec["tokens"])
    return FittedEquation(t, np.array(rec["w"], dtype=np.float64), rec["train_mse"], None, rec["complexity"])


# ---------------------------------------------------------------- manifest


def write_manifest(cfg: RunConfig, command: str, timings: dict, extra: dict | None = None) -> Path:
    artifacts = {}
    for kind in ("corpus", "checkpoint", "pool", "results"):
        p = cfg.path(kind)
        if p.exists():
            artifacts[kind] = {"path": str(p), "sha256": sha256_file(p)}
    manifest = {
        "tool_version": __version__,
        "command": command,
        "config": cfg.to_dict(),
        "artifacts": artifacts,
        "timings_s": timings,
    }
    if extra:
        manifest.update(extra)
    path = Path(cfg.out_dir) / "manifest.json"
    atomic_write_text(path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def verify_manifest(path) -> list[str]:
    with open(path, encoding="utf-8") as f:
        m = json.load(f)
    bad = []
    for kind, a in m.get("artifacts", {}).items():
        if not Path(a["path"]).exists() or sha256_file(a["path"]) != a["sha256"]:
            bad.append(kind)
    return bad


# ---------------------------------------------------------------- commands


@dataclass
class RunOutcome:
    corpus: list[CorpusEntry]
    model: prior_mod.PriorModel
    pool: Pool
    fit: FitOutcome
    train: Dataset
    test: Dataset
    timings: dict


def cmd_bootstrap(cfg: RunConfig) -> list[CorpusEntry]:
    t0 = time.perf_counter()
    train = load_target(cfg)[0] if cfg.train_csv or cfg.dataset else None
    corpus = stage_bootstrap(cfg, train)
    write_manifest(cfg, "bootstrap", {"bootstrap": time.perf_counter() - t0})
    return corpus


def cmd_train_prior(cfg: RunConfig) -> prior_mod.PriorModel:
    t0 = time.perf_counter()
    corpus = read_corpus(cfg.path("corpus"))
    train, _ = load_target(cfg)
    model = stage_train_prior(cfg, corpus, vocab_for(cfg, train))
    write_manifest(cfg, "train-prior", {"train_prior": time.perf_counter() - t0})
    return model


def cmd_search(cfg: RunConfig) -> Pool:
    t0 = time.perf_counter()
    train, _ = load_target(cfg)
    model = prior_mod.load(cfg.path("checkpoint"))
    pool = stage_search(cfg, model, train)
    write_manifest(cfg, "search", {"search": time.perf_counter() - t0})
    return pool


def cmd_fit(cfg: RunConfig) -> FitOutcome:
    t0 = time.perf_counter()
    train, test = load_target(cfg)
    _, pool = read_pool(cfg.path("pool"))
    out = stage_fit(cfg, pool, train, test)
    write_manifest(cfg, "fit", {"fit": time.perf_counter() - t0}, _fit_seconds(out))
    return out


def _fit_seconds(out: FitOutcome) -> dict:
    return {"fit_seconds": [e.fit_seconds for e in out.fitted]}


def cmd_run(cfg: RunConfig, reuse_checkpoint: bool = False) -> RunOutcome:
    """Full pipeline; an existing checkpoint is reused only on request."""
    timings = {}
    train, test = load_target(cfg)
    vocab = vocab_for(cfg, train)
    t = time.perf_counter()
    if reuse_checkpoint and cfg.path("checkpoint").exists():
        corpus = read_corpus(cfg.path("corpus")) if cfg.path("corpus").exists() else []
        model = prior_mod.load(cfg.path("checkpoint"), vocab)
    else:
        corpus = stage_bootstrap(cfg, train)
        timings["bootstrap"] = time.perf_counter() - t
        t = time.perf_counter()
        model = stage_train_prior(cfg, corpus, vocab)
        timings["train_prior"] = time.perf_counter() - t
    t = time.perf_counter()
    pool = stage_search(cfg, model, train)
    timings["search"] = time.perf_counter() - t
    t = time.perf_counter()
    fo = stage_fit(cfg, pool, train, test)
    timings["fit"] = time.perf_counter() - t
    write_manifest(cfg, "run", timings, _fit_seconds(fo))
    return RunOutcome(corpus, model, pool, fo, train, test, timings)


def selected_equation(cfg: RunConfig) -> FittedEquation:
    _, _, sel = read_results(cfg.path("results"))
    if sel is None:
        raise StageError(f"{cfg.path('results')} has no selected equation")
    return equation_from_record(sel)


def cmd_noise_sweep(cfg: RunConfig, etas=ETA_GRID, jitter: float = 0.005) -> tuple[list[dict], bool]:
    """Sweep test-input noise on the frozen selected equation.

    Returns the table rows and whether R^2 / ln(MSE) degrade monotonically
    within ``jitter``.
    """
    train, test = load_target(cfg)
    eq = selected_equation(cfg)
    rows = [r.as_dict() for r in noise_sweep(eq, train, test, etas, derive_seed(cfg.seed, "noise"))]
    return rows, noise_monotone(rows, jitter)


def noise_monotone(rows: list[dict], jitter: float = 0.005) -> bool:
    r2s = [r["r2"] for r in rows]
    lm = [r["ln_mse"] for r in rows]
    ok_r2 = all(r2s[i + 1] <= r2s[i] + jitter for i in range(len(r2s) - 1))
    ok_mse = all(lm[i + 1] >= lm[i] - jitter for i in range(len(lm) - 1))
    return ok_r2 and ok_mse


SWEEP_KNOBS = ("max_term", "max_trig_vars", "temperature", "top_k")


def cmd_sweep(cfg: RunConfig, knob: str, values, model=None) -> list[dict]:
    """Re-run search + fit + select for each knob value with every seed fixed."""
    if knob not in SWEEP_KNOBS:
        raise ConfigError(f"knob must be one of {SWEEP_KNOBS}")
    train, test = load_target(cfg)
    if model is None:
        model = prior_mod.load(cfg.path("checkpoint"), vocab_for(cfg, train))
    rows = []
    for v in values:
        v = float(v) if knob == "temperature" else int(v)
        try:
            cell = replace(cfg, sampler=replace(cfg.sampler, **{knob: v}))
            pool = generate_pool(model, cell.sampler_config(), train.d, train.input_box)
            fo = fit_and_select(cell, pool, train, test)
            sel = fo.selected
            rows.append({"value": v, "r2": sel.test.r2, "pearson": sel.test.pearson,
                         "tokens": " ".join(sel.template.tokens), "pool_size": len(pool), "status": "ok"})
        except Exception as e:  # partial tables are allowed
            rows.append({"value": v, "r2": None, "pearson": None, "tokens": None, "pool_size": 0,
                         "status": f"{type(e).__name__}: {e}"})
    return rows


@dataclass
class AblationArm:
    train_mse: float
    test_mse: float
    r2: float
    pearson: float | None
    evals: int


def cmd_ablate_coeff(cfg: RunConfig, template, seeds=range(10)) -> dict:
    """Gradient vs hill-climbing coefficient fitting at a matched budget."""
    train, test = load_target(cfg)
    template = template if isinstance(template, PostfixTemplate) else PostfixTemplate.from_string(template)
    per_seed = []
    for s in seeds:
        fc = replace(cfg.fit, seed=derive_seed(cfg.seed, "ablate", s))
        g = fit_gradient(template, train.X, train.y, fc)
        h = fit_hillclimb(template, train.X, train.y, replace(fc, loss_eval_budget=max(g.evals, 1)))
        arms = {}
        for name, res in (("gradient", g), ("hillclimb", h)):
            pred = evaluate_batch(template.tokens, res.w.reshape(1, -1), test.X)[0]
            rep = metrics.report(pred, test.y)
            arms[name] = asdict(AblationArm(res.train_mse, rep.mse, rep.r2, rep.pearson, res.evals))
        per_seed.append({"seed": s, **arms})

    def agg(arm, key):
        vals = [p[arm][key] for p in per_seed if p[arm][key] is not None]
        return statistics.median(vals) if vals else None

    summary = {
        arm: {k: agg(arm, k) for k in ("train_mse", "test_mse", "r2", "pearson")} for arm in ("gradient", "hillclimb")
    }
    wins = sum(1 for p in per_seed if p["gradient"]["train_mse"] < p["hillclimb"]["train_mse"])
    return {"template": " ".join(template.tokens), "per_seed": per_seed, "median": summary,
            "gradient_wins": wins, "budget_matched": all(p["gradient"]["evals"] == p["hillclimb"]["evals"] for p in per_seed)}


def time_equation(eq: FittedEquation, X: np.ndarray, repeats: int) -> float:
    """Median wall-clock seconds of one forward evaluation over ``X``."""
    samples = []
    w = np.asarray(eq.w).reshape(1, -1)
    for _ in range(repeats):
        t0 = time.perf_counter()
        evaluate_batch(eq.template.tokens, w, X)
        samples.append(time.perf_counter() - t0)
    return statistics.median(samples)


def cmd_timing(result_paths, repeats: int = 5) -> list[dict]:
    rows = []
    for path in result_paths:
        header, _, sel = read_results(path)
        if sel is None:
            continue
        cfg = RunConfig(**{k: header[k] for k in ("dataset", "train_csv", "test_csv", "target") if k in header})
        _, test = load_target(cfg)
        eq = equation_from_record(sel)
        rows.append({"results": str(path), "tokens": sel["tokens"], "n_test": test.n,
                     "median_seconds": time_equation(eq, test.X, repeats), "repeats": repeats})
    return rows


# ---------------------------------------------------------------- validation


def validate_file(path) -> tuple[bool, str]:
    """Independently re-check a corpus, checkpoint, pool or results file."""
    path = Path(path)
    with open(path, "rb") as f:
        head = f.read(len(prior_mod.MAGIC))
    if head == prior_mod.MAGIC:
        try:
            model = prior_mod.load(path)
        except prior_mod.PriorError as e:
            return False, f"checkpoint: {type(e).__name__}: {e}"
        finite = all(np.isfinite(v).all() for v in model.params.values())
        return finite, f"checkpoint: {len(model.params)} tensors, finite={finite}"
    header, recs = read_jsonl(path)
    kind = (header or {}).get("kind")
    if kind == "corpus":
        for i, r in enumerate(recs):
            try:
                parse_postfix(r["tokens"].split())
            except Exception as e:
                return False, f"corpus line {i + 2}: {e}"
        return True, f"corpus: {len(recs)} templates parse"
    if kind == "pool":
        _, pool = read_pool(path)
        sc = SamplerConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in header["sampler"].items()})
        probes = probe_points(header["input_box"], sc.semantic_probe_count, sc.seed)
        for c in pool:
            why = check_candidate(c.tokens, True, sc, probes, header["num_vars"])
            if why is not None:
                return False, f"pool: {' '.join(c.tokens)} fails {why.value}"
        return True, f"pool: {len(pool)} survivors re-validate"
    if kind == "results":
        cfg = RunConfig(**{k: header[k] for k in ("dataset", "train_csv", "test_csv", "target") if k in header})
        train, test = load_target(cfg)
        _, rows, sel = read_results(path)
        for r in rows + ([sel] if sel else []):
            if r["status"] != "ok" or r["test_r2"] is None:
                continue
            eq = equation_from_record(r)
            rep = metrics.report(eq.predict(test.X), test.y)
            for key, val in (("test_mse", rep.mse), ("test_r2", rep.r2)):
                if not math.isclose(val, r[key], rel_tol=1e-9, abs_tol=1e-12):
                    return False, f"results: {r['tokens']} {key} {r[key]} != recomputed {val}"
        return True, f"results: {len(rows)} equations recompute"
    return False, f"unrecognized file kind {kind!r}"
