"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 stage failure,
4 assertion-mode violation.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from dataclasses import fields, replace
from pathlib import Path

from . import pipeline as pl
from .datasets import ETA_GRID
from .utils import atomic_write_text

EXIT_OK, EXIT_CONFIG, EXIT_STAGE, EXIT_ASSERT = 0, 2, 3, 4

COMMANDS = ("bootstrap", "train-prior", "search", "fit", "run", "noise-sweep", "sweep", "ablate-coeff", "timing", "validate")

# flag -> (RunConfig section or None, field, type)
OVERRIDES = {
    "dataset": (None, "dataset", str),
    "train_csv": (None, "train_csv", str),
    "test_csv": (None, "test_csv", str),
    "target": (None, "target", str),
    "c_max": (None, "c_max", int),
    "corpus_m": (None, "corpus_m", int),
    "corpus_benchmark": (None, "corpus_benchmark", str),
    "holdout": (None, "holdout", float),
    "corpus": (None, "corpus_path", str),
    "checkpoint": (None, "checkpoint_path", str),
    "pool": (None, "pool_path", str),
    "results": (None, "results_path", str),
    "population_size": ("gp", "population_size", int),
    "generations": ("gp", "generations", int),
    "epochs": ("prior", "epochs", int),
    "num_samples": ("sampler", "num_samples", int),
    "temperature": ("sampler", "temperature", float),
    "top_k": ("sampler", "top_k", int),
    "max_term": ("sampler", "max_term", int),
    "max_trig_vars": ("sampler", "max_trig_vars", int),
    "optimizer": ("fit", "optimizer", str),
}


def _bool(s: str) -> bool:
    if s.lower() in ("1", "true", "yes", "on"):
        return True
    if s.lower() in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {s!r}")


def _generated_overrides() -> dict:
    """Long-form flags for every scalar config field, e.g. --prior-d-model.

    Stage seeds are derived from --seed and tuple fields go through --config.
    """
    out = {name: (None, name, int) for name in ("corpus_l_max", "corpus_min_entries", "corpus_relabel", "max_vars")}
    defaults = pl.RunConfig()
    for section in ("gp", "prior", "sampler", "fit"):
        sub = getattr(defaults, section)
        for f in fields(sub):
            default = getattr(sub, f.name)
            if f.name == "seed" or isinstance(default, tuple):
                continue
            typ = _bool if isinstance(default, bool) else type(default)
            out[f"{section}_{f.name}"] = (section, f.name, typ)
    return out


OVERRIDES.update(_generated_overrides())


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="symprior", description="Template-prior symbolic regression pipeline.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="JSON file with RunConfig fields")
    p.add_argument("--seed", type=int)
    p.add_argument("--jobs", type=int)
    p.add_argument("--out-dir")
    p.add_argument("-v", "--verbose", action="store_true")
    for flag, (_, _, typ) in OVERRIDES.items():
        p.add_argument("--" + flag.replace("_", "-"), dest=flag, type=typ)
    p.add_argument("--reuse-checkpoint", action="store_true", help="run: skip bootstrap/training if a checkpoint exists")
    p.add_argument("--knob", choices=pl.SWEEP_KNOBS, help="sweep: hyperparameter to vary")
    p.add_argument("--values", help="sweep: comma-separated values")
    p.add_argument("--template", default="COF x0 mul COF x1 mul sin add", help="ablate-coeff: postfix template")
    p.add_argument("--ablate-seeds", type=int, default=10)
    p.add_argument("--etas", help="noise-sweep: comma-separated noise levels")
    p.add_argument("--jitter", type=float, default=0.005)
    p.add_argument("--assert", dest="assert_mode", action="store_true", help="exit 4 when a monotonicity check fails")
    p.add_argument("--result-files", nargs="*", default=[], help="timing: results files to time")
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--file", help="validate: artifact to re-check")
    p.add_argument("--output", help="write the emitted table here instead of stdout")
    return p


def resolve_config(args) -> pl.RunConfig:
    cfg = pl.load_config(args.config) if args.config else pl.RunConfig()
    top = {}
    sections: dict[str, dict] = {}
    for flag, (section, name, _) in OVERRIDES.items():
        val = getattr(args, flag)
        if val is None:
            continue
        if section is None:
            top[name] = val
        else:
            sections.setdefault(section, {})[name] = val
    if args.seed is not None:
        top["seed"] = args.seed
    if args.jobs is not None:
        top["jobs"] = args.jobs
    if args.out_dir is not None:
        top["out_dir"] = args.out_dir
    try:
        for section, kw in sections.items():
            top[section] = replace(getattr(cfg, section), **kw)
        return replace(cfg, **top)
    except (TypeError, ValueError) as e:
        raise pl.ConfigError(str(e)) from None


def to_csv(rows: list[dict]) -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


def emit(text: str, output: str | None) -> None:
    if output:
        atomic_write_text(output, text)
    else:
        sys.stdout.write(text)


def _floats(s: str) -> list[float]:
    try:
        return [float(v) for v in s.split(",") if v.strip()]
    except ValueError:
        raise pl.ConfigError(f"not a comma-separated number list: {s!r}") from None


def dispatch(args, cfg: pl.RunConfig) -> int:
    cmd = args.command
    if cmd == "bootstrap":
        corpus = pl.cmd_bootstrap(cfg)
        print(f"corpus: {len(corpus)} templates -> {cfg.path('corpus')}")
    elif cmd == "train-prior":
        model = pl.cmd_train_prior(cfg)
        last = model.history[-1] if model.history else None
        print(f"checkpoint -> {cfg.path('checkpoint')}; final held-out CE {last.heldout_ce if last else float('nan'):.4f}")
    elif cmd == "search":
        pool = pl.cmd_search(cfg)
        print(f"pool: {len(pool)} survivors -> {cfg.path('pool')}; rejections {pool.stats}")
    elif cmd in ("fit", "run"):
        out = pl.cmd_fit(cfg) if cmd == "fit" else pl.cmd_run(cfg, args.reuse_checkpoint).fit
        print(json.dumps(pl.equation_record(out.selected), indent=2))
    elif cmd == "noise-sweep":
        etas = _floats(args.etas) if args.etas else ETA_GRID
        rows, ok = pl.cmd_noise_sweep(cfg, etas, args.jitter)
        emit(to_csv(rows), args.output)
        if args.assert_mode and not ok:
            print("noise sweep is not monotone within jitter", file=sys.stderr)
            return EXIT_ASSERT
    elif cmd == "sweep":
        if not args.knob or not args.values:
            raise pl.ConfigError("sweep needs --knob and --values")
        rows = pl.cmd_sweep(cfg, args.knob, _floats(args.values))
        emit(to_csv(rows), args.output)
    elif cmd == "ablate-coeff":
        rec = pl.cmd_ablate_coeff(cfg, args.template, range(args.ablate_seeds))
        emit(json.dumps(rec, indent=2) + "\n", args.output)
        if args.assert_mode and not rec["budget_matched"]:
            return EXIT_ASSERT
    elif cmd == "timing":
        files = args.result_files or [str(cfg.path("results"))]
        emit(to_csv(pl.cmd_timing(files, args.repeats)), args.output)
    elif cmd == "validate":
        targets = [args.file] if args.file else [
            str(cfg.path(k)) for k in ("corpus", "checkpoint", "pool", "results") if cfg.path(k).exists()
        ]
        if not targets:
            raise pl.ConfigError("nothing to validate")
        bad = False
        for t in targets:
            ok, msg = pl.validate_file(t)
            print(("ok   " if ok else "FAIL ") + f"{t}: {msg}")
            bad |= not ok
        manifest = Path(cfg.out_dir) / "manifest.json"
        if not args.file and manifest.exists():
            stale = pl.verify_manifest(manifest)
            if stale:
                print(f"FAIL manifest checksums differ for {stale}")
                bad = True
        return EXIT_ASSERT if bad else EXIT_OK
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return dispatch(args, cfg)
    except (pl.ConfigError, json.JSONDecodeError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as e:
        print(f"missing input: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as e:  # any stage failure surfaces with its type
        print(f"stage failure: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
