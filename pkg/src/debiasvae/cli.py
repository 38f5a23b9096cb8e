"""Command-line entry point: ``debiasvae <command> --config run.yaml``.

Each command writes into its own subdirectory of the experiment output
directory together with a ``manifest.json`` that records input hashes, the
master seed, package versions and whether the stage finished.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import platform
import sys
from contextlib import nullcontext
from dataclasses import asdict
from pathlib import Path

import numpy as np
import scipy
import yaml
from filelock import FileLock, Timeout

from . import __version__
from ._io import sha256_file, write_json
from .bias_extract import dump_scores
from .dataset import load_prepared, save_prepared
from .dbvae import DBVAE, write_trace
from .evaluation import sparsity_groups, write_report
from .pipeline import (
    ExperimentConfig,
    Prepared,
    augment_and_retrain,
    evaluate_model,
    prepare,
    sweep,
    train_extremes,
    train_model,
)
from .scm_counterfactual import write_counterfactuals
from .synth import SynthSpec, SynthTruth, generate, write_synth

logger = logging.getLogger("debiasvae")

THREADS_ENV = "DEBIASVAE_THREADS"
STAGES = ("prepare", "train", "augment", "evaluate", "sweep", "synth", "report")


class StageError(RuntimeError):
    """A user-facing failure: missing inputs, stale caches, bad arguments."""


# --- manifests ---------------------------------------------------------------

def _versions() -> dict:
    return {"debiasvae": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}


def _hashes(paths) -> dict:
    return {Path(p).name: sha256_file(p) for p in sorted(paths, key=lambda p: Path(p).name)}


def write_manifest(stage_dir: Path, stage: str, cfg: ExperimentConfig | None, inputs, outputs,
                   complete: bool, extra: dict | None = None) -> None:
    manifest = {
        "stage": stage,
        "complete": complete,
        "seed": cfg.seed if cfg is not None else None,
        "config": cfg.to_dict() if cfg is not None else None,
        "inputs": _hashes(inputs),
        "outputs": _hashes(p for p in outputs if Path(p).exists()),
        "versions": _versions(),
    }
    manifest.update(extra or {})
    write_json(stage_dir / "manifest.json", manifest)


def read_manifest(stage_dir: Path) -> dict | None:
    path = stage_dir / "manifest.json"
    if not path.exists():
        return None
    return json.loads(path.read_text())


# --- helpers -----------------------------------------------------------------

def _load_config(args) -> ExperimentConfig:
    if not args.config:
        raise StageError("--config is required for this command")
    if not Path(args.config).exists():
        raise StageError(f"config file not found: {args.config}")
    cfg = ExperimentConfig.load(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.k is not None:
        if not 0.0 <= args.k <= 1.0:
            raise StageError("--k must lie in [0, 1]")
        cfg.train.k = args.k
    if args.out is not None:
        cfg.out_dir = args.out
    elif not Path(cfg.out_dir).is_absolute():
        cfg.out_dir = str(Path(args.config).resolve().parent / cfg.out_dir)
    return cfg


def _data_inputs(cfg: ExperimentConfig) -> list[Path]:
    return [Path(p) for p in (cfg.data.interactions, cfg.data.categories, cfg.data.ground_truth) if p]


def _prepare_key(cfg: ExperimentConfig) -> dict:
    """The settings a prepared cache depends on."""
    return {"data": asdict(cfg.data), "seed": cfg.seed}


def _load_prepared_stage(cfg: ExperimentConfig, needed_by: str) -> Prepared:
    stage = Path(cfg.out_dir) / "prepare"
    manifest = read_manifest(stage)
    cache = stage / "prepared.npz"
    if manifest is None or not manifest.get("complete") or not cache.exists():
        raise StageError(f"{needed_by} needs prepared data in {stage}; run `debiasvae prepare` first")
    if manifest.get("key") != json.loads(json.dumps(_prepare_key(cfg))):
        raise StageError(f"prepared data in {stage} was built from different data settings or seed; "
                         "rerun `debiasvae prepare`")
    dataset, split = load_prepared(cache)
    truth_path = stage / "truth.npz"
    truth = SynthTruth.load(truth_path).aligned(dataset) if truth_path.exists() else None
    return Prepared(dataset, split, truth)


def _checkpoint(cfg: ExperimentConfig, args, default_stage: str = "train") -> Path:
    path = Path(args.checkpoint) if args.checkpoint else Path(cfg.out_dir) / default_stage / "model.npz"
    if path.is_dir():
        path = path / "model.npz"
    if not path.exists():
        raise StageError(f"no checkpoint at {path}; run `debiasvae train` first")
    return path


def _stage_dir(cfg: ExperimentConfig, name: str) -> Path:
    d = Path(cfg.out_dir) / name
    d.mkdir(parents=True, exist_ok=True)
    return d


# --- commands ----------------------------------------------------------------

def cmd_prepare(cfg: ExperimentConfig, args) -> Path:
    out = _stage_dir(cfg, "prepare")
    inputs = _data_inputs(cfg)
    write_manifest(out, "prepare", cfg, inputs, [], complete=False)
    prep = prepare(cfg)
    cache = out / "prepared.npz"
    save_prepared(cache, prep.dataset, prep.split, _prepare_key(cfg))
    outputs = [cache]
    if prep.truth is not None:
        prep.truth.save(out / "truth.npz")
        outputs.append(out / "truth.npz")
    stats = {"n_users": prep.dataset.n_users, "n_items": prep.dataset.n_items,
             "n_interactions": int(prep.dataset.matrix.nnz), "n_train": len(prep.split.train_users),
             "n_val": len(prep.split.val_users), "n_test": len(prep.split.test_users)}
    write_json(out / "stats.json", stats)
    outputs.append(out / "stats.json")
    write_manifest(out, "prepare", cfg, inputs, outputs, complete=True, extra={"key": _prepare_key(cfg)})
    logger.info("prepared %d users x %d items -> %s", stats["n_users"], stats["n_items"], cache)
    return out


def _save_training(out: Path, result, cfg: ExperimentConfig) -> list[Path]:
    model_path = out / "model.npz"
    result.model.save(model_path, result.optimizer, result.best_metric, {"best_epoch": result.best_epoch})
    write_trace(out / "trace.tsv", result.trace)
    return [model_path, out / "trace.tsv"]


def cmd_train(cfg: ExperimentConfig, args) -> Path:
    prep = _load_prepared_stage(cfg, "train")
    out = _stage_dir(cfg, "train")
    inputs = [Path(cfg.out_dir) / "prepare" / "prepared.npz"]
    write_manifest(out, "train", cfg, inputs, [], complete=False)
    k = cfg.train.k
    extremes = train_extremes(prep, k)
    dump_scores(out / "extreme_scores.tsv", prep.dataset,
                {int(u): prep.dataset.profile(int(u)) for u in prep.split.train_users}, k)
    result = train_model(cfg, prep, k=k, extremes=extremes)
    outputs = _save_training(out, result, cfg) + [out / "extreme_scores.tsv"]
    write_manifest(out, "train", cfg, inputs, outputs, complete=True,
                   extra={"best_epoch": result.best_epoch, "best_val_ndcg": result.best_metric})
    logger.info("trained k=%g, best epoch %d (val NDCG %.4f)", k, result.best_epoch, result.best_metric or 0.0)
    return out


def cmd_augment(cfg: ExperimentConfig, args) -> Path:
    prep = _load_prepared_stage(cfg, "augment")
    out = _stage_dir(cfg, "augment")
    inputs = [Path(cfg.out_dir) / "prepare" / "prepared.npz"]
    write_manifest(out, "augment", cfg, inputs, [], complete=False)
    res = augment_and_retrain(cfg, prep)
    cf_path = out / "counterfactuals.tsv"
    write_counterfactuals(cf_path, res.counterfactuals, prep.dataset)
    with open(out / "scm_elbo.tsv", "w") as fh:
        fh.write("epoch\telbo\n")
        for n, v in enumerate(res.elbo_trace, start=1):
            fh.write(f"{n}\t{v:.10f}\n")
    outputs = _save_training(out, res.train_result, cfg) + [cf_path, out / "scm_elbo.tsv"]
    write_manifest(out, "augment", cfg, inputs, outputs, complete=True,
                   extra={"best_epoch": res.train_result.best_epoch, "best_val_ndcg": res.train_result.best_metric})
    return out


def cmd_evaluate(cfg: ExperimentConfig, args) -> Path:
    prep = _load_prepared_stage(cfg, "evaluate")
    ckpt = _checkpoint(cfg, args)
    model = DBVAE.load(ckpt)
    name = ckpt.parent.name if ckpt.name == "model.npz" else ckpt.stem
    out = _stage_dir(cfg, f"evaluate/{name}")
    inputs = [Path(cfg.out_dir) / "prepare" / "prepared.npz", ckpt]
    write_manifest(out, "evaluate", cfg, inputs, [], complete=False)
    report = evaluate_model(cfg, prep, model)
    report.metadata["checkpoint"] = name
    if len(report.users) >= 8:
        sparsity_groups(report, prep.split, metric=f"recall@{cfg.recall_ks[0]}")
    write_report(report, out, "test", prep.dataset)
    outputs = sorted(out.glob("test_*"))
    write_manifest(out, "evaluate", cfg, inputs, outputs, complete=True)
    for metric, value in report.aggregate.items():
        print(f"{name}\t{metric}\t{value:.6f}")
    return out


def cmd_sweep(cfg: ExperimentConfig, args) -> Path:
    prep = _load_prepared_stage(cfg, "sweep")
    out = _stage_dir(cfg, "sweep")
    inputs = [Path(cfg.out_dir) / "prepare" / "prepared.npz"]
    write_manifest(out, "sweep", cfg, inputs, [], complete=False)
    metric = f"recall@{cfg.recall_ks[0]}"
    curve = sweep(cfg, prep, metric=metric)
    curve.write(out / "curve.tsv")
    outputs = [out / "curve.tsv"]
    for k, rep in zip(curve.ks, curve.reports):
        tag = f"k{k:g}"
        write_report(rep, out, tag, prep.dataset)
        outputs += [out / f"{tag}_users.tsv", out / f"{tag}_summary.json"]
    extra = {"curve_complete": curve.complete, "error": curve.error}
    if curve.points:
        extra["best_k"], extra["best_value"] = curve.best()
    write_manifest(out, "sweep", cfg, inputs, outputs, complete=curve.complete, extra=extra)
    if not curve.complete:
        raise StageError(f"sweep stopped early: {curve.error} (partial curve in {out / 'curve.tsv'})")
    return out


def _synth_spec(path: str) -> SynthSpec:
    with open(path) as fh:
        raw = yaml.safe_load(fh) or {}
    if "data" in raw and isinstance(raw["data"], dict) and raw["data"].get("synth") is not None:
        raw = raw["data"]["synth"]
    elif "synth" in raw:
        raw = raw["synth"]
    return SynthSpec.from_dict(raw)


def cmd_synth(cfg, args) -> Path:
    if not args.config:
        raise StageError("synth needs --config pointing at a synthetic spec file")
    if not Path(args.config).exists():
        raise StageError(f"spec file not found: {args.config}")
    spec = _synth_spec(args.config)
    if args.seed is not None:
        spec.seed = args.seed
    out = Path(args.out or Path(args.config).resolve().parent / "synth")
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(out, "synth", None, [args.config], [], complete=False)
    ds, truth = generate(spec)
    paths = write_synth(out, ds, truth, spec)
    write_manifest(out, "synth", None, [args.config], list(paths.values()), complete=True,
                   extra={"seed": spec.seed})
    logger.info("wrote %d users x %d items to %s", ds.n_users, ds.n_items, out)
    return out


def cmd_report(cfg: ExperimentConfig, args) -> Path:
    """Collect evaluation summaries and the sweep curve into one table."""
    root = Path(cfg.out_dir)
    summaries = sorted((root / "evaluate").glob("*/test_summary.json")) if (root / "evaluate").exists() else []
    curve = root / "sweep" / "curve.tsv"
    if not summaries and not curve.exists():
        raise StageError(f"nothing to report under {root}; run `debiasvae evaluate` or `debiasvae sweep` first")
    out = _stage_dir(cfg, "report")
    rows, combined = [], {"evaluations": {}, "sweep": None}
    for path in summaries:
        s = json.loads(path.read_text())
        name = path.parent.name
        combined["evaluations"][name] = {"aggregate": s["aggregate"], "k": s["metadata"].get("k"),
                                         "n_users": s["n_users"], "groups": s.get("groups")}
        for metric, value in sorted(s["aggregate"].items()):
            rows.append((name, metric, value))
    with open(out / "report.tsv", "w") as fh:
        fh.write("model\tmetric\tvalue\n")
        for name, metric, value in rows:
            fh.write(f"{name}\t{metric}\t{value:.10f}\n")
    outputs = [out / "report.tsv"]
    if curve.exists():
        lines = [ln for ln in curve.read_text().splitlines() if ln and not ln.startswith("#")]
        pts = [tuple(float(v) for v in ln.split("\t")) for ln in lines[1:]]
        combined["sweep"] = {"metric": lines[0].split("\t")[1], "points": pts}
    write_json(out / "report.json", combined)
    outputs.append(out / "report.json")
    write_manifest(out, "report", cfg, summaries + ([curve] if curve.exists() else []), outputs, complete=True)
    for name, metric, value in rows:
        print(f"{name}\t{metric}\t{value:.6f}")
    return out


COMMANDS = {
    "prepare": cmd_prepare,
    "train": cmd_train,
    "augment": cmd_augment,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
    "synth": cmd_synth,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="debiasvae", description="Debiasing VAE experiments.")
    parser.add_argument("command", choices=STAGES)
    parser.add_argument("--config", help="experiment YAML (synth: spec YAML)")
    parser.add_argument("--out", help="output directory, overrides out_dir")
    parser.add_argument("--seed", type=int, help="master seed, overrides seed")
    parser.add_argument("--k", type=float, help="debias degree, overrides train.k")
    parser.add_argument("--checkpoint", help="model file or stage directory for evaluate")
    parser.add_argument("--threads", type=int, help=f"BLAS threads (default ${THREADS_ENV})")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def _thread_limit(n):
    if n is None:
        env = os.environ.get(THREADS_ENV)
        n = int(env) if env else None
    if n is None:
        return nullcontext()
    if n < 1:
        raise StageError("--threads must be >= 1")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_limit(args.threads):
            if args.command == "synth":
                out = cmd_synth(None, args)
            else:
                cfg = _load_config(args)
                Path(cfg.out_dir).mkdir(parents=True, exist_ok=True)
                lock = FileLock(str(Path(cfg.out_dir) / ".lock"))
                try:
                    with lock.acquire(timeout=0):
                        out = COMMANDS[args.command](cfg, args)
                except Timeout:
                    raise StageError(f"{cfg.out_dir} is locked by another debiasvae process") from None
    except (StageError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        logger.exception("%s failed", args.command)
        print(f"error: {args.command} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    logger.info("%s done: %s", args.command, out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
