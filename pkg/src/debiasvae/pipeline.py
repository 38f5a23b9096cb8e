"""Experiment configuration and the stage functions shared by the CLI and tests."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import yaml

from .bias_extract import ExtremeSets, extract_all
from .dataset import Dataset, Split, filter_dataset, load_categories, load_interactions, split_users
from .dbvae import DBVAE, TrainConfig, TrainResult, train
from .evaluation import EvalReport, SweepCurve, evaluate, sweep_k
from .scm_counterfactual import ScmConfig, augment, generate_counterfactuals, train_scm
from .synth import SynthSpec, SynthTruth, generate

logger = logging.getLogger(__name__)

# fixed offsets from the master seed
SEED_SPLIT, SEED_TRAIN, SEED_SCM, SEED_RETRAIN = 1, 2, 3, 5


@dataclass
class DataConfig:
    interactions: str | None = None
    delimiter: str = ","
    rating_threshold: float = 1.0
    skip_header: bool = False
    categories: str | None = None
    category_delimiter: str = ","
    min_item_clicks: int = 5
    min_user_clicks: int = 2
    n_val: int = 800
    n_test: int = 800
    fold_in_fraction: float = 0.8
    ground_truth: str | None = None  # truth.npz from a synthetic run
    ground_truth_top: int = 50
    synth: dict | None = None  # generate in memory instead of reading files


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    scm: ScmConfig = field(default_factory=ScmConfig)
    recall_ks: tuple[int, ...] = (20,)
    ndcg_ks: tuple[int, ...] = (100,)
    k_values: tuple[float, ...] = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)
    out_dir: str = "runs/experiment"
    seed: int = 0

    @classmethod
    def from_dict(cls, d: Mapping) -> "ExperimentConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        data = d.pop("data", {}) or {}
        data_known = {f.name for f in fields(DataConfig)}
        if set(data) - data_known:
            raise ValueError(f"unknown data keys: {sorted(set(data) - data_known)}")
        cfg = cls(
            data=DataConfig(**data),
            train=TrainConfig.from_dict(d.pop("train", {}) or {}),
            scm=ScmConfig.from_dict(d.pop("scm", {}) or {}),
            **{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()},
        )
        if not 0.0 <= cfg.train.k <= 1.0:
            raise ValueError("k must lie in [0, 1]")
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            raw = yaml.safe_load(fh) or {}
        cfg = cls.from_dict(raw)
        base = Path(path).resolve().parent
        for key in ("interactions", "categories", "ground_truth"):
            val = getattr(cfg.data, key)
            if val and not Path(val).is_absolute():
                setattr(cfg.data, key, str(base / val))
        return cfg

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("recall_ks", "ndcg_ks", "k_values"):
            d[key] = list(d[key])
        return d

    def dump(self, path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=True))


@dataclass
class Prepared:
    dataset: Dataset
    split: Split
    truth: SynthTruth | None = None


def prepare(cfg: ExperimentConfig) -> Prepared:
    """Load or synthesise data, filter, split, and count clicks over training users."""
    dc = cfg.data
    truth = None
    if dc.synth is not None:
        dataset, truth = generate(SynthSpec.from_dict(dc.synth))
    else:
        if not dc.interactions:
            raise ValueError("config.data.interactions is required when data.synth is not set")
        records = load_interactions(dc.interactions, dc.delimiter, dc.rating_threshold, skip_header=dc.skip_header)
        cats = load_categories(dc.categories, dc.category_delimiter) if dc.categories else None
        dataset = filter_dataset(records, dc.min_item_clicks, dc.min_user_clicks, cats)
        if dc.ground_truth:
            truth = SynthTruth.load(dc.ground_truth).aligned(dataset)
    split = split_users(dataset, dc.n_val, dc.n_test, cfg.seed + SEED_SPLIT, dc.fold_in_fraction)
    dataset = dataset.with_click_counts(split.train_users)
    return Prepared(dataset, split, truth)


def relevance(cfg: ExperimentConfig, prep: Prepared, users: Sequence[int]) -> dict | None:
    """Ground-truth relevant sets when synthetic truth is known, else None (held-out items)."""
    if prep.truth is None:
        return None
    return prep.truth.relevant(users, prep.split.fold_in, cfg.data.ground_truth_top)


def train_extremes(prep: Prepared, k: float, profiles: Mapping | None = None) -> dict[int, ExtremeSets]:
    profs = profiles or {int(u): prep.dataset.profile(int(u)) for u in prep.split.train_users}
    return extract_all(prep.dataset, profs, k)


def stage_train_config(cfg: ExperimentConfig, k: float | None = None, seed: int | None = None,
                       vanilla: bool = False) -> TrainConfig:
    tc = asdict(cfg.train)
    tc["seed"] = cfg.seed + SEED_TRAIN if seed is None else seed
    if k is not None:
        tc["k"] = k
    out = TrainConfig(**tc)
    return out.vanilla() if vanilla else out


def train_model(cfg: ExperimentConfig, prep: Prepared, k: float | None = None, seed: int | None = None,
                vanilla: bool = False, profiles: Mapping | None = None,
                extremes: Mapping | None = None) -> TrainResult:
    tc = stage_train_config(cfg, k, seed, vanilla)
    if extremes is None:
        extremes = {} if not tc.use_bias_heads else train_extremes(prep, tc.k)
    validation = relevance(cfg, prep, prep.split.val_users)
    return train(prep.dataset, prep.split, extremes, tc, profiles=profiles, validation=validation)


def evaluate_model(cfg: ExperimentConfig, prep: Prepared, model: DBVAE, users: Sequence[int] | None = None) -> EvalReport:
    users = prep.split.test_users if users is None else users
    report = evaluate(model, prep.dataset, prep.split, users,
                      {"recall": cfg.recall_ks, "ndcg": cfg.ndcg_ks}, relevant=relevance(cfg, prep, users))
    report.metadata = {
        "k": model.config.k,
        "seed": model.config.seed,
        "use_bias_heads": model.config.use_bias_heads,
        "dataset": prep.dataset.fingerprint(),
        "ground_truth": prep.truth is not None,
    }
    return report


@dataclass
class AugmentResult:
    counterfactuals: dict
    train_result: TrainResult
    elbo_trace: list[float]


def augment_and_retrain(cfg: ExperimentConfig, prep: Prepared, k: float | None = None) -> AugmentResult:
    """Fit the causal click model, add counterfactual items to training users, retrain from scratch."""
    users = [int(u) for u in prep.split.train_users]
    profiles = {u: prep.dataset.profile(u) for u in users}
    scm_cfg = ScmConfig(**{**asdict(cfg.scm), "seed": cfg.seed + SEED_SCM})
    fit = train_scm(prep.dataset, users, scm_cfg, profiles)
    cf = generate_counterfactuals(fit.params, fit.posterior, prep.dataset, users, scm_cfg, profiles)
    k = cfg.train.k if k is None else k
    factual_ext = train_extremes(prep, k, profiles)
    prof_en, ext_en = augment(profiles, factual_ext, cf)
    result = train_model(cfg, prep, k=k, seed=cfg.seed + SEED_RETRAIN, profiles=prof_en, extremes=ext_en)
    return AugmentResult(cf, result, fit.elbo_trace)


def sweep(cfg: ExperimentConfig, prep: Prepared, k_values: Sequence[float] | None = None,
          metric: str = "recall@20", users: Sequence[int] | None = None) -> SweepCurve:
    """Re-extract, retrain and evaluate for each debias degree."""
    ks = list(cfg.k_values if k_values is None else k_values)

    def run(k, seed):
        result = train_model(cfg, prep, k=k, seed=seed)
        rep = evaluate_model(cfg, prep, result.model, users)
        rep.metadata["val_ndcg"] = result.best_metric
        return rep

    return sweep_k(run, ks, metric, seed=cfg.seed + SEED_TRAIN)
