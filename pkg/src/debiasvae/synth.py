"""Synthetic click logs with known unbiased preferences.

Clicks follow the same additive structure as the causal click model: a
user's click logit for an item is

    preference(u, i) + match_strength * match(u, i) + pop_strength * log_popularity(i)

where ``preference`` is the ground truth, ``match`` re-counts the user's
category taste (amplified subjective bias) and ``log_popularity`` is a
centred power law assigned independently of content (popularity bias).
Each user draws ``interactions_per_user`` distinct items without
replacement from the softmax of these logits.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import scipy.sparse as sp

from ._io import write_npz
from .dataset import Dataset


@dataclass
class SynthSpec:
    n_users: int = 2000
    n_items: int = 500
    n_categories: int = 10
    bias_strength_pop: float = 2.0
    bias_strength_match: float = 1.0
    interactions_per_user: int = 20
    max_interactions_per_user: int | None = None  # per-user count uniform in [ipu, max] when set
    seed: int = 0
    popularity_exponent: float = 1.5
    dirichlet_concentration: float = 0.3
    preference_scale: float = 4.0
    idiosyncratic_scale: float = 1.0
    idiosyncratic_dim: int = 8
    second_category_prob: float = 0.3
    conformity_spread: float = 0.0  # log-normal sd of per-user susceptibility to popularity (mean 1)

    def __post_init__(self):
        if self.bias_strength_pop < 0 or self.bias_strength_match < 0:
            raise ValueError("bias strengths must be >= 0")
        if self.interactions_per_user < 2:
            raise ValueError("interactions_per_user must be >= 2")
        hi = self.max_interactions_per_user or self.interactions_per_user
        if hi < self.interactions_per_user or self.n_items < hi:
            raise ValueError("need interactions_per_user <= max_interactions_per_user <= n_items")

    @classmethod
    def from_dict(cls, d: Mapping) -> "SynthSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown synth keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class SynthTruth:
    """Ground truth aligned with the generated Dataset's dense indices."""

    preference: np.ndarray  # (n_users, n_items) unbiased affinity
    match: np.ndarray  # (n_users, n_items) category match
    log_popularity: np.ndarray  # (n_items,), zero mean, unit sd
    user_ids: tuple[str, ...]
    item_ids: tuple[str, ...]
    conformity: np.ndarray | None = None  # (n_users,) multiplier on the popularity term

    def relevant(self, users: Sequence[int], exclude: Mapping[int, Sequence[int]] | None = None,
                 top: int = 50) -> dict[int, np.ndarray]:
        """Top-``top`` items by true preference per user, ``exclude`` items removed first."""
        out = {}
        for u in users:
            pref = self.preference[int(u)].copy()
            if exclude is not None:
                pref[np.asarray(exclude[int(u)], dtype=np.int64)] = -np.inf
            order = np.argsort(-pref, kind="stable")[:top]
            out[int(u)] = np.sort(order[np.isfinite(pref[order])])
        return out

    def aligned(self, dataset: Dataset) -> "SynthTruth":
        """Re-index onto ``dataset`` (e.g. after a file round trip and filtering)."""
        uidx = {u: n for n, u in enumerate(self.user_ids)}
        iidx = {i: n for n, i in enumerate(self.item_ids)}
        rows = np.array([uidx[u] for u in dataset.user_ids])
        cols = np.array([iidx[i] for i in dataset.item_ids])
        conf = None if self.conformity is None else self.conformity[rows]
        return SynthTruth(self.preference[np.ix_(rows, cols)], self.match[np.ix_(rows, cols)],
                          self.log_popularity[cols], dataset.user_ids, dataset.item_ids, conf)

    def save(self, path) -> None:
        write_npz(path, {
            "preference": self.preference, "match": self.match, "log_popularity": self.log_popularity,
            "user_ids": np.array(self.user_ids, dtype=str), "item_ids": np.array(self.item_ids, dtype=str),
            "conformity": np.ones(len(self.user_ids)) if self.conformity is None else self.conformity,
        })

    @classmethod
    def load(cls, path) -> "SynthTruth":
        with np.load(path, allow_pickle=False) as z:
            return cls(z["preference"], z["match"], z["log_popularity"],
                       tuple(str(s) for s in z["user_ids"]), tuple(str(s) for s in z["item_ids"]), z["conformity"])


def click_logits(spec: SynthSpec, truth: SynthTruth) -> np.ndarray:
    conf = np.ones(truth.preference.shape[0]) if truth.conformity is None else truth.conformity
    return (truth.preference + spec.bias_strength_match * truth.match
            + spec.bias_strength_pop * conf[:, None] * truth.log_popularity[None, :])


def click_distribution(spec: SynthSpec, truth: SynthTruth) -> np.ndarray:
    logits = click_logits(spec, truth)
    logits = logits - logits.max(axis=1, keepdims=True)
    p = np.exp(logits)
    return p / p.sum(axis=1, keepdims=True)


def _latents(spec: SynthSpec):
    rng = np.random.default_rng([spec.seed, 0])
    n_u, n_i, n_c = spec.n_users, spec.n_items, spec.n_categories
    cats = np.zeros((n_i, n_c))
    cats[np.arange(n_i), rng.integers(0, n_c, n_i)] = 1.0
    second = rng.random(n_i) < spec.second_category_prob
    cats[np.flatnonzero(second), rng.integers(0, n_c, n_i)[second]] = 1.0
    theta = rng.dirichlet(np.full(n_c, spec.dirichlet_concentration), size=n_u)
    item_topic = cats / cats.sum(axis=1, keepdims=True)
    f = spec.idiosyncratic_dim
    P = rng.normal(0.0, 1.0 / np.sqrt(f), (n_u, f))
    Q = rng.normal(0.0, 1.0, (n_i, f))
    preference = spec.preference_scale * theta @ item_topic.T + spec.idiosyncratic_scale * P @ Q.T
    match = (theta / np.linalg.norm(theta, axis=1, keepdims=True)) @ item_topic.T
    # popularity gets its own stream so the content side never depends on it
    rng_pop = np.random.default_rng([spec.seed, 1])
    ranks = rng_pop.permutation(n_i) + 1.0
    log_pop = -spec.popularity_exponent * np.log(ranks)
    log_pop = (log_pop - log_pop.mean()) / log_pop.std()
    s = spec.conformity_spread
    conformity = np.exp(rng_pop.normal(-0.5 * s * s, s, n_u)) if s > 0 else np.ones(n_u)
    return cats, preference, match, log_pop, conformity


def generate(spec: SynthSpec) -> tuple[Dataset, SynthTruth]:
    """Sample a biased click log and return it with its unbiased truth."""
    cats, preference, match, log_pop, conformity = _latents(spec)
    user_ids = tuple(str(u) for u in range(spec.n_users))
    item_ids = tuple(str(i) for i in range(spec.n_items))
    truth = SynthTruth(preference, match, log_pop, user_ids, item_ids, conformity)
    logits = click_logits(spec, truth)
    rng = np.random.default_rng([spec.seed, 2])
    hi = spec.max_interactions_per_user or spec.interactions_per_user
    counts = rng.integers(spec.interactions_per_user, hi + 1, spec.n_users)
    rows, cols = [], []
    for u in range(spec.n_users):
        # Gumbel top-k == sequential sampling without replacement from softmax(logits)
        keys = logits[u] + rng.gumbel(size=spec.n_items)
        chosen = np.argsort(-keys, kind="stable")[: counts[u]]
        rows.append(np.full(len(chosen), u))
        cols.append(np.sort(chosen))
    r, c = np.concatenate(rows), np.concatenate(cols)
    mat = sp.csr_matrix((np.ones(len(r), dtype=np.float32), (r, c)), shape=(spec.n_users, spec.n_items))
    mat.sort_indices()
    names = tuple(f"c{j}" for j in range(spec.n_categories))
    return Dataset(mat, user_ids, item_ids, cats, names), truth


def write_synth(out_dir, dataset: Dataset, truth: SynthTruth, spec: SynthSpec | None = None) -> dict[str, Path]:
    """Write files in the formats ``dataset.load_interactions`` / ``load_categories`` read."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"interactions": out / "interactions.csv", "categories": out / "categories.csv",
             "truth": out / "truth.npz"}
    m = dataset.matrix
    with open(paths["interactions"], "w") as fh:
        for u in range(dataset.n_users):
            for i in m.indices[m.indptr[u]:m.indptr[u + 1]]:
                fh.write(f"{dataset.user_ids[u]},{dataset.item_ids[i]}\n")
    with open(paths["categories"], "w") as fh:
        for i, iid in enumerate(dataset.item_ids):
            names = [dataset.category_names[j] for j in np.flatnonzero(dataset.item_categories[i])]
            fh.write(f"{iid},{'|'.join(names)}\n")
    truth.save(paths["truth"])
    if spec is not None:
        import json

        paths["spec"] = out / "synth_spec.json"
        paths["spec"].write_text(json.dumps(asdict(spec), indent=2, sort_keys=True) + "\n")
    return paths
