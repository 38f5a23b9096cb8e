"""Popularity / matching scores and single-bias extreme item sets."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np

from .dataset import Dataset


@dataclass(frozen=True)
class BiasScores:
    """Per-item scores over one user's profile, items in ascending index order."""

    items: np.ndarray
    s_p: np.ndarray
    s_m: np.ndarray
    rank_p: np.ndarray
    rank_m: np.ndarray


@dataclass(frozen=True)
class ExtremeSets:
    x_p: frozenset
    x_m: frozenset
    k: float


def popularity_score(dataset: Dataset, user_profile, item: int) -> float:
    profile = np.asarray(list(user_profile), dtype=np.int64)
    if item not in set(profile.tolist()):
        raise KeyError(f"item {item} is not in the user profile")
    denom = dataset.item_click_count[profile].sum()
    if denom == 0:
        return 0.0
    return float(dataset.item_click_count[item] / denom)


def user_category_vector(dataset: Dataset, user_profile) -> np.ndarray:
    profile = np.asarray(list(user_profile), dtype=np.int64)
    if profile.size == 0:
        return np.zeros(dataset.n_categories)
    return dataset.item_categories[profile].sum(axis=0)


def matching_score(item_vector, user_vector) -> float:
    item_vector = np.asarray(item_vector, dtype=np.float64)
    user_vector = np.asarray(user_vector, dtype=np.float64)
    if item_vector.shape != user_vector.shape:
        raise ValueError(f"dimension mismatch: {item_vector.shape} vs {user_vector.shape}")
    norm = np.linalg.norm(user_vector)
    if norm == 0:
        return 0.0
    return float(item_vector @ user_vector / norm)


def descending_ranks(scores: np.ndarray, items: np.ndarray) -> np.ndarray:
    """1-based ranks, largest score first, ties to the smaller item index."""
    order = np.lexsort((items, -scores))
    ranks = np.empty(len(scores), dtype=np.int64)
    ranks[order] = np.arange(1, len(scores) + 1)
    return ranks


def bias_scores(dataset: Dataset, user_profile) -> BiasScores:
    items = np.unique(np.asarray(list(user_profile), dtype=np.int64))
    nums = dataset.item_click_count[items].astype(np.float64)
    total = nums.sum()
    s_p = nums / total if total > 0 else np.zeros_like(nums)
    d_items = dataset.item_categories[items]
    d_user = d_items.sum(axis=0)
    norm = np.linalg.norm(d_user)
    s_m = d_items @ d_user / norm if norm > 0 else np.zeros(len(items))
    return BiasScores(items, s_p, s_m, descending_ranks(s_p, items), descending_ranks(s_m, items))


def extract_extreme_sets(dataset: Dataset, user_profile, k: float) -> ExtremeSets:
    """X_p: high popularity rank but low matching rank; X_m the converse.

    Both thresholds compare 1-based ranks against ``k * |profile|`` strictly.
    """
    if not 0.0 <= k <= 1.0:
        raise ValueError("k must lie in [0, 1]")
    sc = bias_scores(dataset, user_profile)
    cut = k * len(sc.items)
    x_p = sc.items[(sc.rank_p < cut) & (sc.rank_m > cut)]
    x_m = sc.items[(sc.rank_p > cut) & (sc.rank_m < cut)]
    return ExtremeSets(frozenset(x_p.tolist()), frozenset(x_m.tolist()), k)


def extract_all(dataset: Dataset, profiles: Mapping[int, Iterable[int]], k: float) -> dict[int, ExtremeSets]:
    return {u: extract_extreme_sets(dataset, items, k) for u, items in profiles.items()}


def score_rows(dataset: Dataset, user_profile) -> tuple[np.ndarray, np.ndarray]:
    """Matching and popularity scores of every item against one user's profile.

    Popularity uses the profile's click-count total as denominator, so items
    outside the profile can score above the profile's own items.
    """
    profile = np.asarray(list(user_profile), dtype=np.int64)
    d_user = user_category_vector(dataset, profile)
    norm = np.linalg.norm(d_user)
    s_m = dataset.item_categories @ d_user / norm if norm > 0 else np.zeros(dataset.n_items)
    total = dataset.item_click_count[profile].sum()
    nums = dataset.item_click_count.astype(np.float64)
    s_p = nums / total if total > 0 else np.zeros(dataset.n_items)
    return s_m, s_p


def dump_scores(path, dataset: Dataset, profiles: Mapping[int, Iterable[int]], k: float) -> None:
    """Tab-separated per-(user, item) scores, ranks and extreme-set membership."""
    with open(path, "w") as fh:
        fh.write("user\titem\ts_p\ts_m\trank_p\trank_m\tmembership\n")
        for u in sorted(profiles):
            sc = bias_scores(dataset, profiles[u])
            cut = k * len(sc.items)
            for n, it in enumerate(sc.items):
                if sc.rank_p[n] < cut and sc.rank_m[n] > cut:
                    tag = "XP"
                elif sc.rank_p[n] > cut and sc.rank_m[n] < cut:
                    tag = "XM"
                else:
                    tag = "-"
                fh.write(f"{dataset.user_ids[u]}\t{dataset.item_ids[it]}\t{sc.s_p[n]:.10g}\t"
                         f"{sc.s_m[n]:.10g}\t{sc.rank_p[n]}\t{sc.rank_m[n]}\t{tag}\n")
