"""Top-K ranking metrics, evaluation reports, sparsity groups and the k sweep."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from ._io import write_json

logger = logging.getLogger(__name__)

N_GROUPS = 8


class NoEvaluableUsers(ValueError):
    pass


def recall_at_k(ranking: Sequence[int], held_out_set, K: int) -> float:
    held = set(int(i) for i in held_out_set)
    if not held:
        raise ValueError("held-out set is empty")
    hits = sum(1 for i in list(ranking)[:K] if int(i) in held)
    return hits / min(K, len(held))


def ndcg_at_k(ranking: Sequence[int], held_out_set, K: int) -> float:
    held = set(int(i) for i in held_out_set)
    if not held:
        raise ValueError("held-out set is empty")
    dcg = sum(1.0 / np.log2(r + 2) for r, i in enumerate(list(ranking)[:K]) if int(i) in held)
    idcg = sum(1.0 / np.log2(r + 2) for r in range(min(K, len(held))))
    return float(dcg / idcg)


def batch_metrics(top: np.ndarray, relevant: Sequence, K: int) -> tuple[np.ndarray, np.ndarray]:
    """Recall@K and NDCG@K for many users at once.

    ``top`` holds each user's ranked item indices; with fewer than K
    columns (small catalogues) the missing positions count as misses.
    """
    n = top.shape[0]
    width = min(K, top.shape[1])
    hits = np.zeros((n, K))
    n_rel = np.zeros(n)
    for r, rel in enumerate(relevant):
        rel = np.asarray(list(rel), dtype=np.int64)
        n_rel[r] = len(rel)
        hits[r, :width] = np.isin(top[r, :width], rel)
    if np.any(n_rel == 0):
        raise ValueError("held-out set is empty")
    discounts = 1.0 / np.log2(np.arange(2, K + 2))
    idcg_table = np.concatenate([[0.0], np.cumsum(discounts)])
    denom = np.minimum(K, n_rel)
    recall = hits.sum(axis=1) / denom
    ndcg = (hits * discounts).sum(axis=1) / idcg_table[denom.astype(np.int64)]
    return recall, ndcg


@dataclass
class EvalReport:
    users: np.ndarray
    per_user: dict[str, np.ndarray]
    fold_in_sizes: np.ndarray
    skipped: int = 0
    metadata: dict = field(default_factory=dict)
    groups: list[dict] | None = None

    @property
    def aggregate(self) -> dict[str, float]:
        return {name: float(vals.mean()) for name, vals in self.per_user.items()}

    def __getitem__(self, name: str) -> float:
        return self.aggregate[name]


def evaluate(
    model,
    dataset,
    split,
    users: Sequence[int],
    Ks: Mapping[str, Sequence[int]] | None = None,
    relevant: Mapping[int, Sequence[int]] | None = None,
    batch_size: int = 1000,
    extremes: Mapping | None = None,
) -> EvalReport:
    """Score held-out users with ``model.rank`` and average Recall/NDCG.

    ``relevant`` overrides the split's held-out items as ground truth (used
    with synthetic preference truth). Users with no relevant items are
    skipped and counted.
    """
    Ks = dict(Ks or {"recall": (20,), "ndcg": (100,)})
    truth = relevant if relevant is not None else split.held_out
    keep = [int(u) for u in users if len(truth.get(int(u), ())) > 0]
    skipped = len(users) - len(keep)
    if not keep:
        raise NoEvaluableUsers("no users with nonempty held-out sets")
    max_k = max(k for ks in Ks.values() for k in ks)
    per_user: dict[str, list] = {f"{m}@{k}": [] for m, ks in Ks.items() for k in ks}
    for start in range(0, len(keep), batch_size):
        chunk = keep[start:start + batch_size]
        kw = {"extremes": [extremes[u] for u in chunk]} if extremes is not None else {}
        top = model.rank([split.fold_in[u] for u in chunk], dataset, top_k=max_k, **kw)
        rel = [truth[u] for u in chunk]
        for metric, ks in Ks.items():
            for k in ks:
                rec, nd = batch_metrics(top, rel, k)
                per_user[f"{metric}@{k}"].append(rec if metric == "recall" else nd)
    report = EvalReport(
        users=np.asarray(keep, dtype=np.int64),
        per_user={name: np.concatenate(v) for name, v in per_user.items()},
        fold_in_sizes=np.array([len(split.fold_in[u]) for u in keep], dtype=np.int64),
        skipped=skipped,
    )
    if skipped:
        logger.info("skipped %d users with empty held-out sets", skipped)
    return report


def group_sizes(n: int, n_groups: int = N_GROUPS) -> list[int]:
    base, extra = divmod(n, n_groups)
    return [base + 1 if g < extra else base for g in range(n_groups)]


def sparsity_groups(report: EvalReport, split=None, metric: str = "recall@20", n_groups: int = N_GROUPS) -> list[dict]:
    """Sort users by fold-in size (ties by user index) and average ``metric``
    over ``n_groups`` contiguous near-equal groups, extras going to the front."""
    n = len(report.users)
    if n < n_groups:
        raise ValueError(f"need at least {n_groups} evaluated users, have {n}")
    sizes = report.fold_in_sizes
    if split is not None:
        sizes = np.array([len(split.fold_in[int(u)]) for u in report.users])
    order = np.lexsort((report.users, sizes))
    vals = report.per_user[metric]
    groups, start = [], 0
    for g, size in enumerate(group_sizes(n, n_groups)):
        idx = order[start:start + size]
        groups.append({
            "group": g,
            "n_users": int(size),
            "min_fold_in": int(sizes[idx].min()),
            "max_fold_in": int(sizes[idx].max()),
            metric: float(vals[idx].mean()),
            "users": report.users[idx].tolist(),
        })
        start += size
    report.groups = groups
    return groups


def write_report(report: EvalReport, out_dir, prefix: str = "report", dataset=None) -> None:
    """Per-user and per-group TSV rows plus a JSON summary."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = sorted(report.per_user)
    with open(out / f"{prefix}_users.tsv", "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["user", "fold_in"] + names)
        for n, u in enumerate(report.users):
            uid = dataset.user_ids[u] if dataset is not None else int(u)
            w.writerow([uid, int(report.fold_in_sizes[n])] + [f"{report.per_user[m][n]:.10f}" for m in names])
    summary = {
        "aggregate": {k: round(v, 12) for k, v in report.aggregate.items()},
        "n_users": int(len(report.users)),
        "skipped": int(report.skipped),
        "metadata": report.metadata,
    }
    if report.groups is not None:
        metric_keys = [k for k in report.groups[0] if "@" in k]
        with open(out / f"{prefix}_groups.tsv", "w", newline="") as fh:
            w = csv.writer(fh, delimiter="\t", lineterminator="\n")
            w.writerow(["group", "n_users", "min_fold_in", "max_fold_in"] + metric_keys)
            for g in report.groups:
                w.writerow([g["group"], g["n_users"], g["min_fold_in"], g["max_fold_in"]]
                           + [f"{g[m]:.10f}" for m in metric_keys])
        summary["groups"] = [{k: v for k, v in g.items() if k != "users"} for g in report.groups]
    write_json(out / f"{prefix}_summary.json", summary)


@dataclass
class SweepCurve:
    points: list[tuple[float, float]]
    metric: str = "recall@20"
    complete: bool = True
    error: str | None = None
    reports: list[EvalReport] = field(default_factory=list, repr=False)

    @property
    def ks(self) -> list[float]:
        return [k for k, _ in self.points]

    @property
    def values(self) -> list[float]:
        return [v for _, v in self.points]

    def best(self) -> tuple[float, float]:
        return max(self.points, key=lambda p: p[1])

    def write(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(f"# complete={self.complete}" + (f" error={self.error}" if self.error else "") + "\n")
            fh.write(f"k\t{self.metric}\n")
            for k, v in self.points:
                fh.write(f"{k:g}\t{v:.10f}\n")


def k_seed_offset(k: float) -> int:
    # seed derives from the k value itself, so repeated k values reproduce exactly
    return int(round(k * 1000))


def sweep_k(
    run: Callable[[float, int], EvalReport],
    k_values: Sequence[float],
    metric: str = "recall@20",
    seed: int = 0,
) -> SweepCurve:
    """Run ``run(k, seed)`` (extract, train, evaluate) for each k and collect ``metric``.

    A failing run stops the sweep; the partial curve is returned flagged
    incomplete.
    """
    ks = list(k_values)
    if any(not 0.0 <= k <= 1.0 for k in ks):
        raise ValueError("k values must lie in [0, 1]")
    if any(b < a for a, b in zip(ks, ks[1:])):
        raise ValueError("k values must be sorted")
    curve = SweepCurve([], metric)
    for k in ks:
        try:
            report = run(k, seed + k_seed_offset(k))
        except Exception as exc:  # noqa: BLE001 - any failure marks the curve partial
            logger.exception("sweep aborted at k=%g", k)
            curve.complete = False
            curve.error = f"k={k:g}: {type(exc).__name__}: {exc}"
            break
        curve.points.append((float(k), report[metric]))
        curve.reports.append(report)
    return curve
