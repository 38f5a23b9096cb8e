"""Interaction ingestion, filtering, user splits and bag encoding."""
from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from ._io import write_npz

logger = logging.getLogger(__name__)

CACHE_VERSION = 1


class ParseError(ValueError):
    """Raised when an input line cannot be parsed."""

    def __init__(self, path, lineno: int, message: str):
        super().__init__(f"{path}:{lineno}: {message}")
        self.path = path
        self.lineno = lineno


class EmptyDatasetError(ValueError):
    pass


@dataclass(frozen=True)
class Interaction:
    user_id: str
    item_id: str
    timestamp: int | None = None

    def __post_init__(self):
        if not self.user_id or not self.item_id:
            raise ValueError("user_id and item_id must be nonempty")


def _id_key(value: str):
    # numeric ids sort numerically, everything else lexically after them
    try:
        return (0, int(value), "")
    except ValueError:
        return (1, 0, value)


def load_interactions(
    path,
    delimiter: str = ",",
    rating_threshold: float = 1.0,
    columns: Sequence[str] | None = None,
    skip_header: bool = False,
) -> list[Interaction]:
    """Read a delimited interaction file.

    ``columns`` names the fields of each line; when omitted it is inferred
    from the field count: 2 -> (user, item), 3 -> (user, item, rating),
    4 -> (user, item, rating, timestamp). Rows whose rating is below
    ``rating_threshold`` are dropped.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    records: list[Interaction] = []
    n_lines = 0
    with open(path, encoding="utf-8", errors="replace") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if skip_header and lineno == 1:
                continue
            if not line.strip():
                continue
            n_lines += 1
            parts = [p.strip() for p in line.split(delimiter)]
            cols = columns or _infer_columns(len(parts))
            if cols is None or len(parts) != len(cols):
                raise ParseError(path, lineno, f"expected {len(cols) if cols else '2-4'} fields, got {len(parts)}")
            row = dict(zip(cols, parts))
            user, item = row.get("user", ""), row.get("item", "")
            if not user or not item:
                raise ParseError(path, lineno, "empty user or item id")
            if "rating" in row:
                try:
                    rating = float(row["rating"])
                except ValueError:
                    raise ParseError(path, lineno, f"bad rating {row['rating']!r}") from None
                if rating < rating_threshold:
                    continue
            ts = None
            if row.get("timestamp"):
                try:
                    ts = int(row["timestamp"])
                except ValueError:
                    raise ParseError(path, lineno, f"bad timestamp {row['timestamp']!r}") from None
            records.append(Interaction(user, item, ts))
    if n_lines == 0:
        raise EmptyDatasetError(f"{path} contains no records")
    return records


def _infer_columns(n: int):
    return {
        2: ("user", "item"),
        3: ("user", "item", "rating"),
        4: ("user", "item", "rating", "timestamp"),
    }.get(n)


def load_categories(path, delimiter: str = ",", category_sep: str = "|") -> dict[str, list[str]]:
    """Read ``item<delim>...<delim>cat1|cat2``; the last field holds the categories.

    Works for MovieLens ``movies.dat`` (``::`` delimited, title in the middle).
    """
    out: dict[str, list[str]] = {}
    with open(path, encoding="latin-1") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            parts = line.split(delimiter)
            if len(parts) < 2:
                raise ParseError(path, lineno, "expected item and category fields")
            cats = [c.strip() for c in parts[-1].split(category_sep) if c.strip()]
            out[parts[0].strip()] = cats
    return out


@dataclass(frozen=True)
class Dataset:
    """Binary user x item matrix with id maps, categories and click counts."""

    matrix: sp.csr_matrix
    user_ids: tuple[str, ...]
    item_ids: tuple[str, ...]
    item_categories: np.ndarray  # (n_items, n_categories), 0/1
    category_names: tuple[str, ...] = ()
    item_click_count: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.item_click_count is None:
            counts = np.asarray(self.matrix.sum(axis=0)).ravel().astype(np.int64)
            object.__setattr__(self, "item_click_count", counts)

    @property
    def n_users(self) -> int:
        return self.matrix.shape[0]

    @property
    def n_items(self) -> int:
        return self.matrix.shape[1]

    @property
    def n_categories(self) -> int:
        return self.item_categories.shape[1]

    @property
    def user_index(self) -> dict[str, int]:
        return {u: i for i, u in enumerate(self.user_ids)}

    @property
    def item_index(self) -> dict[str, int]:
        return {it: i for i, it in enumerate(self.item_ids)}

    def profile(self, user: int) -> np.ndarray:
        m = self.matrix
        return m.indices[m.indptr[user]:m.indptr[user + 1]].copy()

    def profile_sizes(self) -> np.ndarray:
        return np.diff(self.matrix.indptr)

    def with_click_counts(self, users: Iterable[int]) -> "Dataset":
        """Copy whose ``item_click_count`` is computed over ``users`` only."""
        users = np.asarray(sorted(users), dtype=np.int64)
        counts = np.asarray(self.matrix[users].sum(axis=0)).ravel().astype(np.int64)
        return replace(self, item_click_count=counts)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        m = self.matrix
        for arr in (m.indptr, m.indices, self.item_categories, self.item_click_count):
            h.update(np.ascontiguousarray(arr).tobytes())
        h.update("\x1f".join(self.user_ids).encode())
        h.update("\x1f".join(self.item_ids).encode())
        return h.hexdigest()[:16]


def build_dataset(
    pairs: Iterable[tuple[str, str]],
    categories: dict[str, list[str]] | None = None,
) -> Dataset:
    """Dense-index a set of (user, item) pairs; duplicates collapse."""
    pairs = set(pairs)
    if not pairs:
        raise EmptyDatasetError("no interactions")
    users = sorted({u for u, _ in pairs}, key=_id_key)
    items = sorted({i for _, i in pairs}, key=_id_key)
    uidx = {u: n for n, u in enumerate(users)}
    iidx = {it: n for n, it in enumerate(items)}
    rows = np.fromiter((uidx[u] for u, _ in pairs), dtype=np.int64, count=len(pairs))
    cols = np.fromiter((iidx[i] for _, i in pairs), dtype=np.int64, count=len(pairs))
    mat = sp.csr_matrix((np.ones(len(pairs), dtype=np.float32), (rows, cols)),
                        shape=(len(users), len(items)))
    mat.sort_indices()
    cat_matrix, cat_names = _category_matrix(items, categories)
    return Dataset(mat, tuple(users), tuple(items), cat_matrix, cat_names)


def _category_matrix(items, categories):
    if not categories:
        return np.zeros((len(items), 0), dtype=np.float64), ()
    names = sorted({c for cats in categories.values() for c in cats})
    cidx = {c: n for n, c in enumerate(names)}
    out = np.zeros((len(items), len(names)), dtype=np.float64)
    known = 0
    for n, it in enumerate(items):
        cats = categories.get(it)
        if cats is None:
            continue
        known += 1
        for c in cats:
            out[n, cidx[c]] = 1.0
    unknown = len(set(categories) - set(items))
    if unknown:
        logger.warning("%d category rows reference items absent from the interactions", unknown)
    if known < len(items):
        logger.warning("%d items have no category metadata", len(items) - known)
    return out, tuple(names)


def filter_dataset(
    interactions: Iterable[Interaction],
    min_item_clicks: int = 5,
    min_user_clicks: int = 2,
    categories: dict[str, list[str]] | None = None,
) -> Dataset:
    """Drop sparse items and users, repeating until nothing changes."""
    if min_item_clicks < 1 or min_user_clicks < 1:
        raise ValueError("thresholds must be >= 1")
    pairs = {(r.user_id, r.item_id) for r in interactions}
    while True:
        item_counts: dict[str, int] = {}
        for _, it in pairs:
            item_counts[it] = item_counts.get(it, 0) + 1
        kept = {(u, it) for u, it in pairs if item_counts[it] >= min_item_clicks}
        user_counts: dict[str, int] = {}
        for u, _ in kept:
            user_counts[u] = user_counts.get(u, 0) + 1
        kept = {(u, it) for u, it in kept if user_counts[u] >= min_user_clicks}
        if kept == pairs:
            break
        pairs = kept
    if not pairs:
        raise EmptyDatasetError("dataset is empty after filtering")
    return build_dataset(pairs, categories)


@dataclass(frozen=True)
class Split:
    train_users: np.ndarray
    val_users: np.ndarray
    test_users: np.ndarray
    fold_in: dict[int, np.ndarray]
    held_out: dict[int, np.ndarray]
    fold_in_fraction: float = 0.8
    seed: int = 0

    @property
    def heldout_users(self) -> np.ndarray:
        return np.concatenate([self.val_users, self.test_users])


def split_users(
    dataset: Dataset,
    n_val: int,
    n_test: int,
    seed: int,
    fold_in_fraction: float = 0.8,
) -> Split:
    """Seeded user-level split with a fold-in/held-out item partition per held-out user."""
    if not 0.0 < fold_in_fraction < 1.0:
        raise ValueError("fold_in_fraction must lie in (0, 1)")
    if n_val < 0 or n_test < 0 or n_val + n_test >= dataset.n_users:
        raise ValueError(f"cannot hold out {n_val}+{n_test} of {dataset.n_users} users")
    rng = np.random.default_rng(seed)
    sizes = dataset.profile_sizes()
    eligible = np.flatnonzero(sizes >= 2)
    if len(eligible) < n_val + n_test:
        raise ValueError(f"only {len(eligible)} users have >= 2 items; need {n_val + n_test}")
    picked = rng.permutation(eligible)[: n_val + n_test]
    val = np.sort(picked[:n_val])
    test = np.sort(picked[n_val:])
    train = np.setdiff1d(np.arange(dataset.n_users), picked)
    fold_in, held_out = {}, {}
    for u in np.concatenate([val, test]):
        items = dataset.profile(int(u))
        n_fold = int(np.floor(fold_in_fraction * len(items)))
        n_fold = min(max(n_fold, 1), len(items) - 1)
        chosen = rng.permutation(len(items))
        fold_in[int(u)] = np.sort(items[chosen[:n_fold]])
        held_out[int(u)] = np.sort(items[chosen[n_fold:]])
    return Split(train, val, test, fold_in, held_out, fold_in_fraction, seed)


def encode_bag(dataset_or_n, item_set) -> np.ndarray:
    """L2-normalised multi-hot vector over the item universe."""
    n = dataset_or_n if isinstance(dataset_or_n, (int, np.integer)) else dataset_or_n.n_items
    vec = np.zeros(n, dtype=np.float64)
    idx = np.asarray(list(item_set), dtype=np.int64)
    if idx.size:
        vec[idx] = 1.0
        vec /= np.sqrt(vec.sum())
    return vec


def bag_matrix(n_items: int, item_sets: Sequence) -> np.ndarray:
    """Stack of multi-hot rows (unnormalised), one per item set."""
    out = np.zeros((len(item_sets), n_items), dtype=np.float64)
    for r, items in enumerate(item_sets):
        idx = np.asarray(list(items), dtype=np.int64)
        if idx.size:
            out[r, idx] = 1.0
    return out


def l2_rows(bags: np.ndarray) -> np.ndarray:
    norms = np.sqrt((bags * bags).sum(axis=1, keepdims=True))
    return np.divide(bags, norms, out=np.zeros_like(bags), where=norms > 0)


def l1_rows(bags: np.ndarray) -> np.ndarray:
    sums = bags.sum(axis=1, keepdims=True)
    return np.divide(bags, sums, out=np.zeros_like(bags), where=sums > 0)


# --- cache -----------------------------------------------------------------

def save_prepared(path, dataset: Dataset, split: Split, params: dict) -> None:
    """Write dataset + split to a single versioned ``.npz`` cache."""
    held = split.heldout_users
    fold_lens = np.array([len(split.fold_in[int(u)]) for u in held], dtype=np.int64)
    hold_lens = np.array([len(split.held_out[int(u)]) for u in held], dtype=np.int64)
    fold_cat = np.concatenate([split.fold_in[int(u)] for u in held]) if len(held) else np.zeros(0, np.int64)
    hold_cat = np.concatenate([split.held_out[int(u)] for u in held]) if len(held) else np.zeros(0, np.int64)
    m = dataset.matrix
    write_npz(path, dict(
        version=np.array(CACHE_VERSION),
        shape=np.array(m.shape),
        indptr=m.indptr,
        indices=m.indices,
        user_ids=np.array(dataset.user_ids, dtype=str),
        item_ids=np.array(dataset.item_ids, dtype=str),
        category_names=np.array(dataset.category_names, dtype=str),
        item_categories=dataset.item_categories,
        item_click_count=dataset.item_click_count,
        train_users=split.train_users,
        val_users=split.val_users,
        test_users=split.test_users,
        fold_lens=fold_lens,
        hold_lens=hold_lens,
        fold_items=fold_cat,
        hold_items=hold_cat,
        fold_in_fraction=np.array(split.fold_in_fraction),
        seed=np.array(split.seed),
        params=np.array(repr(sorted(params.items()))),
    ))


def load_prepared(path) -> tuple[Dataset, Split]:
    with np.load(path, allow_pickle=False) as z:
        if int(z["version"]) != CACHE_VERSION:
            raise ValueError(f"unsupported cache version {int(z['version'])}")
        shape = tuple(int(s) for s in z["shape"])
        mat = sp.csr_matrix((np.ones(len(z["indices"]), dtype=np.float32), z["indices"], z["indptr"]), shape=shape)
        ds = Dataset(
            mat,
            tuple(str(s) for s in z["user_ids"]),
            tuple(str(s) for s in z["item_ids"]),
            z["item_categories"],
            tuple(str(s) for s in z["category_names"]),
            z["item_click_count"],
        )
        held = np.concatenate([z["val_users"], z["test_users"]])
        fold_in, held_out = {}, {}
        fo = np.concatenate([[0], np.cumsum(z["fold_lens"])])
        ho = np.concatenate([[0], np.cumsum(z["hold_lens"])])
        for n, u in enumerate(held):
            fold_in[int(u)] = z["fold_items"][fo[n]:fo[n + 1]]
            held_out[int(u)] = z["hold_items"][ho[n]:ho[n + 1]]
        split = Split(z["train_users"], z["val_users"], z["test_users"], fold_in, held_out,
                      float(z["fold_in_fraction"]), int(z["seed"]))
    return ds, split
