"""Stochastic structural causal click model and counterfactual augmentation.

For user u and item i::

    M(u,.) = softmax(E_u . E_i + wM_i * s_m(u,i) * alpha_i)
    B(u,.) = softmax(wB_i * s_p(u,i) * beta_i)
    C(u,.) = softmax(M(u,.) + B(u,.))

alpha and beta are per-item exogenous noises with N(0, 1) priors. Their
mean-field Gaussian posteriors are fitted jointly with the embeddings and
weights by maximising the ELBO of the observed clicks (abduction).
Counterfactuals fix alpha/beta at their posterior means, replace the
intervened score column(s) by standard-normal draws (action) and rank items
by the resulting C (prediction).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields
from typing import Mapping, Sequence

import numpy as np

from .bias_extract import ExtremeSets, score_rows
from .dataset import Dataset
from .dbvae import Adam, log_softmax

logger = logging.getLogger(__name__)

INTERVENTIONS = ("factual", "do_M", "do_B", "do_both")
SET_TAGS = ("X", "XP", "XM")


class ScmDiverged(RuntimeError):
    pass


@dataclass
class ScmConfig:
    embed_dim: int = 64
    learning_rate: float = 0.01
    epochs: int = 50
    mc_samples: int = 1
    top_n: int = 100
    batch_size: int = 1000
    init_scale: float = 0.1
    seed: int = 0
    sample_posterior: bool = False  # draw alpha/beta at intervention time instead of using means

    def __post_init__(self):
        if self.top_n < 1:
            raise ValueError("top_n must be >= 1")
        if self.mc_samples < 1:
            raise ValueError("mc_samples must be >= 1")

    @classmethod
    def from_dict(cls, d: Mapping) -> "ScmConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown scm config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ExogenousPosterior:
    mu_alpha: np.ndarray
    log_var_alpha: np.ndarray
    mu_beta: np.ndarray
    log_var_beta: np.ndarray

    @classmethod
    def prior(cls, n_items: int) -> "ExogenousPosterior":
        z = np.zeros(n_items)
        return cls(z.copy(), z.copy(), z.copy(), z.copy())

    def kl(self) -> float:
        """KL(q(alpha) || N(0,1)) + KL(q(beta) || N(0,1))."""
        return float(_gauss_kl(self.mu_alpha, self.log_var_alpha).sum()
                     + _gauss_kl(self.mu_beta, self.log_var_beta).sum())


def _gauss_kl(mu, lv):
    return 0.5 * (mu * mu + np.exp(lv) - 1.0 - lv)


@dataclass
class ScmParams:
    users: np.ndarray  # dense user index of each embedding row
    user_emb: np.ndarray
    item_emb: np.ndarray
    w_m: np.ndarray
    w_b: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    _row: dict = field(default=None, repr=False)  # type: ignore[assignment]

    def row(self, user: int) -> int:
        if self._row is None:
            self._row = {int(u): r for r, u in enumerate(self.users)}
        return self._row[int(user)]


def _softmax_rows(a):
    return np.exp(log_softmax(a))


def _forward(user_emb, item_emb, w_m, w_b, alpha, beta, s_m, s_p):
    a = user_emb @ item_emb.T + s_m * (w_m * alpha)
    b = s_p * (w_b * beta)
    M = _softmax_rows(a)
    Bd = _softmax_rows(b)
    logC = log_softmax(M + Bd)
    return M, Bd, logC


def scm_forward(params: ScmParams, user: int, s_m_row, s_p_row):
    """(M, B, C) distributions over items for one user at the current alpha/beta."""
    e_u = params.user_emb[params.row(user)][None, :]
    M, Bd, logC = _forward(e_u, params.item_emb, params.w_m, params.w_b, params.alpha, params.beta,
                           np.asarray(s_m_row, dtype=np.float64)[None, :],
                           np.asarray(s_p_row, dtype=np.float64)[None, :])
    return M[0], Bd[0], np.exp(logC[0])


def nll_and_grads(user_emb, item_emb, w_m, w_b, alpha, beta, s_m, s_p, x):
    """Summed click NLL of a user batch and its gradients.

    Returns ``(nll, grads)`` with grads keyed user_emb, item_emb, w_m, w_b,
    alpha, beta.
    """
    M, Bd, logC = _forward(user_emb, item_emb, w_m, w_b, alpha, beta, s_m, s_p)
    nll = -(x * logC).sum()
    dc = np.exp(logC) * x.sum(axis=1, keepdims=True) - x
    da = M * (dc - (dc * M).sum(axis=1, keepdims=True))
    db = Bd * (dc - (dc * Bd).sum(axis=1, keepdims=True))
    g_wa = (da * s_m).sum(axis=0)
    g_wb = (db * s_p).sum(axis=0)
    grads = {
        "user_emb": da @ item_emb,
        "item_emb": da.T @ user_emb,
        "w_m": g_wa * alpha,
        "alpha": g_wa * w_m,
        "w_b": g_wb * beta,
        "beta": g_wb * w_b,
    }
    return float(nll), grads


@dataclass
class ScmTrainResult:
    params: ScmParams
    posterior: ExogenousPosterior
    elbo_trace: list[float]


def _score_block(dataset: Dataset, profiles: Sequence) -> tuple[np.ndarray, np.ndarray]:
    rows = [score_rows(dataset, p) for p in profiles]
    return np.array([r[0] for r in rows]), np.array([r[1] for r in rows])


def train_scm(dataset: Dataset, users: Sequence[int], config: ScmConfig,
              profiles: Mapping[int, Sequence[int]] | None = None) -> ScmTrainResult:
    """Fit embeddings, weights and exogenous posteriors on ``users``' clicks.

    Maximises E_q[sum x log C] - KL(q(alpha)) - KL(q(beta)) with
    reparameterised alpha/beta and Adam. The ELBO trace holds one
    single-sample estimate per epoch (summed over the epoch's batches).
    """
    users = np.asarray(sorted(int(u) for u in users), dtype=np.int64)
    if len(users) == 0:
        raise ValueError("no training users")
    prof = {int(u): np.asarray(profiles[int(u)] if profiles is not None else dataset.profile(int(u)))
            for u in users}
    if sum(len(p) for p in prof.values()) == 0:
        raise ValueError("no training interactions")
    n, d = dataset.n_items, config.embed_dim
    rng_init = np.random.default_rng([config.seed, 0])
    rng_shuffle = np.random.default_rng([config.seed, 1])
    rng_eps = np.random.default_rng([config.seed, 2])
    theta = {
        "user_emb": rng_init.normal(0.0, config.init_scale, (len(users), d)),
        "item_emb": rng_init.normal(0.0, config.init_scale, (n, d)),
        "w_m": np.ones(n),
        "w_b": np.ones(n),
        "mu_alpha": np.zeros(n), "lv_alpha": np.zeros(n),
        "mu_beta": np.zeros(n), "lv_beta": np.zeros(n),
    }
    opt = Adam(theta, lr=config.learning_rate)
    N = len(users)
    s_m_all, s_p_all = _score_block(dataset, [prof[int(u)] for u in users])
    x_all = np.zeros((N, n))
    for r, u in enumerate(users):
        x_all[r, prof[int(u)]] = 1.0
    trace = []
    for epoch in range(config.epochs):
        order = rng_shuffle.permutation(N)
        epoch_nll = 0.0
        for start in range(0, N, config.batch_size):
            rows = order[start:start + config.batch_size]
            grads = {k: np.zeros_like(v) for k, v in theta.items()}
            batch_nll = 0.0
            sa = np.exp(0.5 * theta["lv_alpha"])
            sb = np.exp(0.5 * theta["lv_beta"])
            for _ in range(config.mc_samples):
                ea = rng_eps.standard_normal(n)
                eb = rng_eps.standard_normal(n)
                alpha = theta["mu_alpha"] + ea * sa
                beta = theta["mu_beta"] + eb * sb
                nll, g = nll_and_grads(theta["user_emb"][rows], theta["item_emb"], theta["w_m"], theta["w_b"],
                                       alpha, beta, s_m_all[rows], s_p_all[rows], x_all[rows])
                batch_nll += nll / config.mc_samples
                # scale the batch to the full data set, then normalise by N
                scale = 1.0 / (len(rows) * config.mc_samples)
                grads["user_emb"][rows] += g["user_emb"] * scale
                grads["item_emb"] += g["item_emb"] * scale
                grads["w_m"] += g["w_m"] * scale
                grads["w_b"] += g["w_b"] * scale
                grads["mu_alpha"] += g["alpha"] * scale
                grads["lv_alpha"] += g["alpha"] * ea * 0.5 * sa * scale
                grads["mu_beta"] += g["beta"] * scale
                grads["lv_beta"] += g["beta"] * eb * 0.5 * sb * scale
            grads["mu_alpha"] += theta["mu_alpha"] / N
            grads["lv_alpha"] += 0.5 * (np.exp(theta["lv_alpha"]) - 1.0) / N
            grads["mu_beta"] += theta["mu_beta"] / N
            grads["lv_beta"] += 0.5 * (np.exp(theta["lv_beta"]) - 1.0) / N
            if not np.isfinite(batch_nll):
                raise ScmDiverged(f"epoch {epoch + 1}: non-finite click likelihood")
            opt.step(theta, grads)
            epoch_nll += batch_nll
        post = _posterior(theta)
        trace.append(-(epoch_nll + post.kl()))
        logger.debug("scm epoch %d elbo %.4f", epoch + 1, trace[-1])
    post = _posterior(theta)
    params = ScmParams(users, theta["user_emb"], theta["item_emb"], theta["w_m"], theta["w_b"],
                       post.mu_alpha.copy(), post.mu_beta.copy())
    return ScmTrainResult(params, post, trace)


def _posterior(theta) -> ExogenousPosterior:
    return ExogenousPosterior(theta["mu_alpha"].copy(), theta["lv_alpha"].copy(),
                              theta["mu_beta"].copy(), theta["lv_beta"].copy())


def scm_objective(params: ScmParams, posterior: ExogenousPosterior, dataset: Dataset,
                  eps_alpha, eps_beta, profiles: Mapping[int, Sequence[int]] | None = None) -> float:
    """Single-sample negative ELBO over all of ``params.users`` (for testing gradients)."""
    alpha = posterior.mu_alpha + eps_alpha * np.exp(0.5 * posterior.log_var_alpha)
    beta = posterior.mu_beta + eps_beta * np.exp(0.5 * posterior.log_var_beta)
    prof = [profiles[int(u)] if profiles is not None else dataset.profile(int(u)) for u in params.users]
    s_m, s_p = _score_block(dataset, prof)
    x = np.zeros((len(prof), dataset.n_items))
    for r, p in enumerate(prof):
        x[r, np.asarray(p, dtype=np.int64)] = 1.0
    _, _, logC = _forward(params.user_emb, params.item_emb, params.w_m, params.w_b, alpha, beta, s_m, s_p)
    return float(-(x * logC).sum() + posterior.kl())


def _intervened_scores(params, dataset, user, profile, which, seed):
    s_m, s_p = score_rows(dataset, profile)
    if which in ("do_M", "do_both"):
        s_m = np.random.default_rng([seed, 0, int(user)]).standard_normal(dataset.n_items)
    if which in ("do_B", "do_both"):
        s_p = np.random.default_rng([seed, 1, int(user)]).standard_normal(dataset.n_items)
    return s_m, s_p


def intervene(params: ScmParams, posterior: ExogenousPosterior, dataset: Dataset, user: int,
              which: str, seed: int, profile=None, sample_posterior: bool = False):
    """(M, B, C) for one user under ``which`` in {factual, do_M, do_B, do_both}.

    Intervened score columns are redrawn from N(0, 1) with a per-user stream
    of ``seed``; alpha/beta sit at their posterior means unless
    ``sample_posterior``.
    """
    if which not in INTERVENTIONS:
        raise ValueError(f"unknown intervention {which!r}")
    profile = dataset.profile(int(user)) if profile is None else profile
    s_m, s_p = _intervened_scores(params, dataset, user, profile, which, seed)
    alpha, beta = posterior.mu_alpha, posterior.mu_beta
    if sample_posterior:
        rng = np.random.default_rng([seed, 2, int(user)])
        alpha = alpha + rng.standard_normal(len(alpha)) * np.exp(0.5 * posterior.log_var_alpha)
        beta = beta + rng.standard_normal(len(beta)) * np.exp(0.5 * posterior.log_var_beta)
    e_u = params.user_emb[params.row(user)][None, :]
    M, Bd, logC = _forward(e_u, params.item_emb, params.w_m, params.w_b, alpha, beta, s_m[None], s_p[None])
    return M[0], Bd[0], np.exp(logC[0])


def top_n(dist: np.ndarray, n: int) -> np.ndarray:
    """Indices of the n largest entries, ties to the smaller index."""
    return np.argsort(-dist, kind="stable")[:n]


@dataclass
class CounterfactualSets:
    x: frozenset
    x_p: frozenset
    x_m: frozenset


def generate_counterfactuals(params: ScmParams, posterior: ExogenousPosterior, dataset: Dataset,
                             users: Sequence[int], config: ScmConfig,
                             profiles: Mapping[int, Sequence[int]] | None = None) -> dict[int, CounterfactualSets]:
    """Top-N items per user under do(M) -> X_p, do(B) -> X_m, do(M, B) -> X."""
    out = {}
    for u in users:
        prof = profiles[int(u)] if profiles is not None else None
        sets = {}
        for which in ("do_M", "do_B", "do_both"):
            C = intervene(params, posterior, dataset, u, which, config.seed, prof, config.sample_posterior)[2]
            sets[which] = frozenset(top_n(C, config.top_n).tolist())
        out[int(u)] = CounterfactualSets(sets["do_both"], sets["do_M"], sets["do_B"])
    return out


def augment(profiles: Mapping[int, Sequence[int]], extreme_sets: Mapping[int, ExtremeSets],
            counterfactuals: Mapping[int, CounterfactualSets]):
    """Union factual profiles and extreme sets with their counterfactual sets.

    Returns ``(enhanced_profiles, enhanced_extreme_sets)``; users without
    counterfactuals keep their factual data.
    """
    prof_en, ext_en = {}, {}
    for u, items in profiles.items():
        ext = extreme_sets.get(u, ExtremeSets(frozenset(), frozenset(), 0.0))
        cf = counterfactuals.get(u)
        if cf is None:
            prof_en[u] = np.asarray(sorted(set(int(i) for i in items)), dtype=np.int64)
            ext_en[u] = ext
            continue
        prof_en[u] = np.asarray(sorted(set(int(i) for i in items) | cf.x), dtype=np.int64)
        ext_en[u] = ExtremeSets(ext.x_p | cf.x_p, ext.x_m | cf.x_m, ext.k)
    return prof_en, ext_en


def write_counterfactuals(path, sets: Mapping[int, CounterfactualSets], dataset: Dataset) -> None:
    """One line per (user, tag): ``user<TAB>X|XP|XM<TAB>item item ...`` (external ids)."""
    with open(path, "w") as fh:
        for u in sorted(sets):
            cf = sets[u]
            for tag, items in zip(SET_TAGS, (cf.x, cf.x_p, cf.x_m)):
                ids = " ".join(dataset.item_ids[i] for i in sorted(items))
                fh.write(f"{dataset.user_ids[u]}\t{tag}\t{ids}\n")


def read_counterfactuals(path, dataset: Dataset) -> dict[int, CounterfactualSets]:
    uidx, iidx = dataset.user_index, dataset.item_index
    raw: dict[int, dict[str, frozenset]] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 3 or parts[1] not in SET_TAGS:
                raise ValueError(f"{path}:{lineno}: malformed counterfactual line")
            items = frozenset(iidx[i] for i in parts[2].split()) if parts[2] else frozenset()
            raw.setdefault(uidx[parts[0]], {})[parts[1]] = items
    return {u: CounterfactualSets(t.get("X", frozenset()), t.get("XP", frozenset()), t.get("XM", frozenset()))
            for u, t in raw.items()}
