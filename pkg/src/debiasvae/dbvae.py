"""VAE with separate bias latents and hand-written gradients.

A shared encoder maps the user's full bag ``x`` and the two extreme bags
``x_p`` (popularity-driven) and ``x_m`` (preference-driven) to Gaussian
heads. The debiased latent is ``z = z_x - z_m - z_p`` with one noise draw
shared by all three heads; a shared decoder reconstructs ``x`` from ``z``
and the extreme bags from their own latents.

An extreme bag that is empty, or disabled via ``use_bias_heads=False``,
contributes nothing: its head is treated as the zero distribution and is
left out of the KL and auxiliary terms. With ``use_bias_heads=False`` the
model is a plain single-latent multinomial VAE.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from typing import Mapping, Sequence

import numpy as np

from ._io import write_npz
from .bias_extract import ExtremeSets, extract_extreme_sets
from .dataset import Dataset, Split, bag_matrix, l1_rows, l2_rows

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
PARAM_NAMES = ("enc_W", "enc_b", "mu_W", "mu_b", "lv_W", "lv_b", "dec_W1", "dec_b1", "dec_W2", "dec_b2")


class NumericError(FloatingPointError):
    pass


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    k: float = 0.5
    omega_m: float = 0.1
    omega_p: float = 0.1
    kl_weight: float = 0.2
    kl_anneal_fraction: float = 0.2  # linear warm-up share of all steps
    batch_size: int = 500
    weight_decay: float = 0.01
    learning_rate: float = 1e-3
    epochs: int = 50
    seed: int = 0
    hidden_dim: int = 600
    latent_dim: int = 200
    use_bias_heads: bool = True
    kl_all_heads: bool = True
    patience: int | None = None  # epochs without validation gain before stopping
    val_ndcg_k: int = 100

    def __post_init__(self):
        for name in ("omega_m", "omega_p", "kl_weight", "weight_decay", "learning_rate"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 <= self.k <= 1.0:
            raise ValueError("k must lie in [0, 1]")

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    def vanilla(self) -> "TrainConfig":
        """The single-latent ablation of this configuration."""
        return TrainConfig(**{**asdict(self), "k": 0.0, "omega_m": 0.0, "omega_p": 0.0, "use_bias_heads": False})


@dataclass
class GaussianHead:
    mu: np.ndarray
    log_var: np.ndarray

    @property
    def sigma(self) -> np.ndarray:
        return np.exp(0.5 * self.log_var)


@dataclass
class LossBreakdown:
    recon: float
    kl: float
    aux_p: float
    aux_m: float
    total: float


def init_params(n_items: int, hidden_dim: int = 600, latent_dim: int = 200, seed: int = 0) -> dict[str, np.ndarray]:
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases."""
    rng = np.random.default_rng([seed, 0])

    def w(fan_in, fan_out):
        lim = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-lim, lim, size=(fan_in, fan_out))

    return {
        "enc_W": w(n_items, hidden_dim), "enc_b": np.zeros(hidden_dim),
        "mu_W": w(hidden_dim, latent_dim), "mu_b": np.zeros(latent_dim),
        "lv_W": w(hidden_dim, latent_dim), "lv_b": np.zeros(latent_dim),
        "dec_W1": w(latent_dim, hidden_dim), "dec_b1": np.zeros(hidden_dim),
        "dec_W2": w(hidden_dim, n_items), "dec_b2": np.zeros(n_items),
    }


def _check_finite(name, *arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NumericError(f"non-finite values in {name}")


def _encode(params, inputs):
    h = np.tanh(inputs @ params["enc_W"] + params["enc_b"])
    mu = h @ params["mu_W"] + params["mu_b"]
    lv = h @ params["lv_W"] + params["lv_b"]
    _check_finite("encoder output", mu, lv)
    return GaussianHead(mu, lv), h


def encode(params, input_vector) -> GaussianHead:
    return _encode(params, np.asarray(input_vector, dtype=np.float64))[0]


def reparameterize(head: GaussianHead, eps) -> np.ndarray:
    return head.mu + eps * head.sigma


def debiased_latent(head_x: GaussianHead, head_m: GaussianHead, head_p: GaussianHead, eps) -> np.ndarray:
    return (head_x.mu - head_m.mu - head_p.mu) + eps * (head_x.sigma - head_m.sigma - head_p.sigma)


def _decode(params, z):
    g = np.tanh(z @ params["dec_W1"] + params["dec_b1"])
    logits = g @ params["dec_W2"] + params["dec_b2"]
    _check_finite("decoder output", logits)
    return logits, g


def decode(params, z) -> np.ndarray:
    return _decode(params, np.asarray(z, dtype=np.float64))[0]


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def _kl(head: GaussianHead) -> np.ndarray:
    return 0.5 * (head.mu ** 2 + np.exp(head.log_var) - 1.0 - head.log_var).sum(axis=-1)


@dataclass
class Batch:
    """Raw multi-hot bags for a set of users (rows aligned)."""

    x: np.ndarray
    x_p: np.ndarray
    x_m: np.ndarray

    @classmethod
    def from_sets(cls, n_items: int, full: Sequence, pop: Sequence, match: Sequence) -> "Batch":
        return cls(bag_matrix(n_items, full), bag_matrix(n_items, pop), bag_matrix(n_items, match))


def _decoder_backward(params, grads, z, g, dlogits):
    grads["dec_W2"] += g.T @ dlogits
    grads["dec_b2"] += dlogits.sum(axis=0)
    dpre = (dlogits @ params["dec_W2"].T) * (1.0 - g * g)
    grads["dec_W1"] += z.T @ dpre
    grads["dec_b1"] += dpre.sum(axis=0)
    return dpre @ params["dec_W1"].T


def _encoder_backward(params, grads, inputs, h, dmu, dlv):
    grads["mu_W"] += h.T @ dmu
    grads["mu_b"] += dmu.sum(axis=0)
    grads["lv_W"] += h.T @ dlv
    grads["lv_b"] += dlv.sum(axis=0)
    dpre = (dmu @ params["mu_W"].T + dlv @ params["lv_W"].T) * (1.0 - h * h)
    grads["enc_W"] += inputs.T @ dpre
    grads["enc_b"] += dpre.sum(axis=0)


def loss_and_grads(params, batch: Batch, eps: np.ndarray, config: TrainConfig,
                   kl_weight: float | None = None, need_grads: bool = True):
    """Mean per-user joint loss over the batch and its exact gradients.

    ``eps`` (batch x latent) is held constant. Returns ``(LossBreakdown, grads)``;
    ``grads`` is None when ``need_grads`` is false.
    """
    beta = config.kl_weight if kl_weight is None else kl_weight
    counts = batch.x.sum(axis=1)
    if np.any(counts == 0):
        raise ValueError("every user needs at least one item in x")
    B = batch.x.shape[0]
    inv_b = 1.0 / B
    target = l1_rows(batch.x)
    hx, h_x = _encode(params, l2_rows(batch.x))
    sx = hx.sigma
    bias = config.use_bias_heads
    if bias:
        mp = (batch.x_p.sum(axis=1) > 0).astype(np.float64)[:, None]
        mm = (batch.x_m.sum(axis=1) > 0).astype(np.float64)[:, None]
        in_p, in_m = l2_rows(batch.x_p), l2_rows(batch.x_m)
        hp, h_p = _encode(params, in_p)
        hm, h_m = _encode(params, in_m)
        sp_, sm_ = hp.sigma, hm.sigma
        z = (hx.mu - mm * hm.mu - mp * hp.mu) + eps * (sx - mm * sm_ - mp * sp_)
    else:
        z = hx.mu + eps * sx
    logits, g = _decode(params, z)
    logp = log_softmax(logits)
    recon = -(target * logp).sum(axis=1)
    kl = _kl(hx)
    if bias:
        if config.kl_all_heads:
            kl = kl + mm[:, 0] * _kl(hm) + mp[:, 0] * _kl(hp)
        z_p = hp.mu + eps * sp_
        z_m = hm.mu + eps * sm_
        t_p, t_m = l1_rows(batch.x_p), l1_rows(batch.x_m)
        logits_p, g_p = _decode(params, z_p)
        logits_m, g_m = _decode(params, z_m)
        logp_p, logp_m = log_softmax(logits_p), log_softmax(logits_m)
        aux_p = -(t_p * logp_p).sum(axis=1) * mp[:, 0]
        aux_m = -(t_m * logp_m).sum(axis=1) * mm[:, 0]
        total = recon + beta * kl + config.omega_p * aux_p + config.omega_m * aux_m
    else:
        aux_p = aux_m = np.zeros(B)
        total = recon + beta * kl
    out = LossBreakdown(float(recon.mean()), float(kl.mean()), float(aux_p.mean()),
                        float(aux_m.mean()), float(total.mean()))
    if not need_grads:
        return out, None

    grads = {name: np.zeros_like(v) for name, v in params.items()}
    dlogits = (np.exp(logp) - target) * inv_b
    dz = _decoder_backward(params, grads, z, g, dlogits)
    dmu_x = dz + beta * inv_b * hx.mu
    ds_x = dz * eps
    dlv_x = beta * inv_b * 0.5 * (np.exp(hx.log_var) - 1.0) + ds_x * 0.5 * sx
    _encoder_backward(params, grads, l2_rows(batch.x), h_x, dmu_x, dlv_x)
    if bias:
        dl_p = (np.exp(logp_p) - t_p) * (config.omega_p * inv_b) * mp
        dl_m = (np.exp(logp_m) - t_m) * (config.omega_m * inv_b) * mm
        dz_p = _decoder_backward(params, grads, z_p, g_p, dl_p)
        dz_m = _decoder_backward(params, grads, z_m, g_m, dl_m)
        kl_w = beta * inv_b if config.kl_all_heads else 0.0
        for head, sig, h_, inp, mask, dz_own in ((hm, sm_, h_m, in_m, mm, dz_m), (hp, sp_, h_p, in_p, mp, dz_p)):
            dmu = -mask * dz + dz_own + kl_w * mask * head.mu
            ds = (-mask * dz + dz_own) * eps
            dlv = kl_w * mask * 0.5 * (np.exp(head.log_var) - 1.0) + ds * 0.5 * sig
            _encoder_backward(params, grads, inp, h_, dmu, dlv)
    return out, grads


def loss(params, x, x_p, x_m, eps, config: TrainConfig) -> LossBreakdown:
    """Joint loss for one user (1-d bags) or a batch (2-d bags)."""
    x, x_p, x_m, eps = (np.atleast_2d(np.asarray(a, dtype=np.float64)) for a in (x, x_p, x_m, eps))
    return loss_and_grads(params, Batch(x, x_p, x_m), eps, config, need_grads=False)[0]


def backward(params, batch: Batch, config: TrainConfig, eps: np.ndarray, kl_weight: float | None = None):
    return loss_and_grads(params, batch, eps, config, kl_weight)[1]


class Adam:
    """Adam with decoupled weight decay."""

    def __init__(self, params: Mapping[str, np.ndarray], lr=1e-3, weight_decay=0.0,
                 beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.weight_decay = lr, weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict, grads: Mapping[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k in params:
            g = grads[k]
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            if self.weight_decay:
                params[k] -= self.lr * self.weight_decay * params[k]
            params[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


class DBVAE:
    """Trained parameters plus the settings needed to rank items for new users."""

    def __init__(self, params: dict[str, np.ndarray], config: TrainConfig):
        self.params = params
        self.config = config

    @classmethod
    def initialise(cls, n_items: int, config: TrainConfig) -> "DBVAE":
        return cls(init_params(n_items, config.hidden_dim, config.latent_dim, config.seed), config)

    def extremes_for(self, dataset: Dataset, fold_ins: Sequence) -> list[ExtremeSets]:
        if not self.config.use_bias_heads:
            return [ExtremeSets(frozenset(), frozenset(), 0.0) for _ in fold_ins]
        return [extract_extreme_sets(dataset, f, self.config.k) for f in fold_ins]

    def scores(self, fold_ins: Sequence, dataset: Dataset, extremes: Sequence[ExtremeSets] | None = None) -> np.ndarray:
        """Softmax item probabilities from the posterior-mean debiased latent."""
        if any(len(f) == 0 for f in fold_ins):
            raise ValueError("empty fold-in")
        if extremes is None:
            extremes = self.extremes_for(dataset, fold_ins)
        batch = Batch.from_sets(dataset.n_items, fold_ins,
                                [e.x_p for e in extremes], [e.x_m for e in extremes])
        hx, _ = _encode(self.params, l2_rows(batch.x))
        if self.config.use_bias_heads:
            mp = (batch.x_p.sum(axis=1) > 0).astype(np.float64)[:, None]
            mm = (batch.x_m.sum(axis=1) > 0).astype(np.float64)[:, None]
            hp, _ = _encode(self.params, l2_rows(batch.x_p))
            hm, _ = _encode(self.params, l2_rows(batch.x_m))
            z = hx.mu - mm * hm.mu - mp * hp.mu
        else:
            z = hx.mu
        return softmax(_decode(self.params, z)[0])

    def rank(self, fold_ins: Sequence, dataset: Dataset, top_k: int | None = None,
             extremes: Sequence[ExtremeSets] | None = None) -> np.ndarray:
        """Ranked item indices per user with fold-in items removed.

        Ties go to the smaller item index. Rows shorter than ``top_k`` are
        padded with -1.
        """
        s = self.scores(fold_ins, dataset, extremes)
        for r, f in enumerate(fold_ins):
            s[r, np.asarray(list(f), dtype=np.int64)] = -np.inf
        order = np.argsort(-s, axis=1, kind="stable")
        top_k = dataset.n_items if top_k is None else min(top_k, dataset.n_items)
        top = order[:, :top_k].copy()
        masked = np.take_along_axis(s, top, axis=1) == -np.inf
        top[masked] = -1
        return top

    def predict_scores(self, dataset: Dataset, user_fold_in) -> list[int]:
        row = self.rank([np.asarray(list(user_fold_in))], dataset)[0]
        return [int(i) for i in row if i >= 0]

    def save(self, path, optimizer: Adam | None = None, best_metric: float | None = None,
             extra: Mapping | None = None) -> None:
        arrays = {f"param/{k}": v for k, v in self.params.items()}
        if optimizer is not None:
            arrays.update({f"adam_m/{k}": v for k, v in optimizer.m.items()})
            arrays.update({f"adam_v/{k}": v for k, v in optimizer.v.items()})
            arrays["adam_t"] = np.array(optimizer.t)
        meta = {"config": asdict(self.config), "best_metric": best_metric, **(extra or {})}
        arrays["version"] = np.array(CHECKPOINT_VERSION)
        arrays["meta"] = np.array(json.dumps(meta, sort_keys=True))
        write_npz(path, arrays)

    @classmethod
    def load(cls, path) -> "DBVAE":
        with np.load(path, allow_pickle=False) as z:
            if int(z["version"]) != CHECKPOINT_VERSION:
                raise ValueError(f"unsupported checkpoint version {int(z['version'])}")
            meta = json.loads(str(z["meta"]))
            params = {k: z[f"param/{k}"] for k in PARAM_NAMES}
        model = cls(params, TrainConfig.from_dict(meta["config"]))
        model.meta = meta
        return model


@dataclass
class TraceRow:
    epoch: int
    recon: float
    kl: float
    aux_p: float
    aux_m: float
    total: float
    val_ndcg: float | None = None


@dataclass
class TrainResult:
    model: DBVAE
    trace: list[TraceRow]
    best_epoch: int
    best_metric: float | None
    optimizer: Adam = field(repr=False, default=None)


def write_trace(path, trace: Sequence[TraceRow]) -> None:
    with open(path, "w") as fh:
        fh.write("epoch\trecon\tkl\taux_p\taux_m\ttotal\tval_ndcg@100\n")
        for r in trace:
            val = "" if r.val_ndcg is None else f"{r.val_ndcg:.10f}"
            fh.write(f"{r.epoch}\t{r.recon:.10f}\t{r.kl:.10f}\t{r.aux_p:.10f}\t{r.aux_m:.10f}\t{r.total:.10f}\t{val}\n")


def train(
    dataset: Dataset,
    split: Split,
    extreme_sets: Mapping[int, ExtremeSets],
    config: TrainConfig,
    profiles: Mapping[int, Sequence[int]] | None = None,
    validation: Mapping[int, Sequence[int]] | None = None,
) -> TrainResult:
    """Mini-batch AdamW training on the split's training users.

    ``profiles`` replaces training users' item sets (used for augmented
    data). ``validation`` maps validation users to their relevant items and
    defaults to the split's held-out items; the parameters with the best
    validation NDCG are returned.
    """
    from .evaluation import evaluate

    users = np.asarray(split.train_users, dtype=np.int64)
    if len(users) == 0:
        raise ValueError("no training users")
    full = {int(u): (profiles[int(u)] if profiles is not None else dataset.profile(int(u))) for u in users}
    empty = ExtremeSets(frozenset(), frozenset(), config.k)
    ext = {int(u): extreme_sets.get(int(u), empty) for u in users}

    model = DBVAE.initialise(dataset.n_items, config)
    params = model.params
    opt = Adam(params, lr=config.learning_rate, weight_decay=config.weight_decay)
    rng_shuffle = np.random.default_rng([config.seed, 1])
    rng_eps = np.random.default_rng([config.seed, 2])

    val_users = list(validation) if validation is not None else [int(u) for u in split.val_users]
    val_truth = validation if validation is not None else split.held_out
    val_extremes = None
    if val_users:
        val_extremes = dict(zip(val_users, model.extremes_for(dataset, [split.fold_in[u] for u in val_users])))

    n_batches = int(np.ceil(len(users) / config.batch_size))
    total_steps = config.epochs * n_batches
    warm = config.kl_anneal_fraction * total_steps
    step = 0
    trace: list[TraceRow] = []
    best = (-np.inf, 0, {k: v.copy() for k, v in params.items()})
    stale = 0
    for epoch in range(1, config.epochs + 1):
        perm = rng_shuffle.permutation(users)
        sums = np.zeros(5)
        for b in range(n_batches):
            chunk = perm[b * config.batch_size:(b + 1) * config.batch_size]
            batch = Batch.from_sets(dataset.n_items, [full[int(u)] for u in chunk],
                                    [ext[int(u)].x_p for u in chunk], [ext[int(u)].x_m for u in chunk])
            eps = rng_eps.standard_normal((len(chunk), config.latent_dim))
            beta = config.kl_weight * min(1.0, step / warm) if warm > 0 else config.kl_weight
            try:
                out, grads = loss_and_grads(params, batch, eps, config, beta)
            except NumericError as exc:
                raise TrainingDiverged(f"epoch {epoch} step {step}: {exc}") from exc
            if not np.isfinite(out.total):
                raise TrainingDiverged(f"epoch {epoch} step {step}: non-finite loss {out}")
            opt.step(params, grads)
            step += 1
            sums += len(chunk) * np.array([out.recon, out.kl, out.aux_p, out.aux_m, out.total])
        avg = sums / len(users)
        row = TraceRow(epoch, *avg.tolist())
        if val_users:
            rep = evaluate(model, dataset, split, val_users, {"ndcg": (config.val_ndcg_k,)},
                           relevant=val_truth, extremes=val_extremes)
            row.val_ndcg = rep[f"ndcg@{config.val_ndcg_k}"]
            if row.val_ndcg > best[0]:
                best = (row.val_ndcg, epoch, {k: v.copy() for k, v in params.items()})
                stale = 0
            else:
                stale += 1
        trace.append(row)
        logger.debug("epoch %d %s", epoch, row)
        if config.patience is not None and stale >= config.patience:
            break
    if val_users:
        final = DBVAE(best[2], config)
        return TrainResult(final, trace, best[1], best[0], opt)
    return TrainResult(model, trace, len(trace), None, opt)

