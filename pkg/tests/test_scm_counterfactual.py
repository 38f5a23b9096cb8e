import numpy as np
import pytest
import scipy.sparse as sp

from debiasvae.bias_extract import ExtremeSets, score_rows
from debiasvae.dataset import Dataset
from debiasvae.scm_counterfactual import (
    CounterfactualSets,
    ExogenousPosterior,
    ScmConfig,
    ScmParams,
    augment,
    generate_counterfactuals,
    intervene,
    nll_and_grads,
    read_counterfactuals,
    scm_forward,
    scm_objective,
    top_n,
    train_scm,
    write_counterfactuals,
)


def make_dataset(rows, n_items, n_cats=3, seed=0):
    rng = np.random.default_rng(seed)
    r = [u for u, items in enumerate(rows) for _ in items]
    c = [i for items in rows for i in items]
    mat = sp.csr_matrix((np.ones(len(r), dtype=np.float32), (r, c)), shape=(len(rows), n_items))
    mat.sort_indices()
    cats = (rng.random((n_items, n_cats)) < 0.5).astype(float)
    return Dataset(mat, tuple(f"u{u}" for u in range(len(rows))), tuple(f"i{i}" for i in range(n_items)),
                   cats, tuple(f"c{j}" for j in range(n_cats)))


def random_log(n_users=10, n_items=10, seed=0):
    rng = np.random.default_rng(seed)
    rows = [sorted(rng.choice(n_items, size=rng.integers(2, 5), replace=False).tolist()) for _ in range(n_users)]
    return make_dataset(rows, n_items, seed=seed)


def _params(n_items, d=2, seed=0, w=1.0, users=(0,)):
    rng = np.random.default_rng(seed)
    return ScmParams(np.array(users), rng.normal(size=(len(users), d)), rng.normal(size=(n_items, d)),
                     np.full(n_items, w), np.full(n_items, w), rng.normal(size=n_items), rng.normal(size=n_items))


def _sm(v):
    e = np.exp(v - np.max(v))
    return e / e.sum()


def test_singleton_softmax():
    p = _params(1)
    M, B, C = scm_forward(p, 0, [0.3], [0.7])
    assert M.tolist() == [1.0] and B.tolist() == [1.0] and C.tolist() == [1.0]


def test_equal_logits_uniform():
    p = _params(4)
    p.user_emb[:] = 0
    p.w_m[:] = 0
    p.w_b[:] = 0
    M, B, C = scm_forward(p, 0, np.ones(4), np.ones(4))
    for dist in (M, B, C):
        np.testing.assert_allclose(dist, 0.25, atol=1e-15)


def test_three_item_forward_oracle():
    p = ScmParams(np.array([0]), np.array([[0.5, -1.0]]), np.array([[1.0, 0.0], [0.2, 0.3], [-0.4, 1.0]]),
                  np.array([1.5, -0.5, 2.0]), np.array([0.3, 1.0, -1.2]),
                  np.array([0.7, 0.1, -0.3]), np.array([1.1, -0.6, 0.4]))
    s_m, s_p = np.array([0.9, 0.2, 0.5]), np.array([0.6, 0.3, 0.1])
    a = [0.5 * 1.0 - 1.0 * 0.0 + 1.5 * 0.9 * 0.7,
         0.5 * 0.2 - 1.0 * 0.3 - 0.5 * 0.2 * 0.1,
         -0.5 * 0.4 - 1.0 * 1.0 + 2.0 * 0.5 * -0.3]
    b = [0.3 * 0.6 * 1.1, 1.0 * 0.3 * -0.6, -1.2 * 0.1 * 0.4]
    M_ref = _sm(np.array(a))
    B_ref = _sm(np.array(b))
    C_ref = _sm(M_ref + B_ref)
    M, B, C = scm_forward(p, 0, s_m, s_p)
    np.testing.assert_allclose(M, M_ref, rtol=0, atol=1e-10)
    np.testing.assert_allclose(B, B_ref, rtol=0, atol=1e-10)
    np.testing.assert_allclose(C, C_ref, rtol=0, atol=1e-10)
    for dist in (M, B, C):
        assert abs(dist.sum() - 1.0) < 1e-8


def test_nll_gradients_finite_difference():
    rng = np.random.default_rng(3)
    U, n, d = 3, 5, 2
    theta = {"user_emb": rng.normal(size=(U, d)), "item_emb": rng.normal(size=(n, d)),
             "w_m": rng.normal(size=n), "w_b": rng.normal(size=n),
             "alpha": rng.normal(size=n), "beta": rng.normal(size=n)}
    s_m, s_p = rng.random((U, n)), rng.random((U, n))
    x = (rng.random((U, n)) < 0.5).astype(float)
    x[:, 0] = 1

    def f():
        return nll_and_grads(**theta, s_m=s_m, s_p=s_p, x=x)

    _, grads = f()
    h = 1e-6
    for name, arr in theta.items():
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            old = arr[idx]
            arr[idx] = old + h
            up = f()[0]
            arr[idx] = old - h
            dn = f()[0]
            arr[idx] = old
            fd = (up - dn) / (2 * h)
            assert abs(fd - grads[name][idx]) <= 1e-5 * max(1.0, abs(fd))


def test_single_click_learned():
    ds = make_dataset([[1]], 2)
    fit = train_scm(ds, [0], ScmConfig(embed_dim=4, epochs=200, learning_rate=0.05, seed=1))
    s_m, s_p = score_rows(ds, [1])
    _, _, C = scm_forward(fit.params, 0, s_m, s_p)
    # C is a softmax of probability sums, so its largest possible entry is e^2 / (e^2 + 1)
    assert C[1] > 0.5


def test_elbo_increases_on_small_log():
    ds = random_log(10, 10, seed=4)
    fit = train_scm(ds, range(10), ScmConfig(embed_dim=8, epochs=60, learning_rate=0.05, seed=0))
    trace = fit.elbo_trace
    assert len(trace) == 60
    assert np.mean(trace[-5:]) > np.mean(trace[:5])


def test_zero_epochs_keeps_prior():
    ds = random_log(4, 6)
    fit = train_scm(ds, range(4), ScmConfig(embed_dim=3, epochs=0))
    prior = ExogenousPosterior.prior(6)
    for name in ("mu_alpha", "log_var_alpha", "mu_beta", "log_var_beta"):
        assert np.array_equal(getattr(fit.posterior, name), getattr(prior, name))
    assert fit.posterior.kl() == 0.0


def test_posterior_kl_nonnegative():
    rng = np.random.default_rng(0)
    for _ in range(20):
        post = ExogenousPosterior(*(rng.normal(size=5) for _ in range(4)))
        assert post.kl() >= 0


def test_objective_gradients_match_training_direction():
    # one deterministic full-batch step should lower the single-sample objective it descends
    ds = random_log(6, 8, seed=2)
    cfg = ScmConfig(embed_dim=3, epochs=1, learning_rate=1e-3, batch_size=100, seed=5)
    before = train_scm(ds, range(6), ScmConfig(**{**cfg.__dict__, "epochs": 0}))
    after = train_scm(ds, range(6), cfg)
    rng = np.random.default_rng([5, 2])
    ea, eb = rng.standard_normal(8), rng.standard_normal(8)
    assert scm_objective(after.params, after.posterior, ds, ea, eb) < \
        scm_objective(before.params, before.posterior, ds, ea, eb)


def _fitted(seed=0):
    ds = random_log(8, 10, seed=seed)
    fit = train_scm(ds, range(8), ScmConfig(embed_dim=4, epochs=20, learning_rate=0.05, seed=seed))
    return ds, fit


def test_intervention_locality():
    ds, fit = _fitted()
    for u in range(3):
        M0, B0, _ = intervene(fit.params, fit.posterior, ds, u, "factual", seed=7)
        Mb, Bb, _ = intervene(fit.params, fit.posterior, ds, u, "do_B", seed=7)
        Mm, Bm, _ = intervene(fit.params, fit.posterior, ds, u, "do_M", seed=7)
        assert np.array_equal(M0, Mb)
        assert np.array_equal(B0, Bm)
        assert not np.array_equal(M0, Mm)


def test_factual_matches_forward():
    ds, fit = _fitted()
    s_m, s_p = score_rows(ds, ds.profile(2))
    post = fit.posterior
    params = fit.params
    _, _, C = scm_forward(params, 2, s_m, s_p)
    _, _, C2 = intervene(params, post, ds, 2, "factual", seed=0)
    np.testing.assert_array_equal(C, C2)


def test_dead_path_when_weights_zero():
    ds, fit = _fitted()
    fit.params.w_m[:] = 0
    fit.params.w_b[:] = 0
    _, _, C0 = intervene(fit.params, fit.posterior, ds, 1, "factual", seed=3)
    _, _, C1 = intervene(fit.params, fit.posterior, ds, 1, "do_both", seed=3)
    assert np.array_equal(C0, C1)
    cf = generate_counterfactuals(fit.params, fit.posterior, ds, [1], ScmConfig(top_n=4, seed=3))
    assert cf[1].x == cf[1].x_p == cf[1].x_m


def test_intervention_deterministic_and_validated():
    ds, fit = _fitted()
    a = intervene(fit.params, fit.posterior, ds, 0, "do_both", seed=11)[2]
    b = intervene(fit.params, fit.posterior, ds, 0, "do_both", seed=11)[2]
    assert np.array_equal(a, b)
    with pytest.raises(ValueError):
        intervene(fit.params, fit.posterior, ds, 0, "do_X", seed=0)


def test_top_n():
    dist = np.array([0.1, 0.3, 0.05, 0.3, 0.25])
    assert top_n(dist, 2).tolist() == [1, 3]
    assert top_n(dist, 10).tolist() == [1, 3, 4, 0, 2]


def test_generate_sizes_and_full_universe():
    ds, fit = _fitted()
    cf = generate_counterfactuals(fit.params, fit.posterior, ds, range(8), ScmConfig(top_n=3, seed=1))
    for sets in cf.values():
        assert len(sets.x) == len(sets.x_p) == len(sets.x_m) == 3
    full = generate_counterfactuals(fit.params, fit.posterior, ds, [0], ScmConfig(top_n=50, seed=1))
    assert full[0].x == frozenset(range(10))


def test_augment_identities():
    profiles = {0: [1], 1: [2, 3]}
    ext = {0: ExtremeSets(frozenset(), frozenset({1}), 0.5), 1: ExtremeSets(frozenset({2}), frozenset(), 0.5)}
    empty = {u: CounterfactualSets(frozenset(), frozenset(), frozenset()) for u in profiles}
    prof_en, ext_en = augment(profiles, ext, empty)
    assert {u: v.tolist() for u, v in prof_en.items()} == {0: [1], 1: [2, 3]}
    assert ext_en == ext
    cf = {0: CounterfactualSets(frozenset({1, 4}), frozenset({5}), frozenset({6}))}
    prof_en, ext_en = augment(profiles, ext, cf)
    assert prof_en[0].tolist() == [1, 4]
    assert ext_en[0].x_p == {5} and ext_en[0].x_m == {1, 6}
    assert prof_en[1].tolist() == [2, 3]


def test_augment_bounds_on_generated_run():
    ds, fit = _fitted()
    N = 4
    cf = generate_counterfactuals(fit.params, fit.posterior, ds, range(8), ScmConfig(top_n=N, seed=2))
    profiles = {u: ds.profile(u) for u in range(8)}
    ext = {u: ExtremeSets(frozenset(ds.profile(u)[:1].tolist()), frozenset(), 0.3) for u in range(8)}
    prof_en, ext_en = augment(profiles, ext, cf)
    for u in range(8):
        assert set(profiles[u]) <= set(prof_en[u].tolist())
        assert len(prof_en[u]) <= len(profiles[u]) + N
        assert ext[u].x_p <= ext_en[u].x_p and ext[u].x_m <= ext_en[u].x_m


def test_counterfactual_file_roundtrip(tmp_path):
    ds, fit = _fitted()
    cf = generate_counterfactuals(fit.params, fit.posterior, ds, range(8), ScmConfig(top_n=3, seed=2))
    path = tmp_path / "cf.tsv"
    write_counterfactuals(path, cf, ds)
    assert read_counterfactuals(path, ds) == cf
    bad = tmp_path / "bad.tsv"
    bad.write_text("u0\tXQ\ti1\n")
    with pytest.raises(ValueError, match=":1:"):
        read_counterfactuals(bad, ds)


def test_training_deterministic():
    a = _fitted(3)[1]
    b = _fitted(3)[1]
    assert a.elbo_trace == b.elbo_trace
    assert np.array_equal(a.params.item_emb, b.params.item_emb)
