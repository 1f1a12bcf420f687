import numpy as np
import pytest

from dextts.layers.adapters import AdaLN, TIVAdapter, TVAdapter, ada_in, attention_pool, layer_statistics
from dextts.numerics import ParamStore, Tensor, grad_check, normalize, softmax

C = 4


def test_attention_pool_of_identical_rows():
    row = np.array([0.3, -1.2, 2.0, 0.5])
    rows = Tensor(np.tile(row, (3, 1)))
    w = Tensor(np.random.default_rng(0).normal(size=(C, 1)))
    np.testing.assert_allclose(attention_pool(rows, w).data, row, atol=1e-12)


def test_attention_pool_saturates_on_dominant_score():
    rows = np.zeros((3, C))
    rows[1] = [1000.0, 1.0, 2.0, 3.0]
    w = np.zeros((C, 1))
    w[0, 0] = 1.0
    np.testing.assert_allclose(attention_pool(Tensor(rows), Tensor(w)).data, rows[1], atol=1e-9)


def test_attention_pool_matches_direct_formula_and_stays_in_hull():
    rng = np.random.default_rng(1)
    rows, w = rng.normal(size=(3, C)), rng.normal(size=(C, 1))
    scores = rows @ w
    weights = np.exp(scores - scores.max()) / np.exp(scores - scores.max()).sum()
    pooled, got_weights = attention_pool(Tensor(rows), Tensor(w), return_weights=True)
    np.testing.assert_allclose(pooled.data, (weights * rows).sum(axis=0), atol=1e-12)
    np.testing.assert_allclose(got_weights.data.sum(), 1.0, atol=1e-12)
    assert np.all(pooled.data <= rows.max(axis=0) + 1e-12)
    assert np.all(pooled.data >= rows.min(axis=0) - 1e-12)


def test_ada_in_identity_and_statistics():
    rng = np.random.default_rng(2)
    h = Tensor(rng.normal(0.0, 10.0, size=(C, 5, 6)))
    ident = ada_in(h, Tensor(np.zeros(C)), Tensor(np.ones(C)))
    np.testing.assert_array_equal(ident.data, normalize(h, "instance").data)

    mu, sigma = rng.normal(size=C), rng.uniform(0.5, 2.0, size=C)
    out = ada_in(h, Tensor(mu), Tensor(sigma)).data
    np.testing.assert_allclose(out.mean(axis=(1, 2)), mu, atol=1e-6)
    np.testing.assert_allclose(out.std(axis=(1, 2)), sigma, atol=1e-6)


def test_layer_statistics():
    h = np.random.default_rng(3).normal(size=(2, C, 7))
    means, stds = layer_statistics(Tensor(h))
    np.testing.assert_allclose(means.data, h.mean(axis=2), atol=1e-12)
    np.testing.assert_allclose(stds.data, np.sqrt(h.var(axis=2) + 1e-5), atol=1e-12)


def test_tiv_adapter_depends_on_time_step(rng):
    adapter = TIVAdapter(ParamStore(), "tiv", C, rng)
    h_inv = Tensor(rng.normal(size=(3, C, 9)))
    mu_a, sigma_a = adapter.pooled_stats(h_inv, Tensor(rng.normal(size=C)))
    mu_b, sigma_b = adapter.pooled_stats(h_inv, Tensor(rng.normal(size=C) * 5.0))
    assert np.abs(mu_a.data - mu_b.data).max() > 1e-6
    assert np.all(sigma_a.data > 0) and np.all(sigma_b.data > 0)


def test_tiv_adapter_uses_supplied_statistics(rng):
    adapter = TIVAdapter(ParamStore(), "tiv", C, rng)
    h_inv = Tensor(rng.normal(size=(2, C, 5)))
    t_emb = Tensor(rng.normal(size=C))
    h = Tensor(rng.normal(size=(C, 3, 4)))
    direct = adapter(h, h_inv, t_emb)
    via_stats = adapter(h, None, t_emb, stats=layer_statistics(h_inv))
    np.testing.assert_array_equal(direct.data, via_stats.data)


def test_tiv_adapter_gradient(rng):
    adapter = TIVAdapter(ParamStore(), "tiv", C, rng)
    h_inv = Tensor(rng.normal(size=(2, C, 5)))
    t_emb = Tensor(rng.normal(size=C))
    assert grad_check(lambda h: adapter(h, h_inv, t_emb), rng.normal(size=(C, 2, 3))) <= 1e-5


def test_ada_ln_limits_and_oracle(rng):
    store = ParamStore()
    norm = AdaLN(store, "ln", C, 3, rng)
    h = Tensor(rng.normal(size=(5, C)))
    cond = Tensor(rng.normal(size=3))
    expected = normalize(h, "layer").data * norm.scale(cond).data + norm.shift(cond).data
    np.testing.assert_allclose(norm(h, cond).data, expected, atol=1e-12)

    store.set_value("ln.scale.weight", np.zeros((3, C)))
    store.set_value("ln.shift.weight", np.zeros((3, C)))
    np.testing.assert_allclose(norm(h, cond).data, normalize(h, "layer").data, atol=1e-15)

    store.set_value("ln.scale.bias", np.zeros(C))
    store.set_value("ln.shift.bias", np.arange(C, dtype=float))
    np.testing.assert_array_equal(norm(h, cond).data, np.tile(np.arange(C, dtype=float), (5, 1)))


def test_ada_ln_without_condition_is_plain_layer_norm(rng):
    norm = AdaLN(ParamStore(), "ln", C, None, rng)
    h = Tensor(rng.normal(size=(2, C)))
    np.testing.assert_array_equal(norm(h, None).data, normalize(h, "layer").data)


@pytest.fixture
def tv_adapter(rng):
    return TVAdapter(ParamStore(), "tv", C, 3, rng)


def test_tv_adapter_single_style_row_gets_all_weight(tv_adapter, rng):
    h = Tensor(rng.normal(size=(C, 2, 3)))
    out, weights = tv_adapter(h, Tensor(rng.normal(size=(1, 3))), return_weights=True)
    assert out.shape == (C, 2, 3)
    np.testing.assert_array_equal(weights.data, np.ones((6, 1)))
    offset = (out.data - h.data).reshape(C, -1)
    assert np.linalg.matrix_rank(offset, tol=1e-10) == 1


def test_tv_adapter_attention_rows_sum_to_one(tv_adapter, rng):
    _, weights = tv_adapter(Tensor(rng.normal(size=(C, 3, 4))), Tensor(rng.normal(size=(5, 3))),
                            return_weights=True)
    assert weights.shape == (12, 5)
    np.testing.assert_allclose(weights.data.sum(axis=1), 1.0, atol=1e-12)


def test_tv_adapter_time_permutation_equivariance(tv_adapter, rng):
    h = rng.normal(size=(C, 3, 6))
    styles = Tensor(rng.normal(size=(4, 3)))
    perm = rng.permutation(6)
    base = tv_adapter(Tensor(h), styles).data
    permuted = tv_adapter(Tensor(h[:, :, perm]), styles).data
    np.testing.assert_allclose(permuted, base[:, :, perm], atol=1e-10)


def test_tv_adapter_invariant_to_style_row_order(tv_adapter, rng):
    h = Tensor(rng.normal(size=(C, 2, 5)))
    styles = rng.normal(size=(4, 3))
    a = tv_adapter(h, Tensor(styles)).data
    b = tv_adapter(h, Tensor(styles[::-1].copy())).data
    np.testing.assert_allclose(a, b, atol=1e-10)


def test_tv_adapter_scale_flag_and_non_residual(rng):
    store = ParamStore()
    plain = TVAdapter(store, "a", C, 3, rng)
    h = Tensor(rng.normal(size=(C, 2, 2)))
    styles = Tensor(rng.normal(size=(3, 3)))
    _, unscaled = plain(h, styles, return_weights=True)
    plain.scale = True
    _, scaled = plain(h, styles, return_weights=True)
    queries = normalize(h, "instance").reshape(C, 4).transpose()
    logits = plain.q(queries).data @ plain.k(styles).data.T / np.sqrt(C)
    np.testing.assert_allclose(scaled.data, softmax(Tensor(logits), axis=1).data, atol=1e-12)
    assert not np.allclose(scaled.data, unscaled.data)

    plain.scale = False
    plain.residual = False
    detached = plain(h, styles).data
    plain.residual = True
    np.testing.assert_allclose(plain(h, styles).data, detached + h.data, atol=1e-12)


def test_tv_adapter_gradients(tv_adapter, rng):
    styles = Tensor(rng.normal(size=(3, 3)))
    h = Tensor(rng.normal(size=(C, 2, 3)))
    assert grad_check(lambda x: tv_adapter(x, styles), h.data) <= 1e-5
    assert grad_check(lambda s: tv_adapter(h, s), styles.data) <= 1e-5
