import itertools
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import param_gradcheck
from m3impute import core, dataio
from m3impute import tensor as T
from m3impute.core import ModelConfig, M3Params, TrainConfig, VariantConfig
from m3impute.exceptions import ConfigurationError, ContractError, SchemaError, TrainingError
from m3impute.layers import Identity
from m3impute.tensor import Tensor


def tiny_config(**kw):
    base = dict(dim=4, peer_count=2, alpha_hidden=3)
    base.update(kw)
    return ModelConfig(**base)


def toy_problem(n=6, m=3, n_classes=(0, 0, 0), seed=0, ratio=0.3):
    rng = np.random.default_rng(seed)
    D = rng.random((n, m))
    for j, c in enumerate(n_classes):
        if c:
            D[:, j] = rng.integers(0, c, n)
    M = dataio.gen_mcar(n, m, ratio, seed)
    return D, M, np.asarray(n_classes)


def identity_params(n_classes, dim, **kw):
    params = M3Params(np.random.default_rng(0), n_classes, tiny_config(dim=dim, **kw))
    for name in ("init_proj", "mask_gate", "profile_proj", "fcu_out", "relevance",
                 "peer_proj", "scu_out"):
        setattr(params, name, Identity())
    return params


# Initialization


def test_init_hand_example():
    mixed = core.init_sample_embeddings([[0.5, 0.0]], [[1, 0]], Tensor(np.eye(2)), Identity(), 1e-4)
    np.testing.assert_allclose(mixed.data, [[0.5, 1e-4]], rtol=0, atol=1e-18)


def test_init_fully_observed_ignores_epsilon():
    rng = np.random.default_rng(0)
    H_F0 = Tensor(rng.normal(size=(3, 4)))
    init_proj = M3Params(rng, [0, 0, 0], tiny_config()).init_proj
    D = rng.random((2, 3))
    a = core.init_sample_embeddings(D, np.ones((2, 3)), H_F0, init_proj, 0.0).data
    b = core.init_sample_embeddings(D, np.ones((2, 3)), H_F0, init_proj, 0.3).data
    np.testing.assert_array_equal(a, b)
    np.testing.assert_allclose(a, init_proj(Tensor(D @ H_F0.data)).data)


def test_init_fully_missing_rows_collapse_to_projection_of_zero():
    rng = np.random.default_rng(1)
    init_proj = M3Params(rng, [0, 0, 0], tiny_config()).init_proj
    D = rng.random((3, 3))
    M = np.array([[0, 0, 0], [0, 0, 0], [1, 1, 0]])
    out = core.init_sample_embeddings(D, M, Tensor(rng.normal(size=(3, 4))), init_proj, 0.0).data
    np.testing.assert_array_equal(out[0], out[1])
    np.testing.assert_allclose(out[0], init_proj(Tensor(np.zeros(4))).data)
    with pytest.raises(ConfigurationError):
        core.init_sample_embeddings(D, M, Tensor(np.zeros((3, 4))), init_proj, -1.0)


# Feature correlation unit


def test_fcu_zero_embedding_gives_output_mlp_of_zero():
    params = M3Params(np.random.default_rng(2), [0] * 3, tiny_config())
    H_F = Tensor(np.random.default_rng(3).normal(size=(3, 4)))
    expected = params.fcu_out(Tensor(np.zeros(4))).data
    for mask, f in [([1, 0, 1], 0), ([0, 0, 1], 2)]:
        out = core.feature_correlation(np.zeros(4), mask, f, H_F, params).data
        np.testing.assert_allclose(out, expected, atol=1e-15)


def test_fcu_identity_reduction():
    params = identity_params([0, 0, 0], dim=3)
    h_x = np.array([0.5, -1.0, 2.0])
    H_F = np.eye(3)
    out = core.feature_correlation(h_x, np.ones(3), 2, H_F, params).data
    np.testing.assert_allclose(out, h_x * H_F[2])


def test_fcu_output_width_is_d_for_any_m():
    for m in (1, 2, 7):
        params = M3Params(np.random.default_rng(m), [0] * m, tiny_config(dim=5))
        out = core.feature_correlation(np.ones(5), np.ones(m), 0, np.ones((m, 5)), params)
        assert out.shape == (5,)
    with pytest.raises(ContractError):
        core.feature_correlation(np.ones(5), np.ones(m), m, np.ones((m, 5)), params)


# Peers


def test_peer_count_n_minus_one_takes_everyone():
    H = np.random.default_rng(0).normal(size=(5, 3))
    for strategy in ("cosine", "uniform"):
        ps = core.sample_peers(2, H, 4, strategy, 0)
        assert sorted(ps.peers.tolist()) == [0, 1, 3, 4]


def test_identical_embedding_peer_dominates():
    H = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    ps = core.sample_peers(0, H, 1, "cosine", 0)
    np.testing.assert_allclose(ps.weights, [0.0, 1.0 + 1e-6, 1e-6])
    picks = [core.sample_peers(0, H, 1, "cosine", seed).peers[0] for seed in range(2000)]
    assert np.mean(np.array(picks) == 1) >= 0.999


def test_uniform_peers_reproducible_and_config_error():
    H = np.random.default_rng(0).normal(size=(10, 3))
    a = core.sample_peer_table(H, 3, "uniform", 5)
    assert np.array_equal(a, core.sample_peer_table(H, 3, "uniform", 5))
    with pytest.raises(ConfigurationError):
        core.sample_peer_table(H[:3], 3, "uniform", 5)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 25), st.integers(1, 6), st.sampled_from(["cosine", "uniform"]),
       st.integers(0, 2**31 - 1))
def test_peer_table_invariants(n, k, strategy, seed):
    if k >= n:
        k = n - 1
    H = np.random.default_rng(seed).normal(size=(n, 3))
    table = core.sample_peer_table(H, k, strategy, seed)
    assert table.shape == (n, k)
    for s, row in enumerate(table):
        assert s not in row and len(set(row.tolist())) == k


def test_weighted_draw_matches_sequential_sampling():
    # Oracle: exact probability of each ordered pair under draw-without-replacement.
    H = np.array([[1.0, 0.0], [1.0, 0.2], [0.3, 1.0], [-1.0, 0.1], [0.7, 0.7]])
    w = core.sample_peers(0, H, 2, "cosine", 0).weights
    exact = {}
    for a, b in itertools.permutations(range(1, 5), 2):
        exact[(a, b)] = w[a] / w.sum() * w[b] / (w.sum() - w[a])
    rng = np.random.default_rng(7)
    draws = [tuple(core.sample_peers(0, H, 2, "cosine", rng).peers) for _ in range(20000)]
    for pair, p in exact.items():
        assert abs(draws.count(pair) / len(draws) - p) < 0.015, pair


# Pair similarity and sample correlation


def test_pair_similarity_symmetric():
    rng = np.random.default_rng(11)
    for trial in range(100):
        m, n = rng.integers(2, 5), 4
        params = M3Params(rng, [0] * m, tiny_config(dim=3))
        H_S, H_F = rng.normal(size=(n, 3)), rng.normal(size=(m, 3))
        masks = rng.integers(0, 2, size=(n, m)).astype(float)
        f = rng.integers(m)
        a = core.pair_similarity(0, 1, f, H_S, masks, H_F, params).item()
        b = core.pair_similarity(1, 0, f, H_S, masks, H_F, params).item()
        assert abs(a - b) <= 1e-12


def test_pair_similarity_self_is_squared_norm():
    rng = np.random.default_rng(2)
    params = M3Params(rng, [0] * 3, tiny_config())
    H_S = np.repeat(rng.normal(size=(1, 4)), 2, axis=0)
    masks = np.array([[1.0, 0.0, 1.0], [1.0, 0.0, 1.0]])
    H_F = rng.normal(size=(3, 4))
    sim = core.pair_similarity(0, 1, 1, H_S, masks, H_F, params).item()
    fcu = core.feature_correlation(H_S[0], masks[0], 1, H_F, params).data
    assert sim == pytest.approx(fcu @ fcu, rel=1e-12)
    assert sim >= 0


def test_pair_similarity_identity_hand_value():
    # Identity units and H_F = I reduce the similarity to h_s[f] h_p[f] m_p[f] m_s[f].
    params = identity_params([0, 0], dim=2)
    H_S = np.array([[1.0, 2.0], [3.0, 4.0]])
    sim = core.pair_similarity(0, 1, 1, H_S, np.ones((2, 2)), np.eye(2), params).item()
    assert sim == 8.0
    masks = np.array([[1.0, 1.0], [1.0, 0.0]])
    assert core.pair_similarity(0, 1, 1, H_S, masks, np.eye(2), params).item() == 0.0


def test_scu_zero_peers_give_output_mlp_of_zero():
    rng = np.random.default_rng(4)
    params = M3Params(rng, [0] * 3, tiny_config())
    H_S = np.zeros((4, 4))
    H_S[0] = rng.normal(size=4)
    z, _ = core.sample_correlation(0, [1, 2], 1, H_S, np.ones((4, 3)), rng.normal(size=(3, 4)), params)
    np.testing.assert_allclose(z.data, params.scu_out(Tensor(np.zeros(4))).data, atol=1e-15)


def test_scu_single_unit_peer_identity_reduction():
    # d = 2m so the relevance vector [m_p; e_f] lines up with h_p; profile is padded to d.
    params = identity_params([0, 0], dim=4)
    params.profile_proj = lambda x: T.concat([x, Tensor(np.zeros(2))])
    H_F = np.hstack([np.eye(2), np.zeros((2, 2))])
    H_S = np.array([[0.0, 1.0, 5.0, 5.0], [0.0, 1.0, 0.7, -0.2]])
    masks = np.array([[1.0, 1.0], [0.0, 1.0]])
    z, sims = core.sample_correlation(0, [1], 1, H_S, masks, H_F, params)
    assert sims.data.tolist() == [1.0]
    np.testing.assert_allclose(z.data, H_S[1] * np.array([0.0, 1.0, 0.0, 1.0]))


def test_scu_width_is_d_for_any_peer_count():
    rng = np.random.default_rng(5)
    for k in (1, 2, 4):
        params = M3Params(rng, [0] * 3, tiny_config(peer_count=k))
        z, sims = core.sample_correlation(0, list(range(1, k + 1)), 0, rng.normal(size=(6, 4)),
                                          np.ones((6, 3)), rng.normal(size=(3, 4)), params)
        assert z.shape == (4,) and sims.shape == (k,)
    with pytest.raises(ContractError):
        core.sample_correlation(0, [], 0, np.ones((2, 4)), np.ones((2, 3)), np.ones((3, 4)), params)


# Fusion


def test_zero_sims_give_zero_alpha_and_feature_only_prediction():
    rng = np.random.default_rng(6)
    params = M3Params(rng, [0, 0], tiny_config())
    c, z = Tensor(rng.normal(size=4)), Tensor(rng.normal(size=4))
    pred, alpha = core.fuse_and_predict(c, z, Tensor(np.zeros(2)), params, 0)
    assert alpha.item() == 0.0
    assert pred.data.tolist() == core.decode(c, params, 0).data.tolist()


def test_alpha_range_over_random_sims():
    rng = np.random.default_rng(7)
    params = M3Params(rng, [0], tiny_config(peer_count=5))
    for p in params.alpha_net.parameters():
        p.data = rng.normal(scale=3.0, size=p.shape)
    sims = Tensor(rng.normal(scale=10.0, size=(1000, 5)))
    alpha = core.fusion_weight(sims, params).data
    assert np.all((alpha >= 0) & (alpha < 1))


def test_continuous_prediction_nonnegative_and_discrete_normalised():
    rng = np.random.default_rng(8)
    params = M3Params(rng, [0, 3], tiny_config())
    for _ in range(50):
        c, z, s = (Tensor(rng.normal(scale=5, size=k)) for k in (4, 4, 2))
        assert core.fuse_and_predict(c, z, s, params, 0)[0].item() >= 0
        probs = core.fuse_and_predict(c, z, s, params, 1)[0].data
        assert probs.shape == (3,) and abs(probs.sum() - 1) < 1e-12


def test_fixed_alpha_when_not_learnable():
    params = M3Params(np.random.default_rng(0), [0], tiny_config(learnable_alpha=False))
    assert core.fusion_weight(Tensor(np.ones((3, 2))), params).data.tolist() == [[0.5]] * 3


# Batched forward against the per-cell definitions


def encoded(params, D, M):
    return core.embed(params, D, M)


@pytest.mark.parametrize("variant", ["m3", "init_fcu", "init_scu", "m3_uniform"])
def test_batched_forward_matches_per_cell_composition(variant):
    D, M, n_classes = toy_problem(n=7, m=3, n_classes=(0, 3, 0), seed=1)
    config = core.with_variant(tiny_config(), variant)
    params = M3Params(np.random.default_rng(2), n_classes, config)
    H_S, H_F = encoded(params, D, M)
    peers = core.sample_peer_table(H_S.data, 2, config.variant.peer_sampling, 3)
    rows, cols = np.nonzero(np.ones_like(M))
    out = core.predict_cells(params, H_S, H_F, M, rows, cols, peers)
    v = config.variant
    for i, (s, f) in enumerate(zip(rows, cols)):
        c = core.feature_correlation(T.take(H_S, s), M[s], f, H_F, params)
        z, sims = core.sample_correlation(s, peers[s], f, H_S, M, H_F, params)
        pred, _ = core.fuse_and_predict(c, z, sims, params, f)
        if n_classes[f]:
            j = list(out.class_rows[f]).index(i)
            got = T.softmax(out.logits[f]).data[j]
        else:
            got = out.values.data[list(out.value_rows).index(i)]
        np.testing.assert_allclose(got, pred.data.reshape(np.shape(got)), rtol=1e-10, atol=1e-12)
        if not v.enable_scu:
            np.testing.assert_allclose(pred.data, core.fuse_and_predict(c, c, None, params, f)[0].data)


def test_ablations_decode_single_context():
    D, M, n_classes = toy_problem(seed=4)
    rng = np.random.default_rng(0)
    H_S, H_F = Tensor(rng.normal(size=(6, 4))), Tensor(rng.normal(size=(3, 4)))
    peers = core.sample_peer_table(H_S.data, 2, "cosine", 0)
    s, f = 2, 1
    base = M3Params(np.random.default_rng(1), n_classes, tiny_config())
    no_scu = core.with_variant(tiny_config(), "init_fcu")
    no_fcu = core.with_variant(tiny_config(), "init_scu")
    c = core.feature_correlation(T.take(H_S, s), M[s], f, H_F, base)
    z, _ = core.sample_correlation(s, peers[s], f, H_S, M, H_F, base)
    for cfg, ctx in [(no_scu, c), (no_fcu, z)]:
        base.config = cfg
        out = core.predict_cells(base, H_S, H_F, M, [s], [f], peers)
        np.testing.assert_allclose(out.values.data, core.decode(ctx, base, f).data, rtol=1e-12)
        assert out.alpha is None


def test_dot_product_decoder():
    D, M, n_classes = toy_problem(seed=5)
    config = core.with_variant(tiny_config(), "init_only")
    params = M3Params(np.random.default_rng(0), n_classes, config)
    H_S, H_F = encoded(params, D, M)
    out = core.predict_cells(params, H_S, H_F, M, [0, 3], [1, 2])
    expected = [max(H_S.data[0] @ H_F.data[1], 0), max(H_S.data[3] @ H_F.data[2], 0)]
    np.testing.assert_allclose(out.values.data, expected)


def test_peer_table_required_with_scu():
    D, M, n_classes = toy_problem()
    params = M3Params(np.random.default_rng(0), n_classes, tiny_config())
    H_S, H_F = encoded(params, D, M)
    with pytest.raises(ContractError):
        core.predict_cells(params, H_S, H_F, M, [0], [0])


def test_sample_permutation_equivariance():
    D, M, n_classes = toy_problem(n=8, seed=6)
    params = M3Params(np.random.default_rng(1), n_classes, tiny_config())
    H_S, H_F = encoded(params, D, M)
    peers = core.sample_peer_table(H_S.data, 2, "cosine", 0)
    rows, cols = np.nonzero(np.ones_like(M))
    base = core.predict_cells(params, H_S, H_F, M, rows, cols, peers).values.data
    perm = np.random.default_rng(2).permutation(8)
    inv = np.argsort(perm)
    H_S2, H_F2 = encoded(params, D[perm], M[perm])
    np.testing.assert_allclose(H_S2.data, H_S.data[perm], atol=1e-12)
    out = core.predict_cells(params, H_S2, H_F2, M[perm], inv[rows], cols, inv[peers[perm]])
    np.testing.assert_allclose(out.values.data, base, atol=1e-12)


# Full-model gradient


@pytest.mark.parametrize("variant", ["m3", "init_only", "init_scu"])
def test_full_model_gradient_on_four_by_three_toy(variant):
    D, M, n_classes = toy_problem(n=4, m=3, n_classes=(0, 2, 0), seed=3, ratio=0.25)
    config = core.with_variant(tiny_config(dim=3), variant)
    params = M3Params(np.random.default_rng(4), n_classes, config)
    # Random biases keep every ReLU away from its kink at this point.
    rng = np.random.default_rng(5)
    for p in params.trainable():
        p.data = rng.normal(scale=0.6, size=p.shape)
    peers = np.array([[1, 2], [2, 3], [3, 0], [0, 1]])
    rows, cols = np.nonzero(M)

    def loss():
        H_S, H_F = core.embed(params, D, M)
        out = core.predict_cells(params, H_S, H_F, M, rows, cols, peers)
        return core.cell_loss(out, params, D, rows, cols)

    assert param_gradcheck(loss, params.trainable()) <= 1e-4


# Training


def test_epochs_must_be_positive():
    with pytest.raises(ConfigurationError):
        TrainConfig(epochs=0)


def test_variant_validation():
    with pytest.raises(ConfigurationError):
        VariantConfig(enable_fcu=False, enable_scu=False)
    with pytest.raises(ConfigurationError):
        VariantConfig(decoder="dot_product")
    with pytest.raises(ConfigurationError):
        core.with_variant(ModelConfig(), "nope")
    with pytest.raises(ConfigurationError):
        ModelConfig(epsilon=-1)


def low_rank_table(n=40, m=5, seed=0):
    rng = np.random.default_rng(seed)
    A = rng.random((n, 2)) @ rng.random((2, m))
    return (A - A.min(0)) / (A.max(0) - A.min(0))


def test_fit_is_deterministic_and_learns():
    D = low_rank_table()
    M = dataio.gen_mcar(*D.shape, 0.3, 0)
    train = TrainConfig(epochs=120, lr=3e-3)
    cfg = tiny_config(dim=8, peer_count=3)
    a = core.fit(D, M, np.zeros(5), cfg, train, seed=1)
    b = core.fit(D, M, np.zeros(5), cfg, train, seed=1)
    assert a.losses == b.losses
    assert np.mean(a.losses[:5]) > np.mean(a.losses[-5:])


def test_fit_rejects_too_few_samples_for_peers():
    D = low_rank_table(n=3)
    with pytest.raises(ConfigurationError):
        core.fit(D, np.ones_like(D, bool), np.zeros(5), tiny_config(peer_count=3), TrainConfig(epochs=1))


def test_non_finite_loss_reports_epoch():
    D = low_rank_table()
    M = dataio.gen_mcar(*D.shape, 0.3, 0)
    params = M3Params(np.random.default_rng(0), np.zeros(5), tiny_config())
    params.value_head.b2.data[:] = np.nan
    with pytest.raises(TrainingError) as info:
        core.fit(D, M, np.zeros(5), tiny_config(), TrainConfig(epochs=3), params=params)
    assert info.value.epoch == 1


def test_large_tables_train_on_a_cell_batch():
    M = np.ones((300, 200), bool)
    rows, cols = core.loss_cells(M, TrainConfig(), np.random.default_rng(0))
    assert rows.size == 4096
    rows, _ = core.loss_cells(M[:100, :100], TrainConfig(), np.random.default_rng(0))
    assert rows.size == 10_000


def test_predict_matrix_keeps_observed_and_is_deterministic():
    D, M, n_classes = toy_problem(n=9, n_classes=(0, 4, 0), seed=8)
    params = M3Params(np.random.default_rng(0), n_classes, tiny_config())
    out = core.predict_matrix(params, D, M, seed=3)
    assert np.array_equal(out[M], D[M])
    assert np.array_equal(out, core.predict_matrix(params, D, M, seed=3))
    codes = out[~M[:, 1], 1]
    assert np.all(np.isin(codes, [0, 1, 2, 3]))
    s, f = np.argwhere(~M)[0]
    assert core.impute_cell(params, D, M, s, f, seed=3) == pytest.approx(out[s, f], rel=1e-12)


def test_grape_onehot_initialization():
    D, M, n_classes = toy_problem()
    cfg = replace(tiny_config(), variant=VariantConfig(init_mode="grape_onehot"))
    params = M3Params(np.random.default_rng(0), n_classes, cfg)
    assert np.array_equal(params.feature_embed.data, np.eye(3, 4))
    assert params.feature_embed not in params.trainable()
    assert core.predict_matrix(params, D, M).shape == D.shape
    with pytest.raises(ConfigurationError):
        M3Params(np.random.default_rng(0), [0] * 5, cfg)


def test_checkpoint_roundtrip(tmp_path):
    D, M, n_classes = toy_problem(n=8, n_classes=(0, 2, 0), seed=9)
    params = M3Params(np.random.default_rng(3), n_classes, tiny_config())
    core.save_checkpoint(tmp_path / "model.npz", params)
    loaded = core.load_checkpoint(tmp_path / "model.npz")
    assert loaded.config == params.config
    assert np.array_equal(core.predict_matrix(loaded, D, M), core.predict_matrix(params, D, M))
    np.savez(tmp_path / "bad.npz", x=np.zeros(2))
    with pytest.raises((SchemaError, KeyError)):
        core.load_checkpoint(tmp_path / "bad.npz")
