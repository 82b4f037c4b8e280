import numpy as np
import pytest

from facedub import alignment, tensor as T
from facedub.alignment import (
    ScorePair,
    adain,
    adain_conditioned,
    residual_adain_block,
    score_matrices,
    similarity_distributions,
)
from facedub.params import ParamStore, fc_init
from facedub.tensor import ContractViolation, Tensor, backward, grad_check


def make_heads(visual_dim, audio_dim, embed_dim=6, seed=0, identity=False):
    store = ParamStore()
    rng = np.random.default_rng(seed)
    for key, out_dim, in_dim in (
        ("vw", embed_dim, visual_dim),
        ("aw", embed_dim, audio_dim),
        ("vpw", embed_dim, visual_dim),
        ("apw", embed_dim, audio_dim),
    ):
        if identity:
            store.add(f"heads.{key}", np.eye(out_dim, in_dim))
        else:
            store.add(f"heads.{key}", fc_init(rng, out_dim, in_dim))
        store.add(f"heads.{key[:-1]}b", np.zeros(out_dim))
    return store


def make_align_store(channels, feature_dim, seed=0, zero_conv=False):
    store = ParamStore()
    rng = np.random.default_rng(seed)
    store.add("adain.sw", fc_init(rng, channels, feature_dim, scale=0.1))
    store.add("adain.sb", np.ones(channels))
    store.add("adain.mw", fc_init(rng, channels, feature_dim, scale=0.1))
    store.add("adain.mb", np.zeros(channels))
    if zero_conv:
        store.add("align.w", np.zeros((channels, channels, 3, 3)))
    else:
        store.add("align.w", rng.normal(0, 0.05, size=(channels, channels, 3, 3)))
    store.add("align.b", np.zeros(channels))
    return store


def test_adain_identity_on_already_normalized_input():
    rng = np.random.default_rng(0)
    raw = rng.normal(1.5, 2.0, size=(3, 5, 5))
    # zero-mean, unit-std per channel under this module's guarded convention:
    # population variance 1 - eps so that sqrt(var + eps) == 1
    mu = raw.mean(axis=(1, 2), keepdims=True)
    std = raw.std(axis=(1, 2), keepdims=True)
    normalized = (raw - mu) / std * np.sqrt(1.0 - 1e-5)
    out = adain(Tensor(normalized), Tensor(np.ones(3)), Tensor(np.zeros(3)))
    np.testing.assert_allclose(out.data, normalized, atol=1e-6)


def test_adain_constant_channel_maps_to_mu():
    feature = Tensor(np.full((2, 4, 4), 7.0))
    out = adain(feature, Tensor([3.0, -2.0]), Tensor([-1.0, 4.0]))
    np.testing.assert_allclose(out.data[0], -1.0, atol=1e-6)
    np.testing.assert_allclose(out.data[1], 4.0, atol=1e-6)


def test_adain_matches_direct_formula():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 2, 2))
    sigma_dot = np.array([2.0, 3.0])
    mu_dot = np.array([-1.0, 4.0])
    out = adain(Tensor(x), Tensor(sigma_dot), Tensor(mu_dot))
    mu = x.mean(axis=(1, 2), keepdims=True)
    std = np.sqrt(x.var(axis=(1, 2), keepdims=True) + 1e-5)
    expected = sigma_dot[:, None, None] * (x - mu) / std + mu_dot[:, None, None]
    np.testing.assert_allclose(out.data, expected, atol=1e-12)


def test_adain_gradients():
    rng = np.random.default_rng(2)
    x = Tensor(rng.normal(size=(2, 3, 3)))
    sigma_dot = Tensor(np.array([2.0, 3.0]))
    mu_dot = Tensor(np.array([-1.0, 4.0]))
    mask = Tensor(rng.normal(size=(2, 3, 3)))

    def wrt_feature(t):
        return T.tsum(adain(t, sigma_dot, mu_dot) * mask)

    def wrt_sigma(t):
        return T.tsum(adain(x, t, mu_dot) * mask)

    def wrt_mu(t):
        return T.tsum(adain(x, sigma_dot, t) * mask)

    assert grad_check(wrt_feature, Tensor(rng.normal(size=(2, 3, 3)))) < 1e-5
    assert grad_check(wrt_sigma, Tensor(np.array([1.5, 0.7]))) < 1e-5
    assert grad_check(wrt_mu, Tensor(np.array([0.3, -0.9]))) < 1e-5


def test_adain_statistics_contract():
    rng = np.random.default_rng(3)
    for _ in range(20):
        x = rng.normal(rng.normal(), 1.0 + rng.uniform(), size=(4, 8, 8))
        sigma_dot = rng.normal(0, 1.5, size=4)
        mu_dot = rng.normal(0, 2.0, size=4)
        out = adain(Tensor(x), Tensor(sigma_dot), Tensor(mu_dot)).data
        np.testing.assert_allclose(out.mean(axis=(1, 2)), mu_dot, atol=1e-5)
        np.testing.assert_allclose(out.std(axis=(1, 2)), np.abs(sigma_dot), atol=1e-4)


def test_adain_shape_validation():
    with pytest.raises(ContractViolation, match="adain"):
        adain(Tensor(np.zeros((2, 3, 3))), Tensor(np.zeros(3)), Tensor(np.zeros(2)))


def test_residual_block_with_zero_conv_is_skip():
    store = make_align_store(channels=4, feature_dim=6, zero_conv=True)
    rng = np.random.default_rng(4)
    feature = Tensor(rng.normal(size=(4, 5, 5)))
    l_r = Tensor(rng.normal(size=6))
    out = residual_adain_block(feature, l_r, store)
    np.testing.assert_allclose(out.data, feature.data, atol=1e-12)


@pytest.mark.parametrize("depth", [1, 2, 3])
def test_stacked_blocks_preserve_shape(depth):
    store = make_align_store(channels=4, feature_dim=6, seed=5)
    rng = np.random.default_rng(6)
    out = Tensor(rng.normal(size=(4, 6, 6)))
    l_r = Tensor(rng.normal(size=6))
    for _ in range(depth):
        out = residual_adain_block(out, l_r, store)
    assert out.shape == (4, 6, 6)


def test_gradient_reaches_landmark_vector():
    store = make_align_store(channels=4, feature_dim=6, seed=7)
    rng = np.random.default_rng(8)
    feature = Tensor(rng.normal(size=(4, 5, 5)))
    l_r = Tensor(rng.normal(size=6), requires_grad=True)
    out = residual_adain_block(feature, l_r, store)
    backward(T.tsum(out * out))
    assert l_r.grad is not None
    assert np.linalg.norm(l_r.grad) > 0


def test_residual_block_gradcheck():
    store = make_align_store(channels=3, feature_dim=4, seed=9)
    rng = np.random.default_rng(10)
    l_r = Tensor(rng.normal(size=4))
    mask = Tensor(rng.normal(size=(3, 4, 4)))

    def f(t):
        return T.tsum(residual_adain_block(t, l_r, store) * mask)

    assert grad_check(f, Tensor(rng.normal(size=(3, 4, 4)))) < 1e-5


def test_scores_identical_embeddings_give_unit_diagonal():
    store = make_heads(visual_dim=6, audio_dim=6, embed_dim=6, identity=True)
    rng = np.random.default_rng(11)
    batch = rng.normal(size=(3, 6))
    pair = score_matrices(Tensor(batch), Tensor(batch.copy()), store)
    np.testing.assert_allclose(np.diag(pair.s_va.data), 1.0, atol=1e-12)
    np.testing.assert_allclose(np.diag(pair.s_av.data), 1.0, atol=1e-12)


def test_scores_orthogonal_embeddings_give_zero_off_diagonal():
    store = make_heads(visual_dim=4, audio_dim=4, embed_dim=4, identity=True)
    basis = np.eye(4)[:3]
    pair = score_matrices(Tensor(basis), Tensor(basis.copy()), store)
    off_diag = pair.s_va.data[~np.eye(3, dtype=bool)]
    np.testing.assert_allclose(off_diag, 0.0, atol=1e-6)


def test_scores_match_double_loop_oracle():
    store = make_heads(visual_dim=5, audio_dim=7, embed_dim=6, seed=12)
    rng = np.random.default_rng(13)
    visual = rng.normal(size=(3, 5))
    audio = rng.normal(size=(3, 7))
    pair = score_matrices(Tensor(visual), Tensor(audio), store)

    def project(batch, w):
        rows = batch @ w.T
        return rows / np.sqrt((rows**2).sum(axis=1, keepdims=True) + 1e-12)

    gv = project(visual, store["heads.vw"].data)
    ga = project(audio, store["heads.aw"].data)
    gvp = project(visual, store["heads.vpw"].data)
    gap = project(audio, store["heads.apw"].data)
    for i in range(3):
        for j in range(3):
            expected_va = sum(gv[i][k] * gap[j][k] for k in range(6))
            expected_av = sum(ga[i][k] * gvp[j][k] for k in range(6))
            assert pair.s_va.data[i, j] == pytest.approx(expected_va, abs=1e-6)
            assert pair.s_av.data[i, j] == pytest.approx(expected_av, abs=1e-6)
    assert np.all(np.abs(pair.s_va.data) <= 1.0 + 1e-12)


def test_scores_batch_mismatch_and_minimum():
    store = make_heads(visual_dim=4, audio_dim=4)
    with pytest.raises(ContractViolation, match="batch"):
        score_matrices(Tensor(np.zeros((3, 4))), Tensor(np.zeros((2, 4))), store)
    with pytest.raises(ContractViolation, match="at least 2"):
        score_matrices(Tensor(np.zeros((1, 4))), Tensor(np.zeros((1, 4))), store)


def test_similarity_uniform_rows():
    pair = ScorePair(Tensor(np.ones((3, 3))), Tensor(np.ones((3, 3))), tau=1.0)
    p_v2a, p_a2v = similarity_distributions(pair)
    np.testing.assert_allclose(p_v2a.data, 1.0 / 3.0)
    np.testing.assert_allclose(p_a2v.data, 1.0 / 3.0)


def test_similarity_diagonal_saturates_at_low_temperature():
    for b in (2, 4, 8):
        pair = ScorePair(Tensor(np.eye(b)), Tensor(np.eye(b)), tau=0.07)
        p_v2a, _ = similarity_distributions(pair)
        assert np.all(np.diag(p_v2a.data) > 0.999)


def test_similarity_two_by_two_closed_form():
    pair = ScorePair(Tensor(np.eye(2)), Tensor(np.eye(2)), tau=1.0)
    p_v2a, _ = similarity_distributions(pair)
    e = np.e
    np.testing.assert_allclose(p_v2a.data[0], [e / (e + 1), 1 / (e + 1)], atol=1e-6)
    np.testing.assert_allclose(p_v2a.data[0], [0.73105858, 0.26894142], atol=1e-6)


def test_similarity_rows_sum_to_one():
    rng = np.random.default_rng(14)
    pair = ScorePair(Tensor(rng.normal(size=(5, 5))), Tensor(rng.normal(size=(5, 5))), tau=0.07)
    p_v2a, p_a2v = similarity_distributions(pair)
    np.testing.assert_allclose(p_v2a.data.sum(axis=1), 1.0, atol=1e-6)
    np.testing.assert_allclose(p_a2v.data.sum(axis=1), 1.0, atol=1e-6)


def test_similarity_shift_invariance():
    rng = np.random.default_rng(15)
    scores = rng.normal(size=(4, 4))
    shifted = scores + np.array([[10.0], [0.5], [-3.0], [0.0]])
    base, _ = similarity_distributions(ScorePair(Tensor(scores), Tensor(scores), tau=0.3))
    moved, _ = similarity_distributions(ScorePair(Tensor(shifted), Tensor(shifted), tau=0.3))
    np.testing.assert_allclose(base.data, moved.data, atol=1e-9)


def test_permuting_audio_batch_permutes_score_columns():
    store = make_heads(visual_dim=4, audio_dim=4, seed=16)
    rng = np.random.default_rng(17)
    visual = rng.normal(size=(4, 4))
    audio = rng.normal(size=(4, 4))
    perm = np.array([2, 0, 3, 1])
    base = score_matrices(Tensor(visual), Tensor(audio), store)
    permuted = score_matrices(Tensor(visual), Tensor(audio[perm]), store)
    np.testing.assert_allclose(permuted.s_va.data, base.s_va.data[:, perm], atol=1e-12)


def test_similarity_rejects_bad_temperature():
    pair = ScorePair(Tensor(np.eye(2)), Tensor(np.eye(2)), tau=-1.0)
    with pytest.raises(ContractViolation):
        similarity_distributions(pair)


def test_contrastive_path_gradcheck():
    from facedub.losses import contrastive_loss

    store = make_heads(visual_dim=4, audio_dim=4, seed=18)
    rng = np.random.default_rng(19)
    audio = Tensor(rng.normal(size=(3, 4)))

    def f(t):
        pair = score_matrices(t, audio, store, tau=0.5)
        p_v2a, p_a2v = similarity_distributions(pair)
        return contrastive_loss(p_v2a, p_a2v)

    assert grad_check(f, Tensor(rng.normal(size=(3, 4)))) < 1e-5
