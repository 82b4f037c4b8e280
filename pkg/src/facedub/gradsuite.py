"""Finite-difference verification suite over every differentiable operator.

Each check builds a small random fixture per seed and runs the central
finite-difference comparison against the analytic gradient. The CLI
`gradcheck` subcommand and the acceptance tests both run this registry.
"""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .alignment import adain, residual_adain_block, score_matrices, similarity_distributions
from .deformation import (
    AffineCoeffSet,
    affine_warp,
    build_mask_pyramid,
    composite_and_blend,
    decode_face,
    gaussian_face_mask,
    predict_affine_coeffs,
)
from .losses import (
    RandomFeatureExtractor,
    contrastive_loss,
    facial_attribute_loss,
    l1_reconstruction,
    lsgan_losses,
    perception_loss,
)
from .params import ParamStore, conv_init, fc_init
from .tensor import Tensor, grad_check

TOLERANCE = 1e-4
DEFAULT_SEEDS = 5


def _scalarize(out, rng):
    return T.tsum(out * Tensor(rng.normal(size=out.shape)))


def _align_store(rng, channels, feature_dim):
    store = ParamStore()
    store.add("adain.sw", fc_init(rng, channels, feature_dim, scale=0.3))
    store.add("adain.sb", np.ones(channels))
    store.add("adain.mw", fc_init(rng, channels, feature_dim, scale=0.3))
    store.add("adain.mb", np.zeros(channels))
    store.add("align.w", rng.normal(0, 0.1, size=(channels, channels, 3, 3)))
    store.add("align.b", np.zeros(channels))
    return store


def _heads_store(rng, visual_dim, audio_dim, embed_dim):
    store = ParamStore()
    for key, in_dim in (("vw", visual_dim), ("aw", audio_dim),
                        ("vpw", visual_dim), ("apw", audio_dim)):
        store.add(f"heads.{key}", fc_init(rng, embed_dim, in_dim))
        store.add(f"heads.{key[:-1]}b", np.zeros(embed_dim))
    return store


def check_adain(seed):
    rng = np.random.default_rng(seed)
    sigma_dot = Tensor(rng.normal(1.0, 0.3, size=3))
    mu_dot = Tensor(rng.normal(size=3))
    x = rng.normal(size=(3, 4, 4))
    mask = Tensor(rng.normal(size=(3, 4, 4)))
    errs = [
        grad_check(lambda t: T.tsum(adain(t, sigma_dot, mu_dot) * mask), Tensor(x.copy())),
        grad_check(lambda t: T.tsum(adain(Tensor(x), t, mu_dot) * mask), Tensor(rng.normal(1.0, 0.3, size=3))),
        grad_check(lambda t: T.tsum(adain(Tensor(x), sigma_dot, t) * mask), Tensor(rng.normal(size=3))),
    ]
    return max(errs)


def check_residual_block(seed):
    rng = np.random.default_rng(seed)
    store = _align_store(rng, 3, 5)
    mask = Tensor(rng.normal(size=(3, 4, 4)))
    l_r = Tensor(rng.normal(size=5))
    x = rng.normal(size=(3, 4, 4))
    errs = [
        grad_check(lambda t: T.tsum(residual_adain_block(t, l_r, store) * mask), Tensor(x.copy())),
        grad_check(lambda t: T.tsum(residual_adain_block(Tensor(x), t, store) * mask), Tensor(rng.normal(size=5))),
    ]
    return max(errs)


def check_score_softmax_path(seed):
    rng = np.random.default_rng(seed)
    store = _heads_store(rng, 4, 6, 5)
    audio = Tensor(rng.normal(size=(3, 6)))
    visual = rng.normal(size=(3, 4))

    def through_visual(t):
        pair = score_matrices(t, audio, store, tau=0.3)
        return contrastive_loss(*similarity_distributions(pair))

    def through_audio(t):
        pair = score_matrices(Tensor(visual), t, store, tau=0.3)
        return contrastive_loss(*similarity_distributions(pair))

    return max(
        grad_check(through_visual, Tensor(visual.copy())),
        grad_check(through_audio, Tensor(rng.normal(size=(3, 6)))),
    )


def check_softmax(seed):
    rng = np.random.default_rng(seed)
    mask = Tensor(rng.normal(size=6))
    return grad_check(
        lambda t: T.tsum(T.softmax(t, axis=0, temperature=0.07) * mask),
        Tensor(rng.normal(size=6)),
    )


def _warp_fixture(rng):
    feature = rng.normal(size=(2, 6, 6))
    theta = rng.uniform(-0.3, 0.3, size=2)
    tx = rng.uniform(-0.12, 0.12, size=2) + 0.013
    ty = rng.uniform(-0.12, 0.12, size=2) + 0.027
    scale = rng.uniform(0.9, 1.1, size=2)
    return feature, theta, tx, ty, scale


def _warp_scalar(feature, theta, tx, ty, scale, mask):
    coeffs = AffineCoeffSet(theta, tx, ty, scale)
    return T.tsum(affine_warp(feature, coeffs) * mask)


def check_warp_feature(seed):
    rng = np.random.default_rng(seed)
    feature, theta, tx, ty, scale = _warp_fixture(rng)
    mask = Tensor(rng.normal(size=(2, 6, 6)))
    return grad_check(
        lambda t: _warp_scalar(t, Tensor(theta), Tensor(tx), Tensor(ty), Tensor(scale), mask),
        Tensor(feature.copy()),
    )


def check_warp_theta(seed):
    rng = np.random.default_rng(seed)
    feature, theta, tx, ty, scale = _warp_fixture(rng)
    mask = Tensor(rng.normal(size=(2, 6, 6)))
    return grad_check(
        lambda t: _warp_scalar(Tensor(feature), t, Tensor(tx), Tensor(ty), Tensor(scale), mask),
        Tensor(theta.copy()),
    )


def check_warp_tx(seed):
    rng = np.random.default_rng(seed)
    feature, theta, tx, ty, scale = _warp_fixture(rng)
    mask = Tensor(rng.normal(size=(2, 6, 6)))
    return grad_check(
        lambda t: _warp_scalar(Tensor(feature), Tensor(theta), t, Tensor(ty), Tensor(scale), mask),
        Tensor(tx.copy()),
    )


def check_warp_ty(seed):
    rng = np.random.default_rng(seed)
    feature, theta, tx, ty, scale = _warp_fixture(rng)
    mask = Tensor(rng.normal(size=(2, 6, 6)))
    return grad_check(
        lambda t: _warp_scalar(Tensor(feature), Tensor(theta), Tensor(tx), t, Tensor(scale), mask),
        Tensor(ty.copy()),
    )


def check_warp_scale(seed):
    rng = np.random.default_rng(seed)
    feature, theta, tx, ty, scale = _warp_fixture(rng)
    mask = Tensor(rng.normal(size=(2, 6, 6)))
    return grad_check(
        lambda t: _warp_scalar(Tensor(feature), Tensor(theta), Tensor(tx), Tensor(ty), t, mask),
        Tensor(scale.copy()),
    )


def check_coeff_heads(seed):
    rng = np.random.default_rng(seed)
    store = ParamStore()
    for key in ("tw", "xw", "yw", "sw"):
        store.add(f"coeff.{key}", rng.normal(0, 0.2, size=(3, 7)))
    for key in ("tb", "xb", "yb", "sb"):
        store.add(f"coeff.{key}", rng.normal(0, 0.1, size=3))
    audio = Tensor(rng.normal(size=4))
    mask = Tensor(rng.normal(size=3))

    def f(t):
        coeffs = predict_affine_coeffs(t, audio, store)
        return T.tsum((coeffs.theta + coeffs.t_x * coeffs.scale + coeffs.t_y) * mask)

    return grad_check(f, Tensor(rng.normal(size=3)))


def check_facial_attribute_loss(seed):
    rng = np.random.default_rng(seed)
    other = Tensor(rng.normal(size=5))
    return max(
        grad_check(lambda t: facial_attribute_loss(t, other), Tensor(rng.normal(size=5))),
        grad_check(lambda t: facial_attribute_loss(other, t), Tensor(rng.normal(size=5))),
    )


def check_perception_loss(seed):
    rng = np.random.default_rng(seed)
    extractor = RandomFeatureExtractor(seed=seed, stage_channels=(4, 4))
    target = Tensor(rng.uniform(size=(3, 8, 8)))
    return grad_check(
        lambda t: perception_loss(t, target, extractor), Tensor(rng.uniform(size=(3, 8, 8)))
    )


def check_lsgan_losses(seed):
    rng = np.random.default_rng(seed)
    other = Tensor(rng.normal(size=(1, 4, 4)))
    return max(
        grad_check(lambda t: lsgan_losses(t, other)[0], Tensor(rng.normal(size=(1, 4, 4)))),
        grad_check(lambda t: lsgan_losses(other, t)[0], Tensor(rng.normal(size=(1, 4, 4)))),
        grad_check(lambda t: lsgan_losses(other, t)[1], Tensor(rng.normal(size=(1, 4, 4)))),
    )


def check_l1_reconstruction(seed):
    rng = np.random.default_rng(seed)
    masks = build_mask_pyramid(8, 8)
    target = Tensor(rng.uniform(size=(3, 8, 8)))
    return grad_check(
        lambda t: l1_reconstruction(t, target, masks), Tensor(rng.uniform(size=(3, 8, 8)))
    )


def check_contrastive_loss(seed):
    rng = np.random.default_rng(seed)
    rows = rng.uniform(0.05, 1.0, size=(3, 3))
    rows /= rows.sum(axis=1, keepdims=True)
    other = Tensor(rows.copy())
    return grad_check(lambda t: contrastive_loss(t, other), Tensor(rows.copy()))


def check_decoder(seed):
    rng = np.random.default_rng(seed)
    store = ParamStore()
    store.add("dec.w1", conv_init(rng, 4, 8, 3))
    store.add("dec.b1", np.zeros(4))
    store.add("dec.w2", conv_init(rng, 2, 4, 3))
    store.add("dec.b2", np.zeros(2))
    store.add("dec.w3", conv_init(rng, 3, 2, 3))
    store.add("dec.b3", np.zeros(3))
    f_d = Tensor(rng.normal(size=(4, 2, 2)))
    mask = Tensor(rng.normal(size=(3, 8, 8)))
    return grad_check(
        lambda t: T.tsum(decode_face(t, f_d, store) * mask), Tensor(rng.normal(size=(4, 2, 2)))
    )


def check_blend(seed):
    rng = np.random.default_rng(seed)
    store = ParamStore()
    store.add("blend.w1", conv_init(rng, 4, 3, 3))
    store.add("blend.b1", np.zeros(4))
    store.add("blend.w2", conv_init(rng, 3, 4, 3, scale=0.1))
    store.add("blend.b2", np.zeros(3))
    face = gaussian_face_mask(8, 8, (1, 7, 1, 7), sigma=1.0)
    source = Tensor(rng.uniform(0.3, 0.7, size=(3, 8, 8)))
    mask = Tensor(rng.normal(size=(3, 8, 8)))

    def f(t):
        # inputs kept away from the clamp edges so the bound stays inactive
        final, _ = composite_and_blend(t, source, face, store)
        return T.tsum(final * mask)

    return grad_check(f, Tensor(rng.uniform(0.3, 0.7, size=(3, 8, 8))))


def check_channel_stats(seed):
    rng = np.random.default_rng(seed)
    mask = Tensor(rng.normal(size=2))

    def f(t):
        mu, std = T.channel_stats(t)
        return T.tsum(mu * mask) + T.tsum(std * mask)

    return grad_check(f, Tensor(rng.normal(size=(2, 3, 3))))


def check_conv2d(seed):
    rng = np.random.default_rng(seed)
    w = Tensor(rng.normal(size=(2, 3, 3, 3)))
    b = Tensor(rng.normal(size=2))
    mask_holder = {}

    def f(t):
        out = T.conv2d(t, w, b, stride=2, pad=1)
        if "m" not in mask_holder:
            mask_holder["m"] = Tensor(np.random.default_rng(seed + 1).normal(size=out.shape))
        return T.tsum(out * mask_holder["m"])

    return grad_check(f, Tensor(rng.normal(size=(3, 5, 5))))


CHECKS = [
    ("adain", check_adain),
    ("residual_adain_block", check_residual_block),
    ("score_softmax_path", check_score_softmax_path),
    ("softmax", check_softmax),
    ("affine_warp/feature", check_warp_feature),
    ("affine_warp/theta", check_warp_theta),
    ("affine_warp/t_x", check_warp_tx),
    ("affine_warp/t_y", check_warp_ty),
    ("affine_warp/scale", check_warp_scale),
    ("coeff_heads", check_coeff_heads),
    ("facial_attribute_loss", check_facial_attribute_loss),
    ("perception_loss", check_perception_loss),
    ("lsgan_losses", check_lsgan_losses),
    ("l1_reconstruction", check_l1_reconstruction),
    ("contrastive_loss", check_contrastive_loss),
    ("decoder", check_decoder),
    ("blend", check_blend),
    ("channel_stats", check_channel_stats),
    ("conv2d", check_conv2d),
]


def run_suite(seeds: int = DEFAULT_SEEDS, tolerance: float = TOLERANCE):
    """Returns [(name, max relative error over seeds, passed)]."""
    results = []
    for name, fn in CHECKS:
        worst = max(fn(seed) for seed in range(seeds))
        results.append((name, worst, worst < tolerance))
    return results
