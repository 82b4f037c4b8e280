"""Intra-modal alignment (residual block + adaptive instance renormalization)
and inter-modal contrastive alignment over batch score matrices.
"""
from __future__ import annotations

from typing import NamedTuple

from . import tensor as T
from .params import ParamStore
from .tensor import ContractViolation, Tensor

DEFAULT_TAU = 0.07


def adain(feature: Tensor, sigma_dot: Tensor, mu_dot: Tensor) -> Tensor:
    """Renormalize each channel to externally supplied std and mean.

    out_c = sigma_dot_c * (x - mean_c) / std_c + mu_dot_c with the guarded
    channel statistics from the tensor core, so constant channels map to
    mu_dot rather than dividing by zero.
    """
    c = feature.data.shape[0]
    if sigma_dot.data.shape != (c,) or mu_dot.data.shape != (c,):
        raise ContractViolation(
            f"adain: style vectors must have shape ({c},), got "
            f"{sigma_dot.data.shape} and {mu_dot.data.shape}"
        )
    mu, std = T.channel_stats(feature)
    normalized = (feature - T.reshape(mu, (c, 1, 1))) / T.reshape(std, (c, 1, 1))
    return T.reshape(sigma_dot, (c, 1, 1)) * normalized + T.reshape(mu_dot, (c, 1, 1))


def adain_conditioned(feature: Tensor, landmark_vec: Tensor, store: ParamStore,
                      prefix: str = "adain") -> Tensor:
    """Adain with per-channel std/mean produced by two affine maps of l_r."""
    sigma_dot = T.linear(landmark_vec, store[f"{prefix}.sw"], store[f"{prefix}.sb"])
    mu_dot = T.linear(landmark_vec, store[f"{prefix}.mw"], store[f"{prefix}.mb"])
    return adain(feature, sigma_dot, mu_dot)


def residual_adain_block(feature: Tensor, landmark_vec: Tensor, store: ParamStore,
                         prefix: str = "align") -> Tensor:
    """feature + conv(tanh(adain(feature, l_r))); shape preserved."""
    modulated = T.tanh(adain_conditioned(feature, landmark_vec, store))
    return feature + T.conv2d(modulated, store[f"{prefix}.w"], store[f"{prefix}.b"], pad=1)


class ScorePair(NamedTuple):
    s_va: Tensor  # (B, B), rows = visual samples, cols = audio samples
    s_av: Tensor  # (B, B), rows = audio samples, cols = visual samples
    tau: float


def _project_unit_rows(batch: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine projection followed by row-wise L2 normalization."""
    z = T.linear(batch, w, b)
    norms = T.tsqrt(T.tsum(z * z, axis=1, keepdims=True) + 1e-12)
    return z / norms

def score_matrices(visual: Tensor, audio: Tensor, store: ParamStore,
                   tau: float = DEFAULT_TAU, prefix: str = "heads") -> ScorePair:
    """Cosine score matrices between projected visual and audio batches.

    s_va[i][j] = <g_v(v_i), g'_a(a_j)> and s_av[i][j] = <g_a(a_i), g'_v(v_j)>;
    all four projection heads L2-normalize, so entries live in [-1, 1].
    """
    if visual.data.ndim != 2 or audio.data.ndim != 2:
        raise ContractViolation("score_matrices: batches must be 2-D (B, dim)")
    if visual.data.shape[0] != audio.data.shape[0]:
        raise ContractViolation(
            f"score_matrices: batch sizes differ, {visual.data.shape[0]} vs "
            f"{audio.data.shape[0]}"
        )
    if visual.data.shape[0] < 2:
        raise ContractViolation("score_matrices: need a batch of at least 2")
    gv = _project_unit_rows(visual, store[f"{prefix}.vw"], store[f"{prefix}.vb"])
    ga = _project_unit_rows(audio, store[f"{prefix}.aw"], store[f"{prefix}.ab"])
    gv_prime = _project_unit_rows(visual, store[f"{prefix}.vpw"], store[f"{prefix}.vpb"])
    ga_prime = _project_unit_rows(audio, store[f"{prefix}.apw"], store[f"{prefix}.apb"])
    s_va = T.matmul(gv, T.transpose(ga_prime))
    s_av = T.matmul(ga, T.transpose(gv_prime))
    return ScorePair(s_va, s_av, tau)


def similarity_distributions(scores: ScorePair) -> tuple[Tensor, Tensor]:
    """Row-stochastic softmax of both score matrices at the pair's temperature.

    Row i holds sample i's distribution over the other modality; the
    diagonal is the synced pair.
    """
    p_v2a = T.softmax(scores.s_va, axis=1, temperature=scores.tau)
    p_a2v = T.softmax(scores.s_av, axis=1, temperature=scores.tau)
    return p_v2a, p_a2v
