"""The five training objectives and their weighted sum."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .params import ParamStore, conv_init
from .tensor import ContractViolation, Tensor

LOG_GUARD = 1e-12
NORM_GUARD = 1e-8


@dataclass
class LossWeights:
    v: float = 1.0
    p: float = 2.0
    gan: float = 3.0
    r: float = 4.0
    con: float = 5.0

    def __post_init__(self):
        for name, value in self.as_dict().items():
            if value < 0:
                raise ContractViolation(f"loss weight {name} must be >= 0, got {value}")

    def as_dict(self) -> dict:
        return {"v": self.v, "p": self.p, "gan": self.gan, "r": self.r, "con": self.con}


def facial_attribute_loss(source_vec: Tensor, landmark_vec: Tensor) -> Tensor:
    """One minus cosine similarity; norms are guarded so zero vectors are safe."""
    dot = T.tsum(source_vec * landmark_vec)
    nu = T.clamp(T.l2_norm(source_vec), NORM_GUARD, np.inf)
    nv = T.clamp(T.l2_norm(landmark_vec), NORM_GUARD, np.inf)
    return 1.0 - dot / (nu * nv)


class RandomFeatureExtractor:
    """Frozen, seeded conv pyramid implementing the pluggable extractor contract.

    Serves as the perceptual feature backend when no pretrained network is
    available; any object returning a list of feature tensors per image can
    replace it.
    """

    def __init__(self, seed: int = 0, in_channels: int = 3, stage_channels=(8, 16, 16)):
        if len(stage_channels) < 2:
            raise ContractViolation("feature extractor needs at least 2 stages")
        rng = np.random.default_rng(seed)
        self.weights = []
        prev = in_channels
        for ch in stage_channels:
            w = Tensor(conv_init(rng, ch, prev, 3))
            b = Tensor(np.zeros(ch))
            self.weights.append((w, b))
            prev = ch

    @property
    def n_stages(self) -> int:
        return len(self.weights)

    def __call__(self, image: Tensor) -> list[Tensor]:
        stages = []
        x = image
        for w, b in self.weights:
            x = T.tanh(T.conv2d(x, w, b, stride=2, pad=1))
            stages.append(x)
        return stages


def perception_loss(generated: Tensor, real: Tensor, extractor,
                    include_half_scale: bool = True) -> Tensor:
    """Stage-wise L1 feature distance at full and half resolution.

    Each stage term is the mean absolute feature difference (normalizing by
    that stage's element count); the scales are averaged, then stages.
    `include_half_scale=False` drops the downsampled pair (the multi-scale
    supervision ablation).
    """
    if generated.data.shape != real.data.shape:
        raise ContractViolation(
            f"perception_loss: shapes differ, {generated.data.shape} vs {real.data.shape}"
        )
    pairs = [(generated, real)]
    if include_half_scale:
        pairs.append((T.avg_pool2(generated), T.avg_pool2(real)))
    total = Tensor(0.0)
    n_stages = None
    for gen_img, real_img in pairs:
        gen_stages = extractor(gen_img)
        real_stages = extractor(real_img)
        if n_stages is None:
            n_stages = len(gen_stages)
        elif len(gen_stages) != n_stages:
            raise ContractViolation("perception_loss: extractor stage count changed")
        for gs, rs in zip(gen_stages, real_stages):
            total = total + T.tmean(T.tabs(gs - rs))
    return total / (len(pairs) * n_stages)


def lsgan_losses(d_real: Tensor, d_fake: Tensor) -> tuple[Tensor, Tensor]:
    """Least-squares GAN terms for one discriminator's outputs.

    L_D = 0.5*mean((D(real)-1)^2) + 0.5*mean(D(fake)^2); L_G = mean((D(fake)-1)^2).
    """
    loss_d = 0.5 * T.tmean((d_real - 1.0) * (d_real - 1.0)) + 0.5 * T.tmean(d_fake * d_fake)
    loss_g = T.tmean((d_fake - 1.0) * (d_fake - 1.0))
    return loss_d, loss_g


def _downsample_steps(image: Tensor, steps: int) -> Tensor:
    for _ in range(steps):
        image = T.avg_pool2(image)
    return image


def l1_reconstruction(generated: Tensor, target: Tensor, masks=None) -> Tensor:
    """Mask-normalized L1 over a pyramid of scales.

    With masks (a list of (1, Hk, Wk) arrays at scales 1, 1/2, ...), each
    scale contributes mean(mask * |gen - target|) / mean(mask) and scales
    are averaged. Without masks, plain full-resolution mean L1.
    """
    if generated.data.shape != target.data.shape:
        raise ContractViolation(
            f"l1_reconstruction: shapes differ, {generated.data.shape} vs {target.data.shape}"
        )
    if masks is None:
        return T.tmean(T.tabs(generated - target))
    total = Tensor(0.0)
    for k, mask in enumerate(masks):
        mask = np.asarray(mask)
        weight = float(mask.mean())
        if weight <= 0:
            raise ContractViolation(f"l1_reconstruction: mask at scale {k} is all zero")
        gen_k = _downsample_steps(generated, k)
        tgt_k = _downsample_steps(target, k)
        if mask.shape[-2:] != gen_k.data.shape[-2:]:
            raise ContractViolation(
                f"l1_reconstruction: mask scale {k} is {mask.shape}, "
                f"image is {gen_k.data.shape}"
            )
        total = total + T.tmean(Tensor(mask) * T.tabs(gen_k - tgt_k)) / weight
    return total / len(masks)


def contrastive_loss(p_v2a: Tensor, p_a2v: Tensor) -> Tensor:
    """Mean cross-entropy against one-hot diagonal targets, both directions.

    The diagonal holds the synced pairs; the log is guarded by 1e-12.
    """
    if p_v2a.data.shape != p_a2v.data.shape or p_v2a.data.ndim != 2:
        raise ContractViolation(
            f"contrastive_loss: need two (B, B) matrices, got {p_v2a.data.shape} "
            f"and {p_a2v.data.shape}"
        )
    b = p_v2a.data.shape[0]
    eye = Tensor(np.eye(b))
    h_v = -T.tsum(eye * T.tlog(p_v2a + LOG_GUARD)) / b
    h_a = -T.tsum(eye * T.tlog(p_a2v + LOG_GUARD)) / b
    return 0.5 * (h_v + h_a)


def total_loss(components: dict, weights: LossWeights):
    """Weighted sum over {'v','p','gan','r','con'}; accepts floats or tensors."""
    scale = weights.as_dict()
    total = None
    for name in ("v", "p", "gan", "r", "con"):
        if name not in components:
            raise ContractViolation(f"total_loss: missing component {name!r}")
        value = components[name]
        raw = value.data if isinstance(value, Tensor) else np.asarray(value)
        if raw.size != 1 or not np.all(np.isfinite(raw)):
            raise ContractViolation(f"total_loss: component {name!r} is not a finite scalar")
        term = value * scale[name] if isinstance(value, Tensor) else float(raw) * scale[name]
        total = term if total is None else total + term
    return total
