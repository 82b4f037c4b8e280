"""Per-channel adaptive affine deformation, mask supervision pyramids,
face decoding, and Gaussian-mask compositing with a residual blend stage.

Coordinates live on the normalized grid [-1, 1]^2 with the origin at the
feature center. Coefficients describe the forward similarity transform
p_out = s * R(theta) * p_in + t; sampling inverts it in closed form and
fetches values bilinearly with border clamping.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .params import ParamStore
from .tensor import ContractViolation, Tensor, make_node

SCALE_FLOOR = 0.1
RESIDUAL_CAP = 0.1
# softplus(raw) + floor == 1 at init
IDENTITY_SCALE_BIAS = math.log(math.expm1(1.0 - SCALE_FLOOR))


@dataclass
class AffineCoeffSet:
    """Per-channel rotation/translation/scale, each a (C,) tensor."""

    theta: Tensor
    t_x: Tensor
    t_y: Tensor
    scale: Tensor

    @property
    def channels(self) -> int:
        return self.theta.data.shape[0]


def predict_affine_coeffs(pooled_visual: Tensor, audio_vec: Tensor,
                          store: ParamStore, prefix: str = "coeff") -> AffineCoeffSet:
    """Four affine heads over the concatenated aligned visual/audio feature.

    Heads start at zero weight with biases chosen so the initial transform
    is the identity (theta=0, t=0, s=1); scale is softplus + 0.1 so the
    transform stays invertible.
    """
    z = T.concat([pooled_visual, audio_vec], axis=0)
    theta = T.linear(z, store[f"{prefix}.tw"], store[f"{prefix}.tb"])
    t_x = T.linear(z, store[f"{prefix}.xw"], store[f"{prefix}.xb"])
    t_y = T.linear(z, store[f"{prefix}.yw"], store[f"{prefix}.yb"])
    raw = T.linear(z, store[f"{prefix}.sw"], store[f"{prefix}.sb"])
    scale = T.softplus(raw) + SCALE_FLOOR
    return AffineCoeffSet(theta, t_x, t_y, scale)


def forward_map(theta: float, t_x: float, t_y: float, scale: float,
                x: float, y: float) -> tuple[float, float]:
    """Apply the forward similarity transform to one normalized coordinate."""
    c, s = math.cos(theta), math.sin(theta)
    return (
        scale * c * x - scale * s * y + t_x,
        scale * s * x + scale * c * y + t_y,
    )


def affine_warp(f_ref: Tensor, coeffs: AffineCoeffSet) -> Tensor:
    """Backward-warp each channel of a (C, H, W) feature by its own transform.

    Differentiable with respect to the feature and all four coefficient
    sets; gradients for the coefficients flow through the bilinear sample
    positions.
    """
    theta, t_x, t_y, scale = coeffs.theta, coeffs.t_x, coeffs.t_y, coeffs.scale
    if f_ref.data.ndim != 3:
        raise ContractViolation(f"affine_warp: expected (C, H, W), got {f_ref.data.shape}")
    c, h, w = f_ref.data.shape
    for name, t in (("theta", theta), ("t_x", t_x), ("t_y", t_y), ("scale", scale)):
        if t.data.shape != (c,):
            raise ContractViolation(
                f"affine_warp: {name} must have shape ({c},), got {t.data.shape}"
            )
        if not np.all(np.isfinite(t.data)):
            raise ContractViolation(f"affine_warp: non-finite {name} coefficients")

    th = theta.data[:, None, None]
    tx = t_x.data[:, None, None]
    ty = t_y.data[:, None, None]
    sc = scale.data[:, None, None]
    cos_t, sin_t = np.cos(th), np.sin(th)

    x_hat = (2.0 * np.arange(w) / (w - 1) - 1.0)[None, None, :]
    y_hat = (2.0 * np.arange(h) / (h - 1) - 1.0)[None, :, None]
    a = x_hat - tx
    b = y_hat - ty
    u = (a * cos_t + b * sin_t) / sc
    v = (-a * sin_t + b * cos_t) / sc

    px = (u + 1.0) * (w - 1) / 2.0
    py = (v + 1.0) * (h - 1) / 2.0
    inside_x = (px >= 0.0) & (px <= w - 1.0)
    inside_y = (py >= 0.0) & (py <= h - 1.0)
    pxc = np.clip(px, 0.0, w - 1.0)
    pyc = np.clip(py, 0.0, h - 1.0)

    x0 = np.floor(pxc).astype(np.intp)
    y0 = np.floor(pyc).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = pxc - x0
    fy = pyc - y0

    ch = np.broadcast_to(np.arange(c)[:, None, None], (c, h, w))
    f = f_ref.data
    v00 = f[ch, y0, x0]
    v01 = f[ch, y0, x1]
    v10 = f[ch, y1, x0]
    v11 = f[ch, y1, x1]
    out = (1 - fy) * ((1 - fx) * v00 + fx * v01) + fy * ((1 - fx) * v10 + fx * v11)

    def grad_fn(g):
        gf = np.zeros_like(f)
        np.add.at(gf, (ch, y0, x0), g * (1 - fy) * (1 - fx))
        np.add.at(gf, (ch, y0, x1), g * (1 - fy) * fx)
        np.add.at(gf, (ch, y1, x0), g * fy * (1 - fx))
        np.add.at(gf, (ch, y1, x1), g * fy * fx)

        d_px = g * ((1 - fy) * (v01 - v00) + fy * (v11 - v10)) * inside_x
        d_py = g * ((1 - fx) * (v10 - v00) + fx * (v11 - v01)) * inside_y
        du = d_px * (w - 1) / 2.0
        dv = d_py * (h - 1) / 2.0

        d_theta = (du * v - dv * u).sum(axis=(1, 2))
        d_tx = (du * (-cos_t / sc) + dv * (sin_t / sc)).sum(axis=(1, 2))
        d_ty = (du * (-sin_t / sc) + dv * (-cos_t / sc)).sum(axis=(1, 2))
        d_sc = (du * (-u / sc) + dv * (-v / sc)).sum(axis=(1, 2))
        return gf, d_theta, d_tx, d_ty, d_sc

    return make_node(out, (f_ref, theta, t_x, t_y, scale), grad_fn)


def identity_coeffs(channels: int) -> AffineCoeffSet:
    return AffineCoeffSet(
        Tensor(np.zeros(channels)),
        Tensor(np.zeros(channels)),
        Tensor(np.zeros(channels)),
        Tensor(np.ones(channels)),
    )


def build_mask_pyramid(h: int, w: int) -> list[np.ndarray]:
    """Lower-half supervision masks at scales 1, 1/2, 1/4.

    The full-resolution mask ramps linearly over three rows around H/2;
    coarser masks are exact area averages of it.
    """
    if h % 4 or w % 4:
        raise ContractViolation(f"mask pyramid needs extents divisible by 4, got {h}x{w}")
    rows = np.clip((np.arange(h) - (h // 2 - 2)) / 3.0, 0.0, 1.0)
    full = np.broadcast_to(rows[:, None], (h, w))[None].copy()
    masks = [full]
    for _ in range(2):
        prev = masks[-1]
        _, ph, pw = prev.shape
        masks.append(prev.reshape(1, ph // 2, 2, pw // 2, 2).mean(axis=(2, 4)))
    return masks


def gaussian_face_mask(h: int, w: int, box: tuple[int, int, int, int],
                       sigma: float) -> np.ndarray:
    """Binary box mask blurred by a truncated Gaussian (radius 3*sigma)."""
    r0, r1, c0, c1 = box
    if not (0 <= r0 < r1 <= h and 0 <= c0 < c1 <= w):
        raise ContractViolation(f"gaussian_face_mask: empty or out-of-frame box {box}")
    if sigma <= 0:
        raise ContractViolation(f"gaussian_face_mask: sigma must be > 0, got {sigma}")
    mask = np.zeros((h, w))
    mask[r0:r1, c0:c1] = 1.0
    radius = max(1, int(math.ceil(3.0 * sigma)))
    taps = np.exp(-0.5 * (np.arange(-radius, radius + 1) / sigma) ** 2)
    taps /= taps.sum()
    padded = np.pad(mask, radius)
    blurred = np.apply_along_axis(lambda m: np.convolve(m, taps, mode="valid"), 0, padded)
    blurred = np.apply_along_axis(lambda m: np.convolve(m, taps, mode="valid"), 1, blurred)
    return blurred[None]


def decode_face(f_s: Tensor, f_d: Tensor, store: ParamStore, prefix: str = "dec") -> Tensor:
    """Concatenate source and deformed features, upsample x4, emit RGB in [0,1]."""
    if f_s.data.shape[1:] != f_d.data.shape[1:]:
        raise ContractViolation(
            f"decode_face: spatial extents differ, {f_s.data.shape} vs {f_d.data.shape}"
        )
    x = T.concat([f_s, f_d], axis=0)
    x = T.tanh(T.conv2d(x, store[f"{prefix}.w1"], store[f"{prefix}.b1"], pad=1))
    x = T.upsample2(x)
    x = T.tanh(T.conv2d(x, store[f"{prefix}.w2"], store[f"{prefix}.b2"], pad=1))
    x = T.upsample2(x)
    return T.sigmoid(T.conv2d(x, store[f"{prefix}.w3"], store[f"{prefix}.b3"], pad=1))


def blend_residual(composite: Tensor, store: ParamStore, prefix: str = "blend") -> Tensor:
    hidden = T.tanh(T.conv2d(composite, store[f"{prefix}.w1"], store[f"{prefix}.b1"], pad=1))
    return T.conv2d(hidden, store[f"{prefix}.w2"], store[f"{prefix}.b2"], pad=1)


def composite_and_blend(generated: Tensor, source: Tensor, face_mask,
                        store: ParamStore) -> tuple[Tensor, Tensor]:
    """Mask-composite the generated face onto the source, then apply a
    capped residual correction: final = clamp(comp + 0.1*tanh(net(comp)), 0, 1).

    Returns (final, composite) so callers can check the residual bound.
    """
    if generated.data.shape != source.data.shape:
        raise ContractViolation(
            f"composite_and_blend: shapes differ, {generated.data.shape} vs {source.data.shape}"
        )
    mask = face_mask if isinstance(face_mask, Tensor) else Tensor(face_mask)
    composite = mask * generated + (1.0 - mask) * source
    residual = RESIDUAL_CAP * T.tanh(blend_residual(composite, store))
    final = T.clamp(composite + residual, 0.0, 1.0)
    return final, composite
