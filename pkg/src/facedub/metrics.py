"""Image quality and lip-sync evaluation metrics.

PSNR/SSIM/MSE follow the standard definitions (11x11 Gaussian window,
sigma 1.5, K1=0.01, K2=0.03, valid-region aggregation). The sync error
metrics score embedding distances over a +/-15 frame offset sweep with a
pluggable embedder, so a pretrained sync backend can be dropped in.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .image_io import write_svg_lines
from .tensor import ContractViolation

PSNR_CAP = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
K1 = 0.01
K2 = 0.03
LSE_OFFSET_RANGE = 15
VISUAL_WINDOW = 5


def mse(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ContractViolation(f"mse: shapes differ, {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def psnr(a: np.ndarray, b: np.ndarray, dynamic_range: float = 1.0) -> float:
    """10*log10(L^2/MSE), capped at 100 dB for (near-)identical images."""
    err = mse(a, b)
    if err < 1e-10:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(dynamic_range**2 / err))


def _gaussian_window() -> np.ndarray:
    coords = np.arange(SSIM_WINDOW) - SSIM_WINDOW // 2
    g = np.exp(-0.5 * (coords / SSIM_SIGMA) ** 2)
    kernel = np.outer(g, g)
    return kernel / kernel.sum()


def _ssim_single(a: np.ndarray, b: np.ndarray, dynamic_range: float) -> float:
    h, w = a.shape
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ContractViolation(
            f"ssim: image {a.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )
    kernel = _gaussian_window()
    c1 = (K1 * dynamic_range) ** 2
    c2 = (K2 * dynamic_range) ** 2
    wa = sliding_window_view(a, (SSIM_WINDOW, SSIM_WINDOW))
    wb = sliding_window_view(b, (SSIM_WINDOW, SSIM_WINDOW))
    mu_a = np.tensordot(wa, kernel, axes=([2, 3], [0, 1]))
    mu_b = np.tensordot(wb, kernel, axes=([2, 3], [0, 1]))
    e_aa = np.tensordot(wa * wa, kernel, axes=([2, 3], [0, 1]))
    e_bb = np.tensordot(wb * wb, kernel, axes=([2, 3], [0, 1]))
    e_ab = np.tensordot(wa * wb, kernel, axes=([2, 3], [0, 1]))
    var_a = e_aa - mu_a**2
    var_b = e_bb - mu_b**2
    cov = e_ab - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def ssim(a: np.ndarray, b: np.ndarray, dynamic_range: float = 1.0) -> float:
    """Mean local SSIM; multichannel images average per-channel scores."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractViolation(f"ssim: shapes differ, {a.shape} vs {b.shape}")
    if a.ndim == 2:
        return _ssim_single(a, b, dynamic_range)
    if a.ndim == 3:
        return float(np.mean([_ssim_single(a[c], b[c], dynamic_range) for c in range(a.shape[0])]))
    raise ContractViolation(f"ssim: expected 2-D or 3-D images, got {a.shape}")


def psnr_ssim_mse(a: np.ndarray, b: np.ndarray, dynamic_range: float = 1.0):
    return (
        psnr(a, b, dynamic_range),
        ssim(a, b, dynamic_range),
        mse(a, b),
    )


def lse(frames, mels, embedder) -> tuple[float, float]:
    """Lip-sync error distance and confidence over an offset sweep.

    For each 5-frame visual window t, d(t, k) = ||v_t - a_{t+k}|| for
    k in [-15, 15]; distance is the mean d(t, 0), confidence the mean of
    (median over k) - (min over k). The embedder must map a 5-frame window
    and a mel window to common unit-norm vectors.
    """
    n_frames = len(frames)
    n_mels = len(mels)
    t_lo = LSE_OFFSET_RANGE
    t_hi = min(n_frames - VISUAL_WINDOW, n_mels - 1 - LSE_OFFSET_RANGE)
    if t_hi < t_lo:
        raise ContractViolation(
            f"lse: sequence too short ({n_frames} frames, {n_mels} windows) for "
            f"a {VISUAL_WINDOW}-frame window and +/-{LSE_OFFSET_RANGE} offsets"
        )
    audio_embeds = {}
    distances = []
    confidences = []
    for t in range(t_lo, t_hi + 1):
        v = np.asarray(embedder.embed_frames(frames[t : t + VISUAL_WINDOW]))
        row = []
        for k in range(-LSE_OFFSET_RANGE, LSE_OFFSET_RANGE + 1):
            j = t + k
            if j not in audio_embeds:
                audio_embeds[j] = np.asarray(embedder.embed_mel(mels[j]))
            row.append(float(np.linalg.norm(v - audio_embeds[j])))
        row = np.array(row)
        distances.append(row[LSE_OFFSET_RANGE])
        confidences.append(float(np.median(row) - row.min()))
    return float(np.mean(distances)), float(np.mean(confidences))


class RandomSyncEmbedder:
    """Deterministic random-projection embedder; a stand-in sync backend.

    Projects flattened 5-frame stacks and mel windows to unit vectors with
    fixed seeded matrices. Useful for exercising the metric plumbing; scores
    are only meaningful relative to the same embedder.
    """

    def __init__(self, frame_shape: tuple, dim: int = 64, seed: int = 0):
        rng = np.random.default_rng(seed)
        visual_in = VISUAL_WINDOW * int(np.prod(frame_shape))
        self._visual = rng.normal(0, 1.0 / np.sqrt(visual_in), size=(dim, visual_in))
        self._audio = rng.normal(0, 1.0 / np.sqrt(16 * 80), size=(dim, 16 * 80))

    @staticmethod
    def _unit(v: np.ndarray) -> np.ndarray:
        return v / (np.linalg.norm(v) + 1e-12)

    def embed_frames(self, frames) -> np.ndarray:
        flat = np.concatenate([np.asarray(f).reshape(-1) for f in frames])
        return self._unit(self._visual @ flat)

    def embed_mel(self, mel) -> np.ndarray:
        return self._unit(self._audio @ np.asarray(mel).reshape(-1))


@dataclass
class MetricReport:
    frame_count: int
    psnr_per_frame: list = field(default_factory=list)
    ssim_per_frame: list = field(default_factory=list)
    mse_per_frame: list = field(default_factory=list)
    psnr_mean: float = 0.0
    ssim_mean: float = 0.0
    mse_mean: float = 0.0
    lse_d: Optional[float] = None
    lse_c: Optional[float] = None


def report(generated, reference, mels=None, embedder=None,
           csv_path=None, svg_path=None, dynamic_range: float = 1.0) -> MetricReport:
    """Per-frame PSNR/SSIM/MSE plus optional sync scores; CSV/SVG emission.

    Frames are paired by index; the CSV holds one row per frame under a
    header, and the SVG plots the per-frame PSNR and SSIM traces.
    """
    if len(generated) != len(reference):
        raise ContractViolation(
            f"report: frame counts differ, {len(generated)} vs {len(reference)}"
        )
    if not generated:
        raise ContractViolation("report: no frames")
    out = MetricReport(frame_count=len(generated))
    for gen, ref in zip(generated, reference):
        p, s, m = psnr_ssim_mse(np.asarray(gen), np.asarray(ref), dynamic_range)
        out.psnr_per_frame.append(p)
        out.ssim_per_frame.append(s)
        out.mse_per_frame.append(m)
    out.psnr_mean = float(np.mean(out.psnr_per_frame))
    out.ssim_mean = float(np.mean(out.ssim_per_frame))
    out.mse_mean = float(np.mean(out.mse_per_frame))
    if mels is not None and embedder is not None:
        out.lse_d, out.lse_c = lse(generated, mels, embedder)
    if csv_path is not None:
        with open(csv_path, "w", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(["frame", "psnr", "ssim", "mse"])
            for i in range(out.frame_count):
                writer.writerow(
                    [i, f"{out.psnr_per_frame[i]:.6f}", f"{out.ssim_per_frame[i]:.6f}",
                     f"{out.mse_per_frame[i]:.8f}"]
                )
    if svg_path is not None:
        write_svg_lines(
            svg_path,
            {"psnr_db": out.psnr_per_frame, "ssim": out.ssim_per_frame},
            title="per-frame quality",
        )
    return out


def lpips(a, b, extractor) -> float:
    """Perceptual distance over a pluggable feature extractor.

    Mean squared distance between channel-normalized stage features. With
    the built-in random extractor this is a proxy; plug a pretrained
    backend for comparable scores.
    """
    from .tensor import Tensor

    if extractor is None:
        raise ContractViolation("lpips: a feature extractor backend is required")
    total = 0.0
    stages_a = extractor(Tensor(np.asarray(a)))
    stages_b = extractor(Tensor(np.asarray(b)))
    for fa, fb in zip(stages_a, stages_b):
        da, db = fa.data, fb.data
        norm_a = da / (np.linalg.norm(da, axis=0, keepdims=True) + 1e-10)
        norm_b = db / (np.linalg.norm(db, axis=0, keepdims=True) + 1e-10)
        total += float(np.mean((norm_a - norm_b) ** 2))
    return total / len(stages_a)


def fid(set_a, set_b, extractor) -> float:
    """Frechet distance between pooled-feature Gaussians of two frame sets.

    Needs a pretrained backend for scores comparable to published numbers.
    """
    from .tensor import Tensor

    if extractor is None:
        raise ContractViolation("fid: a feature extractor backend is required")

    def pooled(frames):
        rows = []
        for frame in frames:
            stages = extractor(Tensor(np.asarray(frame)))
            rows.append(np.concatenate([s.data.mean(axis=(1, 2)) for s in stages]))
        return np.array(rows)

    fa, fb = pooled(set_a), pooled(set_b)
    mu_a, mu_b = fa.mean(axis=0), fb.mean(axis=0)
    cov_a = np.cov(fa, rowvar=False)
    cov_b = np.cov(fb, rowvar=False)
    diff = mu_a - mu_b
    # sqrtm via symmetric eigendecomposition of cov_a^1/2 cov_b cov_a^1/2
    vals_a, vecs_a = np.linalg.eigh(cov_a)
    sqrt_a = vecs_a @ np.diag(np.sqrt(np.clip(vals_a, 0, None))) @ vecs_a.T
    inner = sqrt_a @ cov_b @ sqrt_a
    vals = np.linalg.eigvalsh((inner + inner.T) / 2)
    trace_sqrt = np.sqrt(np.clip(vals, 0, None)).sum()
    return float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * trace_sqrt)
