"""Procedural talking-face scenes with audio-driven mouth motion.

Stands in for real video data: an ellipse head with eyes and a mouth whose
opening follows the per-frame audio RMS, a 68-point landmark set on the
procedural geometry, and tone audio with a randomized amplitude envelope.
Everything is a deterministic function of (seed, audio).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .audio import AudioClip, mel_spectrogram, window_for_frame
from .config import PipelineConfig
from .tensor import ContractViolation

SAMPLES_PER_FRAME = 640  # 16 kHz / 25 fps
MOUTH_RMS_SCALE = 0.25   # rms mapping to a fully open mouth
MIN_SAMPLE_GAP = 5       # video frames between dataset samples
MAX_SAMPLE_GAP = 20

SKIN = np.array([0.85, 0.70, 0.62])
LIP = np.array([0.55, 0.25, 0.27])
MOUTH_DARK = np.array([0.13, 0.05, 0.08])
EYE = np.array([0.12, 0.12, 0.16])
NOSE = np.array([0.70, 0.52, 0.45])
BG_TOP = np.array([0.18, 0.22, 0.30])
BG_BOTTOM = np.array([0.30, 0.34, 0.45])


@dataclass
class SceneSample:
    source_frame: np.ndarray    # (3, H, W), mouth dubbed from another timestep
    truth_frame: np.ndarray     # (3, H, W)
    masked_source: np.ndarray   # (3, H, W), rows >= H/2 zeroed
    references: np.ndarray      # (15, H, W), five stacked RGB frames
    landmark_map: np.ndarray    # (1, H, W), sparse 0/1 heatmap
    mel: np.ndarray             # (16, 80)
    frame_index: int


class SyntheticDataset:
    """Sequence of SceneSamples plus the full rendered clip behind them."""

    def __init__(self, samples, frames, audio_samples, mel_matrix, mouth_open):
        self.samples = samples
        self.frames = frames            # every video frame of the clip
        self.audio = audio_samples
        self.mel_matrix = mel_matrix
        self.mouth_open = mouth_open    # per video frame

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, index):
        return self.samples[index]

    def content_hash(self) -> str:
        import hashlib

        digest = hashlib.sha256()
        digest.update(self.audio.tobytes())
        for sample in self.samples:
            for arr in (sample.source_frame, sample.truth_frame, sample.masked_source,
                        sample.references, sample.landmark_map, sample.mel):
                digest.update(arr.tobytes())
            digest.update(np.int64(sample.frame_index).tobytes())
        return digest.hexdigest()


def _ellipse_mask(h, w, cy, cx, ry, rx):
    yy, xx = np.mgrid[0:h, 0:w]
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def _paint(frame, mask, color):
    frame[:, mask] = color[:, None]


def mouth_geometry(h, w, mouth_open):
    cy, cx = 0.72 * h, 0.50 * w
    half_w = 0.12 * w
    lip_h = max(1.0, 0.025 * h)
    open_h = mouth_open * 0.10 * h
    return cy, cx, half_w, lip_h, open_h


def render_frame(h: int, w: int, mouth_open: float) -> np.ndarray:
    """One RGB frame of the procedural face; mouth_open in [0, 1]."""
    if not 0.0 <= mouth_open <= 1.0:
        raise ContractViolation(f"mouth_open must be in [0, 1], got {mouth_open}")
    rows = np.linspace(0.0, 1.0, h)[None, :, None]
    frame = (BG_TOP[:, None, None] * (1 - rows) + BG_BOTTOM[:, None, None] * rows)
    frame = np.broadcast_to(frame, (3, h, w)).copy()

    _paint(frame, _ellipse_mask(h, w, 0.52 * h, 0.50 * w, 0.40 * h, 0.33 * w), SKIN)
    for cx in (0.37 * w, 0.63 * w):
        _paint(frame, _ellipse_mask(h, w, 0.40 * h, cx, 0.035 * h, 0.05 * w), EYE)
    _paint(frame, _ellipse_mask(h, w, 0.57 * h, 0.50 * w, 0.035 * h, 0.03 * w), NOSE)

    cy, cx, half_w, lip_h, open_h = mouth_geometry(h, w, mouth_open)
    _paint(frame, _ellipse_mask(h, w, cy, cx, open_h / 2 + lip_h, half_w), LIP)
    if open_h >= 1.0:
        _paint(frame, _ellipse_mask(h, w, cy, cx, open_h / 2, half_w * 0.8), MOUTH_DARK)
    return frame


def landmarks_68(h: int, w: int, mouth_open: float) -> np.ndarray:
    """68 (row, col) points on the procedural geometry; the 8 inner-mouth
    points track the opening so the heatmap carries the aperture."""
    pts = []
    cy, cx, ry, rx = 0.52 * h, 0.50 * w, 0.40 * h, 0.33 * w
    for angle in np.linspace(0.15 * np.pi, 0.85 * np.pi, 17):  # jaw
        pts.append((cy + ry * np.sin(angle), cx - rx * np.cos(angle)))
    for side in (-1, 1):  # brows, 5 each
        for k in np.linspace(-1.0, 1.0, 5):
            pts.append((0.33 * h, cx + side * (0.13 + 0.05 * (k + 1)) * w))
    for k in np.linspace(0.0, 1.0, 4):  # nose bridge
        pts.append((0.44 * h + k * 0.11 * h, cx))
    for k in np.linspace(-1.0, 1.0, 5):  # nose base
        pts.append((0.585 * h, cx + k * 0.04 * w))
    for side_cx in (0.37 * w, 0.63 * w):  # eyes, 6 each
        for angle in np.linspace(0.0, 2 * np.pi, 6, endpoint=False):
            pts.append((0.40 * h + 0.035 * h * np.sin(angle), side_cx + 0.05 * w * np.cos(angle)))
    mcy, mcx, half_w, lip_h, open_h = mouth_geometry(h, w, mouth_open)
    outer_ry = open_h / 2 + lip_h
    for angle in np.linspace(0.0, 2 * np.pi, 12, endpoint=False):  # outer lips
        pts.append((mcy + outer_ry * np.sin(angle), mcx + half_w * np.cos(angle)))
    for angle in np.linspace(0.0, 2 * np.pi, 8, endpoint=False):  # inner lips
        pts.append((mcy + (open_h / 2) * np.sin(angle), mcx + 0.8 * half_w * np.cos(angle)))
    return np.array(pts)


def landmark_heatmap(h: int, w: int, points: np.ndarray) -> np.ndarray:
    heat = np.zeros((1, h, w))
    rows = np.clip(np.round(points[:, 0]).astype(int), 0, h - 1)
    cols = np.clip(np.round(points[:, 1]).astype(int), 0, w - 1)
    heat[0, rows, cols] = 1.0
    return heat


def synthesize_audio(rng: np.random.Generator, n_frames: int) -> np.ndarray:
    """Phase-continuous tone with per-frame random amplitude and pitch."""
    amps = rng.uniform(0.05, 0.30, size=n_frames)
    freqs = rng.uniform(200.0, 700.0, size=n_frames)
    phase_steps = np.repeat(2.0 * np.pi * freqs / 16000.0, SAMPLES_PER_FRAME)
    phase = np.cumsum(phase_steps)
    return np.repeat(amps, SAMPLES_PER_FRAME) * np.sin(phase)


def frame_rms(audio_samples: np.ndarray, n_frames: int) -> np.ndarray:
    chunks = audio_samples[: n_frames * SAMPLES_PER_FRAME].reshape(n_frames, SAMPLES_PER_FRAME)
    return np.sqrt((chunks**2).mean(axis=1))


def generate_dataset(config: PipelineConfig, n_samples: int, audio=None) -> SyntheticDataset:
    """Render a clip and package n_samples dubbing examples from it.

    Sample timesteps are spaced by 5..20 video frames, so within any batch
    the off-diagonal audio/visual pairings are unsynced by at least 5
    frames. The source frame carries the mouth of a different timestep.
    """
    if n_samples < config.batch:
        raise ContractViolation(
            f"generate_dataset: need at least batch={config.batch} samples, got {n_samples}"
        )
    h = w = config.image_size
    rng = np.random.default_rng(config.seed)

    start = int(rng.integers(2, 8))
    gaps = rng.integers(MIN_SAMPLE_GAP, MAX_SAMPLE_GAP + 1, size=n_samples - 1)
    timesteps = np.concatenate([[start], start + np.cumsum(gaps)]).astype(int)
    n_video = int(timesteps[-1]) + 3  # two trailing context frames

    if audio is None:
        audio_samples = synthesize_audio(rng, n_video)
    else:
        audio_samples = np.asarray(audio, dtype=np.float64)
        if len(audio_samples) < n_video * SAMPLES_PER_FRAME:
            raise ContractViolation(
                f"generate_dataset: audio covers {len(audio_samples) // SAMPLES_PER_FRAME} "
                f"frames, need {n_video}"
            )
    mouth_open = np.clip(frame_rms(audio_samples, n_video) / MOUTH_RMS_SCALE, 0.0, 1.0)
    frames = [render_frame(h, w, float(mouth_open[t])) for t in range(n_video)]
    mel_matrix = mel_spectrogram(AudioClip(audio_samples, 16000))

    mouth_rows = slice(int(0.62 * h), int(0.85 * h))
    mouth_cols = slice(int(0.30 * w), int(0.72 * w))
    all_indices = np.arange(n_video)

    samples = []
    for t in timesteps:
        t = int(t)
        candidates = all_indices[np.abs(all_indices - t) >= 3]
        dub_from = int(rng.choice(candidates))
        ref_indices = rng.choice(candidates, size=5, replace=False)

        source = frames[t].copy()
        source[:, mouth_rows, mouth_cols] = frames[dub_from][:, mouth_rows, mouth_cols]
        masked = source.copy()
        masked[:, h // 2 :, :] = 0.0
        references = np.concatenate([frames[int(r)] for r in ref_indices], axis=0)
        heat = landmark_heatmap(h, w, landmarks_68(h, w, float(mouth_open[t])))
        mel = window_for_frame(mel_matrix, t)
        samples.append(
            SceneSample(source, frames[t], masked, references, heat, mel, t)
        )
    return SyntheticDataset(samples, frames, audio_samples, mel_matrix, mouth_open)
