"""Mono PCM ingestion and per-video-frame log-mel feature windows.

Featurization constants: 16 kHz audio, 800-sample Hann window, hop 200,
80 triangular mel filters spanning 55-7600 Hz, log10 with floor 1e-5.
At 25 fps one video frame spans 3.2 mel hops, and a 16-frame window is
centered on each video frame's timestamp.
"""
from __future__ import annotations

import math
import struct
import wave
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ContractViolation

SAMPLE_RATE = 16000
WIN_LENGTH = 800
HOP_LENGTH = 200
N_MELS = 80
FMIN = 55.0
FMAX = 7600.0
LOG_FLOOR = 1e-5
WINDOW_FRAMES = 16
FPS = 25

MEL_MAGIC = b"G4GMEL1"


class IngestionError(ValueError):
    """Raised when an input audio file cannot be decoded."""


@dataclass
class AudioClip:
    samples: np.ndarray  # float64 in [-1, 1]
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if not np.all(np.isfinite(self.samples)):
            raise IngestionError("audio samples contain non-finite values")


def load_wav(path) -> AudioClip:
    """Load a 16-bit PCM WAV; stereo is averaged, output resampled to 16 kHz."""
    try:
        with wave.open(str(path), "rb") as handle:
            channels = handle.getnchannels()
            width = handle.getsampwidth()
            rate = handle.getframerate()
            raw = handle.readframes(handle.getnframes())
    except (wave.Error, EOFError) as exc:
        raise IngestionError(f"malformed WAV file {path}: {exc}") from exc
    if width != 2:
        raise IngestionError(f"unsupported bit depth in {path}: {8 * width}-bit (need 16-bit PCM)")
    if channels not in (1, 2):
        raise IngestionError(f"unsupported channel count in {path}: {channels}")
    data = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    if channels == 2:
        data = data.reshape(-1, 2).mean(axis=1)
    if rate != SAMPLE_RATE:
        data = _resample_linear(data, rate, SAMPLE_RATE)
    return AudioClip(data, SAMPLE_RATE)


def write_wav(path, samples: np.ndarray, sample_rate: int = SAMPLE_RATE) -> None:
    """Write mono float samples in [-1, 1] as 16-bit PCM."""
    quantized = np.clip(np.round(np.asarray(samples) * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as handle:
        handle.setnchannels(1)
        handle.setsampwidth(2)
        handle.setframerate(sample_rate)
        handle.writeframes(quantized.tobytes())


def _resample_linear(samples: np.ndarray, src_rate: int, dst_rate: int) -> np.ndarray:
    n_out = int(round(len(samples) * dst_rate / src_rate))
    positions = np.arange(n_out) * (src_rate / dst_rate)
    return np.interp(positions, np.arange(len(samples)), samples)


def hann_window(length: int = WIN_LENGTH) -> np.ndarray:
    # periodic variant, the usual STFT analysis window
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(length) / length)


def mel_filterbank(
    n_mels: int = N_MELS,
    n_fft: int = WIN_LENGTH,
    sample_rate: int = SAMPLE_RATE,
    fmin: float = FMIN,
    fmax: float = FMAX,
) -> np.ndarray:
    """Triangular (peak 1) filters on the HTK mel scale, shape (n_mels, n_fft//2+1)."""

    def to_mel(f):
        return 2595.0 * np.log10(1.0 + f / 700.0)

    def from_mel(m):
        return 700.0 * (10.0 ** (m / 2595.0) - 1.0)

    points = from_mel(np.linspace(to_mel(fmin), to_mel(fmax), n_mels + 2))
    bin_freqs = np.arange(n_fft // 2 + 1) * (sample_rate / n_fft)
    bank = np.zeros((n_mels, len(bin_freqs)))
    for b in range(n_mels):
        lo, mid, hi = points[b], points[b + 1], points[b + 2]
        rising = (bin_freqs - lo) / (mid - lo)
        falling = (hi - bin_freqs) / (hi - mid)
        bank[b] = np.clip(np.minimum(rising, falling), 0.0, None)
    return bank


def mel_spectrogram(clip: AudioClip) -> np.ndarray:
    """Log-mel matrix of shape (ceil(len/hop), 80).

    Reflection-padded, centered STFT with power spectra through the mel
    bank, then log10 floored at 1e-5 so silence maps to exactly -5.
    """
    if clip.sample_rate != SAMPLE_RATE:
        raise ContractViolation(
            f"mel_spectrogram: clip must be at {SAMPLE_RATE} Hz, got {clip.sample_rate}"
        )
    n = len(clip.samples)
    half = WIN_LENGTH // 2
    if n < half + 1:
        raise IngestionError(
            f"clip too short for one centered window: {n} samples (need > {half})"
        )
    n_frames = math.ceil(n / HOP_LENGTH)
    padded = np.pad(clip.samples, half, mode="reflect")
    frames = sliding_window_view(padded, WIN_LENGTH)[:: HOP_LENGTH][:n_frames]
    spectra = np.abs(np.fft.rfft(frames * hann_window(), n=WIN_LENGTH, axis=1)) ** 2
    energies = spectra @ mel_filterbank().T
    return np.log10(np.maximum(energies, LOG_FLOOR))


def max_frame_index(n_mel_frames: int, fps: int = FPS) -> int:
    """Largest video frame index whose timestamp falls inside the mel matrix."""
    step = SAMPLE_RATE / (HOP_LENGTH * fps)
    idx = int((n_mel_frames - 1) / step)
    while int(round((idx + 1) * step)) <= n_mel_frames - 1:
        idx += 1
    return idx


def window_for_frame(mel: np.ndarray, frame_index: int, fps: int = FPS) -> np.ndarray:
    """Sixteen consecutive mel frames centered on a video frame's timestamp.

    Video frame t maps to mel frame round(t * sr / (hop * fps)); the window
    is clamped to stay inside the matrix near clip edges.
    """
    n = mel.shape[0]
    if n < WINDOW_FRAMES:
        raise ContractViolation(
            f"window_for_frame: need at least {WINDOW_FRAMES} mel frames, got {n}"
        )
    limit = max_frame_index(n, fps)
    if frame_index < 0 or frame_index > limit:
        raise ContractViolation(
            f"window_for_frame: frame {frame_index} outside valid range [0, {limit}]"
        )
    center = int(round(frame_index * SAMPLE_RATE / (HOP_LENGTH * fps)))
    start = min(max(center - WINDOW_FRAMES // 2, 0), n - WINDOW_FRAMES)
    return mel[start : start + WINDOW_FRAMES]


def validate_mel_window(window: np.ndarray) -> np.ndarray:
    window = np.asarray(window, dtype=np.float64)
    if window.shape != (WINDOW_FRAMES, N_MELS):
        raise ContractViolation(
            f"mel window must be {WINDOW_FRAMES}x{N_MELS}, got {window.shape}"
        )
    if not np.all(np.isfinite(window)):
        raise ContractViolation("mel window contains non-finite values")
    return window


def write_mel(path, mel: np.ndarray) -> None:
    """Binary mel matrix: magic, two uint32 LE extents, row-major float32."""
    mel = np.asarray(mel)
    with open(path, "wb") as handle:
        handle.write(MEL_MAGIC)
        handle.write(struct.pack("<II", mel.shape[0], mel.shape[1]))
        handle.write(mel.astype("<f4").tobytes())


def read_mel(path) -> np.ndarray:
    with open(path, "rb") as handle:
        magic = handle.read(len(MEL_MAGIC))
        if magic != MEL_MAGIC:
            raise IngestionError(f"{path}: bad mel file magic {magic!r}")
        rows, cols = struct.unpack("<II", handle.read(8))
        data = np.frombuffer(handle.read(rows * cols * 4), dtype="<f4")
        if data.size != rows * cols:
            raise IngestionError(f"{path}: truncated mel file")
    return data.reshape(rows, cols).astype(np.float64)


def write_mel_text(path, mel: np.ndarray) -> None:
    np.savetxt(path, np.asarray(mel), fmt="%.6f")
