"""Binary PGM/PPM frame IO and a minimal SVG line-plot writer."""
from __future__ import annotations

import os

import numpy as np


class ImageFormatError(ValueError):
    pass


def write_pgm(path, image: np.ndarray) -> None:
    """Grayscale (H, W) floats in [0, 1] as binary P5, maxval 255."""
    data = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as handle:
        handle.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        handle.write(data.tobytes())


def write_ppm(path, image: np.ndarray) -> None:
    """RGB (3, H, W) floats in [0, 1] as binary P6, maxval 255."""
    data = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    _, h, w = data.shape
    with open(path, "wb") as handle:
        handle.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        handle.write(data.transpose(1, 2, 0).tobytes())


def _read_header(handle):
    fields = []
    while len(fields) < 3:
        line = handle.readline()
        if not line:
            raise ImageFormatError("truncated netpbm header")
        text = line.split(b"#")[0].strip()
        if text:
            fields.extend(text.split())
    return int(fields[0]), int(fields[1]), int(fields[2])


def read_image(path) -> np.ndarray:
    """Read binary PGM (-> (H, W)) or PPM (-> (3, H, W)) as floats in [0, 1]."""
    with open(path, "rb") as handle:
        magic = handle.readline().strip()
        if magic not in (b"P5", b"P6"):
            raise ImageFormatError(f"{path}: unsupported magic {magic!r}")
        w, h, maxval = _read_header(handle)
        channels = 1 if magic == b"P5" else 3
        raw = handle.read(w * h * channels)
    if len(raw) != w * h * channels:
        raise ImageFormatError(f"{path}: truncated pixel data")
    data = np.frombuffer(raw, dtype=np.uint8).astype(np.float64) / maxval
    if channels == 1:
        return data.reshape(h, w)
    return data.reshape(h, w, 3).transpose(2, 0, 1)


def write_frames(directory, frames) -> list:
    """Write a frame sequence as %06d.ppm (RGB) or %06d.pgm (grayscale)."""
    os.makedirs(directory, exist_ok=True)
    paths = []
    for index, frame in enumerate(frames):
        frame = np.asarray(frame)
        if frame.ndim == 3:
            path = os.path.join(directory, f"{index:06d}.ppm")
            write_ppm(path, frame)
        else:
            path = os.path.join(directory, f"{index:06d}.pgm")
            write_pgm(path, frame)
        paths.append(path)
    return paths


def read_frames(directory) -> list:
    names = sorted(
        n for n in os.listdir(directory) if n.endswith((".pgm", ".ppm"))
    )
    if not names:
        raise ImageFormatError(f"no frames found in {directory}")
    return [read_image(os.path.join(directory, n)) for n in names]


SVG_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd")


def write_svg_lines(path, series: dict, title: str = "", width: int = 640,
                    height: int = 320) -> None:
    """Plot each named series as a polyline, normalized to its own range."""
    pad = 40
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{pad}" y="20" font-size="14">{title}</text>',
        f'<rect x="{pad}" y="{pad}" width="{width - 2 * pad}" '
        f'height="{height - 2 * pad}" fill="none" stroke="#999"/>',
    ]
    for idx, (name, values) in enumerate(series.items()):
        values = list(values)
        color = SVG_COLORS[idx % len(SVG_COLORS)]
        lo, hi = min(values), max(values)
        span = hi - lo if hi > lo else 1.0
        points = []
        for i, v in enumerate(values):
            x = pad + (width - 2 * pad) * (i / max(1, len(values) - 1))
            y = height - pad - (height - 2 * pad) * ((v - lo) / span)
            points.append(f"{x:.2f},{y:.2f}")
        parts.append(
            f'<polyline fill="none" stroke="{color}" stroke-width="1.5" '
            f'points="{" ".join(points)}"/>'
        )
        parts.append(
            f'<text x="{pad + 6}" y="{pad + 16 + 16 * idx}" font-size="12" '
            f'fill="{color}">{name} [{lo:.4g}, {hi:.4g}]</text>'
        )
    parts.append("</svg>")
    with open(path, "w", encoding="ascii") as handle:
        handle.write("\n".join(parts))
