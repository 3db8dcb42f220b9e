from __future__ import annotations

from pathlib import Path

import numpy as np

from ..hsi import ConfigError, HsiCube


def false_color(cube: HsiCube, bands: tuple[int, int, int]) -> np.ndarray:
    """(H, W, 3) uint8 composite, each chosen band min-max scaled independently."""
    if len(bands) != 3:
        raise ConfigError("preview needs exactly three bands")
    for b in bands:
        if not 0 <= b < cube.bands:
            raise ConfigError(f"band index {b} out of range for {cube.bands} bands")
    planes = []
    for b in bands:
        x = np.asarray(cube.data[b], dtype=np.float64)
        lo, hi = x.min(), x.max()
        scaled = (x - lo) / (hi - lo) if hi > lo else np.zeros_like(x)
        planes.append(np.round(scaled * 255.0).astype(np.uint8))
    return np.stack(planes, axis=-1)


def export_preview(cube: HsiCube, bands: tuple[int, int, int], path) -> Path:
    """Write a binary PPM (P6) false-color preview."""
    rgb = false_color(cube, bands)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = f"P6\n{cube.width} {cube.height}\n255\n".encode("ascii")
    path.write_bytes(header + rgb.tobytes())
    return path


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P6":
        raise ValueError("not a binary PPM")
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w, 3)
