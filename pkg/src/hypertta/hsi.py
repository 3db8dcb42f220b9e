"""Hyperspectral cube and label data model, normalization, patches and splits."""

from __future__ import annotations

import hashlib
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .rng import Stream


class ConfigError(ValueError):
    """Invalid configuration (maps to CLI exit code 2)."""


class DataError(ValueError):
    """Malformed or inconsistent data (maps to CLI exit code 3)."""


class NumericError(ArithmeticError):
    """Non-finite or otherwise failed numerics (maps to CLI exit code 4)."""


@dataclass
class HsiCube:
    """Dense H x W x C cube stored band-sequential as a ``(C, H, W)`` array."""

    data: np.ndarray
    wavelengths_nm: np.ndarray | None = None
    normalized: bool = False
    warnings: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise DataError(f"cube data must be (bands, height, width), got shape {self.data.shape}")
        if self.wavelengths_nm is not None:
            wl = np.asarray(self.wavelengths_nm, dtype=np.float64)
            if wl.shape != (self.bands,):
                raise DataError(f"expected {self.bands} wavelengths, got {wl.size}")
            if np.any(wl <= 0):
                raise DataError("wavelengths must be strictly positive")
            self.wavelengths_nm = wl
        if self.normalized and self.data.size and (self.data.min() < 0 or self.data.max() > 1):
            raise DataError("cube flagged normalized has values outside [0, 1]")

    @property
    def bands(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.height, self.width, self.bands

    def digest(self) -> str:
        payload = np.ascontiguousarray(self.data, dtype="<f4").tobytes()
        return "sha256:" + hashlib.sha256(payload).hexdigest()

    def with_data(self, data: np.ndarray, normalized: bool | None = None) -> HsiCube:
        return HsiCube(
            data,
            self.wavelengths_nm,
            self.normalized if normalized is None else normalized,
        )


@dataclass
class LabelMap:
    labels: np.ndarray
    class_names: list[str]

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if self.labels.ndim != 2:
            raise DataError("label map must be 2-D")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() > len(self.class_names)):
            raise DataError(f"labels must lie in 0..{len(self.class_names)}")
        self.labels = self.labels.astype(np.int64)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    def check_matches(self, cube: HsiCube) -> None:
        if (self.height, self.width) != (cube.height, cube.width):
            raise DataError(
                f"label map {self.height}x{self.width} does not match cube {cube.height}x{cube.width}"
            )


TRAIN = 1
TARGET = 2


@dataclass
class SplitSpec:
    """Per-pixel assignment: 0 unlabeled, 1 train (source side), 2 target."""

    train_fraction: float
    seed: int
    assignment: np.ndarray

    def train_pixels(self) -> np.ndarray:
        return np.flatnonzero(self.assignment.ravel() == TRAIN)

    def target_pixels(self) -> np.ndarray:
        return np.flatnonzero(self.assignment.ravel() == TARGET)


@dataclass
class Patch:
    center: tuple[int, int]
    size: int
    values: np.ndarray  # (C, w, w)


def normalize_bands(cube: HsiCube) -> tuple[HsiCube, np.ndarray]:
    """Min-max scale every band to [0, 1].

    Returns the normalized cube and a ``(C, 2)`` array of per-band (min, max)
    for inverse mapping. Constant bands become all zeros and a warning is
    recorded on the returned cube.
    """
    data = cube.data.astype(np.float64)
    flat = data.reshape(cube.bands, -1)
    lo = flat.min(axis=1)
    hi = flat.max(axis=1)
    span = hi - lo
    out = np.zeros_like(data)
    notes = []
    for c in range(cube.bands):
        if span[c] > 0:
            out[c] = (data[c] - lo[c]) / span[c]
        else:
            notes.append(f"band {c} is constant ({lo[c]!r}); mapped to zeros")
    for msg in notes:
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
    # endpoints can drift past [0,1] by an ulp
    np.clip(out, 0.0, 1.0, out=out)
    result = HsiCube(out, cube.wavelengths_nm, normalized=True)
    result.warnings.extend(notes)
    return result, np.stack([lo, hi], axis=1)


def denormalize_bands(cube: HsiCube, ranges: np.ndarray) -> HsiCube:
    lo, hi = ranges[:, 0], ranges[:, 1]
    data = cube.data * (hi - lo)[:, None, None] + lo[:, None, None]
    return HsiCube(data, cube.wavelengths_nm, normalized=False)


def _check_patch_args(height: int, width: int, w: int):
    if w < 1 or w % 2 == 0:
        raise ValueError(f"patch size must be odd and positive, got {w}")
    if w > 2 * min(height, width) - 1:
        raise ValueError(f"patch size {w} too large for a {height}x{width} image")


def extract_patch(cube: HsiCube, center: tuple[int, int], w: int) -> Patch:
    row, col = center
    _check_patch_args(cube.height, cube.width, w)
    if not (0 <= row < cube.height and 0 <= col < cube.width):
        raise ValueError(f"center {center} outside {cube.height}x{cube.width} image")
    r = w // 2
    rows = reflect_index(np.arange(row - r, row + r + 1), cube.height)
    cols = reflect_index(np.arange(col - r, col + r + 1), cube.width)
    values = cube.data[:, rows[:, None], cols[None, :]]
    return Patch((row, col), w, values)


def reflect_index(idx: np.ndarray, n: int) -> np.ndarray:
    """Mirror indices into [0, n) without repeating the edge sample."""
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * (n - 1)
    idx = np.mod(idx, period)
    return np.where(idx >= n, period - idx, idx)


def extract_patches(cube: HsiCube, pixels: np.ndarray, w: int, dtype=np.float64) -> np.ndarray:
    """Batch of patches ``(N, C, w, w)`` centred on flat pixel indices."""
    _check_patch_args(cube.height, cube.width, w)
    r = w // 2
    padded = np.pad(cube.data.astype(dtype, copy=False), ((0, 0), (r, r), (r, r)), mode="reflect")
    rows, cols = np.divmod(np.asarray(pixels, dtype=np.int64), cube.width)
    offs = np.arange(w)
    ri = rows[:, None, None] + offs[None, :, None]
    ci = cols[:, None, None] + offs[None, None, :]
    # (C, N, w, w) -> (N, C, w, w)
    return np.ascontiguousarray(padded[:, ri, ci].transpose(1, 0, 2, 3))


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def stratified_split(labels: LabelMap, train_fraction: float, seed: int) -> SplitSpec:
    if not 0 < train_fraction < 1:
        raise ConfigError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    flat = labels.labels.ravel()
    assignment = np.zeros(flat.shape, dtype=np.uint8)
    for k in range(1, labels.num_classes + 1):
        members = np.flatnonzero(flat == k)
        if members.size == 0:
            raise ConfigError(f"class {k} ({labels.class_names[k - 1]}) has no labeled pixels")
        n_train = min(max(1, _round_half_up(train_fraction * members.size)), members.size)
        order = Stream(seed, "split", k).permutation(members.size)
        shuffled = members[order]
        assignment[shuffled[:n_train]] = TRAIN
        assignment[shuffled[n_train:]] = TARGET
    return SplitSpec(train_fraction, seed, assignment.reshape(labels.labels.shape))


class PatchSource:
    """Lazily extracted patches around a fixed list of pixels.

    Pads the cube once; indexing with an int array (or slice) returns a
    ``(n, C, w, w)`` float64 batch.
    """

    def __init__(self, cube: HsiCube, pixels: np.ndarray, w: int):
        _check_patch_args(cube.height, cube.width, w)
        self.pixels = np.asarray(pixels, dtype=np.int64)
        self.w = w
        r = w // 2
        self._padded = np.pad(cube.data.astype(np.float64), ((0, 0), (r, r), (r, r)), mode="reflect")
        self._rows, self._cols = np.divmod(self.pixels, cube.width)

    def __len__(self) -> int:
        return self.pixels.size

    def __getitem__(self, index) -> np.ndarray:
        rows, cols = self._rows[index], self._cols[index]
        offs = np.arange(self.w)
        ri = np.atleast_1d(rows)[:, None, None] + offs[None, :, None]
        ci = np.atleast_1d(cols)[:, None, None] + offs[None, None, :]
        return np.ascontiguousarray(self._padded[:, ri, ci].transpose(1, 0, 2, 3))

    def batches(self, batch_size: int, order: np.ndarray | None = None):
        order = np.arange(len(self)) if order is None else order
        for start in range(0, len(order), batch_size):
            yield self[order[start : start + batch_size]]
