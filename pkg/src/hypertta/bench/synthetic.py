"""Synthetic hyperspectral scenes with Voronoi class regions."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from ..hsi import ConfigError, HsiCube, LabelMap, normalize_bands
from ..rng import Stream


@dataclass
class SyntheticSpec:
    height: int = 96
    width: int = 96
    bands: int = 32
    classes: int = 5
    regions: int = 24
    wavelength_range: tuple[float, float] = (430.0, 860.0)
    peak_width_nm: float = 60.0
    noise_scale: float = 0.08
    spectral_corr_bands: int = 4
    brightness_jitter: float = 0.1
    seed: int = 0

    def __post_init__(self):
        self.wavelength_range = tuple(float(v) for v in self.wavelength_range)
        if self.classes < 2:
            raise ConfigError("need at least two classes")
        if self.regions < self.classes:
            raise ConfigError(f"{self.regions} regions cannot host {self.classes} classes")
        if self.regions > self.height * self.width:
            raise ConfigError("more regions than pixels")
        lo, hi = self.wavelength_range
        if not 0 < lo < hi:
            raise ConfigError("wavelength range must be positive and increasing")

    def to_json(self) -> dict:
        doc = dataclasses.asdict(self)
        doc["wavelength_range"] = list(self.wavelength_range)
        return doc


def wavelengths(spec: SyntheticSpec) -> np.ndarray:
    lo, hi = spec.wavelength_range
    return np.linspace(lo, hi, spec.bands)


def class_means(spec: SyntheticSpec) -> np.ndarray:
    """(K, C) smooth reflectance-like curves, each with its own peak wavelength."""
    wl = wavelengths(spec)
    lo, hi = spec.wavelength_range
    s = Stream(spec.seed, "synthetic.means")
    jitter = s.uniform(spec.classes, -0.1, 0.1)
    base = s.uniform(spec.classes, 0.15, 0.3)
    peaks = lo + (hi - lo) * (np.arange(spec.classes) + 0.5 + jitter) / spec.classes
    curves = base[:, None] + 0.5 * np.exp(-0.5 * ((wl[None, :] - peaks[:, None]) / spec.peak_width_nm) ** 2)
    return curves


def voronoi_labels(spec: SyntheticSpec) -> np.ndarray:
    s = Stream(spec.seed, "synthetic.regions")
    n = spec.height * spec.width
    sites = s.choice(n, spec.regions)
    site_rows, site_cols = np.divmod(sites, spec.width)
    # the first K regions cover every class once; the rest are random
    region_class = np.concatenate(
        [np.arange(1, spec.classes + 1), s.integers(1, spec.classes + 1, spec.regions - spec.classes)]
    )
    rr, cc = np.mgrid[0 : spec.height, 0 : spec.width]
    d2 = (rr[..., None] - site_rows) ** 2 + (cc[..., None] - site_cols) ** 2
    nearest = d2.argmin(axis=-1)
    return region_class[nearest]


def gen_synthetic(spec: SyntheticSpec) -> tuple[HsiCube, LabelMap]:
    labels = voronoi_labels(spec)
    means = class_means(spec)
    n = spec.height * spec.width
    s = Stream(spec.seed, "synthetic.pixels")
    white = s.normal(n * spec.bands).reshape(n, spec.bands)
    k = spec.spectral_corr_bands
    if k > 1:
        kernel = np.ones(k) / np.sqrt(k)
        padded = np.pad(white, ((0, 0), (k - 1, 0)), mode="wrap")
        white = np.stack([padded[:, i : i + spec.bands] for i in range(k)]).sum(axis=0) * kernel[0]
    brightness = 1.0 + spec.brightness_jitter * s.normal(n)
    spectra = means[labels.ravel() - 1] * brightness[:, None] + spec.noise_scale * white
    data = spectra.T.reshape(spec.bands, spec.height, spec.width)
    cube, _ = normalize_bands(HsiCube(data, wavelengths(spec)))
    names = [f"class_{i}" for i in range(1, spec.classes + 1)]
    return cube, LabelMap(labels, names)


def nearest_mean_accuracy(cube: HsiCube, labels: LabelMap, train_pixels, test_pixels) -> float:
    """Sanity oracle: nearest class-mean spectrum classifier."""
    x = cube.data.reshape(cube.bands, -1).T
    y = labels.labels.ravel()
    means = np.stack([x[train_pixels][y[train_pixels] == k].mean(axis=0) for k in range(1, labels.num_classes + 1)])
    d = ((x[test_pixels][:, None, :] - means[None]) ** 2).sum(axis=-1)
    return float(np.mean(d.argmin(axis=1) + 1 == y[test_pixels]))
