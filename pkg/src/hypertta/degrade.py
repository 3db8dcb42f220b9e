"""Nine seeded degradation operators over normalized cubes.

Each ``apply_*`` takes a normalized :class:`HsiCube` and returns the degraded
cube and a :class:`DegradationRecord` holding every value that was sampled,
so a run can be audited or replayed from its JSON metadata alone.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .hsi import ConfigError, DataError, HsiCube
from .rng import Stream

KINDS = (
    "jpeg",
    "zero_mean_gaussian",
    "additive_gaussian",
    "poisson",
    "salt_pepper",
    "stripe",
    "deadline",
    "blur",
    "fog",
)

# Parameter names and defaults per kind (None = required).
PARAMS = {
    "jpeg": {"q": None},
    "zero_mean_gaussian": {"sigma": None},
    "additive_gaussian": {"sigma_max": None},
    "poisson": {"snr_db": None, "eps": 1e-6},
    "salt_pepper": {"p": None},
    "stripe": {"a": None, "b": None},
    "deadline": {"a": None, "b": None},
    "blur": {"k": None},
    "fog": {"omega": None},
}

FOG_GAMMA = 1.0
POISSON_NORMAL_CUTOFF = 30.0


class ContractError(DataError):
    """Operator precondition violated (e.g. input not normalized)."""


@dataclass(frozen=True)
class DegradationSpec:
    kind: str
    params: dict
    seed: int = 0

    def __post_init__(self):
        if self.kind not in PARAMS:
            raise ConfigError(f"unknown degradation type {self.kind!r}; expected one of {', '.join(KINDS)}")
        merged = {}
        for name, default in PARAMS[self.kind].items():
            if name in self.params:
                merged[name] = self.params[name]
            elif default is not None:
                merged[name] = default
            else:
                raise ConfigError(f"{self.kind} requires parameter {name!r}")
        extra = set(self.params) - set(merged)
        if extra:
            raise ConfigError(f"{self.kind} does not take {sorted(extra)}")
        object.__setattr__(self, "params", merged)
        _validate(self.kind, merged)

    def to_json(self) -> dict:
        return {"type": self.kind, "params": dict(self.params), "seed": self.seed}


def _validate(kind: str, p: dict) -> None:
    def need(cond, msg):
        if not cond:
            raise ConfigError(f"{kind}: {msg}")

    if kind == "jpeg":
        need(p["q"] >= 1, "q must be >= 1")
    elif kind == "zero_mean_gaussian":
        need(p["sigma"] > 0, "sigma must be > 0")
    elif kind == "additive_gaussian":
        need(p["sigma_max"] > 0, "sigma_max must be > 0")
    elif kind == "poisson":
        need(p["eps"] > 0, "eps must be > 0")
    elif kind == "salt_pepper":
        need(0 <= p["p"] <= 1, "p must lie in [0, 1]")
    elif kind in ("stripe", "deadline"):
        need(int(p["a"]) == p["a"] and int(p["b"]) == p["b"], "a, b must be integers")
        need(0 <= p["a"] < p["b"], "need 0 <= a < b")
    elif kind == "blur":
        need(int(p["k"]) == p["k"] and p["k"] >= 3 and p["k"] % 2 == 1, "k must be odd and >= 3")
    elif kind == "fog":
        need(0 < p["omega"] < 1, "omega must lie in (0, 1)")


@dataclass
class DegradationRecord:
    spec: DegradationSpec
    source_digest: str
    sampled: dict = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        doc = self.spec.to_json()
        doc["source_digest"] = self.source_digest
        doc["sampled"] = self.sampled
        if self.warnings:
            doc["warnings"] = list(self.warnings)
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> DegradationRecord:
        spec = DegradationSpec(doc["type"], doc["params"], int(doc["seed"]))
        return cls(spec, doc["source_digest"], doc.get("sampled", {}), doc.get("warnings", []))


def _require_normalized(cube: HsiCube) -> np.ndarray:
    if not cube.normalized:
        raise ContractError("degradation operators need a normalized cube (run normalize_bands first)")
    return cube.data.astype(np.float64)


def _finish(cube: HsiCube, data: np.ndarray, spec: DegradationSpec, sampled: dict, notes=()) -> tuple:
    for msg in notes:
        warnings.warn(msg, RuntimeWarning, stacklevel=3)
    record = DegradationRecord(spec, cube.digest(), sampled, list(notes))
    return HsiCube(data, cube.wavelengths_nm, normalized=True), record


# --- JPEG -------------------------------------------------------------------

LUMINANCE_TABLE = np.array(
    [
        [16, 11, 10, 16, 24, 40, 51, 61],
        [12, 12, 14, 19, 26, 58, 60, 55],
        [14, 13, 16, 24, 40, 57, 69, 56],
        [14, 17, 22, 29, 51, 87, 80, 62],
        [18, 22, 37, 56, 68, 109, 103, 77],
        [24, 35, 55, 64, 81, 104, 113, 92],
        [49, 64, 78, 87, 103, 121, 120, 101],
        [72, 92, 95, 98, 112, 100, 103, 99],
    ],
    dtype=np.float64,
)


def quant_table(q: float) -> np.ndarray:
    """Luminance table scaled by the IJG quality formula, entries clamped to [1, 255]."""
    if q >= 100:
        return np.ones((8, 8))
    scale = 5000.0 / q if q < 50 else 200.0 - 2.0 * q
    return np.clip(np.floor((LUMINANCE_TABLE * scale + 50.0) / 100.0), 1, 255)


def _dct_matrix(n: int = 8) -> np.ndarray:
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    m = np.cos(np.pi * (2 * i + 1) * k / (2 * n)) * math.sqrt(2.0 / n)
    m[0] /= math.sqrt(2.0)
    return m


_DCT8 = _dct_matrix()


def _jpeg_band(band: np.ndarray, table: np.ndarray) -> np.ndarray:
    h, w = band.shape
    levels = np.round(band * 255.0) - 128.0
    ph, pw = (-h) % 8, (-w) % 8
    x = np.pad(levels, ((0, ph), (0, pw)), mode="edge")
    blocks = x.reshape(x.shape[0] // 8, 8, x.shape[1] // 8, 8).transpose(0, 2, 1, 3)
    coef = _DCT8 @ blocks @ _DCT8.T
    coef = np.round(coef / table) * table
    rec = _DCT8.T @ coef @ _DCT8
    rec = rec.transpose(0, 2, 1, 3).reshape(x.shape)[:h, :w]
    return np.clip(np.round(rec + 128.0), 0, 255) / 255.0


def apply_jpeg(cube: HsiCube, q: float, seed: int = 0):
    spec = DegradationSpec("jpeg", {"q": q}, seed)
    data = _require_normalized(cube)
    table = quant_table(q)
    out = np.stack([_jpeg_band(band, table) for band in data])
    return _finish(cube, out, spec, {"quant_table": table.astype(int).tolist()})


# --- noise --------------------------------------------------------------------


def apply_zero_mean_gaussian(cube: HsiCube, sigma: float, seed: int = 0):
    spec = DegradationSpec("zero_mean_gaussian", {"sigma": sigma}, seed)
    data = _require_normalized(cube)
    n = cube.height * cube.width
    out = np.empty_like(data)
    for c in range(cube.bands):
        noise = Stream(seed, "zero_mean_gaussian", c).normal(n, std=sigma)
        out[c] = np.clip(data[c] + noise.reshape(data[c].shape), 0.0, 1.0)
    return _finish(cube, out, spec, {})


def apply_additive_gaussian(cube: HsiCube, sigma_max: float, seed: int = 0):
    spec = DegradationSpec("additive_gaussian", {"sigma_max": sigma_max}, seed)
    data = _require_normalized(cube)
    n = cube.height * cube.width
    out = np.empty_like(data)
    sigmas = []
    for c in range(cube.bands):
        s = Stream(seed, "additive_gaussian", c)
        sigma_c = float(s.uniform(1, 0.0, sigma_max)[0])
        sigmas.append(sigma_c)
        out[c] = np.clip(data[c] + s.normal(n, std=sigma_c).reshape(data[c].shape), 0.0, 1.0)
    return _finish(cube, out, spec, {"sigma_c": sigmas})


def sample_poisson(lam: np.ndarray, stream: Stream) -> np.ndarray:
    """Poisson draws: sequential-search inversion below 30, rounded N(lam, lam) above."""
    lam = np.asarray(lam, dtype=np.float64).ravel()
    out = np.zeros(lam.shape, dtype=np.float64)
    u = stream.uniform(lam.size)
    small = lam < POISSON_NORMAL_CUTOFF
    if small.any():
        ls, us = lam[small], u[small]
        k = np.zeros_like(ls)
        p = np.exp(-ls)
        cdf = p.copy()
        active = us > cdf
        step = 0
        while active.any():
            step += 1
            k[active] += 1
            p = np.where(active, p * ls / step, p)
            cdf = np.where(active, cdf + p, cdf)
            # the cdf can stall just below u in floating point
            active &= (us > cdf) & (p > 0)
        out[small] = k
    if (~small).any():
        z = stream.normal(int((~small).sum()))
        lb = lam[~small]
        out[~small] = np.maximum(np.round(lb + np.sqrt(lb) * z), 0.0)
    return out


def apply_poisson(cube: HsiCube, snr_db: float, eps: float = 1e-6, seed: int = 0):
    spec = DegradationSpec("poisson", {"snr_db": snr_db, "eps": eps}, seed)
    data = _require_normalized(cube)
    snr_lin = 10.0 ** (snr_db / 10.0)
    out = np.empty_like(data)
    gammas: list[float | None] = []
    notes = []
    for c in range(cube.bands):
        x = data[c]
        denom = np.mean(x * x / (x + eps))
        if denom <= 0:
            gammas.append(None)
            out[c] = x
            notes.append(f"poisson: band {c} is all zero; passed through unchanged")
            continue
        gamma = snr_lin / denom
        gammas.append(float(gamma))
        counts = sample_poisson(gamma * x, Stream(seed, "poisson", c))
        out[c] = np.clip(counts.reshape(x.shape) / gamma, 0.0, 1.0)
    return _finish(cube, out, spec, {"gamma_c": gammas}, notes)


def apply_salt_pepper(cube: HsiCube, p: float, seed: int = 0):
    spec = DegradationSpec("salt_pepper", {"p": p}, seed)
    data = _require_normalized(cube)
    out = data.copy()
    n = cube.height * cube.width
    for c in range(cube.bands):
        u = Stream(seed, "salt_pepper", c).uniform(n).reshape(data[c].shape)
        band = out[c]
        band[u < p / 2] = 0.0
        band[(u >= p / 2) & (u < p)] = 1.0
    return _finish(cube, out, spec, {})


# --- sensor column defects ----------------------------------------------------


def apply_stripes(cube: HsiCube, a: int, b: int, seed: int = 0):
    spec = DegradationSpec("stripe", {"a": a, "b": b}, seed)
    data = _require_normalized(cube)
    if b > cube.width:
        raise ConfigError(f"stripe: b={b} exceeds image width {cube.width}")
    out = data.copy()
    counts, intensities, columns = [], [], []
    for c in range(cube.bands):
        s = Stream(seed, "stripe", c)
        n_c = int(s.integers(a, b, 1)[0])
        lam = float(s.uniform(1, 0.6, 0.8)[0])
        cols = np.sort(s.choice(cube.width, n_c))
        out[c][:, cols] = lam
        counts.append(n_c)
        intensities.append(lam)
        columns.append(cols.tolist())
    return _finish(cube, out, spec, {"n_c": counts, "lambda_c": intensities, "columns": columns})


DEADLINE_MAX_WIDTH = 3


def apply_deadlines(cube: HsiCube, a: int, b: int, seed: int = 0):
    spec = DegradationSpec("deadline", {"a": a, "b": b}, seed)
    data = _require_normalized(cube)
    n_starts = cube.width - DEADLINE_MAX_WIDTH
    if b > n_starts:
        raise ConfigError(f"deadline: b={b} exceeds W-3={n_starts}")
    out = data.copy()
    counts, starts_all, widths_all = [], [], []
    for c in range(cube.bands):
        s = Stream(seed, "deadline", c)
        n_c = int(s.integers(a, b, 1)[0])
        # 0-based starts: {0, ..., W-4}
        starts = s.choice(n_starts, n_c)
        widths = s.integers(1, DEADLINE_MAX_WIDTH + 1, n_c)
        for j, wj in zip(starts, widths):
            out[c][:, j : j + wj] = 0.0
        counts.append(n_c)
        starts_all.append(starts.tolist())
        widths_all.append(widths.tolist())
    return _finish(cube, out, spec, {"n_c": counts, "starts": starts_all, "widths": widths_all})


# --- blur and fog -------------------------------------------------------------


def mean_filter(band: np.ndarray, k: int) -> np.ndarray:
    """k x k box mean, same size, mirror padding without edge repeat."""
    r = k // 2
    padded = np.pad(band, r, mode="reflect")
    h, w = band.shape
    acc = np.zeros((h, w), dtype=np.float64)
    for i in range(k):
        for j in range(k):
            acc += padded[i : i + h, j : j + w]
    return acc / (k * k)


def apply_mean_blur(cube: HsiCube, k: int, seed: int = 0):
    spec = DegradationSpec("blur", {"k": k}, seed)
    data = _require_normalized(cube)
    if k // 2 >= min(cube.height, cube.width):
        raise ConfigError(f"blur: kernel {k} too large for {cube.height}x{cube.width}")
    out = np.stack([mean_filter(band, k) for band in data])
    return _finish(cube, np.clip(out, 0.0, 1.0), spec, {})


def fog_density(height: int, width: int, seed: int) -> tuple[np.ndarray, int]:
    """Smoothed uniform noise, min-max scaled to [0, 1]; stands in for a measured fog map."""
    size = math.ceil(min(height, width) / 8)
    if size % 2 == 0:
        size += 1
    noise = Stream(seed, "fog.rho").uniform(height * width).reshape(height, width)
    rho = mean_filter(noise, size) if size > 1 else noise
    span = rho.max() - rho.min()
    rho = (rho - rho.min()) / span if span > 0 else np.zeros_like(rho)
    return rho, size


def apply_fog(cube: HsiCube, omega: float, seed: int = 0):
    spec = DegradationSpec("fog", {"omega": omega}, seed)
    data = _require_normalized(cube)
    if cube.wavelengths_nm is None:
        raise ContractError("fog requires spectral calibration (wavelengths_nm)")
    rho, size = fog_density(cube.height, cube.width, seed)
    t1 = 1.0 - omega * rho
    lam0 = float(cube.wavelengths_nm.min())
    exponents = (lam0 / cube.wavelengths_nm) ** FOG_GAMMA
    airlight = data.reshape(cube.bands, -1).max(axis=1)
    out = np.empty_like(data)
    for c in range(cube.bands):
        t = t1 ** exponents[c]
        out[c] = data[c] * t + airlight[c] * (1.0 - t)
    sampled = {
        "gamma": FOG_GAMMA,
        "rho_filter_size": size,
        "rho_min_max": [float(rho.min()), float(rho.max())],
        "lambda_0": lam0,
        "exponent_c": exponents.tolist(),
        "airlight_c": airlight.tolist(),
    }
    return _finish(cube, out, spec, sampled)


# --- dispatch -------------------------------------------------------------------

_OPERATORS = {
    "jpeg": lambda cube, p, seed: apply_jpeg(cube, p["q"], seed),
    "zero_mean_gaussian": lambda cube, p, seed: apply_zero_mean_gaussian(cube, p["sigma"], seed),
    "additive_gaussian": lambda cube, p, seed: apply_additive_gaussian(cube, p["sigma_max"], seed),
    "poisson": lambda cube, p, seed: apply_poisson(cube, p["snr_db"], p["eps"], seed),
    "salt_pepper": lambda cube, p, seed: apply_salt_pepper(cube, p["p"], seed),
    "stripe": lambda cube, p, seed: apply_stripes(cube, int(p["a"]), int(p["b"]), seed),
    "deadline": lambda cube, p, seed: apply_deadlines(cube, int(p["a"]), int(p["b"]), seed),
    "blur": lambda cube, p, seed: apply_mean_blur(cube, int(p["k"]), seed),
    "fog": lambda cube, p, seed: apply_fog(cube, p["omega"], seed),
}


def degrade(cube: HsiCube, spec: DegradationSpec):
    return _OPERATORS[spec.kind](cube, spec.params, spec.seed)


def write_metadata(record: DegradationRecord, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(record.to_json(), indent=2) + "\n")
    return path


def read_metadata(path) -> DegradationRecord:
    return DegradationRecord.from_json(json.loads(Path(path).read_text()))


def degrade_and_record(cube: HsiCube, spec: DegradationSpec, metadata_path=None):
    """Run ``spec`` on ``cube``; optionally write the JSON metadata next to the output."""
    out, record = degrade(cube, spec)
    path = write_metadata(record, metadata_path) if metadata_path is not None else None
    return out, record, path


def replay(cube: HsiCube, metadata_path) -> tuple[HsiCube, DegradationRecord]:
    """Regenerate a degraded cube from its metadata file and the source cube."""
    stored = read_metadata(metadata_path)
    if cube.digest() != stored.source_digest:
        raise DataError("source cube does not match the digest recorded in the metadata")
    out, record = degrade(cube, stored.spec)
    if json.dumps(record.sampled, sort_keys=True) != json.dumps(stored.sampled, sort_keys=True):
        raise DataError("replayed samples differ from the recorded metadata")
    return out, record


def benchmark_specs(dataset: str = "PU", seed: int = 0) -> list[DegradationSpec]:
    """The nine degradation settings used for the PU / WHLK benchmarks."""
    pu = dataset.upper() == "PU"
    values = [
        ("jpeg", {"q": 110 if pu else 15}),
        ("zero_mean_gaussian", {"sigma": 0.25 if pu else 0.15}),
        ("additive_gaussian", {"sigma_max": 0.2 if pu else 0.25}),
        ("poisson", {"snr_db": -10 if pu else 15}),
        ("salt_pepper", {"p": 0.1 if pu else 0.09}),
        ("stripe", {"a": 30, "b": 35} if pu else {"a": 35, "b": 40}),
        ("deadline", {"a": 30, "b": 35} if pu else {"a": 25, "b": 30}),
        ("blur", {"k": 3}),
        ("fog", {"omega": 0.3 if pu else 0.2}),
    ]
    return [DegradationSpec(kind, params, seed) for kind, params in values]
