"""Raw binary cube / label files with JSON sidecars.

Cube: ``<name>.hsi`` little-endian f32, band-sequential, plus ``<name>.json``
    {"height", "width", "bands", "dtype": "f32le", "interleave": "bsq",
     "wavelengths_nm": [...]}   (wavelengths optional)
Labels: ``<name>.lbl`` little-endian u16 row-major, plus ``<name>.json``
    {"height", "width", "classes": [...]}
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .hsi import DataError, HsiCube, LabelMap, SplitSpec


def sidecar_path(path) -> Path:
    return Path(path).with_suffix(".json")


def _read_header(path: Path) -> dict:
    side = sidecar_path(path)
    if not side.exists():
        raise DataError(f"missing sidecar header {side}")
    try:
        return json.loads(side.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"unreadable header {side}: {exc}") from exc


def write_cube(cube: HsiCube, path) -> Path:
    path = Path(path)
    header = {
        "height": cube.height,
        "width": cube.width,
        "bands": cube.bands,
        "dtype": "f32le",
        "interleave": "bsq",
    }
    if cube.wavelengths_nm is not None:
        header["wavelengths_nm"] = [float(v) for v in cube.wavelengths_nm]
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(np.ascontiguousarray(cube.data, dtype="<f4").tobytes())
    sidecar_path(path).write_text(json.dumps(header, indent=2) + "\n")
    return path


def read_cube(path) -> HsiCube:
    path = Path(path)
    header = _read_header(path)
    if header.get("dtype") != "f32le":
        raise DataError(f"unsupported dtype {header.get('dtype')!r}")
    if header.get("interleave") != "bsq":
        raise DataError(f"unsupported interleave {header.get('interleave')!r}; only 'bsq'")
    try:
        h, w, c = int(header["height"]), int(header["width"]), int(header["bands"])
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"bad dimensions in header of {path}") from exc
    raw = path.read_bytes()
    expected = h * w * c * 4
    if len(raw) != expected:
        raise DataError(f"{path}: expected {expected} bytes for {h}x{w}x{c}, found {len(raw)}")
    data = np.frombuffer(raw, dtype="<f4").reshape(c, h, w).astype(np.float32)
    normalized = bool(data.size) and bool(np.all((data >= 0) & (data <= 1)))
    return HsiCube(data, header.get("wavelengths_nm"), normalized=normalized)


def write_labels(labels: LabelMap, path) -> Path:
    path = Path(path)
    header = {"height": labels.height, "width": labels.width, "classes": list(labels.class_names)}
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(np.ascontiguousarray(labels.labels, dtype="<u2").tobytes())
    sidecar_path(path).write_text(json.dumps(header, indent=2) + "\n")
    return path


def read_labels(path) -> LabelMap:
    path = Path(path)
    header = _read_header(path)
    try:
        h, w, classes = int(header["height"]), int(header["width"]), list(header["classes"])
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"bad label header for {path}") from exc
    raw = path.read_bytes()
    if len(raw) != h * w * 2:
        raise DataError(f"{path}: expected {h * w * 2} bytes, found {len(raw)}")
    labels = np.frombuffer(raw, dtype="<u2").reshape(h, w)
    return LabelMap(labels, classes)


def write_split(split: SplitSpec, path) -> Path:
    path = Path(path)
    doc = {
        "train_fraction": split.train_fraction,
        "seed": split.seed,
        "height": int(split.assignment.shape[0]),
        "width": int(split.assignment.shape[1]),
        "train": split.train_pixels().tolist(),
        "target": split.target_pixels().tolist(),
    }
    path.write_text(json.dumps(doc) + "\n")
    return path


def read_split(path) -> SplitSpec:
    doc = json.loads(Path(path).read_text())
    assignment = np.zeros(doc["height"] * doc["width"], dtype=np.uint8)
    assignment[np.asarray(doc["train"], dtype=np.int64)] = 1
    assignment[np.asarray(doc["target"], dtype=np.int64)] = 2
    return SplitSpec(doc["train_fraction"], doc["seed"], assignment.reshape(doc["height"], doc["width"]))


def write_predictions(preds: np.ndarray, path) -> Path:
    path = Path(path)
    path.write_bytes(np.ascontiguousarray(preds, dtype="<u2").tobytes())
    return path


def read_predictions(path) -> np.ndarray:
    return np.frombuffer(Path(path).read_bytes(), dtype="<u2").astype(np.int64)
