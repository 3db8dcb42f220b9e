"""Test-time adaptation of LayerNorm affine parameters by entropy minimization.

Per batch: forward, pick confident samples (threshold with a top-k fallback),
descend the mean prediction entropy of those samples with plain SGD on the
LayerNorm scales and shifts only, then predict with the adapted parameters.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .hsi import ConfigError
from .sstc import SstcModel, classify

RESET_MODES = ("per_batch", "per_run")


@dataclass
class AdaptConfig:
    tau: float = 0.8
    top_fraction: float = 0.3
    lr: float = 0.001
    steps: int = 1
    batch_size: int = 64
    reset_mode: str = "per_run"
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.tau < 1:
            raise ConfigError(f"tau must lie in (0, 1), got {self.tau}")
        if not 0 < self.top_fraction < 1:
            raise ConfigError(f"top_fraction must lie in (0, 1), got {self.top_fraction}")
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.reset_mode not in RESET_MODES:
            raise ConfigError(f"reset_mode must be one of {RESET_MODES}")

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


class LnSnapshot:
    def __init__(self, model: SstcModel):
        self.values = {p.tag: p.data.copy() for p in model.ln_params()}
        if not self.values:
            raise ConfigError("model has no LayerNorm affine parameters")

    def restore(self, model: SstcModel):
        for tag, value in self.values.items():
            model.params[tag].data[...] = value


@dataclass
class BatchEntry:
    size: int
    selected: list[int]
    threshold_count: int
    mode: str
    entropy_before: float
    entropy_after: float
    gamma_delta_norm: float
    beta_delta_norm: float

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class AdaptReport:
    entries: list[BatchEntry] = field(default_factory=list)
    predictions: np.ndarray | None = None

    def to_json(self) -> dict:
        return {
            "batches": [e.to_json() for e in self.entries],
            "num_predictions": 0 if self.predictions is None else int(self.predictions.size),
        }


def prediction_entropy(probs) -> np.ndarray:
    """Row-wise Shannon entropy (nats) with 0 log 0 = 0."""
    p = np.asarray(probs.data if isinstance(probs, Tensor) else probs, dtype=np.float64)
    if p.ndim != 2:
        raise ValueError("expected a (B, K) probability matrix")
    if np.any(np.abs(p.sum(axis=1) - 1.0) > 1e-4) or np.any(p < 0):
        raise ValueError("rows must be probability distributions")
    safe = np.where(p > 0, p, 1.0)
    return -(p * np.log(safe)).sum(axis=1)


def select_indices(probs, tau: float, top_fraction: float) -> tuple[np.ndarray, str]:
    """Confident rows: all with max prob > tau if there are at least ceil(top_fraction*B),
    otherwise the ceil(top_fraction*B) most confident (ties to the lower index)."""
    p = np.asarray(probs.data if isinstance(probs, Tensor) else probs)
    b = p.shape[0]
    if b == 0:
        raise ValueError("empty batch")
    conf = p.max(axis=1)
    above = np.flatnonzero(conf > tau)
    k = math.ceil(top_fraction * b)
    if above.size >= k:
        return above, "threshold"
    order = np.argsort(-conf, kind="stable")
    return np.sort(order[:k]), "topk"


def entropy_tensor(probs: Tensor) -> Tensor:
    """Differentiable row entropy; the log clamp makes 0 log 0 vanish."""
    return ad.scale(ad.sum(ad.mul(probs, ad.log_clamped(probs)), axis=-1), -1.0)


def adapt_loss(probs, indices) -> Tensor:
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size == 0:
        raise ValueError("no selected samples")
    return ad.mean(entropy_tensor(ad.take(ad.as_tensor(probs), idx, axis=0)))


def adapt_batch(model: SstcModel, batch: np.ndarray, config: AdaptConfig) -> tuple[np.ndarray, BatchEntry]:
    """S SGD steps on the LayerNorm affine parameters, then predict.

    Returns the final probabilities (B, K) and a report entry.
    """
    ln = model.ln_params()
    if not ln:
        raise ConfigError("model has no LayerNorm affine parameters")
    start = {p.tag: p.data.copy() for p in ln}
    first = None
    for _ in range(config.steps):
        for p in ln:
            p.zero_grad()
        with Tape() as tape:
            probs = classify(batch, model)
            idx, mode = select_indices(probs, config.tau, config.top_fraction)
            loss = adapt_loss(probs, idx)
        if first is None:
            first = (idx, mode, float(loss.data), int((probs.data.max(axis=1) > config.tau).sum()))
        tape.backward(loss, ad.LN_AFFINE)
        for p in ln:
            p.data -= config.lr * p.grad
    final = classify(batch, model).data
    idx, mode, before, n_tau = first
    after = float(prediction_entropy(final[idx]).mean())
    dg = math.sqrt(float(np.sum([np.sum((p.data - start[p.tag]) ** 2) for p in ln if p.tag.endswith("gamma")])))
    db = math.sqrt(float(np.sum([np.sum((p.data - start[p.tag]) ** 2) for p in ln if p.tag.endswith("beta")])))
    entry = BatchEntry(len(batch), idx.tolist(), n_tau, mode, before, after, dg, db)
    return final, entry


def run_adaptation(model: SstcModel, stream, config: AdaptConfig) -> tuple[np.ndarray, AdaptReport]:
    """Adapt over ``stream`` in order; returns predicted class ids (1..K) and the report.

    ``stream`` is either an array (N, C, w, w), batched by ``config.batch_size``,
    or an iterable of such batches.
    """
    snapshot = LnSnapshot(model)
    snapshot.restore(model)
    if isinstance(stream, np.ndarray):
        batches = (stream[i : i + config.batch_size] for i in range(0, len(stream), config.batch_size))
    else:
        batches = iter(stream)
    report = AdaptReport()
    preds = []
    w = model.config.patch_size
    for batch in batches:
        if batch.ndim != 4 or batch.shape[2:] != (w, w):
            raise ConfigError(f"batch of shape {batch.shape} does not match model patch size {w}")
        if config.reset_mode == "per_batch":
            snapshot.restore(model)
        probs, entry = adapt_batch(model, batch, config)
        preds.append(probs.argmax(axis=1) + 1)
        report.entries.append(entry)
    report.predictions = np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)
    return report.predictions, report
