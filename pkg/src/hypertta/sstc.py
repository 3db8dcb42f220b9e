"""Spectral-spatial transformer classifier.

Multi-branch convolution front-end (one branch per kernel size, each followed
by a 1x1 projection and ReLU), pre-norm transformer encoder over the w*w
pixel tokens, and a linear head on the centre token.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tape, Tensor
from .hsi import ConfigError, DataError, NumericError
from .rng import Stream

log = logging.getLogger(__name__)


@dataclass
class SstcConfig:
    bands: int
    num_classes: int
    patch_size: int = 7
    kernel_sizes: tuple[int, ...] = (3, 5, 7)
    conv_channels: int = 32
    proj_dims: tuple[int, ...] = (32, 32, 32)
    heads: int = 4
    layers: int = 2
    ffn_mult: int = 2
    positional_embedding: bool = True
    smoothing: float = 0.05
    lr: float = 0.001
    epochs: int = 10
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        self.kernel_sizes = tuple(int(k) for k in self.kernel_sizes)
        self.proj_dims = tuple(int(d) for d in self.proj_dims)
        if len(self.kernel_sizes) != len(self.proj_dims) or not self.kernel_sizes:
            raise ConfigError("kernel_sizes and proj_dims must be nonempty and the same length")
        if any(k < 1 or k % 2 == 0 for k in self.kernel_sizes):
            raise ConfigError(f"kernel sizes must be odd, got {self.kernel_sizes}")
        if self.patch_size < 1 or self.patch_size % 2 == 0:
            raise ConfigError(f"patch_size must be odd, got {self.patch_size}")
        if self.model_dim % self.heads:
            raise ConfigError(f"model dim {self.model_dim} not divisible by {self.heads} heads")
        if not 0 <= self.smoothing <= 1:
            raise ConfigError("smoothing must lie in [0, 1]")
        if self.num_classes < 2:
            raise ConfigError("need at least two classes")

    @property
    def model_dim(self) -> int:
        return sum(self.proj_dims)

    @property
    def tokens(self) -> int:
        return self.patch_size * self.patch_size

    @property
    def center_index(self) -> int:
        r = self.patch_size // 2
        return self.patch_size * r + r

    def to_json(self) -> dict:
        doc = dataclasses.asdict(self)
        doc["kernel_sizes"] = list(self.kernel_sizes)
        doc["proj_dims"] = list(self.proj_dims)
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> SstcConfig:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        return cls(**doc)


class SstcModel:
    def __init__(self, config: SstcConfig):
        self.config = config
        self.params: dict[str, Parameter] = {}
        self._init_params()

    def _add(self, tag, shape, std=None, fill=None):
        if fill is not None:
            value = np.full(shape, fill, dtype=np.float64)
        else:
            n = int(np.prod(shape))
            value = Stream(self.config.seed, "init:" + tag).normal(n, std=std).reshape(shape)
        self.params[tag] = Parameter(value, tag)

    def _init_params(self):
        cfg = self.config
        d = cfg.model_dim
        for m, (k, dm) in enumerate(zip(cfg.kernel_sizes, cfg.proj_dims)):
            fan_in, fan_out = cfg.bands * k * k, cfg.conv_channels * k * k
            self._add(f"mrf{m}.conv.weight", (cfg.conv_channels, cfg.bands, k, k), math.sqrt(2.0 / (fan_in + fan_out)))
            self._add(f"mrf{m}.conv.bias", (cfg.conv_channels,), fill=0.0)
            self._add(f"mrf{m}.proj.weight", (dm, cfg.conv_channels, 1, 1), math.sqrt(2.0 / cfg.conv_channels))
            self._add(f"mrf{m}.proj.bias", (dm,), fill=0.0)
        if cfg.positional_embedding:
            self._add("pos_embed", (cfg.tokens, d), 0.02)
        hidden = cfg.ffn_mult * d
        for layer in range(cfg.layers):
            a, b = 2 * layer + 1, 2 * layer + 2
            pre = f"enc{layer}"
            for name in ("wq", "wk", "wv", "wo"):
                self._add(f"{pre}.attn.{name}", (d, d), math.sqrt(1.0 / d))
            self._add(f"{pre}.attn.bo", (d,), fill=0.0)
            self._add(f"ln{a}.gamma", (d,), fill=1.0)
            self._add(f"ln{a}.beta", (d,), fill=0.0)
            self._add(f"ln{b}.gamma", (d,), fill=1.0)
            self._add(f"ln{b}.beta", (d,), fill=0.0)
            self._add(f"{pre}.ffn.w1", (d, hidden), math.sqrt(2.0 / d))
            self._add(f"{pre}.ffn.b1", (hidden,), fill=0.0)
            self._add(f"{pre}.ffn.w2", (hidden, d), math.sqrt(1.0 / hidden))
            self._add(f"{pre}.ffn.b2", (d,), fill=0.0)
        self._add("head.weight", (d, cfg.num_classes), math.sqrt(1.0 / d))
        self._add("head.bias", (cfg.num_classes,), fill=0.0)

    def __getitem__(self, tag) -> Parameter:
        return self.params[tag]

    def ln_params(self) -> list[Parameter]:
        return [p for p in self.params.values() if ad.LN_AFFINE(p)]

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def state(self) -> dict[str, np.ndarray]:
        return {tag: p.data.copy() for tag, p in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]):
        for tag, value in state.items():
            p = self.params[tag]
            if p.shape != value.shape:
                raise DataError(f"{tag}: shape {value.shape} != {p.shape}")
            p.data[...] = value

    def copy(self) -> SstcModel:
        clone = SstcModel.__new__(SstcModel)
        clone.config = self.config
        clone.params = {tag: Parameter(p.data.copy(), tag, p.trainable) for tag, p in self.params.items()}
        return clone

    def digest(self, predicate=None) -> str:
        h = hashlib.sha256()
        for tag, p in self.params.items():
            if predicate is None or predicate(p):
                h.update(tag.encode())
                h.update(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
        return "sha256:" + h.hexdigest()


# --- forward ------------------------------------------------------------------------


def mrf_features(x, model: SstcModel) -> Tensor:
    """(B, C, w, w) patches -> (B, d, w, w) fused multi-scale features."""
    x = ad.as_tensor(x)
    cfg = model.config
    if x.data.ndim != 4 or x.shape[1] != cfg.bands:
        raise ConfigError(f"expected (B, {cfg.bands}, w, w) patches, got {x.shape}")
    branches = []
    for m in range(len(cfg.kernel_sizes)):
        f = ad.conv2d(x, model[f"mrf{m}.conv.weight"], model[f"mrf{m}.conv.bias"])
        f = ad.conv2d(f, model[f"mrf{m}.proj.weight"], model[f"mrf{m}.proj.bias"])
        branches.append(ad.relu(f))
    return ad.concat(branches, axis=1)


def to_tokens(features: Tensor) -> Tensor:
    b, d, h, w = features.shape
    return ad.reshape(ad.transpose(features, (0, 2, 3, 1)), (b, h * w, d))


def attention(h: Tensor, model: SstcModel, layer: int, return_weights: bool = False):
    cfg = model.config
    b, n, d = h.shape
    heads, dh = cfg.heads, d // cfg.heads
    pre = f"enc{layer}.attn"

    def split(t):
        return ad.transpose(ad.reshape(t, (b, n, heads, dh)), (0, 2, 1, 3))

    q = split(ad.matmul(h, model[f"{pre}.wq"]))
    k = split(ad.matmul(h, model[f"{pre}.wk"]))
    v = split(ad.matmul(h, model[f"{pre}.wv"]))
    scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    weights = ad.softmax_lastdim(scores)
    mixed = ad.reshape(ad.transpose(ad.matmul(weights, v), (0, 2, 1, 3)), (b, n, d))
    out = ad.linear(mixed, model[f"{pre}.wo"], model[f"{pre}.bo"])
    return (out, weights) if return_weights else out


def feed_forward(h: Tensor, model: SstcModel, layer: int) -> Tensor:
    pre = f"enc{layer}.ffn"
    hidden = ad.relu(ad.linear(h, model[f"{pre}.w1"], model[f"{pre}.b1"]))
    return ad.linear(hidden, model[f"{pre}.w2"], model[f"{pre}.b2"])


def encode(tokens, model: SstcModel) -> Tensor:
    x = ad.as_tensor(tokens)
    if model.config.positional_embedding:
        x = ad.add(x, model["pos_embed"])
    for layer in range(model.config.layers):
        a, b = 2 * layer + 1, 2 * layer + 2
        x = ad.add(x, attention(ad.layernorm(x, model[f"ln{a}.gamma"], model[f"ln{a}.beta"]), model, layer))
        x = ad.add(x, feed_forward(ad.layernorm(x, model[f"ln{b}.gamma"], model[f"ln{b}.beta"]), model, layer))
    return x


def logits(patches, model: SstcModel) -> Tensor:
    cfg = model.config
    x = ad.as_tensor(patches)
    if x.data.ndim != 4 or x.shape[2] != x.shape[3]:
        raise ConfigError(f"expected square (B, C, w, w) patches, got {x.shape}")
    if x.shape[2] % 2 == 0:
        raise ConfigError("patch size must be odd (no centre pixel otherwise)")
    if x.shape[2] != cfg.patch_size:
        raise ConfigError(f"patch size {x.shape[2]} != configured {cfg.patch_size}")
    z = encode(to_tokens(mrf_features(x, model)), model)
    center = ad.reshape(ad.take(z, [cfg.center_index], axis=1), (x.shape[0], cfg.model_dim))
    return ad.linear(center, model["head.weight"], model["head.bias"])


def classify(patches, model: SstcModel) -> Tensor:
    """Class probabilities (B, K)."""
    return ad.softmax_lastdim(logits(patches, model))


def predict_proba(patches: np.ndarray, model: SstcModel, batch_size: int = 256) -> np.ndarray:
    out = [classify(patches[i : i + batch_size], model).data for i in range(0, len(patches), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, model.config.num_classes))


# --- loss -----------------------------------------------------------------------------


def smooth_labels(y, eps: float, num_classes: int) -> np.ndarray:
    """Smoothed targets for class ids in 1..K; returns (K,) or (B, K)."""
    y = np.asarray(y, dtype=np.int64)
    if np.any(y < 1) or np.any(y > num_classes):
        raise ValueError(f"class ids must lie in 1..{num_classes}")
    flat = np.atleast_1d(y)
    t = np.full((flat.size, num_classes), eps / num_classes)
    t[np.arange(flat.size), flat - 1] = 1.0 - eps + eps / num_classes
    return t[0] if y.ndim == 0 else t


def smoothed_ce_loss(probs, targets) -> Tensor:
    probs = ad.as_tensor(probs)
    targets = np.asarray(targets, dtype=np.float64)
    if probs.shape != targets.shape:
        raise ad.ShapeError(f"probs {probs.shape} vs targets {targets.shape}")
    if np.any(probs.data.sum(axis=-1) <= 0):
        raise ValueError("probability rows must have positive mass")
    per_row = ad.sum(ad.mul(ad.log_clamped(probs), targets), axis=-1)
    return ad.scale(ad.mean(per_row), -1.0)


def target_entropy(eps: float, num_classes: int) -> float:
    t = smooth_labels(1, eps, num_classes)
    t = t[t > 0]
    return float(-(t * np.log(t)).sum())


# --- training -----------------------------------------------------------------------


@dataclass
class TrainReport:
    epoch_loss: list[float] = field(default_factory=list)
    epoch_accuracy: list[float] = field(default_factory=list)
    step_loss: list[float] = field(default_factory=list)
    digest: str = ""

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self):
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def train(model: SstcModel, patches, labels, config: SstcConfig | None = None) -> TrainReport:
    """Adam on the label-smoothed loss over shuffled mini-batches.

    ``patches`` is an array (N, C, w, w) or any object with
    ``__len__`` and ``__getitem__(index_array)`` returning such a batch.
    ``labels`` holds class ids in 1..K.
    """
    cfg = config or model.config
    labels = np.asarray(labels, dtype=np.int64)
    n = len(patches)
    if n != labels.size:
        raise DataError(f"{n} patches but {labels.size} labels")
    if n == 0:
        raise DataError("no training samples")
    targets = smooth_labels(labels, cfg.smoothing, cfg.num_classes)
    opt = Adam([p for p in model.params.values() if p.trainable], lr=cfg.lr)
    report = TrainReport()
    for epoch in range(cfg.epochs):
        order = Stream(cfg.seed, "train.shuffle", epoch).permutation(n)
        total, correct = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            batch = patches[idx]
            model.zero_grad()
            with Tape() as tape:
                probs = classify(batch, model)
                loss = smoothed_ce_loss(probs, targets[idx])
            value = float(loss.data)
            if not math.isfinite(value):
                raise NumericError(f"non-finite loss {value} at epoch {epoch}, batch starting {start}")
            tape.backward(loss)
            opt.step()
            report.step_loss.append(value)
            total += value * len(idx)
            correct += int((probs.data.argmax(axis=1) + 1 == labels[idx]).sum())
        report.epoch_loss.append(total / n)
        report.epoch_accuracy.append(correct / n)
        log.info("epoch %d loss %.4f acc %.4f", epoch + 1, total / n, correct / n)
    report.digest = model.digest()
    return report


# --- checkpoint -----------------------------------------------------------------------


def manifest_path(path) -> Path:
    return Path(str(path) + ".json")


def save_checkpoint(model: SstcModel, path, extra: dict | None = None) -> Path:
    """Raw little-endian f64 payload at ``path`` plus a ``path.json`` manifest."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = b"".join(np.ascontiguousarray(p.data, dtype="<f8").tobytes() for p in model.params.values())
    manifest = {
        "config": model.config.to_json(),
        "tags": list(model.params),
        "shapes": [list(p.shape) for p in model.params.values()],
        "digest": "sha256:" + hashlib.sha256(payload).hexdigest(),
    }
    if extra:
        manifest.update(extra)
    path.write_bytes(payload)
    manifest_path(path).write_text(json.dumps(manifest, indent=2) + "\n")
    return path


def load_checkpoint(path) -> SstcModel:
    path = Path(path)
    manifest = json.loads(manifest_path(path).read_text())
    payload = path.read_bytes()
    if "sha256:" + hashlib.sha256(payload).hexdigest() != manifest["digest"]:
        raise DataError(f"checkpoint payload {path} does not match its manifest digest")
    model = SstcModel(SstcConfig.from_json(manifest["config"]))
    offset = 0
    for tag, shape in zip(manifest["tags"], manifest["shapes"]):
        count = int(np.prod(shape))
        chunk = payload[offset : offset + 8 * count]
        if len(chunk) != 8 * count:
            raise DataError(f"checkpoint payload truncated at {tag}")
        model.params[tag].data[...] = np.frombuffer(chunk, dtype="<f8").reshape(shape)
        offset += 8 * count
    if offset != len(payload):
        raise DataError("checkpoint payload has trailing bytes")
    return model
