"""Dense ReLU MLP with a softmax head, trained by momentum SGD.

Everything is plain numpy in float64. Targets are always probability
vectors: hard labels go through :func:`one_hot`, pseudo labels are used
as-is, and both share one soft-target cross-entropy.
"""

from __future__ import annotations

import copy
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from pagecl.errors import CheckpointError, ConfigError, NumericError, ShapeError

LOG_EPS = 1e-12

CHECKPOINT_MAGIC = b"PAGECKPT"
CHECKPOINT_VERSION = 1


@dataclass
class MlpModel:
    """Weights are stored ``(fan_in, fan_out)`` so a layer is ``x @ W + b``."""

    layer_dims: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    seed: int = 0

    def __post_init__(self):
        self.layer_dims = [int(d) for d in self.layer_dims]
        if len(self.layer_dims) < 2 or min(self.layer_dims) < 1:
            raise ConfigError(f"invalid layer dims {self.layer_dims}")
        n_layers = len(self.layer_dims) - 1
        if len(self.weights) != n_layers or len(self.biases) != n_layers:
            raise ShapeError("need one weight matrix and bias vector per layer")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            shape = (self.layer_dims[i], self.layer_dims[i + 1])
            if w.shape != shape or b.shape != (shape[1],):
                raise ShapeError(
                    f"layer {i}: expected W{shape} b({shape[1]},), "
                    f"got W{w.shape} b{b.shape}"
                )

    @property
    def n_inputs(self) -> int:
        return self.layer_dims[0]

    @property
    def n_classes(self) -> int:
        return self.layer_dims[-1]

    def parameters(self) -> list[np.ndarray]:
        """Live references, ordered W0, b0, W1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def copy(self) -> "MlpModel":
        return copy.deepcopy(self)


def init_mlp(layer_dims, seed: int = 0) -> MlpModel:
    """He-style uniform init, ``U(-sqrt(6/fan_in), sqrt(6/fan_in))``, zero biases."""
    rng = np.random.default_rng(seed)
    dims = [int(d) for d in layer_dims]
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        limit = np.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MlpModel(dims, weights, biases, seed=int(seed))


def zeros_like_model(model: MlpModel) -> MlpModel:
    return MlpModel(
        model.layer_dims,
        [np.zeros_like(w) for w in model.weights],
        [np.zeros_like(b) for b in model.biases],
        seed=model.seed,
    )


def one_hot(labels, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ShapeError(f"labels outside [0, {n_classes})")
    out = np.zeros((labels.size, n_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _check_features(model: MlpModel, features) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim == 1:
        x = x.reshape(1, -1)
    if x.ndim != 2 or x.shape[1] != model.n_inputs:
        raise ShapeError(
            f"features of shape {np.shape(features)} do not match model input dim "
            f"{model.n_inputs}"
        )
    return x


def _forward_cache(model: MlpModel, x: np.ndarray):
    activations = [x]
    pre = []
    a = x
    last = len(model.weights) - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = a @ w + b
        pre.append(z)
        a = softmax(z) if i == last else np.maximum(z, 0.0)
        activations.append(a)
    return activations, pre


def forward(model: MlpModel, features) -> np.ndarray:
    """Class probabilities, one row per input row."""
    x = _check_features(model, features)
    activations, _ = _forward_cache(model, x)
    return activations[-1]


def _check_targets(model: MlpModel, targets, n: int) -> np.ndarray:
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != (n, model.n_classes):
        raise ShapeError(f"targets shape {t.shape} != ({n}, {model.n_classes})")
    return t


def cross_entropy(targets: np.ndarray, probs: np.ndarray) -> np.ndarray:
    return -(targets * np.log(probs + LOG_EPS)).sum(axis=1)


def per_instance_loss(model: MlpModel, features, targets) -> np.ndarray:
    x = _check_features(model, features)
    t = _check_targets(model, targets, x.shape[0])
    return cross_entropy(t, forward(model, x))


def loss_and_gradients(model: MlpModel, features, targets):
    """Per-instance losses and the gradient of their mean w.r.t. every parameter.

    The gradient is exact for the epsilon-guarded loss, not just for plain
    cross-entropy, so finite differences agree even at saturated outputs.
    """
    x = _check_features(model, features)
    t = _check_targets(model, targets, x.shape[0])
    n = x.shape[0]
    activations, pre = _forward_cache(model, x)
    p = activations[-1]
    losses = cross_entropy(t, p)

    r = t * p / (p + LOG_EPS)
    delta = (p * r.sum(axis=1, keepdims=True) - r) / n

    grad_w = [None] * len(model.weights)
    grad_b = [None] * len(model.weights)
    for i in range(len(model.weights) - 1, -1, -1):
        grad_w[i] = activations[i].T @ delta
        grad_b[i] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ model.weights[i].T) * (pre[i - 1] > 0)
    return losses, grad_w, grad_b


@dataclass
class SgdConfig:
    learning_rate: float = 0.005
    momentum: float = 0.9
    batch_size: int = 128
    epochs: int = 300
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be non-negative")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.batch_size < 2 or self.batch_size % 2:
            raise ConfigError("batch_size must be a positive even integer")
        if self.epochs < 1:
            raise ConfigError("epochs must be positive")
        if self.seed < 0:
            raise ConfigError("seed must be unsigned")


@dataclass
class Velocity:
    buffers: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def zeros(cls, model: MlpModel) -> "Velocity":
        return cls([np.zeros_like(p) for p in model.parameters()])


def momentum_update(params, grads, buffers, learning_rate, momentum):
    """In-place heavy-ball step: ``v = momentum*v + g``; ``p -= lr*v``."""
    for p, g, v in zip(params, grads, buffers):
        v *= momentum
        v += g
        p -= learning_rate * v


def sgd_step(model: MlpModel, features, targets, cfg: SgdConfig, velocity: Velocity,
             batch_index: int = 0) -> np.ndarray:
    """One momentum-SGD step on the mean batch loss, applied to ``model`` in place.

    Returns the per-instance losses measured before the update.
    """
    if len(features) == 0:
        raise ShapeError("empty batch")
    losses, grad_w, grad_b = loss_and_gradients(model, features, targets)
    grads = []
    for gw, gb in zip(grad_w, grad_b):
        grads.extend((gw, gb))
    if not all(np.isfinite(g).all() for g in grads):
        raise NumericError(f"non-finite gradient in batch {batch_index}")
    if not velocity.buffers:
        velocity.buffers = [np.zeros_like(p) for p in model.parameters()]
    momentum_update(model.parameters(), grads, velocity.buffers,
                    cfg.learning_rate, cfg.momentum)
    return losses


# -- checkpoints -------------------------------------------------------------
#
# little-endian layout:
#   magic[8] version:u32 seed:u64 n_dims:u32 dims:u32*n_dims
#   per layer: W (fan_in*fan_out f64, row-major), b (fan_out f64)
#   n_aux:u32, per aux: name_len:u16 name ndim:u32 shape:u64*ndim data:f64*
#   crc32:u32 over everything before it


def save_checkpoint(model: MlpModel, aux: dict[str, np.ndarray] | None = None) -> bytes:
    """Serialize ``model``; ``aux`` carries optional named float arrays
    (the frozen input transform travels this way)."""
    parts = [CHECKPOINT_MAGIC,
             struct.pack("<IQI", CHECKPOINT_VERSION, int(model.seed), len(model.layer_dims)),
             struct.pack(f"<{len(model.layer_dims)}I", *model.layer_dims)]
    for w, b in zip(model.weights, model.biases):
        parts.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    aux = aux or {}
    parts.append(struct.pack("<I", len(aux)))
    for name in sorted(aux):
        arr = np.ascontiguousarray(aux[name], dtype="<f8")
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)) + encoded)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint is truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def floats(self, shape) -> np.ndarray:
        count = int(np.prod(shape, dtype=np.int64))
        return np.frombuffer(self.take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)


def load_bundle(data: bytes) -> tuple[MlpModel, dict[str, np.ndarray]]:
    """Inverse of :func:`save_checkpoint`: the model plus its aux arrays."""
    data = bytes(data)
    if len(data) < len(CHECKPOINT_MAGIC) + 4:
        raise CheckpointError("checkpoint is truncated")
    if data[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    r = _Reader(data)
    r.take(len(CHECKPOINT_MAGIC))
    version, seed, n_dims = r.unpack("<IQI")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    dims = list(r.unpack(f"<{n_dims}I"))
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        weights.append(r.floats((fan_in, fan_out)))
        biases.append(r.floats((fan_out,)))
    (n_aux,) = r.unpack("<I")
    aux = {}
    for _ in range(n_aux):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        (ndim,) = r.unpack("<I")
        shape = r.unpack(f"<{ndim}Q") if ndim else ()
        aux[name] = r.floats(shape)
    body_end = r.pos
    (crc,) = r.unpack("<I")
    if r.pos != len(data):
        raise CheckpointError("trailing bytes after checkpoint")
    if zlib.crc32(data[:body_end]) != crc:
        raise CheckpointError("checkpoint checksum mismatch (corrupt stream)")
    return MlpModel(dims, weights, biases, seed=seed), aux


def load_checkpoint(data: bytes) -> MlpModel:
    return load_bundle(data)[0]
