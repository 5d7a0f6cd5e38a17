"""Per-pixel softmax segmenter: one ReLU hidden layer trained with SGD.

Cross-entropy skips ignore-labeled pixels (they are filtered out before
batching, so an unselected pixel contributes no gradient). Model math runs
in float64; checkpoints store float32 little-endian.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import fusion
from .imagecore import FormatError

CHECKPOINT_MAGIC = b"FAMD"
CHECKPOINT_VERSION = 1


@dataclass
class Model:
    w1: np.ndarray  # (hidden, in) float64
    b1: np.ndarray  # (hidden,) float64
    w2: np.ndarray  # (K, hidden) float64
    b2: np.ndarray  # (K,) float64

    @property
    def in_dim(self) -> int:
        return self.w1.shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.w1.shape[0]

    @property
    def n_classes(self) -> int:
        return self.w2.shape[0]

    def copy(self) -> "Model":
        return Model(self.w1.copy(), self.b1.copy(), self.w2.copy(), self.b2.copy())

    def params(self) -> dict[str, np.ndarray]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.05
    batch_size: int = 64
    epochs: int = 15
    seed: int = 0
    l2: float = 1e-4

    def __post_init__(self) -> None:
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")


@dataclass
class Gradients:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray


def init_model(in_dim: int, hidden_dim: int, n_classes: int, seed: int) -> Model:
    """Glorot-uniform weights from a seeded generator, zero biases."""
    if min(in_dim, hidden_dim, n_classes) < 1:
        raise ValueError("all dimensions must be >= 1")
    rng = np.random.default_rng(seed)
    lim1 = np.sqrt(6.0 / (in_dim + hidden_dim))
    lim2 = np.sqrt(6.0 / (hidden_dim + n_classes))
    return Model(
        w1=rng.uniform(-lim1, lim1, size=(hidden_dim, in_dim)),
        b1=np.zeros(hidden_dim),
        w2=rng.uniform(-lim2, lim2, size=(n_classes, hidden_dim)),
        b2=np.zeros(n_classes),
    )


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def forward_batch(model: Model, features: np.ndarray) -> np.ndarray:
    """Class probabilities for an (N, in_dim) feature batch."""
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2 or f.shape[1] != model.in_dim:
        raise ValueError(f"features shape {f.shape} does not match in_dim {model.in_dim}")
    hidden = np.maximum(f @ model.w1.T + model.b1, 0.0)
    return _softmax(hidden @ model.w2.T + model.b2)


def forward(model: Model, features: np.ndarray) -> np.ndarray:
    """Class probabilities for one feature vector."""
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 1:
        raise ValueError(f"expected a 1-D feature vector, got shape {f.shape}")
    if f.shape[0] != model.in_dim:
        raise ValueError(f"feature length {f.shape[0]} does not match in_dim {model.in_dim}")
    return forward_batch(model, f[None, :])[0]


def loss_and_grad(
    model: Model,
    features: np.ndarray,
    labels: np.ndarray,
    l2: float,
    sample_weights: np.ndarray | None = None,
) -> tuple[float, Gradients]:
    """Weighted-mean cross-entropy plus l2/2 * ||W||^2, with backprop grads."""
    f = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels)
    if f.ndim != 2 or f.shape[0] == 0:
        raise ValueError("batch must be a non-empty (N, in_dim) array")
    if f.shape[1] != model.in_dim:
        raise ValueError(f"feature dim {f.shape[1]} does not match in_dim {model.in_dim}")
    if y.shape != (f.shape[0],):
        raise ValueError("labels must be a 1-D array matching the batch size")
    if y.min() < 0 or y.max() >= model.n_classes:
        raise ValueError(f"labels must lie in [0, {model.n_classes})")

    n = f.shape[0]
    if sample_weights is None:
        weights = np.full(n, 1.0 / n)
    else:
        sw = np.asarray(sample_weights, dtype=np.float64)
        if sw.shape != (n,) or sw.min() < 0 or sw.sum() <= 0:
            raise ValueError("sample_weights must be non-negative with positive sum")
        weights = sw / sw.sum()

    z1 = f @ model.w1.T + model.b1
    a1 = np.maximum(z1, 0.0)
    logits = a1 @ model.w2.T + model.b2
    probs = _softmax(logits)

    idx = np.arange(n)
    ce = float(np.sum(weights * -np.log(np.maximum(probs[idx, y], 1e-300))))
    reg = 0.5 * l2 * (float(np.sum(model.w1 * model.w1)) + float(np.sum(model.w2 * model.w2)))

    dlogits = probs.copy()
    dlogits[idx, y] -= 1.0
    dlogits *= weights[:, None]
    gw2 = dlogits.T @ a1 + l2 * model.w2
    gb2 = dlogits.sum(axis=0)
    da1 = dlogits @ model.w2
    dz1 = da1 * (z1 > 0)
    gw1 = dz1.T @ f + l2 * model.w1
    gb1 = dz1.sum(axis=0)
    return ce + reg, Gradients(w1=gw1, b1=gb1, w2=gw2, b2=gb2)


def train(
    model: Model,
    features: np.ndarray,
    labels: np.ndarray,
    config: TrainConfig,
    sample_weights: np.ndarray | None = None,
) -> tuple[Model, list[float]]:
    """SGD with seeded per-epoch shuffling; returns a new model and the
    per-epoch mean batch loss trace. The input model is left untouched."""
    f = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels)
    if f.shape[0] == 0:
        raise ValueError("training set is empty")
    m = model.copy()
    rng = np.random.default_rng(config.seed)
    trace: list[float] = []
    for _ in range(config.epochs):
        order = rng.permutation(f.shape[0])
        losses = []
        for start in range(0, len(order), config.batch_size):
            batch = order[start : start + config.batch_size]
            bw = None if sample_weights is None else np.asarray(sample_weights)[batch]
            loss, grads = loss_and_grad(m, f[batch], y[batch], config.l2, bw)
            losses.append(loss)
            lr = config.learning_rate
            m.w1 -= lr * grads.w1
            m.b1 -= lr * grads.b1
            m.w2 -= lr * grads.w2
            m.b2 -= lr * grads.b2
        trace.append(float(np.mean(losses)))
        if not all(np.all(np.isfinite(p)) for p in m.params().values()):
            raise FloatingPointError("model parameters diverged")
    return m, trace


def predict_probmap(
    model: Model,
    fused: np.ndarray,
    radius: int,
    include_position: bool = True,
    chunk: int = 8192,
) -> np.ndarray:
    """Per-pixel class probabilities for a standardized fused image."""
    feats = fusion.build_feature_matrix(fused, radius, include_position)
    if feats.shape[1] != model.in_dim:
        raise ValueError(
            f"feature dim {feats.shape[1]} does not match model in_dim {model.in_dim}"
        )
    h, w = np.asarray(fused).shape[:2]
    out = np.empty((h * w, model.n_classes), dtype=np.float32)
    for start in range(0, feats.shape[0], chunk):
        out[start : start + chunk] = forward_batch(model, feats[start : start + chunk])
    return out.reshape(h, w, model.n_classes)


def predict_labels(
    model: Model, fused: np.ndarray, radius: int, include_position: bool = True
) -> np.ndarray:
    probs = predict_probmap(model, fused, radius, include_position)
    return probs.argmax(axis=2).astype(np.uint8)


def save_model(path: str | Path, model: Model) -> None:
    """Versioned binary checkpoint: magic, u32 version/dims, float32 LE params."""
    parts = [
        CHECKPOINT_MAGIC,
        struct.pack("<IIII", CHECKPOINT_VERSION, model.in_dim, model.hidden_dim, model.n_classes),
    ]
    for name in ("w1", "b1", "w2", "b2"):
        parts.append(np.ascontiguousarray(model.params()[name], dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_model(path: str | Path) -> Model:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"bad checkpoint magic in {path!s}")
    if len(data) < 20:
        raise FormatError("truncated checkpoint header")
    version, in_dim, hidden, k = struct.unpack("<IIII", data[4:20])
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    sizes = [hidden * in_dim, hidden, k * hidden, k]
    if len(data) != 20 + 4 * sum(sizes):
        raise FormatError("checkpoint payload size mismatch")
    pos = 20
    arrays = []
    for count in sizes:
        arrays.append(np.frombuffer(data, dtype="<f4", count=count, offset=pos).astype(np.float64))
        pos += 4 * count
    return Model(
        w1=arrays[0].reshape(hidden, in_dim),
        b1=arrays[1],
        w2=arrays[2].reshape(k, hidden),
        b2=arrays[3],
    )
