"""Small rectifier MLP classifier with an explicit penultimate feature layer.

Layers store weights as ``(fan_in, fan_out)`` so the forward pass is
``a @ W + b``. The last layer is the head (feature_dim -> 2 logits); every
layer before it belongs to the backbone, and the output of the final
backbone layer is the feature vector used for retrieval.

Parameters are addressed as a flat list ``[W0, b0, W1, b1, ..., W_head, b_head]``
and every gradient set uses the same order.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ._binio import Reader, frame, unframe, write_bytes
from .errors import DegenerateDatasetError, EmptyInputError, FormatError, InputShapeError

CHECKPOINT_MAGIC = b"FCKP"
CHECKPOINT_VERSION = 1
N_CLASSES = 2


@dataclass(frozen=True, eq=False)
class LabeledImage:
    pixels: np.ndarray  # (height, width) uint8
    label: int
    severity: float
    id: int

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.dtype != np.uint8 or px.ndim != 2:
            raise InputShapeError(f"image {self.id}: pixels must be a 2-D uint8 array, got {px.dtype} {px.shape}")
        if self.label not in (0, 1):
            raise ValueError(f"image {self.id}: label must be 0 or 1, got {self.label}")
        if self.label == 0 and self.severity != 0.0:
            raise ValueError(f"image {self.id}: negatives must have severity 0")
        if not 0.0 <= self.severity <= 1.0:
            raise ValueError(f"image {self.id}: severity {self.severity} outside [0, 1]")

    @property
    def shape(self):
        return self.pixels.shape


@dataclass(frozen=True)
class ClassWeights:
    w0: float
    w1: float

    def as_array(self) -> np.ndarray:
        return np.array([self.w0, self.w1], dtype=np.float64)


@dataclass
class Layer:
    weight: np.ndarray
    bias: np.ndarray


@dataclass
class GlobalModel:
    layers: list[Layer]
    version_tag: int = CHECKPOINT_VERSION
    _dims: tuple = field(init=False, repr=False)

    def __post_init__(self):
        if len(self.layers) < 2:
            raise InputShapeError("model needs at least one backbone layer and a head")
        for i, layer in enumerate(self.layers):
            layer.weight = np.ascontiguousarray(layer.weight, dtype=np.float64)
            layer.bias = np.ascontiguousarray(layer.bias, dtype=np.float64)
            if layer.weight.ndim != 2 or layer.bias.shape != (layer.weight.shape[1],):
                raise InputShapeError(f"layer {i}: weight {layer.weight.shape} / bias {layer.bias.shape} mismatch")
            if i and layer.weight.shape[0] != self.layers[i - 1].weight.shape[1]:
                raise InputShapeError(f"layer {i} does not chain onto layer {i - 1}")
            if not (np.all(np.isfinite(layer.weight)) and np.all(np.isfinite(layer.bias))):
                raise InputShapeError(f"layer {i} has non-finite parameters")
        if self.layers[-1].weight.shape[1] != N_CLASSES:
            raise InputShapeError("head must map to 2 logits")
        widths = [self.layers[0].weight.shape[0]] + [l.weight.shape[1] for l in self.layers[:-1]]
        self._dims = (widths[0], tuple(widths[1:-1]), widths[-1])

    # dims = (input_dim, hidden_dims, feature_dim)
    @property
    def dims(self) -> tuple:
        return self._dims

    @property
    def input_dim(self) -> int:
        return self._dims[0]

    @property
    def feature_dim(self) -> int:
        return self._dims[2]

    @property
    def backbone(self) -> list[Layer]:
        return self.layers[:-1]

    @property
    def head(self) -> Layer:
        return self.layers[-1]

    @property
    def n_backbone(self) -> int:
        return len(self.layers) - 1

    def params(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.extend((layer.weight, layer.bias))
        return out

    def head_param_indices(self) -> list[int]:
        n = len(self.layers)
        return [2 * (n - 1), 2 * (n - 1) + 1]

    def backbone_param_indices(self, last: int | None = None) -> list[int]:
        """Parameter indices of the last ``last`` backbone layers (all when None)."""
        nb = self.n_backbone
        last = nb if last is None else max(0, min(last, nb))
        out = []
        for i in range(nb - last, nb):
            out.extend((2 * i, 2 * i + 1))
        return out

    def with_params(self, params: Sequence[np.ndarray]) -> "GlobalModel":
        if len(params) != 2 * len(self.layers):
            raise InputShapeError("parameter list length does not match the model")
        layers = []
        for i, old in enumerate(self.layers):
            w, b = np.asarray(params[2 * i]), np.asarray(params[2 * i + 1])
            if w.shape != old.weight.shape or b.shape != old.bias.shape:
                raise InputShapeError(f"parameter shapes for layer {i} do not match")
            layers.append(Layer(w.copy(), b.copy()))
        return GlobalModel(layers, self.version_tag)

    def copy(self) -> "GlobalModel":
        return self.with_params(self.params())

    def equals(self, other: "GlobalModel") -> bool:
        """Bitwise parameter equality."""
        a, b = self.params(), other.params()
        return len(a) == len(b) and all(
            x.shape == y.shape and x.tobytes() == y.tobytes() for x, y in zip(a, b)
        )


def init_model(input_dim=1024, hidden_dims=(128,), feature_dim=64, seed=0) -> GlobalModel:
    """Fan-in scaled uniform initialisation, zero biases."""
    rng = np.random.default_rng(seed)
    widths = [input_dim, *hidden_dims, feature_dim, N_CLASSES]
    layers = []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        limit = np.sqrt(6.0 / fan_in)
        layers.append(Layer(rng.uniform(-limit, limit, size=(fan_in, fan_out)), np.zeros(fan_out)))
    return GlobalModel(layers)


def images_to_matrix(images: Sequence[LabeledImage], input_dim: int | None = None) -> np.ndarray:
    """Flatten and scale a batch of images to ``(n, input_dim)`` floats in [0, 1]."""
    if len(images) == 0:
        raise EmptyInputError("empty image batch")
    X = np.stack([np.asarray(im.pixels).reshape(-1) for im in images]).astype(np.float64) / 255.0
    if input_dim is not None and X.shape[1] != input_dim:
        raise InputShapeError(f"image has {X.shape[1]} pixels, model expects {input_dim}")
    return X


def _forward_cache(model: GlobalModel, X: np.ndarray):
    if X.ndim != 2 or X.shape[1] != model.input_dim:
        raise InputShapeError(f"input of shape {X.shape} does not match model input_dim {model.input_dim}")
    pre, acts = [], [X]
    a = X
    for layer in model.backbone:
        z = a @ layer.weight + layer.bias
        a = np.maximum(z, 0.0)
        pre.append(z)
        acts.append(a)
    logits = a @ model.head.weight + model.head.bias
    return pre, acts, logits


def forward_batch(model: GlobalModel, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Features and logits for a scaled input matrix."""
    _, acts, logits = _forward_cache(model, np.asarray(X, dtype=np.float64))
    return acts[-1], logits


def forward(model: GlobalModel, image: LabeledImage) -> tuple[np.ndarray, np.ndarray]:
    feats, logits = forward_batch(model, images_to_matrix([image], model.input_dim))
    return feats[0], logits[0]


def predict_proba(model: GlobalModel, X: np.ndarray) -> np.ndarray:
    """Positive-class probability per row of a scaled input matrix."""
    _, logits = forward_batch(model, X)
    d = logits[:, 1] - logits[:, 0]
    return 0.5 * (1.0 + np.tanh(0.5 * d))


def predict(model: GlobalModel, X: np.ndarray) -> np.ndarray:
    _, logits = forward_batch(model, X)
    return (logits[:, 1] > logits[:, 0]).astype(np.int64)


def _log_softmax(logits):
    m = logits.max(axis=1, keepdims=True)
    shifted = logits - m
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def loss_and_grads_arrays(model: GlobalModel, X: np.ndarray, y: np.ndarray, weights: ClassWeights,
                          mode: str = "batch_mean", indices: Sequence[int] | None = None):
    """Class-weighted softmax cross-entropy and its exact gradients.

    The per-example loss is ``w[y_i] * CE_i``. In ``per_example`` mode each
    returned array has a leading batch axis; ``batch_mean`` returns their sum
    over the batch divided by the batch size (the same reduction the
    DP optimiser performs, so the two paths agree bitwise when clipping and
    noise are disabled).

    ``indices`` restricts which parameters get gradients; the others are
    returned as ``None``.
    """
    if mode not in ("batch_mean", "per_example"):
        raise ValueError(f"unknown gradient mode {mode!r}")
    n = X.shape[0]
    if n == 0:
        raise EmptyInputError("empty batch")
    if weights.w0 <= 0 or weights.w1 <= 0:
        raise ValueError("class weights must be positive")
    y = np.asarray(y, dtype=np.int64)
    pre, acts, logits = _forward_cache(model, X)
    logp = _log_softmax(logits)
    cw = weights.as_array()[y]
    losses = -cw * logp[np.arange(n), y]
    onehot = np.zeros_like(logits)
    onehot[np.arange(n), y] = 1.0
    delta = cw[:, None] * (np.exp(logp) - onehot)

    wanted = set(range(2 * len(model.layers))) if indices is None else set(indices)
    lowest = min((i // 2 for i in wanted), default=len(model.layers))
    grads: list = [None] * (2 * len(model.layers))
    for li in range(len(model.layers) - 1, lowest - 1, -1):
        a_in = acts[li]
        if 2 * li in wanted:
            grads[2 * li] = a_in[:, :, None] * delta[:, None, :]
        if 2 * li + 1 in wanted:
            grads[2 * li + 1] = delta.copy()
        if li > lowest:
            delta = (delta @ model.layers[li].weight.T) * (pre[li - 1] > 0.0)

    if mode == "per_example":
        return float(losses.mean()), grads
    return float(losses.mean()), [None if g is None else g.sum(axis=0) / n for g in grads]


def loss_and_grads(model: GlobalModel, batch: Sequence[LabeledImage], weights: ClassWeights,
                   mode: str = "batch_mean", indices: Sequence[int] | None = None):
    if len(batch) == 0:
        raise EmptyInputError("empty batch")
    X = images_to_matrix(batch, model.input_dim)
    y = np.array([im.label for im in batch])
    return loss_and_grads_arrays(model, X, y, weights, mode, indices)


def class_weights_from_labels(labels) -> ClassWeights:
    labels = np.asarray(labels)
    n = labels.size
    n1 = int(np.count_nonzero(labels == 1))
    n0 = n - n1
    if n0 == 0 or n1 == 0:
        raise DegenerateDatasetError(f"dataset needs both classes (n0={n0}, n1={n1})")
    return ClassWeights(n / (2.0 * n0), n / (2.0 * n1))


def class_weights(dataset) -> ClassWeights:
    """Balanced inverse-frequency weights ``N / (2 N_c)`` over a dataset's training images."""
    images = getattr(dataset, "train", dataset)
    return class_weights_from_labels([im.label for im in images])


def input_gradient(model: GlobalModel, image: LabeledImage) -> np.ndarray:
    """d(positive logit) / d(scaled pixel), shaped like the image."""
    x = images_to_matrix([image], model.input_dim)
    pre, _, _ = _forward_cache(model, x)
    g = model.head.weight[:, 1][None, :]
    for li in range(model.n_backbone - 1, -1, -1):
        g = (g * (pre[li] > 0.0)) @ model.layers[li].weight.T
    return g.reshape(image.shape)


def saliency(model: GlobalModel, image: LabeledImage) -> np.ndarray:
    """Gradient x input attribution for the positive-class logit."""
    x = np.asarray(image.pixels, dtype=np.float64) / 255.0
    return input_gradient(model, image) * x


# -- checkpoints ---------------------------------------------------------------

def checkpoint_bytes(model: GlobalModel) -> bytes:
    input_dim, hidden, feature_dim = model.dims
    header = struct.pack(f"<II{len(hidden)}II", input_dim, len(hidden), *hidden, feature_dim)
    body = b"".join(np.ascontiguousarray(p, dtype="<f8").tobytes() for p in model.params())
    return frame(CHECKPOINT_MAGIC, model.version_tag, header + body)


def model_from_checkpoint_bytes(blob: bytes) -> GlobalModel:
    version, body = unframe(blob, CHECKPOINT_MAGIC, versions=(CHECKPOINT_VERSION,))
    r = Reader(body)
    input_dim, n_hidden = r.unpack("<II")
    if n_hidden > 64:
        raise FormatError(f"implausible hidden layer count {n_hidden}")
    hidden = r.unpack(f"<{n_hidden}I")
    (feature_dim,) = r.unpack("<I")
    widths = [input_dim, *hidden, feature_dim, N_CLASSES]
    layers = []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        w = np.frombuffer(r.take(8 * fan_in * fan_out), dtype="<f8").reshape(fan_in, fan_out)
        b = np.frombuffer(r.take(8 * fan_out), dtype="<f8")
        layers.append(Layer(w.astype(np.float64), b.astype(np.float64)))
    r.finish()
    return GlobalModel(layers, version)


def save_checkpoint(model: GlobalModel, path) -> Path:
    return write_bytes(path, checkpoint_bytes(model))


def load_checkpoint(path) -> GlobalModel:
    return model_from_checkpoint_bytes(Path(path).read_bytes())
