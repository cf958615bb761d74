"""
Fully connected tanh network for demand-level classification.

Input is the encoded (cell id, timestamp) feature vector, output is one
logit per demand level; softmax and cross-entropy are applied on top.
Everything runs in float64 numpy, with reverse-mode gradients written by
hand.

Shapes follow the usual convention: a layer holds W (out x in) and b (out,),
a batch X is (N x in) and produces (N x out).
"""

import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Callable, List, Sequence, Tuple

import numpy as np

import src.config as config
from src.app.errors import DimensionMismatch, EmptyBatch, InvalidWidths
from src.app.grid import CellId, DemandLevel, GridSpec, SlotId

if TYPE_CHECKING:
    from src.interfaces.optimizer import OptimizerInterface


@dataclass(frozen=True, eq=False)
class ModelParams:
    """Ordered (weight, bias) pairs; also used to carry gradients and Adam moments."""

    layers: Tuple[Tuple[np.ndarray, np.ndarray], ...]

    @property
    def layer_widths(self) -> List[int]:
        widths = [int(self.layers[0][0].shape[1])]
        widths.extend(int(w.shape[0]) for w, _ in self.layers)
        return widths

    @property
    def n_coordinates(self) -> int:
        return sum(w.size + b.size for w, b in self.layers)

    def arrays(self) -> List[np.ndarray]:
        """Flat list [W0, b0, W1, b1, ...]."""
        out: List[np.ndarray] = []
        for w, b in self.layers:
            out.extend((w, b))
        return out

    def map(self, fn: Callable[..., np.ndarray], *others: "ModelParams") -> "ModelParams":
        """Apply `fn` array-wise across this and `others` (same shapes)."""
        layers = []
        for index, (w, b) in enumerate(self.layers):
            layers.append(
                (
                    fn(w, *(o.layers[index][0] for o in others)),
                    fn(b, *(o.layers[index][1] for o in others)),
                )
            )
        return ModelParams(tuple(layers))

    def zeros_like(self) -> "ModelParams":
        return self.map(np.zeros_like)

    def copy(self) -> "ModelParams":
        return self.map(np.array)

    def same_shape(self, other: "ModelParams") -> bool:
        if len(self.layers) != len(other.layers):
            return False
        return all(
            w.shape == ow.shape and b.shape == ob.shape for (w, b), (ow, ob) in zip(self.layers, other.layers)
        )

    def equals(self, other: "ModelParams") -> bool:
        """Bit-exact equality of every coordinate."""
        return self.same_shape(other) and all(
            np.array_equal(a, o) for a, o in zip(self.arrays(), other.arrays())
        )

    def flatten(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(a * a)) for a in self.arrays())))


# Gradients share the parameter layout.
Gradients = ModelParams


def encode_features(cell: CellId, slot: SlotId, spec: GridSpec) -> np.ndarray:
    """[row, col] scaled to [0, 1] plus cyclic hour-of-day and day-of-week."""
    row_scale = spec.n_rows - 1 if spec.n_rows > 1 else 1
    col_scale = spec.n_cols - 1 if spec.n_cols > 1 else 1
    hour_angle = 2.0 * math.pi * slot.hour_of_day / 24.0
    dow_angle = 2.0 * math.pi * slot.day_of_week / 7.0
    return np.array(
        [
            cell.row / row_scale,
            cell.col / col_scale,
            math.sin(hour_angle),
            math.cos(hour_angle),
            math.sin(dow_angle),
            math.cos(dow_angle),
        ],
        dtype=np.float64,
    )


def init_params(layer_widths: Sequence[int], seed: int) -> ModelParams:
    """Glorot-uniform weights, zero biases, deterministic per seed.

    Raises:
        InvalidWidths: fewer than two widths, a non-positive width, or the
            widths do not run from the feature width to the class count
    """
    widths = list(layer_widths)
    if len(widths) < 2 or any(int(w) != w or w < 1 for w in widths):
        raise InvalidWidths(f"layer widths must be >= 2 positive integers, got {widths}")
    if widths[0] != config.N_FEATURES or widths[-1] != config.N_CLASSES:
        raise InvalidWidths(
            f"layer widths must run from {config.N_FEATURES} to {config.N_CLASSES}, got {widths}"
        )

    rng = np.random.default_rng(seed)
    layers = []
    for fan_in, fan_out in zip(widths, widths[1:]):
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        weight = rng.uniform(-limit, limit, size=(int(fan_out), int(fan_in)))
        layers.append((weight, np.zeros(int(fan_out), dtype=np.float64)))
    return ModelParams(tuple(layers))


def forward(params: ModelParams, x: np.ndarray) -> np.ndarray:
    """Logits for one feature vector (k,) or a batch (N x k)."""
    return _forward_trace(params, np.asarray(x, dtype=np.float64))[-1]


def softmax(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    shifted = a - np.max(a, axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / np.sum(exp, axis=-1, keepdims=True)


def one_hot(label: int, n_classes: int = config.N_CLASSES) -> np.ndarray:
    g = np.zeros(n_classes, dtype=np.float64)
    g[int(label)] = 1.0
    return g


def cross_entropy(p: np.ndarray, g: np.ndarray) -> float:
    """-sum_j g_j log p_j with p clamped to PROBABILITY_FLOOR."""
    p = np.maximum(np.asarray(p, dtype=np.float64), config.PROBABILITY_FLOOR)
    return float(-np.sum(np.asarray(g, dtype=np.float64) * np.log(p)))


def loss_batch(params: ModelParams, batch: Sequence[Tuple[np.ndarray, np.ndarray]]) -> float:
    """Mean cross-entropy over (features, one-hot) pairs."""
    x, g = _stack(batch)
    return loss_arrays(params, x, g)


def loss_arrays(params: ModelParams, x: np.ndarray, g: np.ndarray) -> float:
    if len(x) == 0:
        raise EmptyBatch("loss over an empty batch")
    p = np.maximum(softmax(forward(params, x)), config.PROBABILITY_FLOOR)
    return float(np.mean(-np.sum(g * np.log(p), axis=1)))


def backward(params: ModelParams, batch: Sequence[Tuple[np.ndarray, np.ndarray]]) -> Gradients:
    """Exact gradient of loss_batch with respect to every weight and bias."""
    x, g = _stack(batch)
    return backward_arrays(params, x, g)


def backward_arrays(params: ModelParams, x: np.ndarray, g: np.ndarray) -> Gradients:
    if len(x) == 0:
        raise EmptyBatch("gradient over an empty batch")
    trace = _forward_trace(params, np.asarray(x, dtype=np.float64))
    n = x.shape[0]

    # softmax + cross-entropy fused: dL/dlogits = (p - g) / N
    delta = (softmax(trace[-1]) - g) / n
    grads: List[Tuple[np.ndarray, np.ndarray]] = [None] * len(params.layers)  # type: ignore[list-item]
    for index in range(len(params.layers) - 1, -1, -1):
        weight, _ = params.layers[index]
        inputs = trace[index]
        grads[index] = (delta.T @ inputs, delta.sum(axis=0))
        if index > 0:
            # inputs = tanh(previous pre-activation)
            delta = (delta @ weight) * (1.0 - inputs * inputs)
    return ModelParams(tuple(grads))


def predict(params: ModelParams, x: np.ndarray) -> Tuple[DemandLevel, np.ndarray]:
    """Most probable level (lowest index on ties) and the probability vector."""
    p = softmax(forward(params, x))
    return DemandLevel(int(np.argmax(p))), p


def predict_labels(params: ModelParams, x: np.ndarray) -> np.ndarray:
    if len(x) == 0:
        return np.zeros(0, dtype=np.int64)
    return np.argmax(forward(params, x), axis=1).astype(np.int64)


def samples_to_arrays(samples: Sequence) -> Tuple[np.ndarray, np.ndarray]:
    """(N x k) features and (N,) integer labels from LabeledSample-like objects."""
    if not samples:
        return np.zeros((0, config.N_FEATURES)), np.zeros(0, dtype=np.int64)
    x = np.stack([s.features for s in samples]).astype(np.float64)
    y = np.array([int(s.label) for s in samples], dtype=np.int64)
    return x, y


def one_hot_rows(labels: np.ndarray, n_classes: int = config.N_CLASSES) -> np.ndarray:
    g = np.zeros((len(labels), n_classes), dtype=np.float64)
    g[np.arange(len(labels)), labels] = 1.0
    return g


def train_epochs(
    params: ModelParams,
    x: np.ndarray,
    labels: np.ndarray,
    epochs: int,
    optimizer: "OptimizerInterface",
    seed: int,
) -> ModelParams:
    """Run `epochs` passes of optimizer steps over (x, labels).

    Sets of at most MINI_BATCH_SIZE samples train full-batch (no randomness);
    larger sets use shuffled mini-batches of MINI_BATCH_SIZE drawn from a
    generator seeded with `seed`.
    """
    if len(x) == 0:
        raise EmptyBatch("training on an empty set")
    g = one_hot_rows(labels, params.layer_widths[-1])
    n = len(x)
    rng = np.random.default_rng(seed) if n > config.MINI_BATCH_SIZE else None

    for _ in range(epochs):
        if rng is None:
            params = optimizer.step(params, backward_arrays(params, x, g))
            continue
        order = rng.permutation(n)
        for start in range(0, n, config.MINI_BATCH_SIZE):
            batch = order[start : start + config.MINI_BATCH_SIZE]
            params = optimizer.step(params, backward_arrays(params, x[batch], g[batch]))
    return params


def _forward_trace(params: ModelParams, x: np.ndarray) -> List[np.ndarray]:
    """[h0, h1, ..., hL, logits]: the input of every layer, then the output."""
    input_width = params.layers[0][0].shape[1]
    if x.shape[-1] != input_width:
        raise DimensionMismatch(f"input width {x.shape[-1]} does not match model input {input_width}")

    trace = [x]
    h = x
    last = len(params.layers) - 1
    for index, (weight, bias) in enumerate(params.layers):
        z = h @ weight.T + bias
        h = z if index == last else np.tanh(z)
        trace.append(h)
    return trace


def _stack(batch: Sequence[Tuple[np.ndarray, np.ndarray]]) -> Tuple[np.ndarray, np.ndarray]:
    if len(batch) == 0:
        raise EmptyBatch("empty batch")
    x = np.stack([np.asarray(features, dtype=np.float64) for features, _ in batch])
    g = np.stack([np.asarray(target, dtype=np.float64) for _, target in batch])
    return x, g
