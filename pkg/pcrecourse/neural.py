"""Dense networks with exact reverse-mode gradients and Adam.

The same stack serves the classifier, the neighborhood encoder networks and
the recourse generator. Inputs may be a single vector ``(d,)`` or a batch
``(N, d)``; parameter gradients are summed over the batch.
"""

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit
from typing_extensions import Self

from pcrecourse.components import defaults
from pcrecourse.utils.logger import logger

RELU = "relu"
IDENTITY = "identity"
SIGMOID = "sigmoid"
ACTIVATIONS = (RELU, IDENTITY, SIGMOID)
MODEL_FORMAT_VERSION = 1
SCORE_EPS = 1e-7


@dataclass
class DenseLayer:
    """Affine map ``x @ weight + bias`` followed by an activation."""

    weight: np.ndarray
    bias: np.ndarray
    activation: str = IDENTITY

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"Unknown activation: {self.activation}")
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[1],):
            raise ValueError("Bias must have one entry per output unit")

    @property
    def input_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def output_dim(self) -> int:
        return self.weight.shape[1]


@dataclass
class GradientTape:
    """Activations cached by :meth:`MlpModel.forward` for one backward pass."""

    inputs: List[np.ndarray]
    pre_activations: List[np.ndarray]
    output: np.ndarray
    version: int
    single: bool


@dataclass
class AdamState:
    first: List[np.ndarray]
    second: List[np.ndarray]
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_model(cls, model: "MlpModel", lr: float = 1e-3) -> Self:
        params = model.parameters()
        return cls(
            first=[np.zeros_like(p) for p in params],
            second=[np.zeros_like(p) for p in params],
            lr=lr,
        )


class MlpModel:
    """A chain of dense layers."""

    def __init__(self, layers: Sequence[DenseLayer]):
        layers = list(layers)
        if not layers:
            raise ValueError("A model needs at least one layer")
        for prev, nxt in zip(layers, layers[1:]):
            if prev.output_dim != nxt.input_dim:
                raise ValueError(
                    f"Layer dims do not chain: {prev.output_dim} -> {nxt.input_dim}"
                )
        self.layers = layers
        self.version = 0

    @classmethod
    def init(
        cls,
        dims: Sequence[int],
        activations: Sequence[str],
        rng: np.random.Generator,
    ) -> Self:
        """Fan-in scaled uniform initialization, ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))``.

        Args:
            dims: Layer widths including input and output, e.g. ``[d, 20, 10, 1]``
            activations: One activation per layer
            rng: Source of the initial weights
        """
        if len(activations) != len(dims) - 1:
            raise ValueError("Need one activation per layer")
        layers = []
        for fan_in, fan_out, act in zip(dims[:-1], dims[1:], activations):
            bound = 1.0 / np.sqrt(fan_in)
            layers.append(
                DenseLayer(
                    weight=rng.uniform(-bound, bound, size=(fan_in, fan_out)),
                    bias=rng.uniform(-bound, bound, size=fan_out),
                    activation=act,
                )
            )
        return cls(layers)

    @property
    def input_dim(self) -> int:
        return self.layers[0].input_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].output_dim

    def parameters(self) -> List[np.ndarray]:
        params = []
        for layer in self.layers:
            params.extend([layer.weight, layer.bias])
        return params

    def forward(self, x: np.ndarray) -> Tuple[np.ndarray, GradientTape]:
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        h = np.atleast_2d(x)
        if h.shape[1] != self.input_dim:
            raise ValueError(f"Expected input dim {self.input_dim}, got {h.shape[1]}")
        inputs, pre = [], []
        for layer in self.layers:
            inputs.append(h)
            z = h @ layer.weight + layer.bias
            pre.append(z)
            h = _activate(z, layer.activation)
        tape = GradientTape(inputs, pre, h, self.version, single)
        return (h[0] if single else h), tape

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]

    def logits(self, x: np.ndarray) -> np.ndarray:
        """Pre-activation of the output layer."""
        _, tape = self.forward(x)
        z = tape.pre_activations[-1]
        return z[0] if tape.single else z

    def backward(
        self, tape: GradientTape, output_grad: np.ndarray, from_logits: bool = False
    ) -> Tuple[List[np.ndarray], np.ndarray]:
        """Reverse pass through the layers recorded in ``tape``.

        Args:
            tape: Tape returned by :meth:`forward` on this model
            output_grad: Gradient with respect to the output (same shape)
            from_logits: Treat ``output_grad`` as the gradient of the last
                pre-activation instead of the activated output

        Returns:
            ``(param_grads, input_grad)`` with param grads ordered like
            :meth:`parameters`
        """
        if tape.version != self.version:
            raise ValueError("Stale gradient tape: the model changed after forward")
        grad = np.atleast_2d(np.asarray(output_grad, dtype=float))
        if grad.shape != tape.output.shape:
            raise ValueError(f"Output grad shape {grad.shape} != output shape {tape.output.shape}")
        param_grads: List[np.ndarray] = []
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            if not (from_logits and i == len(self.layers) - 1):
                grad = grad * _activation_grad(tape.pre_activations[i], layer.activation)
            param_grads.append(grad.sum(axis=0))
            param_grads.append(tape.inputs[i].T @ grad)
            grad = grad @ layer.weight.T
        param_grads.reverse()
        return param_grads, (grad[0] if tape.single else grad)

    def copy(self) -> "MlpModel":
        return MlpModel(
            [DenseLayer(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers]
        )


def forward(model: MlpModel, x: np.ndarray) -> Tuple[np.ndarray, GradientTape]:
    return model.forward(x)


def backward(
    model: MlpModel, tape: GradientTape, output_grad: np.ndarray, from_logits: bool = False
) -> Tuple[List[np.ndarray], np.ndarray]:
    return model.backward(tape, output_grad, from_logits=from_logits)


def adam_step(model: MlpModel, state: AdamState, grads: Sequence[np.ndarray]) -> None:
    """Update ``model`` in place; invalidates outstanding tapes."""
    state.step += 1
    correction1 = 1.0 - state.beta1**state.step
    correction2 = 1.0 - state.beta2**state.step
    for param, grad, m, v in zip(model.parameters(), grads, state.first, state.second):
        m *= state.beta1
        m += (1.0 - state.beta1) * grad
        v *= state.beta2
        v += (1.0 - state.beta2) * grad * grad
        param -= state.lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
    model.version += 1


def binary_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean BCE on logits and its gradient with respect to the logits."""
    logits = np.asarray(logits, dtype=float).reshape(-1)
    labels = np.asarray(labels, dtype=float).reshape(-1)
    loss = np.where(labels > 0.5, np.logaddexp(0.0, -logits), np.logaddexp(0.0, logits))
    grad = (expit(logits) - labels) / logits.size
    return float(loss.mean()), grad


def fit_binary(
    model: MlpModel,
    x: np.ndarray,
    y: np.ndarray,
    epochs: int,
    batch_size: int,
    lr: float,
    rng: np.random.Generator,
) -> List[float]:
    """Mini-batch BCE training with Adam; returns the mean loss of every epoch."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    state = AdamState.for_model(model, lr=lr)
    history = []
    for epoch in range(epochs):
        order = rng.permutation(x.shape[0])
        losses, sizes = [], []
        for start in range(0, x.shape[0], batch_size):
            idx = order[start:start + batch_size]
            _, tape = model.forward(x[idx])
            loss, dz = binary_cross_entropy(tape.pre_activations[-1], y[idx])
            grads, _ = model.backward(tape, dz[:, None], from_logits=True)
            adam_step(model, state, grads)
            losses.append(loss)
            sizes.append(idx.size)
        history.append(float(np.average(losses, weights=sizes)))
        logger.debug(f"Epoch {epoch + 1}/{epochs}: loss {history[-1]:.5f}")
    return history


def train_classifier(
    x: np.ndarray,
    y: np.ndarray,
    epochs: int = defaults.CLASSIFIER["epochs"],
    batch_size: int = defaults.CLASSIFIER["batch_size"],
    lr: float = defaults.CLASSIFIER["lr"],
    seed: int = 0,
    hidden: Sequence[int] = tuple(defaults.CLASSIFIER["hidden"]),
) -> MlpModel:
    """Train the binary classifier ``d -> 20 -> 10 -> 1`` with a sigmoid output.

    Args:
        x: One-hot training table (N, d)
        y: Labels in {0, 1}
        epochs: Fixed epoch count
        batch_size: Mini-batch size
        lr: Adam learning rate
        seed: Seeds initialization and shuffling
        hidden: Hidden layer widths

    Returns:
        The trained model
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y).reshape(-1)
    if x.shape[0] == 0:
        raise ValueError("Cannot train a classifier on an empty table")
    if not set(np.unique(y)) <= {0, 1}:
        raise ValueError("Labels must be 0 or 1")
    if len(np.unique(y)) < 2:
        raise ValueError("Both classes must be present to train the classifier")
    rng = np.random.default_rng(seed)
    dims = [x.shape[1], *hidden, 1]
    model = MlpModel.init(dims, [RELU] * len(hidden) + [SIGMOID], rng)
    history = fit_binary(model, x, y, epochs, batch_size, lr, rng)
    accuracy = float(((predict_proba(model, x) >= 0.5) == (y == 1)).mean())
    logger.info(
        f"Trained classifier for {epochs} epochs: final loss {history[-1]:.4f}, "
        f"train accuracy {accuracy:.3f}"
    )
    return model


def predict_proba(model: MlpModel, x: np.ndarray) -> np.ndarray:
    """Scores ``f(x)`` in (0, 1), one per row; saturated sigmoids are clipped."""
    out = np.clip(model.predict(x), SCORE_EPS, 1.0 - SCORE_EPS)
    return out.reshape(-1) if np.ndim(out) > 1 else out


def select_threshold_youden(
    scores: Sequence[float], labels: Sequence[int], grid: Optional[Sequence[float]] = None
) -> float:
    """Grid point maximizing ``TPR - FPR``, positive when ``score >= tau``.

    Ties go to the smallest threshold.
    """
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels).reshape(-1) == 1
    if labels.all() or not labels.any():
        raise ValueError("Both classes must be present to select a threshold")
    grid = np.arange(1, 100) / 100.0 if grid is None else np.asarray(grid, dtype=float)
    predicted = scores[None, :] >= grid[:, None]
    tpr = (predicted & labels).sum(axis=1) / labels.sum()
    fpr = (predicted & ~labels).sum(axis=1) / (~labels).sum()
    best = int(np.argmax(tpr - fpr))
    logger.debug(f"Youden threshold {grid[best]:.2f} (J={tpr[best] - fpr[best]:.3f})")
    return float(grid[best])


def save_model(model: MlpModel, path, manifest: Optional[Dict[str, Any]] = None) -> Path:
    """Store layer dims, activations and weights in a versioned ``.npz`` file."""
    path = Path(path)
    arrays = {
        "format_version": np.array(MODEL_FORMAT_VERSION),
        "activations": np.array([l.activation for l in model.layers]),
        "manifest": np.array(json.dumps(manifest or {})),
    }
    for i, layer in enumerate(model.layers):
        arrays[f"weight_{i}"] = layer.weight
        arrays[f"bias_{i}"] = layer.bias
    with open(path, "wb") as f:
        np.savez(f, **arrays)
    return path


def load_model(path) -> Tuple[MlpModel, Dict[str, Any]]:
    """Inverse of :func:`save_model`; returns the model and its manifest."""
    with np.load(Path(path), allow_pickle=False) as data:
        version = int(data["format_version"])
        if version != MODEL_FORMAT_VERSION:
            raise ValueError(f"Unsupported model format version: {version}")
        layers = [
            DenseLayer(data[f"weight_{i}"].copy(), data[f"bias_{i}"].copy(), str(act))
            for i, act in enumerate(data["activations"])
        ]
        manifest = json.loads(str(data["manifest"]))
    return MlpModel(layers), manifest


def _activate(z: np.ndarray, activation: str) -> np.ndarray:
    if activation == RELU:
        return np.maximum(z, 0.0)
    if activation == SIGMOID:
        return expit(z)
    return z


def _activation_grad(z: np.ndarray, activation: str) -> np.ndarray:
    if activation == RELU:
        return (z > 0).astype(float)
    if activation == SIGMOID:
        s = expit(z)
        return s * (1.0 - s)
    return np.ones_like(z)
