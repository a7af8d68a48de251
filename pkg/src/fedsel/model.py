"""Dense ReLU classifier trained with minibatch SGD.

Parameters travel as ``ModelParams``: one flat vector per layer, holding the
``(fan_in, fan_out)`` weight matrix in row-major order followed by the bias.
A single-unit output layer means sigmoid + binary cross-entropy; otherwise
softmax + cross-entropy.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from fedsel._rng import make_rng
from fedsel.dataset import Dataset

DEFAULT_HIDDEN = 32


class TrainingDiverged(RuntimeError):
    """Raised when loss or parameters stop being finite during local training."""


@dataclass
class ModelParams:
    sizes: tuple[int, ...]
    layers: list[np.ndarray]

    def __post_init__(self) -> None:
        self.sizes = tuple(int(s) for s in self.sizes)
        if len(self.layers) != len(self.sizes) - 1:
            raise ValueError("one flat vector per layer expected")
        for l, (a, b) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            if self.layers[l].shape != (a * b + b,):
                raise ValueError(
                    f"layer {l} has {self.layers[l].shape[0]} values, expected {a * b + b}"
                )

    def copy(self) -> "ModelParams":
        return ModelParams(self.sizes, [v.copy() for v in self.layers])

    def flat(self) -> np.ndarray:
        return np.concatenate(self.layers)

    @classmethod
    def from_flat(cls, sizes: Sequence[int], vec: np.ndarray) -> "ModelParams":
        layers, start = [], 0
        for a, b in zip(sizes[:-1], sizes[1:]):
            layers.append(np.array(vec[start : start + a * b + b], dtype=np.float64))
            start += a * b + b
        if start != vec.shape[0]:
            raise ValueError("flat vector length does not match layer sizes")
        return cls(tuple(sizes), layers)

    def unpack(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """(W, b) views sharing memory with ``layers``."""
        out = []
        for v, (a, b) in zip(self.layers, zip(self.sizes[:-1], self.sizes[1:])):
            out.append((v[: a * b].reshape(a, b), v[a * b :]))
        return out

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.layers)

    def same_shape(self, other: "ModelParams") -> bool:
        return self.sizes == other.sizes


@dataclass
class ClientUpdate:
    client_id: int
    params: ModelParams
    num_examples: int
    train_loss: float


@dataclass
class TrainSettings:
    local_epochs: int = 1
    learning_rate: float = 0.02
    batch_size: int = 32
    proximal_mu: float = 0.0

    def __post_init__(self) -> None:
        if self.local_epochs < 1 or self.batch_size < 1:
            raise ValueError("local_epochs and batch_size must be positive")
        if self.learning_rate < 0 or self.proximal_mu < 0:
            raise ValueError("learning_rate and proximal_mu must be non-negative")


def default_architecture(n_features: int, n_classes: int) -> list[int]:
    return [n_features, DEFAULT_HIDDEN, n_classes]


def init_model(layer_sizes: Sequence[int], seed: int) -> ModelParams:
    """Glorot-uniform weights, zero biases."""
    if len(layer_sizes) < 2 or any(s < 1 for s in layer_sizes):
        raise ValueError("need at least two positive layer sizes")
    rng = make_rng(seed, "init")
    layers = []
    for a, b in zip(layer_sizes[:-1], layer_sizes[1:]):
        limit = np.sqrt(6.0 / (a + b))
        w = rng.uniform(-limit, limit, size=a * b)
        layers.append(np.concatenate([w, np.zeros(b)]))
    return ModelParams(tuple(layer_sizes), layers)


def _forward(params: ModelParams, x: np.ndarray):
    acts = [x]
    h = x
    wb = params.unpack()
    for W, b in wb[:-1]:
        h = np.maximum(h @ W + b, 0.0)
        acts.append(h)
    W, b = wb[-1]
    return acts, h @ W + b


def _probs(logits: np.ndarray) -> np.ndarray:
    if logits.shape[1] == 1:
        return 1.0 / (1.0 + np.exp(-logits))
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def predict_proba(params: ModelParams, x: np.ndarray) -> np.ndarray:
    _, logits = _forward(params, np.asarray(x, dtype=np.float64))
    return _probs(logits)


def predict(params: ModelParams, x: np.ndarray) -> np.ndarray:
    p = predict_proba(params, x)
    if p.shape[1] == 1:
        return (p[:, 0] > 0.5).astype(np.int64)
    return np.argmax(p, axis=1)


def loss_and_grad(
    params: ModelParams,
    x: np.ndarray,
    y: np.ndarray,
    anchor: ModelParams | None = None,
    mu: float = 0.0,
) -> tuple[float, list[np.ndarray]]:
    """Mean cross-entropy plus ``mu/2 * ||w - anchor||^2``, and its gradient per layer."""
    acts, logits = _forward(params, x)
    n = x.shape[0]
    if logits.shape[1] == 1:
        z = logits[:, 0]
        # log(1 + e^z) - y z, stable form
        loss = float(np.mean(np.logaddexp(0.0, z) - y * z))
        delta = ((1.0 / (1.0 + np.exp(-z))) - y)[:, None] / n
    else:
        zmax = logits.max(axis=1, keepdims=True)
        lse = zmax[:, 0] + np.log(np.exp(logits - zmax).sum(axis=1))
        loss = float(np.mean(lse - logits[np.arange(n), y]))
        delta = _probs(logits)
        delta[np.arange(n), y] -= 1.0
        delta /= n

    wb = params.unpack()
    grads: list[np.ndarray] = [None] * len(wb)  # type: ignore[list-item]
    for l in range(len(wb) - 1, -1, -1):
        W, _ = wb[l]
        grads[l] = np.concatenate([(acts[l].T @ delta).ravel(), delta.sum(axis=0)])
        if l:
            delta = (delta @ W.T) * (acts[l] > 0)

    if mu > 0 and anchor is not None:
        for l, (w, w0) in enumerate(zip(params.layers, anchor.layers)):
            diff = w - w0
            loss += 0.5 * mu * float(diff @ diff)
            grads[l] = grads[l] + mu * diff
    return loss, grads


def local_train(
    global_params: ModelParams, data: Dataset, settings: TrainSettings, seed: int, client_id: int = 0
) -> ClientUpdate:
    """Run ``local_epochs`` of minibatch SGD starting from a copy of ``global_params``.

    Minibatch order is a fresh permutation per epoch drawn from ``seed``. The
    proximal pull toward ``global_params`` is active when ``proximal_mu > 0``.
    """
    n = len(data)
    if n == 0:
        raise ValueError("cannot train on an empty dataset")
    if data.n_features != global_params.sizes[0]:
        raise ValueError(
            f"data has {data.n_features} features, model expects {global_params.sizes[0]}"
        )
    w = global_params.copy()
    lr, mu, bs = settings.learning_rate, settings.proximal_mu, settings.batch_size
    rng = make_rng(seed, "local_train")
    x_all, y_all = data.features, data.labels
    epoch_loss = 0.0
    for _ in range(settings.local_epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, bs):
            idx = order[start : start + bs]
            loss, grads = loss_and_grad(w, x_all[idx], y_all[idx], global_params, mu)
            if not np.isfinite(loss):
                raise TrainingDiverged(f"client {client_id}: non-finite loss")
            if lr:
                for layer, g in zip(w.layers, grads):
                    layer -= lr * g
            total += loss * idx.size
        epoch_loss = total / n
        if not w.is_finite():
            raise TrainingDiverged(f"client {client_id}: non-finite parameters")
    return ClientUpdate(client_id, w, n, epoch_loss)


def evaluate(params: ModelParams, data: Dataset) -> tuple[float, float]:
    """Accuracy of argmax predictions and mean cross-entropy."""
    if len(data) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    loss, _ = loss_and_grad(params, data.features, data.labels)
    acc = float(np.mean(predict(params, data.features) == data.labels))
    return acc, loss


# ---------------------------------------------------------------------------
# checkpoints: magic, layer count, sizes, then little-endian float64 values

_MAGIC = b"FSMP"


def save_params(params: ModelParams, path: str | Path) -> None:
    with Path(path).open("wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(params.sizes)))
        fh.write(struct.pack(f"<{len(params.sizes)}I", *params.sizes))
        fh.write(params.flat().astype("<f8").tobytes())


def load_params(path: str | Path) -> ModelParams:
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise ValueError(f"{path} is not a parameter checkpoint")
    (k,) = struct.unpack_from("<I", raw, 4)
    sizes = struct.unpack_from(f"<{k}I", raw, 8)
    vec = np.frombuffer(raw, dtype="<f8", offset=8 + 4 * k).astype(np.float64)
    return ModelParams.from_flat(sizes, vec)
