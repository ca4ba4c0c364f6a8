"""Context embeddings from a small feedforward regression network.

The network predicts log full-price basket value from raw customer
features; the activations of its penultimate layer are the context
embedding used by the downstream reward model.  Training is plain
mini-batch SGD with Adam and inverted dropout on the hidden layers,
implemented directly in numpy so the gradients are fully inspectable.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

__all__ = [
    "EmbeddingModel",
    "LinearBaseline",
    "extract_embedding",
    "load_embedding_model",
    "mse_loss",
    "predict_log_basket",
    "save_embedding_model",
    "train_embedding_model",
    "train_linear_baseline",
]

DEFAULT_LAYERS = (64, 16, 6, 1)
CHECKPOINT_VERSION = 1


def _activation(name: str):
    if name == "relu":
        return lambda z: np.maximum(z, 0.0), lambda z: (z > 0.0).astype(float)
    if name == "tanh":
        return np.tanh, lambda z: 1.0 - np.tanh(z) ** 2
    raise ValueError(f"unknown activation {name!r}")


def _validate_rows(features: np.ndarray, targets: np.ndarray | None) -> None:
    bad = np.flatnonzero(~np.all(np.isfinite(features), axis=1))
    if targets is not None and bad.size == 0:
        bad = np.flatnonzero(~np.isfinite(targets))
    if bad.size:
        raise ValueError(f"non-finite value at row {int(bad[0])}")


@dataclass
class EmbeddingModel:
    """Weights, normalization statistics and training metadata.

    ``weights[l]`` maps layer l activations to layer l+1 pre-activations
    (shape in x out); the embedding is the activation vector right
    before the final linear map.  Inference never applies dropout, so
    repeated forward passes are identical.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str = "relu"
    dropout_rate: float = 0.1
    feat_mean: np.ndarray | None = None
    feat_std: np.ndarray | None = None
    loss_history: list[float] = field(default_factory=list)

    @property
    def n_inputs(self) -> int:
        return self.weights[0].shape[0]

    @property
    def embedding_dim(self) -> int:
        return self.weights[-1].shape[0]

    def _standardize(self, X: np.ndarray) -> np.ndarray:
        if self.feat_mean is None:
            return X
        return (X - self.feat_mean) / self.feat_std

    def _forward(self, X: np.ndarray, masks: list[np.ndarray] | None = None):
        """Returns (pre-activations, activations); activations[0] is the input."""
        act, _ = _activation(self.activation)
        a = X
        pres, acts = [], [a]
        last = len(self.weights) - 1
        for l, (W, b) in enumerate(zip(self.weights, self.biases)):
            z = a @ W + b
            pres.append(z)
            a = z if l == last else act(z)
            if masks is not None and l < last:
                a = a * masks[l]
            acts.append(a)
        return pres, acts

    def embed(self, features: np.ndarray) -> np.ndarray:
        """Penultimate-layer activations, dropout disabled."""
        X = np.atleast_2d(np.asarray(features, dtype=float))
        _validate_rows(X, None)
        if X.shape[1] != self.n_inputs:
            raise ValueError(f"expected {self.n_inputs} features, got {X.shape[1]}")
        _, acts = self._forward(self._standardize(X))
        out = acts[-2]
        return out[0] if np.asarray(features).ndim == 1 else out

    def predict(self, features: np.ndarray) -> np.ndarray:
        """Predicted log basket value, dropout disabled."""
        X = np.atleast_2d(np.asarray(features, dtype=float))
        _validate_rows(X, None)
        if X.shape[1] != self.n_inputs:
            raise ValueError(f"expected {self.n_inputs} features, got {X.shape[1]}")
        _, acts = self._forward(self._standardize(X))
        out = acts[-1][:, 0]
        return float(out[0]) if np.asarray(features).ndim == 1 else out


def extract_embedding(model: EmbeddingModel, features: np.ndarray) -> np.ndarray:
    return model.embed(features)


def predict_log_basket(model: EmbeddingModel, features: np.ndarray):
    return model.predict(features)


def _loss_and_grads(model: EmbeddingModel, X: np.ndarray, y: np.ndarray, masks=None):
    """Mean squared error and its gradients w.r.t. every weight and bias.

    ``X`` must already be standardized; ``masks`` are the per-hidden-layer
    dropout masks (None for inference-style passes).
    """
    _, dact = _activation(model.activation)
    pres, acts = model._forward(X, masks)
    n = X.shape[0]
    resid = acts[-1][:, 0] - y
    loss = float(np.mean(resid**2))
    delta = (2.0 * resid / n)[:, None]
    grads_w = [None] * len(model.weights)
    grads_b = [None] * len(model.biases)
    for l in range(len(model.weights) - 1, -1, -1):
        grads_w[l] = acts[l].T @ delta
        grads_b[l] = delta.sum(axis=0)
        if l > 0:
            delta = delta @ model.weights[l].T
            if masks is not None:
                delta = delta * masks[l - 1]
            delta = delta * dact(pres[l - 1])
    return loss, grads_w, grads_b


def mse_loss(model: EmbeddingModel, features: np.ndarray, targets: np.ndarray) -> float:
    """Training-objective value with dropout disabled (standardizes internally)."""
    X = model._standardize(np.atleast_2d(np.asarray(features, dtype=float)))
    loss, _, _ = _loss_and_grads(model, X, np.asarray(targets, dtype=float))
    return loss


class _Adam:
    def __init__(self, params: list[np.ndarray], lr: float, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        self.t += 1
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g**2
            m_hat = m / (1 - self.b1**self.t)
            v_hat = v / (1 - self.b2**self.t)
            p -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def train_embedding_model(
    features: np.ndarray,
    targets: np.ndarray,
    *,
    layers: Sequence[int] = DEFAULT_LAYERS,
    learning_rate: float = 0.001,
    dropout_rate: float = 0.1,
    batch_size: int = 256,
    epochs: int = 30,
    seed: int = 0,
    activation: str = "relu",
    standardize: bool = True,
) -> EmbeddingModel:
    """Fit the embedding network; fully reproducible given ``seed``.

    ``layers`` are the output sizes of successive layers and must end in
    1 (the log-value head); the penultimate entry is the embedding
    dimension.  Features are z-scored on the training split and the
    statistics are stored with the model for inference.
    """
    X = np.atleast_2d(np.asarray(features, dtype=float))
    y = np.asarray(targets, dtype=float)
    if X.shape[0] == 0:
        raise ValueError("training dataset is empty")
    if X.shape[0] != y.shape[0]:
        raise ValueError("features and targets must align")
    _validate_rows(X, y)
    layers = tuple(int(w) for w in layers)
    if layers[-1] != 1 or len(layers) < 2:
        raise ValueError(f"layer widths must end in 1, got {layers}")

    rng = np.random.default_rng(seed)
    sizes = (X.shape[1],) + layers
    gain = 2.0 if activation == "relu" else 1.0
    weights = [
        rng.normal(0.0, np.sqrt(gain / fan_in), size=(fan_in, fan_out))
        for fan_in, fan_out in zip(sizes, sizes[1:])
    ]
    biases = [np.zeros(fan_out) for fan_out in sizes[1:]]

    if standardize:
        feat_mean = X.mean(axis=0)
        feat_std = np.maximum(X.std(axis=0), 1e-8)
    else:
        feat_mean = np.zeros(X.shape[1])
        feat_std = np.ones(X.shape[1])
    model = EmbeddingModel(
        weights=weights,
        biases=biases,
        activation=activation,
        dropout_rate=dropout_rate,
        feat_mean=feat_mean,
        feat_std=feat_std,
    )
    Xs = model._standardize(X)

    params = model.weights + model.biases
    opt = _Adam(params, learning_rate)
    n = X.shape[0]
    keep = 1.0 - dropout_rate
    n_hidden = len(layers) - 1
    for _ in range(epochs):
        order = rng.permutation(n)
        epoch_loss, n_batches = 0.0, 0
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            masks = None
            if dropout_rate > 0.0:
                masks = [
                    (rng.random((idx.size, layers[l])) < keep) / keep
                    for l in range(n_hidden)
                ]
            loss, gw, gb = _loss_and_grads(model, Xs[idx], y[idx], masks)
            opt.step(params, gw + gb)
            epoch_loss += loss
            n_batches += 1
        model.loss_history.append(epoch_loss / max(n_batches, 1))
    return model


def save_embedding_model(model: EmbeddingModel, path) -> None:
    """Versioned flat checkpoint: shapes, weights, normalization stats."""
    payload = {
        "version": np.array(CHECKPOINT_VERSION),
        "n_layers": np.array(len(model.weights)),
        "activation": np.array(model.activation),
        "dropout_rate": np.array(model.dropout_rate),
        "feat_mean": model.feat_mean,
        "feat_std": model.feat_std,
        "loss_history": np.asarray(model.loss_history),
    }
    for l, (W, b) in enumerate(zip(model.weights, model.biases)):
        payload[f"W{l}"] = W
        payload[f"b{l}"] = b
    np.savez(Path(path), **payload)


def load_embedding_model(path) -> EmbeddingModel:
    with np.load(Path(path)) as data:
        version = int(data["version"])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported embedding checkpoint version {version}")
        n_layers = int(data["n_layers"])
        return EmbeddingModel(
            weights=[data[f"W{l}"] for l in range(n_layers)],
            biases=[data[f"b{l}"] for l in range(n_layers)],
            activation=str(data["activation"]),
            dropout_rate=float(data["dropout_rate"]),
            feat_mean=data["feat_mean"],
            feat_std=data["feat_std"],
            loss_history=list(data["loss_history"]),
        )


@dataclass
class LinearBaseline:
    """Least-squares regression baseline (optionally ridge-regularized)."""

    coef: np.ndarray
    intercept: float

    def predict(self, features: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(features, dtype=float))
        out = X @ self.coef + self.intercept
        return float(out[0]) if np.asarray(features).ndim == 1 else out


def train_linear_baseline(
    features: np.ndarray, targets: np.ndarray, *, ridge: float = 0.0
) -> LinearBaseline:
    """Closed-form (regularized) least squares with an intercept.

    With ``ridge = 0`` the design matrix must have full column rank;
    all-constant feature columns are flagged because they alias the
    intercept.  Any positive ridge keeps the solution finite regardless.
    """
    X = np.atleast_2d(np.asarray(features, dtype=float))
    y = np.asarray(targets, dtype=float)
    if X.shape[0] == 0:
        raise ValueError("training dataset is empty")
    _validate_rows(X, y)
    if ridge < 0.0:
        raise ValueError("ridge penalty must be non-negative")
    if ridge == 0.0:
        constant = np.flatnonzero(X.std(axis=0) == 0.0)
        if constant.size:
            raise ValueError(
                f"feature column {int(constant[0])} is constant; "
                "use ridge > 0 or drop the column"
            )
    design = np.hstack([np.ones((X.shape[0], 1)), X])
    gram = design.T @ design
    if ridge > 0.0:
        penalty = ridge * np.eye(design.shape[1])
        penalty[0, 0] = 0.0  # the intercept is not shrunk
        gram = gram + penalty
        beta = np.linalg.solve(gram, design.T @ y)
    else:
        beta, _, rank, _ = np.linalg.lstsq(design, y, rcond=None)
        if rank < design.shape[1]:
            raise ValueError("design matrix is rank-deficient; use ridge > 0")
    return LinearBaseline(coef=beta[1:], intercept=float(beta[0]))
