"""Small models with analytic gradients: linear regression, softmax regression
and a two-layer perceptron.

Parameters are stored flat. Layouts (row-major):

* ``linreg``: ``[w_0 .. w_{D-1}, b]``
* ``logreg``: ``C`` rows of ``[w_c, b_c]``
* ``mlp2``: hidden layer ``H x (D+1)`` followed by output layer ``C x (H+1)``
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation
from .numkit import RngStream

KINDS = ("linreg", "logreg", "mlp2")
ACTIVATIONS = ("relu", "tanh")


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    input_dim: int
    num_classes: int = 1
    hidden_dim: int = 16
    activation: str = "relu"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ContractViolation(f"model kind must be one of {KINDS}, got {self.kind!r}")
        if self.input_dim < 1 or self.num_classes < 1 or self.hidden_dim < 1:
            raise ContractViolation("model dimensions must be positive")
        if self.kind == "linreg" and self.num_classes != 1:
            raise ContractViolation("linreg requires num_classes == 1")
        if self.activation not in ACTIVATIONS:
            raise ContractViolation(f"activation must be one of {ACTIVATIONS}")

    @property
    def dim(self) -> int:
        D, C, H = self.input_dim, self.num_classes, self.hidden_dim
        if self.kind == "linreg":
            return D + 1
        if self.kind == "logreg":
            return C * (D + 1)
        return H * (D + 1) + C * (H + 1)

    @property
    def is_classifier(self) -> bool:
        return self.kind != "linreg"

    def init(self, rng: RngStream) -> np.ndarray:
        """Initial weights: zeros for the linear models, Glorot-uniform for mlp2."""
        w = np.zeros(self.dim)
        if self.kind != "mlp2":
            return w
        gen = rng.generator()
        W1, _, W2, _ = _mlp_views(self, w)
        D, H, C = self.input_dim, self.hidden_dim, self.num_classes
        W1[...] = gen.uniform(-1, 1, size=(H, D)) * np.sqrt(6.0 / (D + H))
        W2[...] = gen.uniform(-1, 1, size=(C, H)) * np.sqrt(6.0 / (H + C))
        return w


@dataclass(frozen=True)
class Batch:
    features: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)


def _check(spec: ModelSpec, w, batch: Batch) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (spec.dim,):
        raise ContractViolation(f"weights have shape {w.shape}, model expects ({spec.dim},)")
    X = batch.features
    if X.ndim != 2 or X.shape[1] != spec.input_dim:
        raise ContractViolation(f"features have shape {X.shape}, model expects (n, {spec.input_dim})")
    if len(batch.labels) != X.shape[0] or X.shape[0] < 1:
        raise ContractViolation("batch must have n >= 1 rows with one label each")
    return w


def _mlp_views(spec: ModelSpec, w: np.ndarray):
    D, H, C = spec.input_dim, spec.hidden_dim, spec.num_classes
    first = w[: H * (D + 1)].reshape(H, D + 1)
    second = w[H * (D + 1) :].reshape(C, H + 1)
    return first[:, :D], first[:, D], second[:, :H], second[:, H]


def _activate(spec: ModelSpec, z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0.0) if spec.activation == "relu" else np.tanh(z)


def _activate_grad(spec: ModelSpec, z: np.ndarray, h: np.ndarray) -> np.ndarray:
    return (z > 0).astype(np.float64) if spec.activation == "relu" else 1.0 - h**2


def logits(spec: ModelSpec, w, X: np.ndarray) -> np.ndarray:
    """Raw model outputs: shape ``(n,)`` for linreg, ``(n, C)`` otherwise."""
    w = np.asarray(w, dtype=np.float64)
    D = spec.input_dim
    if spec.kind == "linreg":
        return X @ w[:D] + w[D]
    if spec.kind == "logreg":
        W = w.reshape(spec.num_classes, D + 1)
        return X @ W[:, :D].T + W[:, D]
    W1, b1, W2, b2 = _mlp_views(spec, w)
    return _activate(spec, X @ W1.T + b1) @ W2.T + b2


def preactivations(spec: ModelSpec, w, X: np.ndarray) -> np.ndarray | None:
    if spec.kind != "mlp2":
        return None
    W1, b1, _, _ = _mlp_views(spec, np.asarray(w, dtype=np.float64))
    return X @ W1.T + b1


def _log_softmax(z: np.ndarray) -> np.ndarray:
    zmax = z.max(axis=1, keepdims=True)
    return z - zmax - np.log(np.sum(np.exp(z - zmax), axis=1, keepdims=True))


def loss(spec: ModelSpec, w, batch: Batch) -> float:
    """Mean loss over the batch: half squared error for linreg, cross-entropy otherwise."""
    w = _check(spec, w, batch)
    out = logits(spec, w, batch.features)
    if spec.kind == "linreg":
        return float(np.mean(0.5 * (out - batch.labels) ** 2))
    y = np.asarray(batch.labels, dtype=np.int64)
    return float(-np.mean(_log_softmax(out)[np.arange(len(y)), y]))


def grad(spec: ModelSpec, w, batch: Batch) -> np.ndarray:
    w = _check(spec, w, batch)
    X = batch.features
    n, D = X.shape
    if spec.kind == "linreg":
        r = (X @ w[:D] + w[D] - batch.labels) / n
        return np.concatenate([X.T @ r, [r.sum()]])

    y = np.asarray(batch.labels, dtype=np.int64)
    if spec.kind == "logreg":
        W = w.reshape(spec.num_classes, D + 1)
        z = X @ W[:, :D].T + W[:, D]
        delta = np.exp(_log_softmax(z))
        delta[np.arange(n), y] -= 1.0
        delta /= n
        return np.hstack([delta.T @ X, delta.sum(axis=0)[:, None]]).ravel()

    W1, b1, W2, b2 = _mlp_views(spec, w)
    z1 = X @ W1.T + b1
    h = _activate(spec, z1)
    z2 = h @ W2.T + b2
    delta2 = np.exp(_log_softmax(z2))
    delta2[np.arange(n), y] -= 1.0
    delta2 /= n
    delta1 = (delta2 @ W2) * _activate_grad(spec, z1, h)
    g_first = np.hstack([delta1.T @ X, delta1.sum(axis=0)[:, None]])
    g_second = np.hstack([delta2.T @ h, delta2.sum(axis=0)[:, None]])
    return np.concatenate([g_first.ravel(), g_second.ravel()])


def fd_grad(spec: ModelSpec, w, batch: Batch, h: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient, one coordinate at a time."""
    if not 1e-7 <= h <= 1e-3:
        raise ContractViolation(f"finite-difference step must lie in [1e-7, 1e-3], got {h}")
    w = _check(spec, w, batch)
    out = np.empty_like(w)
    for j in range(w.size):
        wp, wm = w.copy(), w.copy()
        wp[j] += h
        wm[j] -= h
        out[j] = (loss(spec, wp, batch) - loss(spec, wm, batch)) / (2.0 * h)
    return out


def accuracy(spec: ModelSpec, w, data: Batch) -> float:
    """Fraction of rows whose argmax output equals the label (ties go to the lowest class)."""
    if not spec.is_classifier:
        raise ContractViolation("accuracy is only defined for classifiers")
    w = _check(spec, w, data)
    pred = np.argmax(logits(spec, w, data.features), axis=1)
    return float(np.mean(pred == np.asarray(data.labels)))
