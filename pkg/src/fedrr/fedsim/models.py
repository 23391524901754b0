"""Small differentiable classifiers used as client models.

All parameters live in one flat float64 vector so that updates can be handed
straight to the subspace code.  Losses and gradients are minibatch means.
"""

from __future__ import annotations

from abc import ABC, abstractmethod

import numpy as np


class LossModel(ABC):
    """Interface for a model with a flat parameter vector."""

    @property
    @abstractmethod
    def parameter_count(self) -> int: ...

    @abstractmethod
    def loss(self, params: np.ndarray, x: np.ndarray, y: np.ndarray) -> float:
        """Mean loss over the rows of ``x``."""

    @abstractmethod
    def gradient(self, params: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Gradient of :meth:`loss` with respect to ``params``."""

    @abstractmethod
    def init_params(self, rng: np.random.Generator) -> np.ndarray: ...


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _cross_entropy(logits: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient with respect to the logits."""
    logp = _log_softmax(logits)
    n = logits.shape[0]
    loss = -float(logp[np.arange(n), y].mean())
    dlogits = np.exp(logp)
    dlogits[np.arange(n), y] -= 1.0
    dlogits /= n
    return loss, dlogits


class SoftmaxRegression(LossModel):
    """Multinomial logistic regression ``softmax(W x + b)``."""

    def __init__(self, n_features: int, n_classes: int):
        self.n_features = int(n_features)
        self.n_classes = int(n_classes)

    @property
    def parameter_count(self) -> int:
        return self.n_classes * (self.n_features + 1)

    def _unpack(self, params):
        c, f = self.n_classes, self.n_features
        return params[: c * f].reshape(c, f), params[c * f :]

    def loss(self, params, x, y):
        w, b = self._unpack(params)
        return _cross_entropy(x @ w.T + b, y)[0]

    def gradient(self, params, x, y):
        w, b = self._unpack(params)
        _, dz = _cross_entropy(x @ w.T + b, y)
        return np.concatenate([(dz.T @ x).ravel(), dz.sum(axis=0)])

    def init_params(self, rng):
        return np.zeros(self.parameter_count)


class MLP(LossModel):
    """One hidden layer ReLU perceptron with a softmax output.

    Width controls over-parametrization: ``p = h (f + 1) + c (h + 1)``.
    The first-layer weights are stored input-major (``f x h``).
    """

    def __init__(self, n_features: int, n_hidden: int, n_classes: int):
        self.n_features = int(n_features)
        self.n_hidden = int(n_hidden)
        self.n_classes = int(n_classes)

    @property
    def parameter_count(self) -> int:
        f, h, c = self.n_features, self.n_hidden, self.n_classes
        return h * (f + 1) + c * (h + 1)

    def _unpack(self, params):
        f, h, c = self.n_features, self.n_hidden, self.n_classes
        i = 0
        w1 = params[i : i + f * h].reshape(f, h)
        i += f * h
        b1 = params[i : i + h]
        i += h
        w2 = params[i : i + h * c].reshape(h, c)
        i += h * c
        b2 = params[i : i + c]
        return w1, b1, w2, b2

    def _hidden(self, w1, b1, x):
        pre = x @ w1
        pre += b1
        return np.maximum(pre, 0.0, out=pre)

    def loss(self, params, x, y):
        w1, b1, w2, b2 = self._unpack(params)
        hidden = self._hidden(w1, b1, x)
        return _cross_entropy(hidden @ w2 + b2, y)[0]

    def gradient(self, params, x, y):
        w1, b1, w2, b2 = self._unpack(params)
        hidden = self._hidden(w1, b1, x)
        _, dz2 = _cross_entropy(hidden @ w2 + b2, y)
        grad = np.empty(self.parameter_count)
        f, h, c = self.n_features, self.n_hidden, self.n_classes
        dz1 = dz2 @ w2.T
        dz1 *= hidden > 0
        np.matmul(x.T, dz1, out=grad[: f * h].reshape(f, h))
        grad[f * h : f * h + h] = dz1.sum(axis=0)
        np.matmul(hidden.T, dz2, out=grad[f * h + h : f * h + h + h * c].reshape(h, c))
        grad[f * h + h + h * c :] = dz2.sum(axis=0)
        return grad

    def init_params(self, rng):
        f, h, c = self.n_features, self.n_hidden, self.n_classes
        # He-uniform for the ReLU layer, Glorot-uniform for the output layer
        lim1 = np.sqrt(6.0 / f)
        lim2 = np.sqrt(6.0 / (h + c))
        return np.concatenate(
            [
                rng.uniform(-lim1, lim1, f * h),
                np.zeros(h),
                rng.uniform(-lim2, lim2, h * c),
                np.zeros(c),
            ]
        )


def build_model(kind: str, n_features: int, n_classes: int, hidden: int = 0) -> LossModel:
    if kind == "logistic":
        return SoftmaxRegression(n_features, n_classes)
    if kind == "mlp":
        if hidden <= 0:
            raise ValueError("mlp needs a positive hidden width")
        return MLP(n_features, hidden, n_classes)
    raise ValueError(f"unknown model kind {kind!r}")
