"""Local objectives F_k: per-example losses, exact gradients, mini-batch gradients.

Every objective works on a stack of ``m`` parameter vectors at once:
``theta`` has shape (m, D), features ``X`` (m, n, F), labels ``y`` (m, n) and
per-example weights ``w`` (m, n) whose rows sum to one.  Row ``i`` of the
result is the weighted mean loss (or its gradient) of parameter ``theta[i]``
over the examples ``X[i]``.  Single-dataset helpers (``loss``, ``grad``,
``stochastic_grad``) wrap this with m = 1.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np
from scipy.special import expit, log_softmax, softmax

from gifair.core import Split


class Objective:
    """Base class.  Subclasses implement ``param_dim`` and ``_evaluate``."""

    name: str = "objective"
    is_classifier: bool = True

    def param_dim(self, feature_dim: int) -> int:
        raise NotImplementedError

    def init_params(self, feature_dim: int, rng: np.random.Generator) -> np.ndarray:
        return np.zeros(self.param_dim(feature_dim))

    def _evaluate(self, theta, X, y, w, need_grad: bool):
        raise NotImplementedError

    def values(self, theta, X, y, w) -> np.ndarray:
        return self._evaluate(theta, X, y, w, need_grad=False)[0]

    def value_and_grad(self, theta, X, y, w) -> tuple[np.ndarray, np.ndarray]:
        return self._evaluate(theta, X, y, w, need_grad=True)

    def predict(self, theta, X) -> np.ndarray:
        raise NotImplementedError

    def _check(self, theta, X) -> None:
        d = self.param_dim(X.shape[-1])
        if theta.shape[-1] != d:
            raise ValueError(f"{self.name}: parameter dimension {theta.shape[-1]} != expected {d}")


@dataclass(frozen=True)
class Quadratic(Objective):
    """Mean of ``0.5 * ||theta - x||^2`` over the examples.

    The client's minimizer is the mean of its features, so a client whose
    examples scatter around a center c_k has F_k = 0.5||theta - c_k||^2 plus a
    constant (half the scatter variance).  Labels are ignored.
    """

    name = "quadratic"
    is_classifier = False

    def param_dim(self, feature_dim: int) -> int:
        return feature_dim

    def _evaluate(self, theta, X, y, w, need_grad):
        self._check(theta, X)
        diff = theta[:, None, :] - X
        vals = 0.5 * np.einsum("mn,mnf,mnf->m", w, diff, diff)
        if not need_grad:
            return vals, None
        return vals, np.einsum("mn,mnf->mf", w, diff)

    def predict(self, theta, X):
        raise TypeError("quadratic objective has no predictions")


@dataclass(frozen=True)
class Logistic(Objective):
    """Cross-entropy linear classifier with optional ridge penalty.

    Two classes use a single weight vector with a sigmoid link; more classes
    use a (C, F) softmax weight matrix.  There is no intercept: append a
    constant feature if one is wanted.
    """

    num_classes: int = 2
    l2: float = 0.0
    name = "logistic"

    def param_dim(self, feature_dim: int) -> int:
        return feature_dim if self.num_classes == 2 else self.num_classes * feature_dim

    def _evaluate(self, theta, X, y, w, need_grad):
        self._check(theta, X)
        penalty = 0.5 * self.l2 * np.einsum("md,md->m", theta, theta)
        if self.num_classes == 2:
            z = np.einsum("mnf,mf->mn", X, theta)
            per = np.logaddexp(0.0, z) - y * z
            vals = np.einsum("mn,mn->m", w, per) + penalty
            if not need_grad:
                return vals, None
            resid = (expit(z) - y) * w
            return vals, np.einsum("mn,mnf->mf", resid, X) + self.l2 * theta
        m, _, f = X.shape
        W = theta.reshape(m, self.num_classes, f)
        z = np.einsum("mnf,mcf->mnc", X, W)
        logp = log_softmax(z, axis=-1)
        per = -np.take_along_axis(logp, y[..., None].astype(np.intp), axis=-1)[..., 0]
        vals = np.einsum("mn,mn->m", w, per) + penalty
        if not need_grad:
            return vals, None
        resid = np.exp(logp)
        np.put_along_axis(resid, y[..., None].astype(np.intp),
                          np.take_along_axis(resid, y[..., None].astype(np.intp), axis=-1) - 1.0, axis=-1)
        g = np.einsum("mnc,mnf->mcf", resid * w[..., None], X).reshape(m, -1)
        return vals, g + self.l2 * theta

    def predict(self, theta, X):
        if self.num_classes == 2:
            return (np.einsum("mnf,mf->mn", X, theta) > 0).astype(np.int64)
        m, _, f = X.shape
        return np.einsum("mnf,mcf->mnc", X, theta.reshape(m, self.num_classes, f)).argmax(-1)


@dataclass(frozen=True)
class Mlp(Objective):
    """One tanh hidden layer, softmax cross-entropy head, ridge on all weights."""

    hidden: int = 8
    num_classes: int = 2
    l2: float = 0.0
    init_scale: float = 0.5
    name = "mlp"

    def param_dim(self, feature_dim: int) -> int:
        h, c = self.hidden, self.num_classes
        return h * feature_dim + h + c * h + c

    def init_params(self, feature_dim, rng):
        h, c = self.hidden, self.num_classes
        w1 = rng.normal(scale=self.init_scale / np.sqrt(feature_dim), size=h * feature_dim)
        w2 = rng.normal(scale=self.init_scale / np.sqrt(h), size=c * h)
        return np.concatenate([w1, np.zeros(h), w2, np.zeros(c)])

    def _unpack(self, theta, f):
        m = theta.shape[0]
        h, c = self.hidden, self.num_classes
        i = 0
        W1 = theta[:, i:i + h * f].reshape(m, h, f); i += h * f
        b1 = theta[:, i:i + h]; i += h
        W2 = theta[:, i:i + c * h].reshape(m, c, h); i += c * h
        b2 = theta[:, i:i + c]
        return W1, b1, W2, b2

    def _forward(self, theta, X):
        W1, b1, W2, b2 = self._unpack(theta, X.shape[-1])
        hid = np.tanh(np.einsum("mhf,mnf->mnh", W1, X) + b1[:, None, :])
        z = np.einsum("mch,mnh->mnc", W2, hid) + b2[:, None, :]
        return hid, z, W2

    def _evaluate(self, theta, X, y, w, need_grad):
        self._check(theta, X)
        hid, z, W2 = self._forward(theta, X)
        logp = log_softmax(z, axis=-1)
        yi = y[..., None].astype(np.intp)
        per = -np.take_along_axis(logp, yi, axis=-1)[..., 0]
        vals = np.einsum("mn,mn->m", w, per) + 0.5 * self.l2 * np.einsum("md,md->m", theta, theta)
        if not need_grad:
            return vals, None
        dz = softmax(z, axis=-1)
        np.put_along_axis(dz, yi, np.take_along_axis(dz, yi, axis=-1) - 1.0, axis=-1)
        dz *= w[..., None]
        g_W2 = np.einsum("mnc,mnh->mch", dz, hid)
        g_b2 = dz.sum(axis=1)
        dh = np.einsum("mnc,mch->mnh", dz, W2) * (1.0 - hid**2)
        g_W1 = np.einsum("mnh,mnf->mhf", dh, X)
        g_b1 = dh.sum(axis=1)
        m = theta.shape[0]
        g = np.concatenate([g_W1.reshape(m, -1), g_b1, g_W2.reshape(m, -1), g_b2], axis=1)
        return vals, g + self.l2 * theta

    def predict(self, theta, X):
        return self._forward(theta, X)[1].argmax(-1)


# ---------------------------------------------------------------------------
# single-dataset helpers


def _stack(theta, data: Split):
    theta = np.asarray(theta, dtype=np.float64)[None, :]
    n = len(data)
    if n == 0:
        raise ValueError("empty dataset")
    return theta, data.X[None], data.y[None], np.full((1, n), 1.0 / n)


def loss(objective: Objective, theta, data: Split) -> float:
    return float(objective.values(*_stack(theta, data))[0])


def grad(objective: Objective, theta, data: Split) -> np.ndarray:
    return objective.value_and_grad(*_stack(theta, data))[1][0]


def performance(objective: Objective, theta, data: Split) -> float:
    """Accuracy for classifiers; negative loss for the quadratic objective."""
    if not objective.is_classifier:
        return -loss(objective, theta, data)
    pred = objective.predict(np.asarray(theta, dtype=np.float64)[None], data.X[None])[0]
    return float(np.mean(pred == data.y))


@dataclass(frozen=True)
class BatchSpec:
    batch_size: int = 32
    sampling: Literal["with_replacement", "without_replacement_reshuffle"] = "without_replacement_reshuffle"

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.sampling not in ("with_replacement", "without_replacement_reshuffle"):
            raise ValueError(f"unknown batch sampling {self.sampling!r}")


class BatchStream:
    """Index stream for one client's mini-batches.

    ``without_replacement_reshuffle`` walks a fresh permutation per local epoch and
    drops a trailing partial batch; a batch at least as large as the data is
    always the full dataset.  Draws are buffered in fixed-size chunks so the
    stream only depends on the generator, never on how it is consumed.
    """

    CHUNK = 256

    def __init__(self, n: int, batch: BatchSpec, rng: np.random.Generator):
        self.n = n
        self.batch = batch
        self.rng = rng
        self.full = batch.batch_size >= n and batch.sampling == "without_replacement_reshuffle"
        self._buf = np.empty((0, batch.batch_size), dtype=np.intp)
        self._pos = 0

    def _refill(self) -> None:
        b = self.batch.batch_size
        if self.batch.sampling == "with_replacement":
            self._buf = self.rng.integers(0, self.n, size=(self.CHUNK, b))
        else:
            per_epoch = self.n // b
            epochs = max(1, self.CHUNK // per_epoch)
            perms = [self.rng.permutation(self.n)[: per_epoch * b] for _ in range(epochs)]
            self._buf = np.concatenate(perms).reshape(-1, b)
        self._pos = 0

    def next(self) -> np.ndarray:
        if self.full:
            return np.arange(self.n)
        if self._pos >= len(self._buf):
            self._refill()
        out = self._buf[self._pos]
        self._pos += 1
        return out


def stochastic_grad(objective: Objective, theta, data: Split, batch: BatchSpec,
                    rng: np.random.Generator) -> np.ndarray:
    idx = BatchStream(len(data), batch, rng).next()
    return grad(objective, theta, Split(data.X[idx], data.y[idx]))


def strong_convexity_constants(objective: Objective, feature_bound: float | None = None):
    """``(mu, L)`` for the convex objectives, ``None`` when unknown (MLP).

    For logistic the smoothness bound needs ``feature_bound`` >= max ||x||.
    """
    if isinstance(objective, Quadratic):
        return 1.0, 1.0
    if isinstance(objective, Logistic):
        if feature_bound is None:
            raise ValueError("logistic smoothness needs a feature norm bound")
        curvature = 0.25 if objective.num_classes == 2 else 0.5
        return objective.l2, objective.l2 + curvature * feature_bound**2
    return None


def make_objective(kind: str, **kwargs) -> Objective:
    table = {"quadratic": Quadratic, "logistic": Logistic, "mlp": Mlp}
    if kind not in table:
        raise ValueError(f"unknown objective {kind!r}")
    return table[kind](**kwargs)


def client_losses(objective: Objective, theta, fed, split: str = "train") -> np.ndarray:
    """F_k for every client of ``fed``; ``theta`` is shared (D,) or per-client (K, D)."""
    X, y, w = fed.arrays(split)
    theta = np.asarray(theta, dtype=np.float64)
    if theta.ndim == 1:
        theta = np.broadcast_to(theta, (fed.K, theta.shape[0]))
    return objective.values(theta, X, y, w)


def client_grads(objective: Objective, theta, fed, split: str = "train"):
    X, y, w = fed.arrays(split)
    theta = np.asarray(theta, dtype=np.float64)
    if theta.ndim == 1:
        theta = np.broadcast_to(theta, (fed.K, theta.shape[0]))
    return objective.value_and_grad(theta, X, y, w)


def client_performance(objective: Objective, theta, fed, split: str = "test") -> np.ndarray:
    """Per-client accuracy (classifiers) or negative loss (quadratic)."""
    if not objective.is_classifier:
        return -client_losses(objective, theta, fed, split)
    X, y, w = fed.arrays(split)
    theta = np.asarray(theta, dtype=np.float64)
    if theta.ndim == 1:
        theta = np.broadcast_to(theta, (fed.K, theta.shape[0]))
    real = w > 0
    hits = (objective.predict(theta, X) == y) & real
    return hits.sum(axis=1) / real.sum(axis=1)
