"""Shared domain types: client datasets, client state, group ledgers."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class ConfigError(ValueError):
    """Raised for invalid experiment or population configuration."""


@dataclass(frozen=True)
class Split:
    """One block of labeled examples: features ``X`` (n, F) and labels ``y`` (n,)."""

    X: np.ndarray
    y: np.ndarray

    def __post_init__(self) -> None:
        if self.X.ndim != 2:
            raise ValueError(f"features must be 2-d, got shape {self.X.shape}")
        if self.y.shape != (self.X.shape[0],):
            raise ValueError(f"label shape {self.y.shape} does not match {self.X.shape[0]} rows")

    def __len__(self) -> int:
        return self.X.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.X.shape[1]


@dataclass(frozen=True)
class ClientDataset:
    train: Split
    validation: Split
    test: Split

    def __len__(self) -> int:
        return len(self.train) + len(self.validation) + len(self.test)

    def split(self, name: str) -> Split:
        if name not in ("train", "validation", "test"):
            raise KeyError(name)
        return getattr(self, name)


@dataclass(frozen=True)
class ClientState:
    id: int
    group: int
    p: float
    data: ClientDataset
    theta: np.ndarray | None = None
    last_loss: float = 0.0


@dataclass(frozen=True)
class GroupLedger:
    group_sizes: np.ndarray
    group_losses: np.ndarray
    r: np.ndarray  # per-client ordering coefficient, integer dtype
    group_of: np.ndarray = field(repr=False)

    @property
    def group_r(self) -> np.ndarray:
        """Ordering coefficient of each group."""
        out = np.zeros(len(self.group_sizes), dtype=np.int64)
        out[self.group_of] = self.r
        return out


def compute_pk(sizes) -> np.ndarray:
    """Data-proportional client weights ``N_k / sum N_j``."""
    sizes = np.asarray(sizes)
    if sizes.size == 0:
        raise ConfigError("no clients")
    if np.any(sizes < 1):
        raise ConfigError(f"every client needs at least one example, got sizes {sizes.tolist()}")
    sizes = sizes.astype(np.float64)
    return sizes / sizes.sum()


def split_sizes(n: int, fractions: tuple[float, float, float]) -> tuple[int, int, int]:
    """Floor sizes for validation/test; the remainder goes to train."""
    n_val = math.floor(fractions[1] * n)
    n_test = math.floor(fractions[2] * n)
    return n - n_val - n_test, n_val, n_test


def check_fractions(fractions) -> tuple[float, float, float]:
    if len(fractions) != 3:
        raise ConfigError(f"need (train, validation, test) fractions, got {fractions!r}")
    fr = tuple(float(f) for f in fractions)
    if any(f <= 0 for f in fr) or abs(sum(fr) - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must be positive and sum to 1, got {fr}")
    return fr


def split_dataset(
    X: np.ndarray,
    y: np.ndarray,
    fractions=(0.7, 0.1, 0.2),
    rng: np.random.Generator | None = None,
) -> ClientDataset:
    """Shuffle and partition one client's examples into train/validation/test."""
    fractions = check_fractions(fractions)
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    n = X.shape[0]
    if n < 3:
        raise ConfigError(f"need at least 3 examples to split, got {n}")
    if rng is None:
        rng = np.random.default_rng(0)
    order = rng.permutation(n)
    n_train, n_val, _ = split_sizes(n, fractions)
    parts = np.split(order, [n_train, n_train + n_val])
    return ClientDataset(*(Split(X[idx], y[idx]) for idx in parts))


def _pad(splits: list[Split]):
    n_max = max(len(s) for s in splits)
    f = splits[0].feature_dim
    K = len(splits)
    X = np.zeros((K, n_max, f))
    y = np.zeros((K, n_max), dtype=splits[0].y.dtype)
    w = np.zeros((K, n_max))
    for k, s in enumerate(splits):
        n = len(s)
        X[k, :n] = s.X
        y[k, :n] = s.y
        if n:
            w[k, :n] = 1.0 / n
    return X, y, w


class Federation:
    """Read-only view of a client population as padded arrays.

    ``arrays(split)`` returns ``(X, y, w)`` with shapes (K, n_max, F),
    (K, n_max), (K, n_max); ``w`` holds 1/n_k on real rows and 0 on padding,
    so weighted sums over a row are the client's mean over that split.
    """

    def __init__(self, clients):
        clients = tuple(sorted(clients, key=lambda c: c.id))
        if not clients:
            raise ConfigError("no clients")
        if [c.id for c in clients] != list(range(len(clients))):
            raise ConfigError("client ids must be 0..K-1")
        self.clients = clients
        self.K = len(clients)
        self.p = np.array([c.p for c in clients], dtype=np.float64)
        if np.any(self.p <= 0) or abs(self.p.sum() - 1.0) > 1e-12:
            raise ConfigError("client weights must be positive and sum to 1")
        self.group_of = np.array([c.group for c in clients], dtype=np.int64)
        self.d = int(self.group_of.max()) + 1
        self.group_sizes = np.bincount(self.group_of, minlength=self.d)
        if np.any(self.group_sizes == 0):
            empty = np.flatnonzero(self.group_sizes == 0).tolist()
            raise ConfigError(f"groups {empty} have no clients")
        self.train_sizes = np.array([len(c.data.train) for c in clients])
        self.feature_dim = clients[0].data.train.feature_dim
        self._arrays: dict[str, tuple] = {}

    def arrays(self, split: str = "train"):
        if split not in self._arrays:
            self._arrays[split] = _pad([c.data.split(split) for c in self.clients])
        return self._arrays[split]

    def __len__(self) -> int:
        return self.K
