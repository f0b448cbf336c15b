"""Synthetic client populations with controllable group heterogeneity."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Literal

import numpy as np

from gifair.core import (ClientDataset, ClientState, ConfigError, Federation, Split,
                         check_fractions, compute_pk, split_dataset, split_sizes)


@dataclass(frozen=True)
class QuadraticCenters:
    """Examples scattered around a per-client center.

    Client center = ``center_mean + heterogeneity * (g_i + center_spread * z_k)``
    with ``g_i, z_k ~ N(0, I)`` per group / client.  Per-group ``noise`` sets
    the scatter; the training split is shifted so its mean is exactly the
    client center.
    """

    kind: Literal["quadratic"] = "quadratic"
    dim: int = 2
    center_mean: float = 0.0
    center_spread: float = 0.5
    noise: tuple[float, ...] = (1.0,)


@dataclass(frozen=True)
class LogisticClusters:
    """Gaussian feature clusters labeled by a per-group linear rule.

    Group i has cluster mean ``heterogeneity * m_i`` and true weight
    ``w0 + heterogeneity * delta_i`` (scaled by ``rule_shift``); labels are
    ``argmax`` (``sign`` for two classes) of the rule, flipped with
    probability ``label_noise``.  A trailing constant feature acts as an
    intercept.
    """

    kind: Literal["logistic"] = "logistic"
    feature_dim: int = 5
    num_classes: int = 2
    label_noise: float = 0.05
    cluster_shift: float = 1.0
    rule_shift: float = 1.0


@dataclass(frozen=True)
class LabelSkew:
    """Each client holds ``classes_per_client`` of ``classes_total`` labels.

    Features are a shared class prototype plus noise, shifted per group by
    ``heterogeneity * g_i``.
    """

    kind: Literal["label_skew"] = "label_skew"
    feature_dim: int = 10
    classes_total: int = 10
    classes_per_client: int = 5
    prototype_scale: float = 2.0
    noise: float = 1.0


Generator = QuadraticCenters | LogisticClusters | LabelSkew


@dataclass(frozen=True)
class PopulationSpec:
    group_sizes: tuple[int, ...]
    examples: tuple[int, ...] | int = 50  # one count for everyone, or one per group
    generator: Generator = field(default_factory=QuadraticCenters)
    heterogeneity: float = 1.0
    split: tuple[float, float, float] = (0.7, 0.1, 0.2)

    @property
    def K(self) -> int:
        return sum(self.group_sizes)

    @property
    def d(self) -> int:
        return len(self.group_sizes)

    def examples_per_client(self) -> list[int]:
        if isinstance(self.examples, int):
            return [self.examples] * self.K
        if len(self.examples) != self.d:
            raise ConfigError(f"need one example count per group, got {len(self.examples)} for {self.d}")
        return [n for n, size in zip(self.examples, self.group_sizes) for _ in range(size)]

    def group_of(self) -> list[int]:
        return [i for i, size in enumerate(self.group_sizes) for _ in range(size)]

    def validate(self) -> None:
        if not self.group_sizes or any(s < 1 for s in self.group_sizes):
            raise ConfigError(f"every group needs at least one client, got {self.group_sizes}")
        if self.heterogeneity < 0:
            raise ConfigError("heterogeneity must be >= 0")
        check_fractions(self.split)
        if any(n < 3 for n in self.examples_per_client()):
            raise ConfigError("each client needs at least 3 examples")
        g = self.generator
        if isinstance(g, QuadraticCenters) and len(g.noise) not in (1, self.d):
            raise ConfigError("quadratic noise needs 1 or d entries")
        if isinstance(g, LogisticClusters) and g.num_classes < 2:
            raise ConfigError("need at least 2 classes")
        if isinstance(g, LabelSkew) and not 1 <= g.classes_per_client <= g.classes_total:
            raise ConfigError("classes_per_client must be in [1, classes_total]")


def train_sizes(spec: PopulationSpec) -> list[int]:
    return [split_sizes(n, spec.split)[0] for n in spec.examples_per_client()]


def generate_population(spec: PopulationSpec, seed: int) -> list[ClientState]:
    """K clients with split datasets; p_k from training-split sizes."""
    spec.validate()
    rng = np.random.default_rng([seed, 0xDA7A])
    g = spec.generator
    groups = spec.group_of()
    counts = spec.examples_per_client()
    centers = None
    if isinstance(g, QuadraticCenters):
        raw, centers = _quadratic(spec, g, rng, groups, counts)
    elif isinstance(g, LogisticClusters):
        raw = _logistic(spec, g, rng, groups, counts)
    else:
        raw = _label_skew(spec, g, rng, groups, counts)

    datasets = [split_dataset(X, y, spec.split, np.random.default_rng([seed, 0x5917, k]))
                for k, (X, y) in enumerate(raw)]
    if centers is not None:
        datasets = [_recenter(ds, center) for ds, center in zip(datasets, centers)]
    p = compute_pk([len(ds.train) for ds in datasets])
    return [ClientState(id=k, group=groups[k], p=float(p[k]), data=ds) for k, ds in enumerate(datasets)]


def _quadratic(spec, g, rng, groups, counts):
    group_dirs = rng.normal(size=(spec.d, g.dim))
    client_dirs = rng.normal(size=(spec.K, g.dim))
    noise = g.noise if len(g.noise) == spec.d else g.noise * spec.d
    centers = g.center_mean + spec.heterogeneity * (group_dirs[groups] + g.center_spread * client_dirs)
    out = []
    for k, n in enumerate(counts):
        X = centers[k] + noise[groups[k]] * rng.normal(size=(n, g.dim))
        out.append((X, np.zeros(n, dtype=np.int64)))
    return out, centers


def _recenter(ds: ClientDataset, center) -> ClientDataset:
    tr = ds.train
    shift = center - tr.X.mean(axis=0)
    return ClientDataset(Split(tr.X + shift, tr.y), ds.validation, ds.test)


def _logistic(spec, g, rng, groups, counts):
    f = g.feature_dim
    C = g.num_classes
    base = rng.normal(size=(C if C > 2 else 1, f))
    deltas = rng.normal(size=(spec.d,) + base.shape)
    means = rng.normal(size=(spec.d, f))
    out = []
    for k, n in enumerate(counts):
        i = groups[k]
        rule = base + spec.heterogeneity * g.rule_shift * deltas[i]
        X = spec.heterogeneity * g.cluster_shift * means[i] + rng.normal(size=(n, f))
        score = X @ rule.T
        y = (score[:, 0] > 0).astype(np.int64) if C == 2 else score.argmax(axis=1)
        flip = rng.random(n) < g.label_noise
        y = np.where(flip, rng.integers(0, C, size=n) if C > 2 else 1 - y, y)
        out.append((np.hstack([X / math.sqrt(f), np.ones((n, 1))]), y))
    return out


def _label_skew(spec, g, rng, groups, counts):
    protos = g.prototype_scale * rng.normal(size=(g.classes_total, g.feature_dim))
    shifts = rng.normal(size=(spec.d, g.feature_dim))
    out = []
    for k, n in enumerate(counts):
        labels = rng.choice(g.classes_total, size=g.classes_per_client, replace=False)
        y = rng.permutation(np.resize(labels, n))
        X = protos[y] + spec.heterogeneity * shifts[groups[k]] + g.noise * rng.normal(size=(n, g.feature_dim))
        out.append((X, y.astype(np.int64)))
    return out


def imbalance_population(spec: PopulationSpec, majority_fraction: float) -> PopulationSpec:
    """Two groups: ``round(f K)`` majority clients, each holding ``f/(1-f)`` times
    the minority's per-client example count."""
    if spec.d != 2:
        raise ConfigError("imbalance needs exactly two groups")
    if not 0.5 < majority_fraction < 1:
        raise ConfigError(f"majority fraction must be in (0.5, 1), got {majority_fraction}")
    K = spec.K
    n_major = min(K - 1, max(1, math.floor(majority_fraction * K + 0.5)))
    base = spec.examples if isinstance(spec.examples, int) else min(spec.examples)
    # round first so float noise in f/(1-f) cannot push an exact ratio up by one
    n_major_examples = math.ceil(round(base * majority_fraction / (1 - majority_fraction), 9))
    return replace(spec, group_sizes=(n_major, K - n_major), examples=(n_major_examples, base))


def population_federation(spec: PopulationSpec, seed: int) -> Federation:
    return Federation(generate_population(spec, seed))


# ---------------------------------------------------------------------------
# plain-text dump: one example per line, label then space-separated features


def dump_split(path, split: Split) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for x, y in zip(split.X, split.y):
            fh.write(" ".join([repr(int(y))] + [repr(float(v)) for v in x]) + "\n")


def load_split(path) -> Split:
    rows = [line.split() for line in Path(path).read_text(encoding="utf-8").splitlines() if line.strip()]
    y = np.array([int(r[0]) for r in rows], dtype=np.int64)
    X = np.array([[float(v) for v in r[1:]] for r in rows], dtype=np.float64)
    return Split(X, y)


def dump_population(directory, clients) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for c in clients:
        for name in ("train", "validation", "test"):
            dump_split(directory / f"client{c.id:03d}_{name}.txt", c.data.split(name))
