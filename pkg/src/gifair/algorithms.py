"""Training loops: FedAvg, fairness-weighted global training, personalized variant.

All three share one round engine.  Per round the server computes each
client's weight ``1 + lam r_k / (p_k |A_{s_k}|)`` from the current group
losses, samples clients, and broadcasts the model plus the single scalar
``lam r_k / (p_k |A_{s_k}|)``.  Selected clients run ``E`` SGD steps with
that fixed weight scaling every gradient, the server aggregates, and the
group losses are refreshed.  With ``lam = 0`` the weights are exactly 1.0 and
the loop is FedAvg.

Selected clients are updated together as one stacked array; each client
draws mini-batches from its own generator keyed by (seed, client id), so the
trajectory does not depend on evaluation order.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Literal

import numpy as np

from gifair import fairness
from gifair.core import ConfigError, Federation, GroupLedger, Split
from gifair.objectives import BatchSpec, BatchStream, Objective, client_losses

log = logging.getLogger(__name__)

ALGORITHMS = ("fedavg", "gifair_global", "gifair_per")

_SAMPLING_STREAM = 0x5A3
_BATCH_STREAM = 0xB47
_INIT_STREAM = 0x1417


# ---------------------------------------------------------------------------
# learning-rate schedules, indexed by global step t (and round c)


@dataclass(frozen=True)
class InverseTime:
    """``beta / (t + gamma)``."""

    beta: float
    gamma: float

    def __post_init__(self):
        if self.beta <= 0 or self.gamma <= 0:
            raise ConfigError("inverse_time needs beta > 0 and gamma > 0")

    def __call__(self, t: int, c: int) -> float:
        return self.beta / (t + self.gamma)


@dataclass(frozen=True)
class ExpDecayPerRound:
    """``initial * decay ** c`` (constant inside a round)."""

    initial: float
    decay: float = 0.99

    def __post_init__(self):
        if self.initial <= 0 or not 0 < self.decay <= 1:
            raise ConfigError("exp_decay needs initial > 0 and 0 < decay <= 1")

    def __call__(self, t: int, c: int) -> float:
        return self.initial * self.decay**c


@dataclass(frozen=True)
class InverseSqrt:
    """``c0 / sqrt(t + 1)``."""

    c0: float

    def __post_init__(self):
        if self.c0 <= 0:
            raise ConfigError("inverse_sqrt needs c0 > 0")

    def __call__(self, t: int, c: int) -> float:
        return self.c0 / math.sqrt(t + 1)


Schedule = InverseTime | ExpDecayPerRound | InverseSqrt


def max_stable_lr(lam: float, fed: Federation, smoothness: float) -> float:
    """Step-size ceiling ``1 / (4 (1 + (d-1) lam / min_k p_k|A_{s_k}|) L)``."""
    scale = float(np.min(fed.p * fed.group_sizes[fed.group_of]))
    return 1.0 / (4.0 * (1.0 + (fed.d - 1) * lam / scale) * smoothness)


# ---------------------------------------------------------------------------
# client sampling and aggregation


@dataclass(frozen=True)
class SamplingScheme:
    """``by_weight``: draw by p_k, plain mean.  ``uniform``: draw uniformly,
    aggregate ``K/|S| * sum p_k theta_k``."""

    kind: Literal["by_weight", "uniform"] = "by_weight"
    fraction: float = 1.0

    def __post_init__(self):
        if self.kind not in ("by_weight", "uniform"):
            raise ConfigError(f"unknown sampling scheme {self.kind!r}")
        if not 0 < self.fraction <= 1:
            raise ConfigError(f"participation fraction must be in (0, 1], got {self.fraction}")

    def count(self, K: int) -> int:
        return min(K, max(1, math.floor(self.fraction * K + 0.5)))


def sample_clients(scheme: SamplingScheme, p, K: int, rng: np.random.Generator) -> np.ndarray:
    """Sorted ids of this round's distinct participants."""
    m = scheme.count(K)
    if m == K:
        return np.arange(K)
    if scheme.kind == "uniform":
        return np.sort(rng.choice(K, size=m, replace=False))
    # sequential draws, renormalizing over the clients not yet taken
    weights = np.array(p, dtype=np.float64)
    chosen = []
    for _ in range(m):
        cdf = np.cumsum(weights)
        k = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
        k = min(k, K - 1)
        while weights[k] == 0:  # guard against landing on a zeroed entry at a cdf edge
            k -= 1
        chosen.append(k)
        weights[k] = 0.0
    return np.sort(np.array(chosen))


def aggregate(thetas, p_selected, scheme: SamplingScheme, K: int) -> np.ndarray:
    thetas = np.asarray(thetas, dtype=np.float64)
    if thetas.shape[0] == 0:
        raise ValueError("cannot aggregate an empty selection")
    if scheme.kind == "by_weight":
        return thetas.mean(axis=0)
    return (K / thetas.shape[0]) * np.einsum("k,kd->d", np.asarray(p_selected), thetas)


# ---------------------------------------------------------------------------
# plan, broadcast payload, per-round record


@dataclass(frozen=True)
class TrainPlan:
    algorithm: Literal["fedavg", "gifair_global", "gifair_per"] = "fedavg"
    rounds: int = 100
    local_steps: int = 1
    batch: BatchSpec = field(default_factory=BatchSpec)
    schedule: Schedule = field(default_factory=lambda: ExpDecayPerRound(0.1, 0.99))
    sampling: SamplingScheme = field(default_factory=SamplingScheme)
    lam: float = 0.0
    r_mode: Literal["stale", "exact"] = "stale"
    initial_group_losses: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"unknown algorithm {self.algorithm!r}")
        if self.rounds < 1 or self.local_steps < 1:
            raise ConfigError("rounds and local_steps must be >= 1")
        if self.r_mode not in ("stale", "exact"):
            raise ConfigError(f"unknown r_mode {self.r_mode!r}")
        if self.algorithm == "gifair_per" and self.r_mode == "exact":
            raise ConfigError("gifair_per orders groups by personalized losses; r_mode must be 'stale'")
        if self.lam < 0:
            raise ConfigError("lambda must be non-negative")

    @property
    def effective_lam(self) -> float:
        return 0.0 if self.algorithm == "fedavg" else self.lam

    def validate(self, fed: Federation) -> None:
        lam_max = fairness.lambda_max(fed.p, fed.group_sizes, fed.group_of, fed.d)
        if self.effective_lam > 0 and self.effective_lam >= lam_max:
            raise ConfigError(f"lambda={self.effective_lam!r} must be below lambda_max={lam_max!r}")
        if self.initial_group_losses is not None and len(self.initial_group_losses) != fed.d:
            raise ConfigError(f"initial_group_losses needs {fed.d} entries")


@dataclass(frozen=True)
class Broadcast:
    """What one selected client receives: the model and one scalar.

    The scalar is the product ``lam r_k / (p_k |A_{s_k}|)``; its factors are
    never sent separately.
    """

    theta: np.ndarray
    coefficient: float

    @property
    def weight(self) -> float:
        return 1.0 + self.coefficient

    def to_dict(self) -> dict:
        return {"theta": self.theta.tolist(), "coefficient": float(self.coefficient)}


@dataclass
class RoundRecord:
    """Log of one communication round.

    ``group_losses``/``r``/``weights`` are the values the round trained with;
    ``objective`` and the ``loss_*`` summaries describe the model after
    aggregation (per-client training losses of the deployed model: the
    aggregate for global training, each client's own parameter for the
    personalized variant).
    """

    round: int
    selected: list[int]
    theta: np.ndarray
    group_losses: np.ndarray
    r: np.ndarray
    weights: np.ndarray
    objective: float
    loss_mean: float
    loss_var: float
    loss_discrepancy: float
    lr: float
    diverged: bool = False

    def to_dict(self) -> dict:
        out = asdict(self)
        for key in ("theta", "group_losses", "r", "weights"):
            out[key] = np.asarray(out[key]).tolist()
        return out


@dataclass
class RunResult:
    theta: np.ndarray
    records: list[RoundRecord]
    personal: np.ndarray | None = None
    diverged: bool = False
    personal_history: list[np.ndarray] | None = None


class Divergence(FloatingPointError):
    pass


# ---------------------------------------------------------------------------
# local training


def _local_sgd(objective: Objective, start, weights, E: int, schedule, c: int,
               X, y, streams) -> np.ndarray:
    """E weighted SGD steps for a stack of clients (rows of ``start``).

    ``X``/``y`` are the selected clients' padded training arrays and
    ``streams`` their batch streams, in the same order.
    """
    theta = np.array(start, dtype=np.float64)
    m = theta.shape[0]
    rows = np.arange(m)[:, None]
    scale = np.asarray(weights, dtype=np.float64)[:, None]
    for j in range(E):
        t = c * E + j
        eta = schedule(t, c)
        idx = [s.next() for s in streams]
        sizes = {len(i) for i in idx}
        if len(sizes) == 1:
            idx = np.stack(idx)
            w = np.full(idx.shape, 1.0 / idx.shape[1])
        else:
            b = max(sizes)
            padded = np.zeros((m, b), dtype=np.intp)
            w = np.zeros((m, b))
            for i, ix in enumerate(idx):
                padded[i, : len(ix)] = ix
                w[i, : len(ix)] = 1.0 / len(ix)
            idx = padded
        _, g = objective.value_and_grad(theta, X[rows, idx], y[rows, idx], w)
        theta -= (eta * scale) * g
        if not np.all(np.isfinite(theta)):
            raise Divergence(f"non-finite parameter at step {t}")
    return theta


def local_update(theta_start, weight: float, E: int, schedule, objective: Objective,
                 data: Split, batch: BatchSpec, rng: np.random.Generator, round_index: int = 0):
    """One client's E SGD steps with a fixed gradient multiplier ``weight``."""
    if weight <= 0:
        raise ValueError(f"client weight must be positive, got {weight}")
    if E < 1:
        raise ValueError("E must be >= 1")
    stream = BatchStream(len(data), batch, rng)
    out = _local_sgd(objective, np.asarray(theta_start, dtype=np.float64)[None], [weight], E,
                     schedule, round_index, data.X[None], data.y[None], [stream])
    return out[0]


def refresh_r(fed: Federation, r_mode: str, theta_bar, objective: Objective,
              last_losses=None) -> GroupLedger:
    """Group ledger for the next round.

    ``stale``: ``last_losses`` holds post-update losses for this round's
    participants and the most recent known loss for everyone else.
    ``exact``: every client's loss at the fresh aggregate.
    """
    if r_mode == "exact":
        losses = client_losses(objective, theta_bar, fed)
    elif r_mode == "stale":
        if last_losses is None:
            raise ValueError("stale refresh needs the clients' last losses")
        losses = np.asarray(last_losses, dtype=np.float64)
    else:
        raise ValueError(f"unknown r_mode {r_mode!r}")
    return fairness.ledger(losses, fed.group_of, fed.group_sizes)


# ---------------------------------------------------------------------------
# the round engine


class _Groups:
    """Group bookkeeping with the structure checks done once, for the hot loop."""

    def __init__(self, fed: Federation):
        self.of = fed.group_of
        self.sizes = fed.group_sizes.astype(np.float64)
        self.d = fed.d
        self.pairs = np.triu_indices(fed.d, k=1)

    def means(self, losses) -> np.ndarray:
        return np.bincount(self.of, weights=losses, minlength=self.d) / self.sizes

    def spread(self, L) -> float:
        i, j = self.pairs
        return float(np.abs(L[i] - L[j]).sum())


def train(plan: TrainPlan, fed: Federation, objective: Objective, seed: int,
          theta0=None, track_personal: bool = False) -> RunResult:
    """Run ``plan`` on ``fed``; deterministic in ``seed``."""
    plan.validate(fed)
    K, d = fed.K, fed.d
    lam = plan.effective_lam
    personalized = plan.algorithm == "gifair_per"
    E = plan.local_steps
    X, y, _ = fed.arrays("train")
    gsize_k = fed.group_sizes[fed.group_of]
    groups = _Groups(fed)

    sampler_rng = np.random.default_rng([seed, _SAMPLING_STREAM])
    streams = [BatchStream(int(n), plan.batch, np.random.default_rng([seed, _BATCH_STREAM, k]))
               for k, n in enumerate(fed.train_sizes)]
    if theta0 is None:
        theta0 = objective.init_params(fed.feature_dim, np.random.default_rng([seed, _INIT_STREAM]))
    theta = np.array(theta0, dtype=np.float64)
    personal = np.tile(theta, (K, 1))
    last_losses = client_losses(objective, theta, fed)
    if plan.initial_group_losses is None:
        L = np.zeros(d)
    else:
        L = np.asarray(plan.initial_group_losses, dtype=np.float64)

    records: list[RoundRecord] = []
    history = [] if track_personal else None
    diverged = False
    for c in range(plan.rounds):
        r = fairness.group_ordering(L)[fed.group_of]
        coef = fairness.weight_coefficient(lam, fed.p, gsize_k, r)
        weights = 1.0 + coef
        selected = sample_clients(plan.sampling, fed.p, K, sampler_rng)
        payload = [Broadcast(theta, float(coef[k])) for k in selected]
        lr = plan.schedule(c * E, c)
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                updated = _local_sgd(objective, np.tile(theta, (len(selected), 1)),
                                     [b.weight for b in payload], E, plan.schedule, c,
                                     X[selected], y[selected], [streams[k] for k in selected])
                theta_bar = aggregate(updated, fed.p[selected], plan.sampling, K)
                at_bar = client_losses(objective, theta_bar, fed)
            if not (np.all(np.isfinite(theta_bar)) and np.all(np.isfinite(at_bar))):
                raise Divergence(f"non-finite aggregate or loss in round {c}")
        except Divergence as exc:
            log.warning("run diverged: %s", exc)
            records.append(RoundRecord(c, selected.tolist(), theta.copy(), L, r, weights,
                                       math.nan, math.nan, math.nan, math.nan, lr, diverged=True))
            diverged = True
            break

        if plan.r_mode == "exact":
            last_losses = at_bar
        else:
            last_losses = last_losses.copy()
            _, _, w_tr = fed.arrays("train")
            last_losses[selected] = objective.values(updated, X[selected], y[selected], w_tr[selected])
        L_next = groups.means(last_losses)
        if personalized:
            personal = personal.copy()
            personal[selected] = updated
            deployed, L_deployed = last_losses, L_next
            H = float(np.dot(fed.p, at_bar)) + lam * groups.spread(L_next)
        else:
            deployed = at_bar
            L_deployed = L_next if plan.r_mode == "exact" else groups.means(at_bar)
            H = float(np.dot(fed.p, at_bar)) + lam * groups.spread(L_deployed)
        mean = float(deployed.mean())
        with np.errstate(over="ignore"):  # huge but finite losses just before a divergence
            var = float(np.mean((deployed - mean) ** 2))
        records.append(RoundRecord(c, selected.tolist(), theta_bar, L, r, weights, H, mean, var,
                                   float(L_deployed.max() - L_deployed.min()), lr))
        if history is not None:
            history.append(personal)
        theta = theta_bar
        L = L_next

    return RunResult(theta=theta, records=records, personal=personal if personalized else None,
                     diverged=diverged, personal_history=history)


def run_fedavg(plan: TrainPlan, fed: Federation, objective: Objective, seed: int, **kw):
    if plan.algorithm != "fedavg":
        raise ConfigError("run_fedavg needs algorithm='fedavg'")
    res = train(plan, fed, objective, seed, **kw)
    return res.theta, res.records


def run_gifair_global(plan: TrainPlan, fed: Federation, objective: Objective, seed: int, **kw):
    if plan.algorithm != "gifair_global":
        raise ConfigError("run_gifair_global needs algorithm='gifair_global'")
    res = train(plan, fed, objective, seed, **kw)
    return res.theta, res.records


def run_gifair_per(plan: TrainPlan, fed: Federation, objective: Objective, seed: int, **kw):
    if plan.algorithm != "gifair_per":
        raise ConfigError("run_gifair_per needs algorithm='gifair_per'")
    res = train(plan, fed, objective, seed, **kw)
    return res.personal, res.theta, res.records
