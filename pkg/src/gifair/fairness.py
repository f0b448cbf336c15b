"""Group-loss regularizer: ordering coefficients, weight bounds, penalized objective.

The penalized objective adds ``lam * sum_{i<j} |L_i - L_j|`` to the usual
``sum_k p_k F_k``, where ``L_i`` is the unweighted mean loss of group ``i``.
Resolving each absolute value by the sign of the difference turns it into a
per-client reweighting with integer coefficient ``r_k`` (signed count of
groups below client k's group), which is how the training loops use it.
"""

from __future__ import annotations

import math

import numpy as np

from gifair.core import ConfigError, GroupLedger
from gifair.objectives import Objective, client_losses


def _sizes(group_of, group_sizes=None) -> np.ndarray:
    group_of = np.asarray(group_of, dtype=np.int64)
    if group_sizes is None:
        group_sizes = np.bincount(group_of)
    group_sizes = np.asarray(group_sizes, dtype=np.int64)
    if np.any(group_sizes == 0):
        raise ConfigError(f"empty group among sizes {group_sizes.tolist()}")
    if group_sizes.sum() != group_of.size:
        raise ConfigError("group sizes do not add up to the client count")
    return group_sizes


def group_losses(per_client_losses, group_of, group_sizes=None) -> np.ndarray:
    """Unweighted mean loss of each group's members."""
    group_of = np.asarray(group_of, dtype=np.int64)
    sizes = _sizes(group_of, group_sizes)
    sums = np.bincount(group_of, weights=np.asarray(per_client_losses, dtype=np.float64),
                       minlength=sizes.size)
    return sums / sizes


def group_ordering(L) -> np.ndarray:
    """Per-group coefficient ``sum_{j != i} sign(L_i - L_j)`` (sign(0) = 0)."""
    L = np.asarray(L, dtype=np.float64)
    return np.sign(L[:, None] - L[None, :]).sum(axis=1).astype(np.int64)


def compute_r(L, group_of) -> np.ndarray:
    """Per-client ordering coefficient r_k from group losses."""
    return group_ordering(L)[np.asarray(group_of, dtype=np.int64)]


def lambda_max(p, group_sizes, group_of, d: int | None = None) -> float:
    """Largest admissible strength (exclusive): ``min_k p_k |A_{s_k}| / (d - 1)``."""
    group_of = np.asarray(group_of, dtype=np.int64)
    group_sizes = np.asarray(group_sizes)
    if d is None:
        d = group_sizes.size
    if d < 2:
        return math.inf
    return float(np.min(np.asarray(p) * group_sizes[group_of]) / (d - 1))


def weight_coefficient(lam: float, p, group_size, r):
    """Broadcast scalar ``lam * r_k / (p_k |A_{s_k}|)``; the client weight is one plus this."""
    return lam * np.asarray(r) / (np.asarray(p) * np.asarray(group_size))


def client_weight(lam: float, p, group_size, r, lam_max: float | None = None):
    """Multiplier ``1 + lam r_k / (p_k |A_{s_k}|)`` on F_k and its gradients.

    Passing ``lam_max`` enforces ``lam < lam_max``.
    """
    if lam < 0:
        raise ConfigError(f"lambda must be non-negative, got {lam}")
    if lam_max is not None and lam > 0 and lam >= lam_max:
        raise ConfigError(f"lambda={lam} must be below lambda_max={lam_max}")
    return 1.0 + weight_coefficient(lam, p, group_size, r)


def ledger(per_client_losses, group_of, group_sizes=None) -> GroupLedger:
    group_of = np.asarray(group_of, dtype=np.int64)
    sizes = _sizes(group_of, group_sizes)
    L = group_losses(per_client_losses, group_of, sizes)
    return GroupLedger(group_sizes=sizes, group_losses=L, r=compute_r(L, group_of), group_of=group_of)


# ---------------------------------------------------------------------------
# the two forms of the penalized objective, on precomputed client losses


def penalty(L) -> float:
    """``sum_{i<j} |L_i - L_j|`` evaluated pair by pair."""
    L = np.asarray(L, dtype=np.float64)
    i, j = np.triu_indices(L.size, k=1)
    return float(np.abs(L[i] - L[j]).sum())


def direct_from_losses(F, p, group_of, lam: float, group_sizes=None) -> float:
    F = np.asarray(F, dtype=np.float64)
    return float(np.dot(p, F)) + lam * penalty(group_losses(F, group_of, group_sizes))


def weighted_from_losses(F, p, group_of, lam: float, group_sizes=None) -> float:
    F = np.asarray(F, dtype=np.float64)
    group_of = np.asarray(group_of, dtype=np.int64)
    sizes = _sizes(group_of, group_sizes)
    r = compute_r(group_losses(F, group_of, sizes), group_of)
    w = 1.0 + weight_coefficient(lam, p, sizes[group_of], r)
    return float(np.dot(np.asarray(p) * w, F))


def objective_direct(objective: Objective, theta, fed, lam: float) -> float:
    F = client_losses(objective, theta, fed)
    return direct_from_losses(F, fed.p, fed.group_of, lam, fed.group_sizes)


def objective_weighted(objective: Objective, theta, fed, lam: float) -> float:
    F = client_losses(objective, theta, fed)
    return weighted_from_losses(F, fed.p, fed.group_of, lam, fed.group_sizes)


# ---------------------------------------------------------------------------
# personalized variant: group losses taken at each client's own parameters


def personalized_group_losses(objective: Objective, thetas, fed) -> np.ndarray:
    thetas = np.asarray(thetas, dtype=np.float64)
    if thetas.shape[0] != fed.K:
        raise ValueError("need one parameter vector per client")
    return group_losses(client_losses(objective, thetas, fed), fed.group_of, fed.group_sizes)


def personalized_r(objective: Objective, thetas, fed) -> np.ndarray:
    return compute_r(personalized_group_losses(objective, thetas, fed), fed.group_of)


def personalized_objective(objective: Objective, theta, thetas, fed, lam: float) -> float:
    """Shared-parameter fit plus the spread of group losses at personalized parameters."""
    fit = float(np.dot(fed.p, client_losses(objective, theta, fed)))
    return fit + lam * penalty(personalized_group_losses(objective, thetas, fed))
