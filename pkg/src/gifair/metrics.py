"""Fairness reports, non-i.i.d. diagnostics, and convergence-rate fits."""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass

import numpy as np
from scipy import optimize, stats

from gifair import fairness
from gifair.core import Federation
from gifair.objectives import (BatchStream, Logistic, Objective, Quadratic, client_grads, client_losses,
                               client_performance)

log = logging.getLogger(__name__)

MAX_ORDERING_GROUPS = 6


# ---------------------------------------------------------------------------
# fairness of a trained model


@dataclass(frozen=True)
class FairnessReport:
    per_client: np.ndarray
    mean: float
    variance: float
    std: float
    per_group: np.ndarray
    group_variance: float
    discrepancy: float
    measure: str  # "accuracy", or "negative_loss" for objectives without predictions

    def more_fair_than(self, other: FairnessReport) -> bool:
        """Smaller variance of per-client performance is fairer."""
        return self.variance < other.variance

    def as_row(self) -> dict:
        return {"mean": self.mean, "variance": self.variance, "std": self.std,
                "discrepancy": self.discrepancy, "measure": self.measure}


def report_from_performance(perf, group_of, measure: str = "accuracy") -> FairnessReport:
    perf = np.asarray(perf, dtype=np.float64)
    group_of = np.asarray(group_of, dtype=np.int64)
    groups = fairness.group_losses(perf, group_of)
    mean = float(perf.mean())
    var = float(np.mean((perf - mean) ** 2))
    return FairnessReport(per_client=perf, mean=mean, variance=var, std=float(np.sqrt(var)),
                          per_group=groups, group_variance=float(groups.var()),
                          discrepancy=float(groups.max() - groups.min()), measure=measure)


def fairness_report(objective: Objective, fed: Federation, theta, split: str = "test") -> FairnessReport:
    """Per-client performance on ``split``.

    ``theta`` is one shared parameter (D,) or one per client (K, D) for
    personalized models.
    """
    sizes = [len(c.data.split(split)) for c in fed.clients]
    if min(sizes) == 0:
        raise ValueError(f"some client has an empty {split} split")
    perf = client_performance(objective, theta, fed, split)
    return report_from_performance(perf, fed.group_of,
                                   "accuracy" if objective.is_classifier else "negative_loss")


# ---------------------------------------------------------------------------
# optimum of the penalized objective


def ordering_weights(fed: Federation, lam: float) -> np.ndarray:
    """One row per total order of the groups: coefficients a_k with
    ``H = sum_k a_k F_k`` on the region where that order holds."""
    d = fed.d
    rows = []
    for order in itertools.permutations(range(d)):
        rho = np.empty(d)
        rho[list(order)] = (d - 1) - 2 * np.arange(d)
        rows.append(fed.p + lam * rho[fed.group_of] / fed.group_sizes[fed.group_of])
    return np.array(rows)


def _smooth_minimize(objective, fed, a, theta0, tol):
    """argmin of ``sum_k a_k F_k`` (a_k > 0)."""
    if isinstance(objective, Quadratic):
        X, _, w = fed.arrays("train")
        means = np.einsum("kn,knf->kf", w, X)
        return a @ means / a.sum()

    def fun(theta):
        F, G = client_grads(objective, theta, fed)
        return float(a @ F), a @ G

    res = optimize.minimize(fun, theta0, jac=True, method="BFGS", options={"gtol": tol, "maxiter": 10_000})
    return res.x


@dataclass(frozen=True)
class Optimum:
    theta: np.ndarray
    value: float
    grad_norm: float  # norm of the active smooth piece's gradient; nan at a kink
    active_pieces: int


def minimize_penalized(objective: Objective, fed: Federation, lam: float, theta0=None,
                       tol: float = 1e-10) -> Optimum:
    """Global minimizer of ``sum p_k F_k + lam sum_{i<j} |L_i - L_j|`` for convex F_k.

    For each total order of the groups the objective agrees with a positively
    weighted sum of client losses, and it equals the pointwise maximum of
    those d! smooth convex pieces.  The epigraph form (min t s.t. t >= piece)
    is solved with SLSQP; if a single piece is active at the solution it is
    then minimized on its own to full precision.
    """
    if theta0 is None:
        theta0 = np.zeros(objective.param_dim(fed.feature_dim))
    theta = _smooth_minimize(objective, fed, fed.p, np.asarray(theta0, dtype=np.float64), tol)
    if lam == 0 or fed.d == 1:
        val = fairness.objective_direct(objective, theta, fed, lam)
        return Optimum(theta, val, _piece_grad_norm(objective, fed, fed.p, theta), 1)
    if fed.d > MAX_ORDERING_GROUPS:
        raise NotImplementedError(f"ordering enumeration limited to d <= {MAX_ORDERING_GROUPS}")

    A = ordering_weights(fed, lam)
    D = theta.size

    def cons(z):
        return z[D] - A @ client_losses(objective, z[:D], fed)

    def cons_jac(z):
        _, G = client_grads(objective, z[:D], fed)
        return np.hstack([-(A @ G), np.ones((A.shape[0], 1))])

    z0 = np.append(theta, fairness.objective_direct(objective, theta, fed, lam))
    res = optimize.minimize(lambda z: z[D], z0, jac=lambda z: np.eye(D + 1)[D], method="SLSQP",
                            constraints=[{"type": "ineq", "fun": cons, "jac": cons_jac}],
                            options={"ftol": 1e-15, "maxiter": 1000})
    theta = res.x[:D]
    pieces = A @ client_losses(objective, theta, fed)
    top = pieces.max()
    active = np.flatnonzero(pieces >= top - 1e-9 * (1 + abs(top)))
    candidate_val = fairness.objective_direct(objective, theta, fed, lam)
    if len(active) == 1:
        # polish on the single smooth piece; keep it only if the ordering still holds
        a = A[active[0]]
        polished = _smooth_minimize(objective, fed, a, theta, tol)
        pv = A @ client_losses(objective, polished, fed)
        if int(np.argmax(pv)) == active[0]:
            val = fairness.objective_direct(objective, polished, fed, lam)
            if val <= candidate_val + 1e-12:
                return Optimum(polished, val, _piece_grad_norm(objective, fed, a, polished), 1)
        return Optimum(theta, candidate_val, _piece_grad_norm(objective, fed, a, theta), 1)
    return Optimum(theta, candidate_val, float("nan"), len(active))


def _piece_grad_norm(objective, fed, a, theta) -> float:
    _, G = client_grads(objective, theta, fed)
    return float(np.linalg.norm(a @ G))


def penalized_grad(objective: Objective, fed: Federation, lam: float, theta) -> np.ndarray:
    """Gradient of the penalized objective with the ordering frozen at ``theta``."""
    F, G = client_grads(objective, theta, fed)
    r = fairness.compute_r(fairness.group_losses(F, fed.group_of, fed.group_sizes), fed.group_of)
    a = fed.p + lam * r / fed.group_sizes[fed.group_of]
    return a @ G


# ---------------------------------------------------------------------------
# degree of non-i.i.d.-ness


@dataclass(frozen=True)
class GammaDiagnostic:
    gamma_k: float | None
    gamma_max: float | None
    h_star: float | None = None
    local_optima: np.ndarray | None = None

    @property
    def computed(self) -> bool:
        return self.gamma_k is not None


NOT_COMPUTED = GammaDiagnostic(None, None)


def local_minima(objective: Objective, fed: Federation, tol: float = 1e-10) -> np.ndarray:
    """``min_theta F_k`` for every client."""
    X, y, w = fed.arrays("train")
    if isinstance(objective, Quadratic):
        means = np.einsum("kn,knf->kf", w, X)
        return client_losses(objective, means, fed)
    out = np.empty(fed.K)
    D = objective.param_dim(fed.feature_dim)
    for k in range(fed.K):
        def fun(theta, k=k):
            v, g = objective.value_and_grad(theta[None], X[k:k + 1], y[k:k + 1], w[k:k + 1])
            return float(v[0]), g[0]
        out[k] = optimize.minimize(fun, np.zeros(D), jac=True, method="BFGS",
                                   options={"gtol": tol, "maxiter": 10_000}).fun
    return out


def gamma_k(objective: Objective, fed: Federation, lam: float = 0.0) -> GammaDiagnostic:
    """``Gamma_K = H* - sum p_k H_k*`` and ``Gamma_max = sum p_k |H* - H_k*|``.

    H_k* is the client's weighted local optimum ``w_k min F_k`` with the
    weight's ordering coefficient taken at the global minimizer.  Only
    convex objectives (quadratic, logistic) are computed.
    """
    if not isinstance(objective, (Quadratic, Logistic)):
        return NOT_COMPUTED
    try:
        opt = minimize_penalized(objective, fed, lam)
    except NotImplementedError:
        return NOT_COMPUTED
    F_star = client_losses(objective, opt.theta, fed)
    r = fairness.compute_r(fairness.group_losses(F_star, fed.group_of, fed.group_sizes), fed.group_of)
    weights = 1.0 + fairness.weight_coefficient(lam, fed.p, fed.group_sizes[fed.group_of], r)
    h_local = weights * local_minima(objective, fed)
    gaps = opt.value - h_local
    return GammaDiagnostic(gamma_k=float(fed.p @ gaps), gamma_max=float(fed.p @ np.abs(gaps)),
                           h_star=opt.value, local_optima=h_local)


# ---------------------------------------------------------------------------
# rate fits


@dataclass(frozen=True)
class RateDiagnostic:
    T: np.ndarray
    gap: np.ndarray
    slope: float
    intercept: float
    ci: tuple[float, float]
    clipped: bool


GAP_FLOOR = 1e-15


def rate_fit(T, gap, burn_in: float = 0.1, level: float = 0.95) -> RateDiagnostic:
    """Least-squares slope of log(gap) against log(T).

    The first ``burn_in`` fraction of points is dropped.  Non-positive gaps
    are clipped at 1e-15 and flagged.
    """
    T = np.asarray(T, dtype=np.float64)
    gap = np.asarray(gap, dtype=np.float64)
    skip = int(np.floor(burn_in * T.size))
    T, gap = T[skip:], gap[skip:]
    if T.size < 5 or T.max() / T.min() < 10:
        raise ValueError("rate fit needs at least 5 points spanning a decade of T")
    clipped = bool(np.any(gap <= GAP_FLOOR))
    if clipped:
        log.warning("clipping %d non-positive gaps", int(np.sum(gap <= GAP_FLOOR)))
        gap = np.maximum(gap, GAP_FLOOR)
    fit = stats.linregress(np.log(T), np.log(gap))
    half = stats.t.ppf(0.5 + level / 2, T.size - 2) * fit.stderr
    return RateDiagnostic(T=T, gap=gap, slope=float(fit.slope), intercept=float(fit.intercept),
                          ci=(float(fit.slope - half), float(fit.slope + half)), clipped=clipped)


def checkpoint_steps(t_min: int, t_max: int, E: int, points: int = 15) -> np.ndarray:
    """Log-spaced total-step counts that are whole rounds (multiples of E)."""
    raw = np.geomspace(t_min, t_max, points)
    return np.unique(np.maximum(E, np.round(raw / E).astype(int) * E))


# ---------------------------------------------------------------------------
# empirical assumption constants (diagnostics only)


def gradient_moments(objective: Objective, fed: Federation, theta, batch, seed: int = 0,
                     draws: int = 200):
    """Monte-Carlo ``(G, sigma_k^2)`` at ``theta``: root of the largest mean
    squared stochastic-gradient norm, and each client's gradient variance."""
    X, y, _ = fed.arrays("train")
    _, full = client_grads(objective, theta, fed)
    sq = np.zeros(fed.K)
    var = np.zeros(fed.K)
    theta = np.asarray(theta, dtype=np.float64)
    for k, n in enumerate(fed.train_sizes):
        stream = BatchStream(int(n), batch, np.random.default_rng([seed, k]))
        idx = np.stack([stream.next() for _ in range(draws)])
        th = np.broadcast_to(theta, (draws, theta.size))
        w = np.full(idx.shape, 1.0 / idx.shape[1])
        _, g = objective.value_and_grad(th, X[k][idx], y[k][idx], w)
        sq[k] = np.mean(np.sum(g**2, axis=1))
        var[k] = np.mean(np.sum((g - full[k]) ** 2, axis=1))
    return float(np.sqrt(sq.max())), var
