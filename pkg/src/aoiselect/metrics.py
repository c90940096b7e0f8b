"""Load-balance analytics over selection traces and the convergence bound.

Weight statistics treat an unselected client as having weight 0, so
``Var[w_i]`` is the unconditional variance of the client's aggregation weight
across rounds.
"""
from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import stats

from .core import SelectionTrace
from .errors import InsufficientDataError, InvalidParameterError, SkewUndefinedError
from .markov import MarkovChainSpec, selection_rate

logger = logging.getLogger(__name__)

SIGMA_BATCHES = 20
EXACT_ENUMERATION_MAX_N = 20
SKEW_DENOMINATOR_GUARD = 1e-12


@dataclass(frozen=True)
class SigmaEstimate:
    per_client_var: np.ndarray
    per_client_gamma: np.ndarray
    sigma: float
    stderr: float
    rounds_used: int


def _weight_moments(trace: SelectionTrace, rows=None):
    """Per-client sums of w and w^2, optionally restricted to entry slice ``rows``."""
    clients, weights = trace.clients, trace.weights
    if rows is not None:
        clients, weights = clients[rows], weights[rows]
    s1 = np.bincount(clients, weights=weights, minlength=trace.n)
    s2 = np.bincount(clients, weights=weights * weights, minlength=trace.n)
    return s1, s2


def _sigma_from_sums(s1, s2, T):
    mean = s1 / T
    gamma = s2 / T
    var = np.maximum(gamma - mean * mean, 0.0)
    return var, gamma


def sigma_monte_carlo(trace: SelectionTrace, batches: int = SIGMA_BATCHES) -> SigmaEstimate:
    """Empirical sum over clients of Var[w_i], with a batch-means standard error."""
    T = trace.T
    if T < 2:
        raise InsufficientDataError("need at least two rounds to estimate weight variance")
    var, gamma = _sigma_from_sums(*_weight_moments(trace), T)
    b = min(batches, T // 2)
    stderr = float("nan")
    if b >= 2:
        edges = np.linspace(0, T, b + 1).astype(np.int64)
        vals = []
        for lo, hi in zip(edges[:-1], edges[1:]):
            rows = slice(trace.offsets[lo], trace.offsets[hi])
            v, _ = _sigma_from_sums(*_weight_moments(trace, rows), hi - lo)
            vals.append(v.sum())
        stderr = float(np.std(vals, ddof=1) / math.sqrt(b))
    return SigmaEstimate(
        per_client_var=var,
        per_client_gamma=gamma,
        sigma=float(var.sum()),
        stderr=stderr,
        rounds_used=T,
    )


def running_sigma(trace: SelectionTrace, chunk: int = 4096) -> np.ndarray:
    """Sigma estimated from rounds 0..t, for every t."""
    out = np.empty(trace.T)
    s1 = np.zeros(trace.n)
    s2 = np.zeros(trace.n)
    for lo in range(0, trace.T, chunk):
        hi = min(lo + chunk, trace.T)
        block = np.zeros((hi - lo, trace.n))
        a, b = trace.offsets[lo], trace.offsets[hi]
        block[trace.round_index[a:b] - lo, trace.clients[a:b]] = trace.weights[a:b]
        c1 = s1 + np.cumsum(block, axis=0)
        c2 = s2 + np.cumsum(block * block, axis=0)
        counts = np.arange(lo + 1, hi + 1)[:, None]
        mean = c1 / counts
        out[lo:hi] = np.maximum(c2 / counts - mean * mean, 0.0).sum(axis=1)
        s1, s2 = c1[-1], c2[-1]
    return out


def sigma_random_weighted_exact(d: Sequence[float], m: int) -> float:
    """Sum of weight variances for size-weighted uniform m-subsets, by enumeration."""
    d = np.asarray(d, dtype=np.float64)
    n = d.size
    if n > EXACT_ENUMERATION_MAX_N:
        raise InvalidParameterError(f"exact enumeration limited to n <= {EXACT_ENUMERATION_MAX_N}; use sigma_monte_carlo")
    if not 1 <= m <= n:
        raise InvalidParameterError(f"need 1 <= m <= n, got m={m}, n={n}")
    subsets = np.array(list(itertools.combinations(range(n), m)), dtype=np.int64)
    w = d[subsets] / d[subsets].sum(axis=1, keepdims=True)
    n_subsets = subsets.shape[0]
    second = (w * w).sum() / n_subsets
    mean = np.bincount(subsets.ravel(), weights=w.ravel(), minlength=n) / n_subsets
    return float(max(second - (mean * mean).sum(), 0.0))


def sigma_random_uniform(n: int, m: int) -> float:
    """Equal data sizes: every selected client weighs 1/m."""
    return 1.0 / m - 1.0 / n


def sigma_probabilistic_exact(q: Sequence[float], m: int) -> float:
    q = np.asarray(q, dtype=np.float64)
    if m < 1 or np.any(q < 0) or abs(q.sum() - 1.0) > 1e-9:
        raise InvalidParameterError("q must be a probability vector and m >= 1")
    return float((q * (1.0 - q)).sum() / m)


def sigma_markov_exact(n: int, chain: MarkovChainSpec) -> float:
    """E[1/|S|] - 1/n with |S| ~ Binomial(n, p_avg); an empty draw counts as |S| = 1."""
    p_avg = selection_rate(chain)
    s = np.arange(0, n + 1)
    pmf = stats.binom.pmf(s, n, p_avg)
    inv_size = pmf[0] + (pmf[1:] / s[1:]).sum()
    return float(max(inv_size - 1.0 / n, 0.0))


def selection_rates(trace: SelectionTrace) -> tuple[np.ndarray, np.ndarray]:
    """(per-client selection frequency, per-round fraction of clients selected)."""
    per_client = np.bincount(trace.clients, minlength=trace.n) / trace.T
    per_round = trace.selected_counts / trace.n
    return per_client, per_round


@dataclass(frozen=True)
class IntervalHistogram:
    gaps: np.ndarray  # distinct gap values, ascending
    counts: np.ndarray
    censored_count: int  # clients selected at most once: no complete gap

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def frequencies(self) -> np.ndarray:
        return self.counts / max(self.total, 1)

    @property
    def mean(self) -> float:
        return float(self.gaps @ self.counts / self.total) if self.total else float("nan")

    def as_dict(self) -> dict[int, int]:
        return dict(zip(self.gaps.tolist(), self.counts.tolist()))

    def samples(self) -> np.ndarray:
        return np.repeat(self.gaps, self.counts)


def inter_selection_histogram(trace: SelectionTrace) -> IntervalHistogram:
    rounds = trace.round_index
    order = np.lexsort((rounds, trace.clients))
    c, r = trace.clients[order], rounds[order]
    same = c[1:] == c[:-1]
    gaps = (r[1:] - r[:-1])[same]
    values, counts = np.unique(gaps, return_counts=True)
    times = np.bincount(trace.clients, minlength=trace.n)
    return IntervalHistogram(values.astype(np.int64), counts.astype(np.int64), int((times <= 1).sum()))


def window_counts(trace: SelectionTrace, window: int) -> np.ndarray:
    """Selections per (window, client) over the ``T // window`` complete windows."""
    n_windows = trace.T // window
    if window < 1 or n_windows == 0:
        raise InsufficientDataError(f"window {window} does not fit in a trace of {trace.T} rounds")
    keep = trace.offsets[n_windows * window]
    w_idx = trace.round_index[:keep] // window
    flat = np.bincount(w_idx * trace.n + trace.clients[:keep], minlength=n_windows * trace.n)
    return flat.reshape(n_windows, trace.n)


def windowed_selection_stability(trace: SelectionTrace, window: int) -> float:
    """sqrt(Var(Y)) / window, Y = selection count of a client within a window."""
    if window > trace.T:
        raise InsufficientDataError("window longer than trace")
    Y = window_counts(trace, window).ravel()
    ddof = 1 if Y.size > 1 else 0
    return float(np.sqrt(Y.var(ddof=ddof)) / window)


@dataclass(frozen=True)
class SkewEstimate:
    rho_t: np.ndarray
    rho_star_t: np.ndarray
    rho_under: float
    rho_over: float
    skipped_rounds: tuple[int, ...] = ()


def selection_skew(weights_dense: np.ndarray, local_gap: np.ndarray, q: np.ndarray, global_gap: float) -> float:
    """Realised skew of one round: sum_k w_k (F_k - F_k*) / (F - sum_k q_k F_k*)."""
    if not global_gap > SKEW_DENOMINATOR_GUARD:
        raise SkewUndefinedError(f"skew denominator {global_gap:g} below guard")
    return float(weights_dense @ local_gap / global_gap)


def estimate_selection_skew(task, trace: SelectionTrace, global_trace, theta_star, theta_k_star) -> SkewEstimate:
    """Per-round skew at the current global model and at ``theta_star``.

    ``task`` must provide ``q``, ``local_losses(theta)`` (all F_k at one point)
    and ``losses_at(points)`` (F_k at its own row of ``points``).
    ``global_trace[t]`` is the model broadcast in round ``t``.
    """
    global_trace = np.asarray(global_trace, dtype=np.float64)
    if global_trace.shape[0] < trace.T:
        raise InvalidParameterError("need one global model per round of the trace")
    q = np.asarray(task.q)
    local_opt = task.losses_at(np.asarray(theta_k_star))
    base = float(q @ local_opt)
    star_losses = task.local_losses(np.asarray(theta_star))
    rho_t, rho_star_t, skipped = [], [], []
    for t, outcome in enumerate(trace):
        w = outcome.dense(trace.n)
        losses = task.local_losses(global_trace[t])
        try:
            r = selection_skew(w, losses - local_opt, q, float(q @ losses) - base)
            r_star = selection_skew(w, star_losses - local_opt, q, float(q @ star_losses) - base)
        except SkewUndefinedError as exc:
            logger.info("round %d skipped: %s", t, exc)
            skipped.append(t)
            continue
        rho_t.append(r)
        rho_star_t.append(r_star)
    if not rho_t:
        raise SkewUndefinedError("skew undefined in every round")
    rho_t = np.array(rho_t)
    rho_star_t = np.array(rho_star_t)
    return SkewEstimate(rho_t, rho_star_t, float(rho_t.min()), float(rho_star_t.max()), tuple(skipped))


@dataclass(frozen=True)
class BoundInputs:
    L: float
    mu: float
    K: int
    m: int
    G2: float
    sigma2: float
    Gamma: float
    rho_under: float
    rho_over: float
    Sigma: float
    theta0_dist2: float

    def __post_init__(self):
        for name in ("L", "mu", "G2", "theta0_dist2", "m"):
            if not getattr(self, name) > 0:
                raise InvalidParameterError(f"{name} must be positive")
        if self.sigma2 < 0 or self.Gamma < 0 or self.Sigma < 0:
            raise InvalidParameterError("sigma2, Gamma and Sigma must be non-negative")
        if not self.rho_over >= self.rho_under > 0:
            raise InvalidParameterError("need rho_over >= rho_under > 0")
        if self.K < 2:
            raise InvalidParameterError("the bound needs K >= 2 local steps")


def bound_gamma(K: int, L: float, mu: float) -> float:
    """Shift of the inverse learning-rate schedule, 4K(K+1)L/mu."""
    return 4.0 * K * (K + 1) * L / mu


def convergence_bound(inputs: BoundInputs, T: int, variant: str = "main") -> float:
    """Upper bound on E[F(theta^T)] - F* after ``T`` rounds.

    ``variant="main"`` uses the 16 G^2 K m^2 (K+1) (Sigma+1) drift constant;
    ``variant="appendix"`` uses 16 G^2 K^3 m^2 (Sigma+1).
    """
    if T < 1:
        raise InvalidParameterError("T must be >= 1")
    b = inputs
    K, L, mu, m = b.K, b.L, b.mu, b.m
    gamma = bound_gamma(K, L, mu)
    if variant == "main":
        drift = 16.0 * b.G2 * K * m**2 * (K + 1) * (b.Sigma + 1.0)
    elif variant == "appendix":
        drift = 16.0 * b.G2 * K**3 * m**2 * (b.Sigma + 1.0)
    else:
        raise InvalidParameterError(f"unknown bound variant {variant!r}")
    bracket = (
        gamma * b.theta0_dist2
        + (drift + m * K * b.sigma2) / (b.rho_under * (K - 1) * mu**2)
        + 6.0 * L * b.Gamma / ((K - 1) * mu**2)
    )
    bias = K * L / ((K - 1) * mu) * b.Gamma * (b.rho_over / b.rho_under - 1.0)
    return float(bracket * L / 2.0 / (T + gamma) + bias)


def second_moment_gap(trace: SelectionTrace, x: np.ndarray, m: int) -> tuple[float, float]:
    """Mean and standard error of (1/m)||sum w_i x_i||^2 - sum w_i^2 ||x_i||^2 over rounds.

    The second term averages to sum_i gamma_i ||x_i||^2, so a mean that is not
    significantly positive is consistent with the second-moment inequality.
    """
    x = np.asarray(x, dtype=np.float64)
    rounds = trace.round_index
    agg = np.zeros((trace.T, x.shape[1]))
    np.add.at(agg, rounds, trace.weights[:, None] * x[trace.clients])
    lhs = (agg * agg).sum(axis=1) / m
    sq = (x * x).sum(axis=1)
    rhs = np.bincount(rounds, weights=trace.weights**2 * sq[trace.clients], minlength=trace.T)
    diff = lhs - rhs
    return float(diff.mean()), float(diff.std(ddof=1) / math.sqrt(diff.size))
