"""Exact analysis of the age-state Markov chain.

A client at age ``a`` is selected with probability ``p[a]``; selection resets
the age to 0, otherwise the age grows by one and saturates at ``m_prime``.
The peak age ``X`` (rounds between consecutive selections) has a finite head
on ``1..m_prime+1`` followed by a geometric tail with rate ``p[m_prime]``, so
all moments are available in closed form.
"""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass

import numpy as np

from .core import RngLike, _frozen, as_generator
from .errors import (
    InfeasibleCalibrationError,
    InvalidParameterError,
    NoStationaryDistributionError,
    OracleScopeError,
)

logger = logging.getLogger(__name__)

BISECTION_TOL = 1e-9
BISECTION_MAX_ITER = 200
ORACLE_MAX_MPRIME = 4
ORACLE_STEPS = (0.01, 0.02, 0.05)


@dataclass(frozen=True)
class MarkovChainSpec:
    m_prime: int
    p: np.ndarray

    def __post_init__(self):
        p = _frozen(self.p, np.float64)
        if self.m_prime < 0:
            raise InvalidParameterError("m_prime must be >= 0")
        if p.shape != (self.m_prime + 1,):
            raise InvalidParameterError(f"expected {self.m_prime + 1} selection probabilities, got {p.size}")
        if np.any(~np.isfinite(p)) or np.any(p < 0) or np.any(p > 1):
            raise InvalidParameterError("selection probabilities must lie in [0, 1]")
        object.__setattr__(self, "p", p)

    @classmethod
    def from_probs(cls, p) -> "MarkovChainSpec":
        p = np.asarray(p, dtype=np.float64)
        return cls(m_prime=p.size - 1, p=p)

    def to_dict(self) -> dict:
        return {"m_prime": self.m_prime, "p": self.p.tolist()}


@dataclass(frozen=True)
class StationaryDistribution:
    pi: np.ndarray

    @property
    def pi0(self) -> float:
        return float(self.pi[0])


@dataclass(frozen=True)
class PeakAgeDistribution:
    head: np.ndarray  # P(X = k) for k = 1..m_prime+1
    tail_rate: float
    tail_mass: float  # P(X > m_prime + 1)
    mean: float
    variance: float

    def pmf(self, k) -> np.ndarray:
        """P(X = k) for integer ``k`` (array-like), tail included."""
        k = np.asarray(k, dtype=np.int64)
        m1 = self.head.size
        out = np.zeros(k.shape)
        in_head = (k >= 1) & (k <= m1)
        out[in_head] = self.head[k[in_head] - 1]
        beyond = k > m1
        if self.tail_mass > 0:
            # P(X = m1 + j) = survival * (1-r)^j * r for j >= 1
            survival = self.tail_mass / (1.0 - self.tail_rate)
            out[beyond] = survival * (1.0 - self.tail_rate) ** (k[beyond] - m1) * self.tail_rate
        return out

    def cdf(self, k) -> np.ndarray:
        k = np.asarray(k, dtype=np.int64)
        m1 = self.head.size
        cum = np.concatenate([[0.0], np.cumsum(self.head)])
        out = cum[np.clip(k, 0, m1)]
        beyond = k > m1
        if self.tail_mass > 0:
            out = np.where(beyond, 1.0 - self.tail_mass * (1.0 - self.tail_rate) ** np.maximum(k - m1, 0), out)
        return np.minimum(out, 1.0)


@dataclass(frozen=True)
class OptimalMarkovResult:
    chain: MarkovChainSpec
    min_variance: float
    regime: str  # "small-m'" or "large-m'"
    c: float


def _survival(p: np.ndarray) -> np.ndarray:
    """S[k] = prod_{j<k} (1 - p_j) for k = 0..m', i.e. P(X > k)."""
    return np.concatenate([[1.0], np.cumprod(1.0 - p[:-1])])


def _check_tail(chain: MarkovChainSpec, survival_mprime: float, what: str):
    if chain.p[-1] == 0 and survival_mprime > 0:
        raise NoStationaryDistributionError(
            f"state m'={chain.m_prime} is reachable but p[m'] = 0; {what}"
        )


def stationary_distribution(chain: MarkovChainSpec) -> StationaryDistribution:
    """Closed-form steady state of the age chain."""
    p = chain.p
    mp = chain.m_prime
    if mp == 0:
        return StationaryDistribution(_frozen([1.0], np.float64))
    S = _survival(p)
    _check_tail(chain, S[mp], "no stationary distribution")
    last = S[mp] / p[mp] if S[mp] > 0 else 0.0
    unnorm = np.concatenate([S[:mp], [last]])
    return StationaryDistribution(_frozen(unnorm / unnorm.sum(), np.float64))


def selection_rate(chain: MarkovChainSpec) -> float:
    """Steady-state per-round selection probability, sum_a pi_a p_a."""
    pi = stationary_distribution(chain).pi
    return float(pi @ chain.p)


def peak_age_distribution(chain: MarkovChainSpec) -> PeakAgeDistribution:
    p = chain.p
    mp = chain.m_prime
    S = _survival(p)
    _check_tail(chain, S[mp], "peak age has infinite mean")
    head = p * S
    r = float(p[mp])
    tail_mass = float(S[mp] * (1.0 - r))
    k = np.arange(1, mp + 2, dtype=np.float64)
    # X = mp + G with G ~ Geometric(r) on the branch reaching state mp;
    # head[-1] is that branch's G = 1 term, the rest is the tail.
    branch = S[mp]
    if branch > 0:
        g1 = 1.0 / r
        g2 = (2.0 - r) / r**2
        mean = float(k[:-1] @ head[:-1] + branch * (mp + g1))
        second = float((k[:-1] ** 2) @ head[:-1] + branch * (mp**2 + 2 * mp * g1 + g2))
    else:
        mean = float(k[:-1] @ head[:-1])
        second = float((k[:-1] ** 2) @ head[:-1])
    variance = max(second - mean**2, 0.0)
    return PeakAgeDistribution(
        head=_frozen(head, np.float64), tail_rate=r, tail_mass=tail_mass, mean=mean, variance=variance
    )


def peak_age_moments(chain: MarkovChainSpec) -> tuple[float, float]:
    d = peak_age_distribution(chain)
    return d.mean, d.variance


def _small_branch(n: int, m: int, m_prime: int) -> np.ndarray:
    p = np.zeros(m_prime + 1)
    p[m_prime] = m / (n - m * m_prime)
    return p


def _large_branch(n: int, m: int, m_prime: int) -> np.ndarray:
    i = n // m
    p = np.zeros(m_prime + 1)
    p[i - 1] = (i + 1) - n / m
    p[i:] = 1.0
    return p


def optimal_markov_chain(n: int, m: int, m_prime: int) -> OptimalMarkovResult:
    """Selection probabilities minimising Var[X] subject to pi_0 = m/n."""
    if not 1 <= m <= n:
        raise InvalidParameterError(f"need 1 <= m <= n, got m={m}, n={n}")
    if m_prime < 1:
        raise InvalidParameterError("m_prime must be >= 1")
    r = n / m
    i = n // m
    if m_prime <= i - 1:
        p = _small_branch(n, m, m_prime)
        var = (r - m_prime) * (r - (m_prime + 1))
        regime, c = "small-m'", float("nan")
    else:
        p = _large_branch(n, m, m_prime)
        c = (n % m) / m
        var = c * (1.0 - c)
        regime = "large-m'"
    if var < 0:
        logger.warning("closed-form minimum variance is negative (%g) for n=%d m=%d m'=%d", var, n, m, m_prime)
    return OptimalMarkovResult(MarkovChainSpec(m_prime, p), float(var), regime, float(c))


def _monotone_probs(beta: float, m_prime: int) -> np.ndarray:
    return beta * np.arange(1, m_prime + 2) / (m_prime + 1)


def calibrate_monotone_chain(n: int, m: int, m_prime: int) -> MarkovChainSpec:
    """Linear ramp p_a = beta (a+1)/(m'+1) with beta tuned so that pi_0 = m/n.

    pi_0 grows with beta and p_{m'} = beta, so beta is searched in (0, 1].
    """
    if not 1 <= m < n:
        raise InvalidParameterError(f"need 1 <= m < n, got m={m}, n={n}")
    if m_prime < 1:
        raise InvalidParameterError("m_prime must be >= 1")
    target = m / n

    def pi0(beta: float) -> float:
        return stationary_distribution(MarkovChainSpec(m_prime, _monotone_probs(beta, m_prime))).pi0

    hi_pi0 = pi0(1.0)
    if target > hi_pi0:
        raise InfeasibleCalibrationError(
            f"pi_0 = {target:g} unreachable with a linear ramp over m'={m_prime}; achievable range is (0, {hi_pi0:g}]",
            achievable=(0.0, hi_pi0),
        )
    lo, hi = 0.0, 1.0
    for _ in range(BISECTION_MAX_ITER):
        beta = 0.5 * (lo + hi)
        if pi0(beta) < target:
            lo = beta
        else:
            hi = beta
        if hi - lo <= 1e-15:
            break
    beta = hi
    chain = MarkovChainSpec(m_prime, _monotone_probs(beta, m_prime))
    if abs(stationary_distribution(chain).pi0 - target) > BISECTION_TOL:
        raise InfeasibleCalibrationError("bisection did not reach the pi_0 tolerance", achievable=(0.0, hi_pi0))
    return chain


def variance_grid_oracle(n: int, m: int, m_prime: int, grid_step: float = 0.01) -> tuple[np.ndarray, float]:
    """Brute-force minimum of Var[X] under the selection-rate constraint.

    p_0..p_{m'-1} range over the grid; p_{m'} is then the unique value making
    E[X] = n/m (when it lies in (0, 1]).  Independent of the closed form it is
    used to check: moments are computed directly from the pmf here.
    """
    if not 1 <= m_prime <= ORACLE_MAX_MPRIME:
        raise OracleScopeError(f"grid oracle is limited to 1 <= m' <= {ORACLE_MAX_MPRIME}")
    if not any(abs(grid_step - s) < 1e-12 for s in ORACLE_STEPS):
        raise OracleScopeError(f"grid_step must be one of {ORACLE_STEPS}")
    if not 1 <= m <= n:
        raise InvalidParameterError(f"need 1 <= m <= n, got m={m}, n={n}")
    r = n / m
    grid = np.round(np.arange(0.0, 1.0 + grid_step / 2, grid_step), 10)
    best_var, best_p = np.inf, None
    # chunk over the leading coordinate to bound memory
    combos = list(itertools.product(grid, repeat=m_prime - 1))
    inner = np.array(combos, dtype=np.float64).reshape(len(combos), m_prime - 1)
    for p0 in grid:
        P = np.hstack([np.full((inner.shape[0], 1), p0), inner])
        # survival P(X > k) for k = 0..m'
        surv = np.hstack([np.ones((P.shape[0], 1)), np.cumprod(1.0 - P, axis=1)])
        head_mass = P * surv[:, :m_prime]  # P(X = k+1), k < m'
        prefix_mean = surv[:, :m_prime].sum(axis=1)
        tail = surv[:, m_prime]
        with np.errstate(divide="ignore", invalid="ignore"):
            p_last = tail / (r - prefix_mean)
        ok = (tail > 0) & (r - prefix_mean > 0) & (p_last > 0) & (p_last <= 1 + 1e-12)
        closed = (tail == 0) & (np.abs(prefix_mean - r) <= 1e-9)
        p_last = np.where(closed, 1.0, np.clip(p_last, 0.0, 1.0))
        feasible = ok | closed
        if not feasible.any():
            continue
        k = np.arange(1, m_prime + 1, dtype=np.float64)
        ex = head_mass @ k
        ex2 = head_mass @ (k**2)
        with np.errstate(divide="ignore", invalid="ignore"):
            g1 = np.where(feasible & (tail > 0), 1.0 / p_last, 0.0)
            g2 = np.where(feasible & (tail > 0), (2.0 - p_last) / p_last**2, 0.0)
        ex = ex + tail * (m_prime + g1)
        ex2 = ex2 + tail * (m_prime**2 + 2 * m_prime * g1 + g2)
        var = np.where(feasible, ex2 - ex**2, np.inf)
        j = int(np.argmin(var))
        if var[j] < best_var:
            best_var = float(var[j])
            best_p = np.append(P[j], p_last[j])
    if best_p is None:
        raise InvalidParameterError("no feasible chain on the grid")
    return best_p, max(best_var, 0.0)


@dataclass(frozen=True)
class ChainSimulation:
    mean: float
    variance: float
    pi: np.ndarray
    peak_ages: np.ndarray


def simulate_chain(chain: MarkovChainSpec, renewals: int, rng: RngLike) -> ChainSimulation:
    """Monte-Carlo age process of one client over ``renewals`` selections.

    Renewal cycles are independent, so they are stepped side by side: every
    pass advances each unfinished cycle by one round.
    """
    if renewals < 1:
        raise InvalidParameterError("renewals must be >= 1")
    gen = as_generator(rng)
    mp = chain.m_prime
    p = chain.p
    peak = np.zeros(renewals, dtype=np.int64)
    occupancy = np.zeros(mp + 1, dtype=np.int64)
    active = np.arange(renewals)
    age = 0
    while active.size:
        state = min(age, mp)
        occupancy[state] += active.size
        hit = gen.random(active.size) < p[state]
        peak[active[hit]] = age + 1
        active = active[~hit]
        age += 1
        if age > 10**7:  # p[m'] would have to be ~0
            raise RuntimeError("age process failed to renew")
    peak_f = peak.astype(np.float64)
    return ChainSimulation(
        mean=float(peak_f.mean()),
        variance=float(peak_f.var()),
        pi=occupancy / occupancy.sum(),
        peak_ages=peak,
    )
