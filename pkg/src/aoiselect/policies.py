"""Client-selection policies.

Four policies are provided:

``random_weighted``
    m clients uniformly without replacement, weights proportional to data size.
``probabilistic``
    m draws with replacement with probability d_i / sum(d); a client drawn
    l times gets weight l/m.
``markov_optimal`` / ``markov_monotone``
    every client flips its own coin with probability p[age]; selected clients
    share the weight uniformly.  If nobody self-selects, one client chosen
    uniformly at random is forced in.

The per-round selectors return :class:`RoundOutcome`; :func:`run_selection`
drives a policy over many rounds and stores the result as a
:class:`SelectionTrace`.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import (
    ClientPopulation,
    RngLike,
    RoundOutcome,
    SelectionTrace,
    advance_ages,
    as_generator,
)
from .errors import InvalidParameterError, InvalidStateError
from .markov import (
    MarkovChainSpec,
    calibrate_monotone_chain,
    optimal_markov_chain,
    stationary_distribution,
)

PI0_TOL = 1e-9


class PolicyKind(str, enum.Enum):
    RANDOM_WEIGHTED = "random_weighted"
    PROBABILISTIC = "probabilistic"
    MARKOV_OPTIMAL = "markov_optimal"
    MARKOV_MONOTONE = "markov_monotone"

    @property
    def is_markov(self) -> bool:
        return self in (PolicyKind.MARKOV_OPTIMAL, PolicyKind.MARKOV_MONOTONE)


EXACT_M_MODES = ("off", "trim", "pad")


@dataclass(frozen=True)
class PolicySpec:
    kind: PolicyKind
    m: int
    chain: Optional[MarkovChainSpec] = None
    m_prime: int = 10  # age cap; inert for the non-Markov kinds
    exact_m: str = "off"

    def __post_init__(self):
        object.__setattr__(self, "kind", PolicyKind(self.kind))
        if self.m < 1:
            raise InvalidParameterError("m must be >= 1")
        if self.kind.is_markov:
            if self.chain is None:
                raise InvalidParameterError(f"{self.kind.value} needs a Markov chain")
            object.__setattr__(self, "m_prime", self.chain.m_prime)
        elif self.chain is not None:
            raise InvalidParameterError(f"{self.kind.value} does not take a Markov chain")
        if self.exact_m not in EXACT_M_MODES:
            raise InvalidParameterError(f"exact_m must be one of {EXACT_M_MODES}")

    @classmethod
    def build(cls, kind, n: int, m: int, m_prime: int = 10, exact_m: str = "off") -> "PolicySpec":
        """Policy for a population of ``n`` clients; Markov chains are derived from (n, m, m')."""
        kind = PolicyKind(kind)
        chain = None
        if kind is PolicyKind.MARKOV_OPTIMAL:
            chain = optimal_markov_chain(n, m, m_prime).chain
        elif kind is PolicyKind.MARKOV_MONOTONE:
            chain = calibrate_monotone_chain(n, m, m_prime)
        return cls(kind=kind, m=m, chain=chain, m_prime=m_prime, exact_m=exact_m)

    @property
    def tag(self) -> str:
        return self.kind.value

    def check_population(self, n: int):
        if self.m > n:
            raise InvalidParameterError(f"m={self.m} exceeds n={n}")
        if self.chain is not None:
            pi0 = stationary_distribution(self.chain).pi0
            if abs(pi0 - self.m / n) > PI0_TOL:
                raise InvalidParameterError(
                    f"chain selection rate pi_0={pi0:.12g} does not match m/n={self.m / n:.12g}"
                )


def default_burn_in(m_prime: int) -> int:
    return 10 * (m_prime + 1)


def stationary_ages(pop: ClientPopulation, chain: MarkovChainSpec, rng: RngLike) -> ClientPopulation:
    """Copy of ``pop`` with every age drawn independently from the chain's stationary law.

    Starting all clients at age 0 synchronises them; for chains with nearly
    deterministic gaps the phases then spread only slowly, so this is the
    cheaper way to begin in steady state.
    """
    pi = stationary_distribution(chain).pi
    ages = as_generator(rng).choice(pi.size, size=pop.n, p=pi / pi.sum())
    return pop.with_ages(ages)


# -- array-level draws: (selected, weights, forced) ---------------------------

def _draw_random_weighted(gen: np.random.Generator, d: np.ndarray, m: int):
    sel = np.sort(gen.choice(d.size, size=m, replace=False))
    w = d[sel] / d[sel].sum()
    return sel, w, False


def _draw_probabilistic(gen: np.random.Generator, cdf: np.ndarray, m: int):
    draws = np.searchsorted(cdf, gen.random(m), side="right")
    sel, counts = np.unique(np.minimum(draws, cdf.size - 1), return_counts=True)
    return sel, counts / m, False


def _draw_markov(gen, p, ages, m, exact_m):
    n = ages.size
    sel = np.flatnonzero(gen.random(n) < p[ages])
    forced = False
    if sel.size == 0:
        sel = np.array([gen.integers(n)])
        forced = True
    if exact_m == "trim" and sel.size > m:
        sel = np.sort(gen.choice(sel, size=m, replace=False))
    elif exact_m == "pad" and sel.size < m:
        mask = np.ones(n, bool)
        mask[sel] = False
        pool = np.flatnonzero(mask)
        order = np.lexsort((gen.random(pool.size), -ages[pool]))
        sel = np.sort(np.concatenate([sel, pool[order[: m - sel.size]]]))
    return sel, np.full(sel.size, 1.0 / sel.size), forced


def _size_cdf(d: np.ndarray) -> np.ndarray:
    cdf = np.cumsum(d / d.sum())
    cdf[-1] = 1.0
    return cdf


# -- public per-round selectors ----------------------------------------------

def select_random_weighted(pop: ClientPopulation, m: int, rng: RngLike, t: int = 0) -> RoundOutcome:
    if not 1 <= m <= pop.n:
        raise InvalidParameterError(f"need 1 <= m <= n, got m={m}, n={pop.n}")
    sel, w, _ = _draw_random_weighted(as_generator(rng), pop.d, m)
    return RoundOutcome(t, sel, w)


def select_probabilistic(pop: ClientPopulation, m: int, rng: RngLike, t: int = 0) -> RoundOutcome:
    if m < 1:
        raise InvalidParameterError("m must be >= 1")
    sel, w, _ = _draw_probabilistic(as_generator(rng), _size_cdf(pop.d), m)
    return RoundOutcome(t, sel, w)


def select_markov(
    pop: ClientPopulation,
    chain: MarkovChainSpec,
    rng: RngLike,
    t: int = 0,
    exact_m: str = "off",
    m: Optional[int] = None,
) -> RoundOutcome:
    if pop.ages.max() > chain.m_prime:
        raise InvalidStateError(f"client age {pop.ages.max()} exceeds m'={chain.m_prime}")
    if exact_m != "off" and m is None:
        raise InvalidParameterError("exact_m trimming/padding needs a target m")
    sel, w, forced = _draw_markov(as_generator(rng), chain.p, pop.ages, m, exact_m)
    return RoundOutcome(t, sel, w, forced)


def forced_selection_probability(pop: ClientPopulation, chain: MarkovChainSpec) -> float:
    """Probability that no client self-selects given the current ages."""
    return float(np.prod(1.0 - chain.p[pop.ages]))


class PolicyRunner:
    """Stateful round-by-round driver: holds the ages and the generator."""

    def __init__(self, pop: ClientPopulation, policy: PolicySpec, rng: RngLike):
        policy.check_population(pop.n)
        if policy.chain is not None and pop.ages.max() > policy.m_prime:
            raise InvalidStateError(f"client age {pop.ages.max()} exceeds m'={policy.m_prime}")
        self.policy = policy
        self.d = np.asarray(pop.d)
        self.q = pop.q
        self.ages = np.array(pop.ages, dtype=np.int64)
        self.gen = as_generator(rng)
        self._cdf = _size_cdf(self.d)
        self._p = None if policy.chain is None else np.asarray(policy.chain.p)

    def step(self):
        kind = self.policy.kind
        if kind is PolicyKind.RANDOM_WEIGHTED:
            out = _draw_random_weighted(self.gen, self.d, self.policy.m)
        elif kind is PolicyKind.PROBABILISTIC:
            out = _draw_probabilistic(self.gen, self._cdf, self.policy.m)
        else:
            out = _draw_markov(self.gen, self._p, self.ages, self.policy.m, self.policy.exact_m)
        self.ages = advance_ages(self.ages, out[0], self.policy.m_prime)
        return out

    def population(self) -> ClientPopulation:
        return ClientPopulation(d=self.d, ages=self.ages, q=self.q)


def run_selection(
    pop: ClientPopulation,
    policy: PolicySpec,
    T: int,
    burn_in: Optional[int] = None,
    rng: RngLike = 0,
) -> SelectionTrace:
    """Run ``burn_in + T`` rounds and keep the last ``T`` (re-indexed from 0)."""
    if T < 1:
        raise InvalidParameterError("T must be >= 1")
    if burn_in is None:
        burn_in = default_burn_in(policy.m_prime)
    if burn_in < 0:
        raise InvalidParameterError("burn_in must be >= 0")
    runner = PolicyRunner(pop, policy, rng)
    for _ in range(burn_in):
        runner.step()
    sels, ws = [], []
    forced = np.zeros(T, bool)
    for t in range(T):
        sel, w, f = runner.step()
        sels.append(sel)
        ws.append(w)
        forced[t] = f
    offsets = np.concatenate([[0], np.cumsum([s.size for s in sels])])
    return SelectionTrace(pop.n, offsets, np.concatenate(sels), np.concatenate(ws), forced, policy.tag)
