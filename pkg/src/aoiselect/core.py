"""Domain types, seeded randomness and population bookkeeping.

Everything here is an immutable value: arrays held by the dataclasses are
flagged read-only and operations return new objects.
"""
from __future__ import annotations

import functools
from dataclasses import dataclass
from typing import Iterable, Iterator, Sequence, Union

import numpy as np

from .errors import InvalidOutcomeError, InvalidParameterError

_NORM_TOL = 1e-12
ZIPF_SUPPORT_MAX = 10**6

# Substream identifiers, so that e.g. the population draw does not shift when
# a policy consumes a different number of variates.
STREAM_POPULATION = 0
STREAM_SELECTION = 1
STREAM_TASK = 2
STREAM_TRAINING = 3


def _frozen(a, dtype) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class RngSeed:
    """A (seed, stream_id) pair; identical pairs give bit-identical streams."""

    seed: int
    stream_id: int = 0

    def __post_init__(self):
        for name in ("seed", "stream_id"):
            v = getattr(self, name)
            if not (0 <= int(v) < 2**64):
                raise InvalidParameterError(f"{name} must be an unsigned 64-bit integer, got {v}")

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(entropy=int(self.seed), spawn_key=(int(self.stream_id),))
        return np.random.Generator(np.random.PCG64(ss))

    def stream(self, stream_id: int) -> "RngSeed":
        """Same seed, different stream."""
        return RngSeed(self.seed, stream_id)


RngLike = Union[RngSeed, np.random.Generator, int]


def as_generator(rng: RngLike) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    if isinstance(rng, RngSeed):
        return rng.generator()
    if isinstance(rng, (int, np.integer)):
        return RngSeed(int(rng)).generator()
    raise TypeError(f"cannot build a random generator from {type(rng).__name__}")


@dataclass(frozen=True)
class ClientPopulation:
    """Dataset sizes ``d``, current ages and importances ``q`` of ``n`` clients."""

    d: np.ndarray
    ages: np.ndarray
    q: np.ndarray

    def __post_init__(self):
        d = _frozen(self.d, np.int64)
        ages = _frozen(self.ages, np.int64)
        q = _frozen(self.q, np.float64)
        if d.ndim != 1 or d.size < 1:
            raise InvalidParameterError("population needs at least one client")
        if ages.shape != d.shape or q.shape != d.shape:
            raise InvalidParameterError("d, ages and q must all have length n")
        if np.any(d < 1):
            raise InvalidParameterError("dataset sizes must be >= 1")
        if np.any(ages < 0):
            raise InvalidParameterError("ages must be non-negative")
        if np.any(q < 0) or abs(q.sum() - 1.0) > _NORM_TOL:
            raise InvalidParameterError("importances q must be non-negative and sum to 1")
        object.__setattr__(self, "d", d)
        object.__setattr__(self, "ages", ages)
        object.__setattr__(self, "q", q)

    @property
    def n(self) -> int:
        return int(self.d.size)

    @classmethod
    def from_sizes(cls, d: Sequence[int], importance: str = "data") -> "ClientPopulation":
        """Fresh population (all ages 0). ``importance`` is ``"data"`` or ``"uniform"``."""
        d = np.asarray(d, dtype=np.int64)
        if importance == "data":
            q = d / d.sum()
        elif importance == "uniform":
            q = np.full(d.size, 1.0 / d.size)
        else:
            raise InvalidParameterError(f"unknown importance model {importance!r}")
        return cls(d=d, ages=np.zeros(d.size, dtype=np.int64), q=q)

    @classmethod
    def homogeneous(cls, n: int, size: int = 1) -> "ClientPopulation":
        return cls.from_sizes(np.full(n, size, dtype=np.int64))

    def with_ages(self, ages) -> "ClientPopulation":
        return ClientPopulation(d=self.d, ages=ages, q=self.q)


@dataclass(frozen=True)
class RoundOutcome:
    """Clients selected in round ``t`` and their aggregation weights.

    ``selected`` is sorted ascending and ``weights`` is aligned with it; any
    client not in ``selected`` implicitly has weight 0.
    """

    t: int
    selected: np.ndarray
    weights: np.ndarray
    forced: bool = False

    def __post_init__(self):
        sel = _frozen(self.selected, np.int64)
        w = _frozen(self.weights, np.float64)
        if sel.ndim != 1 or sel.size == 0:
            raise InvalidOutcomeError("a round must select at least one client")
        if w.shape != sel.shape:
            raise InvalidOutcomeError("weights must align with selected clients")
        if np.any(np.diff(sel) <= 0):
            order = np.argsort(sel, kind="stable")
            sel, w = _frozen(sel[order], np.int64), _frozen(w[order], np.float64)
            if np.any(np.diff(sel) == 0):
                raise InvalidOutcomeError("selected clients must be distinct")
        if np.any(w < 0) or abs(w.sum() - 1.0) > _NORM_TOL:
            raise InvalidOutcomeError("weights must be non-negative and sum to 1")
        object.__setattr__(self, "selected", sel)
        object.__setattr__(self, "weights", w)

    def weight_map(self) -> dict[int, float]:
        return dict(zip(self.selected.tolist(), self.weights.tolist()))

    def dense(self, n: int) -> np.ndarray:
        out = np.zeros(n)
        out[self.selected] = self.weights
        return out


class SelectionTrace:
    """Selection history over ``T`` consecutive rounds, stored in CSR form.

    Indexing (``trace[t]``) and iteration yield :class:`RoundOutcome` objects;
    the flat arrays ``offsets``, ``clients`` and ``weights`` are what the
    metrics work on.
    """

    def __init__(self, n: int, offsets, clients, weights, forced=None, policy_tag: str = ""):
        self.n = int(n)
        self.offsets = _frozen(offsets, np.int64)
        self.clients = _frozen(clients, np.int64)
        self.weights = _frozen(weights, np.float64)
        T = self.offsets.size - 1
        self.forced = _frozen(np.zeros(T, bool) if forced is None else forced, bool)
        self.policy_tag = policy_tag
        if T < 0 or self.offsets[0] != 0 or self.offsets[-1] != self.clients.size:
            raise InvalidOutcomeError("malformed trace offsets")
        if self.forced.size != T:
            raise InvalidOutcomeError("forced flags must have one entry per round")

    @classmethod
    def from_outcomes(cls, outcomes: Iterable[RoundOutcome], n: int, policy_tag: str = "") -> "SelectionTrace":
        outcomes = list(outcomes)
        for expected_t, o in enumerate(outcomes):
            if o.t != expected_t:
                raise InvalidOutcomeError(f"outcomes must be consecutive from t=0; got t={o.t} at position {expected_t}")
            if o.selected[-1] >= n:
                raise InvalidOutcomeError(f"client index {o.selected[-1]} out of range for n={n}")
        sizes = [o.selected.size for o in outcomes]
        offsets = np.concatenate([[0], np.cumsum(sizes, dtype=np.int64)])
        clients = np.concatenate([o.selected for o in outcomes]) if outcomes else np.zeros(0, np.int64)
        weights = np.concatenate([o.weights for o in outcomes]) if outcomes else np.zeros(0)
        forced = np.array([o.forced for o in outcomes], dtype=bool)
        return cls(n, offsets, clients, weights, forced, policy_tag)

    @property
    def T(self) -> int:
        return self.offsets.size - 1

    def __len__(self) -> int:
        return self.T

    def __getitem__(self, t: int) -> RoundOutcome:
        if t < 0:
            t += self.T
        if not 0 <= t < self.T:
            raise IndexError(t)
        a, b = self.offsets[t], self.offsets[t + 1]
        return RoundOutcome(t, self.clients[a:b], self.weights[a:b], bool(self.forced[t]))

    def __iter__(self) -> Iterator[RoundOutcome]:
        return (self[t] for t in range(self.T))

    @property
    def outcomes(self) -> list[RoundOutcome]:
        return list(self)

    @property
    def round_index(self) -> np.ndarray:
        """Round number of every entry of ``clients``."""
        return np.repeat(np.arange(self.T), np.diff(self.offsets))

    @property
    def selected_counts(self) -> np.ndarray:
        return np.diff(self.offsets)

    def dense_weights(self) -> np.ndarray:
        out = np.zeros((self.T, self.n))
        out[self.round_index, self.clients] = self.weights
        return out

    def __eq__(self, other) -> bool:
        if not isinstance(other, SelectionTrace):
            return NotImplemented
        return (
            self.n == other.n
            and self.policy_tag == other.policy_tag
            and np.array_equal(self.offsets, other.offsets)
            and np.array_equal(self.clients, other.clients)
            and np.array_equal(self.weights, other.weights)
            and np.array_equal(self.forced, other.forced)
        )

    __hash__ = None

    def __repr__(self) -> str:
        return f"SelectionTrace(policy={self.policy_tag!r}, n={self.n}, T={self.T})"


def advance_ages(ages: np.ndarray, selected: np.ndarray, m_prime: int) -> np.ndarray:
    """Array-level age update used in the hot loops."""
    new = np.minimum(ages + 1, m_prime)
    new[selected] = 0
    return new


def step_ages(pop: ClientPopulation, outcome: RoundOutcome, m_prime: int) -> ClientPopulation:
    """Selected clients reset to age 0; the rest age by one, saturating at ``m_prime``."""
    if outcome.selected.size and (outcome.selected[0] < 0 or outcome.selected[-1] >= pop.n):
        raise InvalidOutcomeError(f"selected clients {outcome.selected.tolist()} out of range for n={pop.n}")
    return pop.with_ages(advance_ages(pop.ages, outcome.selected, m_prime))


@functools.lru_cache(maxsize=8)
def _zipf_cdf(a: float) -> np.ndarray:
    k = np.arange(1, ZIPF_SUPPORT_MAX + 1, dtype=np.float64)
    # summing from the tail keeps the small terms from being swamped
    pmf = k ** (-a)
    cdf = np.cumsum(pmf[::-1])[::-1]
    cdf = 1.0 - cdf / cdf[0]
    cdf = np.concatenate([cdf[1:], [1.0]])
    cdf.setflags(write=False)
    return cdf


def zipf_pmf(a: float, kmax: int = ZIPF_SUPPORT_MAX) -> np.ndarray:
    """Truncated Zipf(a) probabilities for sizes 1..kmax."""
    k = np.arange(1, kmax + 1, dtype=np.float64)
    pmf = k ** (-a)
    return pmf / pmf.sum()


def zipf_dataset_sizes(n: int, a: float, d_min: int, rng: RngLike) -> np.ndarray:
    """``n`` Zipf(a) dataset sizes on [1, 10**6], clipped below at ``d_min``."""
    if n < 1:
        raise InvalidParameterError("n must be >= 1")
    if not a > 1:
        raise InvalidParameterError(f"Zipf shape must exceed 1, got {a}")
    if d_min < 1:
        raise InvalidParameterError("d_min must be >= 1")
    u = as_generator(rng).random(n)
    sizes = np.searchsorted(_zipf_cdf(float(a)), u, side="right") + 1
    return np.maximum(sizes, d_min).astype(np.int64)
