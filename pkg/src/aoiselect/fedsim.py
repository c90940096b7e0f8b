"""Federated averaging over synthetic strongly-convex quadratic clients.

Client ``i`` minimises F_i(theta) = 1/2 (theta - c_i)^T H_i (theta - c_i) with a
diagonal positive-definite H_i, so every constant the convergence analysis
needs (L, mu, theta*, Gamma) is known exactly.  Stochastic gradients are exact
gradients plus Gaussian noise.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np

from .core import (
    STREAM_SELECTION,
    STREAM_TRAINING,
    ClientPopulation,
    RngLike,
    RngSeed,
    RoundOutcome,
    SelectionTrace,
    _frozen,
    as_generator,
)
from .errors import InvalidParameterError, TrustRegionError
from .metrics import BoundInputs, bound_gamma
from .policies import PolicySpec, run_selection

logger = logging.getLogger(__name__)

DEFAULT_TARGET = 1e-3


@dataclass(frozen=True)
class FLTask:
    centers: np.ndarray  # (n, dim), the local optima theta_k*
    hdiag: np.ndarray  # (n, dim), diagonals of H_i
    q: np.ndarray
    L: float
    mu: float
    G2: float  # bound on ||grad F_i||^2 over the trust region
    trust_radius: float
    theta_star: np.ndarray
    Gamma: float

    @property
    def n(self) -> int:
        return self.centers.shape[0]

    @property
    def dim(self) -> int:
        return self.centers.shape[1]

    @property
    def theta_k_star(self) -> np.ndarray:
        return self.centers

    @property
    def F_star(self) -> float:
        return self.Gamma

    @classmethod
    def from_quadratics(cls, centers, hdiag, q=None) -> "FLTask":
        centers = np.atleast_2d(np.asarray(centers, dtype=np.float64))
        hdiag = np.atleast_2d(np.asarray(hdiag, dtype=np.float64))
        n = centers.shape[0]
        if hdiag.shape != centers.shape:
            raise InvalidParameterError("centers and curvatures must have the same shape")
        if np.any(hdiag <= 0):
            raise InvalidParameterError("curvatures must be positive")
        q = np.full(n, 1.0 / n) if q is None else np.asarray(q, dtype=np.float64)
        if q.shape != (n,) or np.any(q < 0) or abs(q.sum() - 1) > 1e-12:
            raise InvalidParameterError("q must be a probability vector over clients")
        qh = q[:, None] * hdiag
        theta_star = (qh * centers).sum(axis=0) / qh.sum(axis=0)
        gamma = float(q @ (0.5 * (hdiag * (theta_star - centers) ** 2).sum(axis=1)))
        radius = 10.0 * float(np.linalg.norm(theta_star)) + 10.0
        reach = radius + np.linalg.norm(centers, axis=1)
        g2 = float(np.max((hdiag.max(axis=1) * reach) ** 2))
        return cls(
            centers=_frozen(centers, np.float64),
            hdiag=_frozen(hdiag, np.float64),
            q=_frozen(q, np.float64),
            L=float(hdiag.max()),
            mu=float(hdiag.min()),
            G2=g2,
            trust_radius=radius,
            theta_star=_frozen(theta_star, np.float64),
            Gamma=max(gamma, 0.0),
        )

    def local_losses(self, theta) -> np.ndarray:
        """F_k(theta) for every client k."""
        diff = np.asarray(theta)[None, :] - self.centers
        return 0.5 * (self.hdiag * diff * diff).sum(axis=1)

    def losses_at(self, points) -> np.ndarray:
        """F_k(points[k]) for every client k."""
        diff = np.asarray(points) - self.centers
        return 0.5 * (self.hdiag * diff * diff).sum(axis=1)

    def global_loss(self, theta) -> float:
        return float(self.q @ self.local_losses(theta))

    def gradient(self, client: int, theta) -> np.ndarray:
        return self.hdiag[client] * (np.asarray(theta) - self.centers[client])

    def optimality_residual(self) -> float:
        """max |sum_i q_i H_i (theta* - c_i)|, zero up to rounding."""
        g = (self.q[:, None] * self.hdiag * (self.theta_star - self.centers)).sum(axis=0)
        return float(np.abs(g).max())


def make_synthetic_task(
    n: int,
    dim: int,
    heterogeneity: str = "iid",
    spread: float = 1.0,
    rng: RngLike = 0,
    alpha: Optional[float] = None,
    curvature: tuple[float, float] = (1.0, 4.0),
    prototypes: int = 10,
    q=None,
) -> FLTask:
    """Random quadratic clients around a common centre.

    ``iid``: c_i = c + spread * z_i with z_i standard normal.
    ``dirichlet``: c_i = c + w_i @ P where the ``prototypes`` rows of P are
    spread * N(0, I) and w_i ~ Dirichlet(alpha); small alpha puts each client
    near a single prototype, large alpha pulls every client to the average.
    Curvatures are uniform on ``curvature``.
    """
    if n < 1 or dim < 1:
        raise InvalidParameterError("n and dim must be >= 1")
    lo, hi = curvature
    if not 0 < lo <= hi:
        raise InvalidParameterError("curvature range must satisfy 0 < mu <= L")
    gen = as_generator(rng)
    base = gen.normal(size=dim)
    hdiag = gen.uniform(lo, hi, size=(n, dim))
    if heterogeneity == "iid":
        centers = base + spread * gen.normal(size=(n, dim))
    elif heterogeneity == "dirichlet":
        if alpha is None or not alpha > 0:
            raise InvalidParameterError(f"Dirichlet concentration must be positive, got {alpha}")
        protos = spread * gen.normal(size=(prototypes, dim))
        mix = gen.dirichlet(np.full(prototypes, float(alpha)), size=n)
        centers = base + mix @ protos
    else:
        raise InvalidParameterError(f"unknown heterogeneity {heterogeneity!r}")
    return FLTask.from_quadratics(centers, hdiag, q)


@dataclass(frozen=True)
class LRSchedule:
    """``decay``: eta0 * rate**t.  ``inverse``: 1 / (mu (t + shift))."""

    kind: str
    eta0: float = 0.1
    rate: float = 0.998
    mu: float = 1.0
    shift: float = 1.0

    def __post_init__(self):
        if self.kind == "decay":
            if not (self.eta0 > 0 and self.rate > 0):
                raise InvalidParameterError("decay schedule needs eta0 > 0 and rate > 0")
        elif self.kind == "inverse":
            if not (self.mu > 0 and self.shift > 0):
                raise InvalidParameterError("inverse schedule needs mu > 0 and a positive shift")
        else:
            raise InvalidParameterError(f"unknown learning-rate schedule {self.kind!r}")

    @classmethod
    def decay(cls, eta0: float = 0.1, rate: float = 0.998) -> "LRSchedule":
        return cls("decay", eta0=eta0, rate=rate)

    @classmethod
    def inverse(cls, mu: float, shift: float) -> "LRSchedule":
        return cls("inverse", mu=mu, shift=shift)

    @classmethod
    def for_bound(cls, task: FLTask, K: int) -> "LRSchedule":
        return cls.inverse(task.mu, bound_gamma(K, task.L, task.mu))

    def __call__(self, t: int) -> float:
        if self.kind == "decay":
            return self.eta0 * self.rate**t
        return 1.0 / (self.mu * (t + self.shift))


@dataclass(frozen=True)
class TrainingConfig:
    K: int = 5
    batch_size: int = 1
    T: int = 100
    lr_schedule: LRSchedule = field(default_factory=LRSchedule.decay)
    noise_sigma: float = 0.0
    seed: RngSeed = field(default_factory=lambda: RngSeed(0))
    target: float = DEFAULT_TARGET

    def __post_init__(self):
        if self.K < 1 or self.T < 1 or self.batch_size < 1:
            raise InvalidParameterError("K, T and batch_size must be >= 1")
        if self.noise_sigma < 0:
            raise InvalidParameterError("noise_sigma must be non-negative")

    @property
    def noise_std(self) -> float:
        """Per-coordinate std of the gradient noise after mini-batch averaging."""
        return self.noise_sigma / np.sqrt(self.batch_size)

    def gradient_noise_variance(self, dim: int) -> float:
        return dim * self.noise_std**2


def _local_updates(theta, task: FLTask, clients: np.ndarray, eta: float, K: int, noise_std: float, gen):
    c = task.centers[clients]
    h = task.hdiag[clients]
    y = np.repeat(np.asarray(theta, dtype=np.float64)[None, :], clients.size, axis=0)
    for _ in range(K):
        g = h * (y - c)
        if noise_std > 0:
            g = g + noise_std * gen.normal(size=y.shape)
        y = y - eta * g
    return y


def local_update(theta_global, task: FLTask, client: int, cfg: TrainingConfig, t: int, rng: RngLike) -> np.ndarray:
    """K noisy gradient steps from the global model; equals theta - eta K d."""
    if not 0 <= client < task.n:
        raise InvalidParameterError(f"client {client} out of range")
    out = _local_updates(theta_global, task, np.array([client]), cfg.lr_schedule(t), cfg.K, cfg.noise_std, as_generator(rng))
    return out[0]


def aggregate(locals_: Mapping[int, np.ndarray], outcome: RoundOutcome) -> np.ndarray:
    """Weighted sum of the selected local models, reduced in ascending client order."""
    missing = [int(i) for i in outcome.selected if int(i) not in locals_]
    if missing:
        raise InvalidParameterError(f"no local model for selected clients {missing}")
    acc = None
    for i, w in zip(outcome.selected.tolist(), outcome.weights.tolist()):
        term = w * np.asarray(locals_[i], dtype=np.float64)
        acc = term if acc is None else acc + term
    return acc


@dataclass(frozen=True)
class TrainingTrace:
    loss_gap: np.ndarray  # F(theta^{t+1}) - F* after round t
    dist2: np.ndarray  # ||theta^{t+1} - theta*||^2
    thetas: np.ndarray  # theta^0 .. theta^T
    selection: SelectionTrace
    target: float

    @property
    def T(self) -> int:
        return self.loss_gap.size

    @property
    def final_theta(self) -> np.ndarray:
        return self.thetas[-1]

    @property
    def selected_counts(self) -> np.ndarray:
        return self.selection.selected_counts

    @property
    def rounds_to_target(self) -> Optional[int]:
        """Rounds completed when the loss gap first reaches the target."""
        hit = np.flatnonzero(self.loss_gap <= self.target)
        return int(hit[0]) + 1 if hit.size else None


def run_federated(
    task: FLTask,
    policy: PolicySpec,
    cfg: TrainingConfig,
    population: Optional[ClientPopulation] = None,
    burn_in: Optional[int] = None,
) -> TrainingTrace:
    """FedAvg from theta^0 = 0 under ``policy``; deterministic given ``cfg.seed``.

    Selection does not depend on the model, so the selection trace is drawn
    first (ages advance for every client every round) and training replays it.
    """
    pop = population if population is not None else ClientPopulation.homogeneous(task.n)
    if pop.n != task.n:
        raise InvalidParameterError("population and task disagree on the number of clients")
    if policy.m > task.n:
        raise InvalidParameterError(f"m={policy.m} exceeds n={task.n}")
    selection = run_selection(pop, policy, cfg.T, burn_in, cfg.seed.stream(STREAM_SELECTION))
    gen = cfg.seed.stream(STREAM_TRAINING).generator()
    theta = np.zeros(task.dim)
    thetas = np.empty((cfg.T + 1, task.dim))
    thetas[0] = theta
    loss_gap = np.empty(cfg.T)
    dist2 = np.empty(cfg.T)
    f_star = task.F_star
    for t in range(cfg.T):
        a, b = selection.offsets[t], selection.offsets[t + 1]
        clients, weights = selection.clients[a:b], selection.weights[a:b]
        local = _local_updates(theta, task, clients, cfg.lr_schedule(t), cfg.K, cfg.noise_std, gen)
        theta = weights @ local
        if np.linalg.norm(theta) > task.trust_radius:
            raise TrustRegionError(f"round {t}: iterate left the ball of radius {task.trust_radius:.3g}")
        thetas[t + 1] = theta
        loss_gap[t] = task.global_loss(theta) - f_star
        dist2[t] = float(((theta - task.theta_star) ** 2).sum())
    return TrainingTrace(loss_gap, dist2, thetas, selection, cfg.target)


def bound_inputs(task: FLTask, cfg: TrainingConfig, m: int, Sigma: float, rho_under: float, rho_over: float) -> BoundInputs:
    """Collect the task's exact constants for :func:`convergence_bound`.

    G^2 bounds E||g||^2 = ||grad F_i||^2 + sigma^2 on the trust region.
    """
    sigma2 = cfg.gradient_noise_variance(task.dim)
    return BoundInputs(
        L=task.L,
        mu=task.mu,
        K=cfg.K,
        m=m,
        G2=task.G2 + sigma2,
        sigma2=sigma2,
        Gamma=task.Gamma,
        rho_under=rho_under,
        rho_over=rho_over,
        Sigma=Sigma,
        theta0_dist2=float((task.theta_star**2).sum()),
    )
