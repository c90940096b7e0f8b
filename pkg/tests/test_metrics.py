import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from aoiselect.core import ClientPopulation, RoundOutcome, SelectionTrace
from aoiselect.errors import (
    InsufficientDataError,
    InvalidParameterError,
    SkewUndefinedError,
)
from aoiselect.fedsim import FLTask
from aoiselect.markov import MarkovChainSpec, optimal_markov_chain
from aoiselect.metrics import (
    BoundInputs,
    convergence_bound,
    estimate_selection_skew,
    inter_selection_histogram,
    second_moment_gap,
    running_sigma,
    selection_rates,
    selection_skew,
    sigma_markov_exact,
    sigma_monte_carlo,
    sigma_probabilistic_exact,
    sigma_random_uniform,
    sigma_random_weighted_exact,
    window_counts,
    windowed_selection_stability,
)
from aoiselect.policies import PolicySpec, run_selection


def trace_of(rounds, n):
    """Trace from a list of {client: weight} dicts."""
    outs = []
    for t, wm in enumerate(rounds):
        sel = sorted(wm)
        outs.append(RoundOutcome(t, sel, [wm[i] for i in sel]))
    return SelectionTrace.from_outcomes(outs, n)


def test_sigma_zero_for_constant_weights():
    tr = trace_of([{2: 1.0}] * 50, 4)
    est = sigma_monte_carlo(tr)
    assert est.sigma == 0.0
    assert np.allclose(est.per_client_gamma, [0, 0, 1, 0])


def test_sigma_matches_direct_variance():
    rng = np.random.default_rng(0)
    rounds = []
    for _ in range(200):
        k = rng.integers(1, 5)
        sel = rng.choice(6, k, replace=False)
        w = rng.dirichlet(np.ones(k))
        rounds.append(dict(zip(sel.tolist(), w.tolist())))
    tr = trace_of(rounds, 6)
    dense = tr.dense_weights()
    est = sigma_monte_carlo(tr)
    assert np.allclose(est.per_client_var, dense.var(axis=0), atol=1e-12)
    assert est.sigma == pytest.approx(dense.var(axis=0).sum(), abs=1e-12)
    assert np.all(est.per_client_gamma >= est.per_client_var)
    assert est.stderr > 0 and est.rounds_used == 200
    assert running_sigma(tr)[-1] == pytest.approx(est.sigma, abs=1e-12)
    assert running_sigma(tr, chunk=7)[17] == pytest.approx(dense[:18].var(axis=0).sum(), abs=1e-12)


def test_sigma_needs_two_rounds():
    with pytest.raises(InsufficientDataError):
        sigma_monte_carlo(trace_of([{0: 1.0}], 2))


def test_sigma_random_weighted_hand_enumeration():
    # subsets of [1,2,3] of size 2, weight 0 when left out
    per_client = np.array([[1 / 3, 2 / 3, 0], [1 / 4, 0, 3 / 4], [0, 2 / 5, 3 / 5]])
    expected = per_client.var(axis=0).sum()
    assert sigma_random_weighted_exact([1, 2, 3], 2) == pytest.approx(expected, abs=1e-15)


def test_sigma_random_weighted_special_cases():
    assert sigma_random_weighted_exact([1] * 10, 3) == pytest.approx(1 / 3 - 1 / 10)
    assert sigma_random_uniform(10, 3) == pytest.approx(0.23333333333)
    assert sigma_random_weighted_exact([4, 1, 7], 3) == pytest.approx(0.0, abs=1e-15)
    with pytest.raises(InvalidParameterError):
        sigma_random_weighted_exact(np.ones(21), 3)


def test_sigma_probabilistic_closed_forms():
    assert sigma_probabilistic_exact(np.full(100, 0.01), 15) == pytest.approx(0.066)
    assert sigma_probabilistic_exact([1.0] + [0.0] * 9, 4) == 0.0
    # four equally likely draw sequences of two clients
    draws = list(itertools.product([0, 1], repeat=2))
    w0 = np.array([sum(1 for x in d if x == 0) / 2 for d in draws])
    assert sigma_probabilistic_exact([0.5, 0.5], 2) == pytest.approx(2 * w0.var())
    assert sigma_probabilistic_exact([0.5, 0.5], 2) == pytest.approx(0.25)
    with pytest.raises(InvalidParameterError):
        sigma_probabilistic_exact([0.5, 0.6], 2)


def test_sigma_markov_closed_form():
    chain = optimal_markov_chain(100, 15, 10).chain
    # per client: selected with prob p, then weight 1 / (1 + Binomial(n-1, p))
    n, p = 100, 0.15
    k = np.arange(n)
    pmf = stats.binom.pmf(k, n - 1, p)
    m1 = p * (pmf / (1 + k)).sum()
    m2 = p * (pmf / (1 + k) ** 2).sum()
    # an empty round forces one client in uniformly: weight 1 with prob (1-p)^n / n
    forced = (1 - p) ** n / n
    per_client = (m2 + forced) - (m1 + forced) ** 2
    assert sigma_markov_exact(n, chain) == pytest.approx(n * per_client, abs=1e-12)
    assert sigma_markov_exact(n, chain) == pytest.approx(0.061, abs=5e-4)
    assert sigma_markov_exact(1, MarkovChainSpec.from_probs([0.4])) == pytest.approx(0.0, abs=1e-15)
    assert sigma_markov_exact(7, MarkovChainSpec.from_probs([1.0, 1.0])) == pytest.approx(0.0, abs=1e-15)


def test_sigma_markov_against_binomial_monte_carlo():
    rng = np.random.default_rng(2)
    s = np.maximum(rng.binomial(30, 0.1, size=400_000), 1)
    mc = (1 / s).mean() - 1 / 30
    exact = sigma_markov_exact(30, MarkovChainSpec.from_probs([0.1]))
    assert exact == pytest.approx(mc, abs=3e-3)


def test_histogram_counts_gaps_and_censoring():
    # client 0 at t=0,3,5; client 1 once; client 2 never
    tr = trace_of([{0: 1.0}, {1: 1.0}, {1: 0.5, 0: 0.5}, {0: 1.0}, {1: 1.0}, {0: 1.0}], 3)
    h = inter_selection_histogram(tr)
    # direct recomputation
    times = {i: [t for t, o in enumerate(tr) if i in o.selected] for i in range(3)}
    gaps = sorted(g for ts in times.values() for g in np.diff(ts))
    assert sorted(h.samples().tolist()) == gaps
    assert h.censored_count == sum(len(ts) <= 1 for ts in times.values())


def test_histogram_single_round_is_empty():
    h = inter_selection_histogram(trace_of([{0: 0.5, 1: 0.5}], 3))
    assert h.total == 0 and h.censored_count == 3


def test_histogram_optimal_chain_law():
    pop = ClientPopulation.homogeneous(100)
    tr = run_selection(pop, PolicySpec.build("markov_optimal", 100, 15, 10), 20_000, rng=1)
    h = inter_selection_histogram(tr)
    freq = dict(zip(h.gaps.tolist(), h.frequencies.tolist()))
    assert set(freq) <= {1, 6, 7} and freq.get(1, 0) < 0.01
    assert freq[6] == pytest.approx(1 / 3, abs=0.02)


def test_selection_rates():
    tr = trace_of([{0: 1.0}, {0: 0.5, 1: 0.5}], 4)
    per_client, per_round = selection_rates(tr)
    assert per_client.tolist() == [1.0, 0.5, 0, 0]
    assert per_round.tolist() == [0.25, 0.5]


def test_window_counts_and_stability():
    # round-robin over 4 clients: every window of length 4 holds one selection each
    rounds = [{t % 4: 1.0} for t in range(40)]
    tr = trace_of(rounds, 4)
    Y = window_counts(tr, 4)
    assert Y.shape == (10, 4) and np.all(Y == 1)
    assert windowed_selection_stability(tr, 4) == 0.0
    assert windowed_selection_stability(tr, 40) == 0.0
    assert windowed_selection_stability(tr, 3) > 0
    with pytest.raises(InsufficientDataError):
        windowed_selection_stability(tr, 41)


def test_stability_optimal_beats_random():
    pop = ClientPopulation.homogeneous(100)
    opt = run_selection(pop, PolicySpec.build("markov_optimal", 100, 15, 10), 2000, rng=3)
    rnd = run_selection(pop, PolicySpec.build("random_weighted", 100, 15), 2000, rng=3)
    for w in (10, 20, 50, 100):
        assert windowed_selection_stability(opt, w) < windowed_selection_stability(rnd, w)


def test_skew_identical_clients_is_one():
    task = FLTask.from_quadratics(np.zeros((5, 3)), np.ones((5, 3)))
    tr = trace_of([{i: 0.2 for i in range(5)}] * 4, 5)
    thetas = np.random.default_rng(0).normal(size=(4, 3))
    est = estimate_selection_skew(task, tr, thetas, np.ones(3), task.theta_k_star)
    assert np.allclose(est.rho_t, 1.0) and np.allclose(est.rho_star_t, 1.0)


def test_skew_matches_direct_quadratic_evaluation():
    rng = np.random.default_rng(4)
    centers = rng.normal(size=(6, 2))
    h = rng.uniform(1, 3, size=(6, 2))
    task = FLTask.from_quadratics(centers, h)
    tr = trace_of([{0: 0.3, 4: 0.7}, {2: 1.0}, {1: 0.5, 3: 0.25, 5: 0.25}], 6)
    thetas = rng.normal(size=(3, 2))
    est = estimate_selection_skew(task, tr, thetas, task.theta_star, centers)
    for t, o in enumerate(tr):
        F = [0.5 * h[k] @ (thetas[t] - centers[k]) ** 2 for k in range(6)]
        num = sum(w * F[k] for k, w in zip(o.selected, o.weights))
        den = np.mean(F)
        assert est.rho_t[t] == pytest.approx(num / den)
    assert est.rho_under == pytest.approx(est.rho_t.min())
    assert est.rho_over == pytest.approx(est.rho_star_t.max())


def test_skew_undefined_rounds_are_skipped():
    task = FLTask.from_quadratics(np.zeros((2, 1)), np.ones((2, 1)))
    with pytest.raises(SkewUndefinedError):
        selection_skew(np.array([1.0, 0]), np.zeros(2), task.q, 0.0)
    tr = trace_of([{0: 1.0}, {1: 1.0}], 2)
    est = estimate_selection_skew(task, tr, np.array([[0.0], [1.0]]), np.array([1.0]), task.centers)
    assert est.skipped_rounds == (0,)
    assert est.rho_t.size == 1


def bound_inputs(**kw):
    base = dict(L=4.0, mu=1.0, K=5, m=15, G2=10.0, sigma2=0.1, Gamma=0.5, rho_under=0.8, rho_over=1.2, Sigma=0.06, theta0_dist2=3.0)
    base.update(kw)
    return BoundInputs(**base)


def test_bound_monotone_in_sigma_and_skew():
    b = bound_inputs()
    assert convergence_bound(bound_inputs(Sigma=0.05), 100) < convergence_bound(b, 100)
    assert convergence_bound(bound_inputs(rho_under=0.9), 100) < convergence_bound(b, 100)
    assert convergence_bound(b, 1000) < convergence_bound(b, 100)
    assert convergence_bound(b, 100, "appendix") > convergence_bound(b, 100, "main")


def test_bound_without_heterogeneity_decays_to_zero():
    b = bound_inputs(Gamma=0.0, rho_under=1.0, rho_over=1.0)
    gamma = 4 * 5 * 6 * 4.0
    v1, v2 = convergence_bound(b, 100), convergence_bound(b, 10_100)
    assert v1 * (100 + gamma) == pytest.approx(v2 * (10_100 + gamma))


def test_bound_input_validation():
    with pytest.raises(InvalidParameterError):
        bound_inputs(K=1)
    with pytest.raises(InvalidParameterError):
        bound_inputs(rho_under=1.3)
    with pytest.raises(InvalidParameterError):
        convergence_bound(bound_inputs(), 10, variant="other")


@given(st.integers(2, 12), st.integers(1, 6), st.integers(0, 2**31))
@settings(max_examples=25, deadline=None)
def test_second_moment_inequality_random_weighted(n, dim, seed):
    m = max(1, n // 3)
    rng = np.random.default_rng(seed)
    d = rng.integers(1, 20, size=n)
    x = rng.normal(size=(n, dim))
    tr = run_selection(ClientPopulation.from_sizes(d), PolicySpec.build("random_weighted", n, m), 3000, rng=seed)
    mean, se = second_moment_gap(tr, x, m)
    assert mean <= 3 * se + 1e-12


def test_second_moment_inequality_needs_at_most_m_selected():
    # m = 1 but Markov rounds often select two or more clients
    rng = np.random.default_rng(0)
    rng.normal(size=(17, 3))
    x = rng.normal(size=(17, 3))
    pop = ClientPopulation.homogeneous(17)
    loose = run_selection(pop, PolicySpec.build("markov_optimal", 17, 1, 6), 200_000, rng=1)
    mean, se = second_moment_gap(loose, x, 1)
    assert mean > 3 * se
    trimmed = run_selection(pop, PolicySpec.build("markov_optimal", 17, 1, 6, exact_m="trim"), 20_000, rng=1)
    mean, se = second_moment_gap(trimmed, x, 1)
    assert mean <= 0
