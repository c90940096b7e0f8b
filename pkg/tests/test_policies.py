import numpy as np
import pytest
from scipy import stats

from aoiselect.core import ClientPopulation, RngSeed
from aoiselect.errors import InvalidParameterError, InvalidStateError
from aoiselect.markov import MarkovChainSpec, optimal_markov_chain
from aoiselect.policies import (
    PolicyKind,
    PolicyRunner,
    PolicySpec,
    default_burn_in,
    forced_selection_probability,
    run_selection,
    select_markov,
    select_probabilistic,
    select_random_weighted,
    stationary_ages,
)

ALL_KINDS = [k.value for k in PolicyKind]


def test_random_weighted_uniform_weights():
    pop = ClientPopulation.homogeneous(100)
    o = select_random_weighted(pop, 15, 0)
    assert o.selected.size == 15
    assert np.allclose(o.weights, 1 / 15)


def test_random_weighted_full_participation():
    d = np.array([1, 2, 3, 4])
    o = select_random_weighted(ClientPopulation.from_sizes(d), 4, 0)
    assert o.selected.tolist() == [0, 1, 2, 3]
    assert np.allclose(o.weights, d / d.sum())


def test_random_weighted_singleton_is_fair():
    pop = ClientPopulation.from_sizes([1, 3])
    gen = np.random.default_rng(0)
    picks = [select_random_weighted(pop, 1, gen) for _ in range(4000)]
    assert all(o.weights.tolist() == [1.0] for o in picks)
    zeros = sum(o.selected[0] == 0 for o in picks)
    assert stats.binomtest(zeros, 4000, 0.5).pvalue > 1e-3


def test_random_weighted_rejects_m_above_n():
    with pytest.raises(InvalidParameterError):
        select_random_weighted(ClientPopulation.homogeneous(3), 4, 0)


def test_probabilistic_single_client():
    o = select_probabilistic(ClientPopulation.homogeneous(1), 5, 0)
    assert o.selected.tolist() == [0] and o.weights.tolist() == [1.0]


def test_probabilistic_repeat_draw_probability():
    pop = ClientPopulation.from_sizes([9, 1])
    gen = np.random.default_rng(1)
    n_trials = 20000
    both = sum(
        o.selected.tolist() == [0] and o.weights.tolist() == [1.0]
        for o in (select_probabilistic(pop, 2, gen) for _ in range(n_trials))
    )
    assert both / n_trials == pytest.approx(0.81, abs=4 * np.sqrt(0.81 * 0.19 / n_trials))


def test_probabilistic_weights_are_unbiased():
    pop = ClientPopulation.homogeneous(100)
    tr = run_selection(pop, PolicySpec.build("probabilistic", 100, 15), 20000, rng=3)
    mean_w = tr.dense_weights().mean(axis=0)
    assert np.allclose(mean_w, 0.01, atol=0.002)
    assert abs(mean_w.mean() - 0.01) < 1e-12


def test_markov_all_selected_at_age_zero():
    pop = ClientPopulation.homogeneous(8)
    chain = MarkovChainSpec.from_probs([1.0, 0.5])
    o = select_markov(pop, chain, 0)
    assert o.selected.tolist() == list(range(8))
    assert np.allclose(o.weights, 1 / 8)
    assert not o.forced


def test_markov_forced_selection_when_nobody_volunteers():
    pop = ClientPopulation.homogeneous(5)
    chain = optimal_markov_chain(100, 15, 10).chain
    assert forced_selection_probability(pop, chain) == 1.0
    o = select_markov(pop, chain, 4)
    assert o.forced and o.selected.size == 1 and o.weights.tolist() == [1.0]


def test_markov_rejects_age_above_cap():
    pop = ClientPopulation.homogeneous(3).with_ages([0, 4, 0])
    with pytest.raises(InvalidStateError):
        select_markov(pop, MarkovChainSpec.from_probs([0.2, 0.5, 1.0]), 0)


def test_markov_exact_m_trim_and_pad():
    chain = MarkovChainSpec.from_probs([1.0])
    pop = ClientPopulation.homogeneous(10)
    assert select_markov(pop, chain, 0, exact_m="trim", m=3).selected.size == 3
    lazy = MarkovChainSpec.from_probs([0.0, 0.0, 0.5])
    old = ClientPopulation.homogeneous(10).with_ages([0, 2, 1, 2, 0, 1, 0, 0, 0, 2])
    o = select_markov(old, lazy, 5, exact_m="pad", m=6)
    assert o.selected.size >= 6
    # padding favours the oldest clients first
    assert {1, 3, 9} <= set(o.selected.tolist())


def test_policy_spec_checks():
    with pytest.raises(InvalidParameterError):
        PolicySpec(PolicyKind.MARKOV_OPTIMAL, 15)
    with pytest.raises(InvalidParameterError):
        PolicySpec(PolicyKind.RANDOM_WEIGHTED, 15, chain=MarkovChainSpec.from_probs([1.0]))
    spec = PolicySpec.build("markov_optimal", 100, 15, 10)
    spec.check_population(100)
    with pytest.raises(InvalidParameterError):
        spec.check_population(90)
    assert PolicySpec.build("markov_monotone", 100, 15, 6).m_prime == 6
    assert default_burn_in(10) == 110


@pytest.mark.parametrize("kind", ALL_KINDS)
def test_single_round_trace(kind):
    tr = run_selection(ClientPopulation.homogeneous(100), PolicySpec.build(kind, 100, 15), 1, rng=0)
    assert tr.T == 1


def test_random_weighted_exact_count_every_round():
    tr = run_selection(ClientPopulation.homogeneous(100), PolicySpec.build("random_weighted", 100, 15), 1000, rng=2)
    assert np.all(tr.selected_counts == 15)


@pytest.mark.parametrize("kind", ["markov_optimal", "markov_monotone"])
def test_markov_steady_state_rate(kind):
    pop = ClientPopulation.homogeneous(100)
    tr = run_selection(pop, PolicySpec.build(kind, 100, 15, 10), 1000, burn_in=100, rng=5)
    freq = np.bincount(tr.clients, minlength=100) / tr.T
    assert freq.mean() == pytest.approx(0.15, abs=0.01)


def test_markov_mean_selected_count():
    pop = ClientPopulation.homogeneous(100)
    tr = run_selection(pop, PolicySpec.build("markov_optimal", 100, 15, 10), 100_000, rng=6)
    assert tr.selected_counts.mean() == pytest.approx(15, abs=0.1)


@pytest.mark.parametrize("kind", ALL_KINDS)
def test_weights_normalised_every_round(kind):
    d = np.arange(1, 31)
    tr = run_selection(ClientPopulation.from_sizes(d), PolicySpec.build(kind, 30, 5, 6), 500, rng=9)
    sums = np.add.reduceat(tr.weights, tr.offsets[:-1])
    assert np.allclose(sums, 1.0, atol=1e-12)


@pytest.mark.parametrize("kind", ALL_KINDS)
def test_selection_is_deterministic(kind):
    pop = ClientPopulation.from_sizes(np.arange(1, 21))
    spec = PolicySpec.build(kind, 20, 4, 5)
    assert run_selection(pop, spec, 300, rng=RngSeed(4, 1)) == run_selection(pop, spec, 300, rng=RngSeed(4, 1))
    assert run_selection(pop, spec, 300, rng=RngSeed(4, 1)) != run_selection(pop, spec, 300, rng=RngSeed(5, 1))


def test_runner_tracks_ages():
    pop = ClientPopulation.homogeneous(20)
    runner = PolicyRunner(pop, PolicySpec.build("markov_optimal", 20, 4, 10), 0)
    for _ in range(50):
        sel, _, _ = runner.step()
        assert np.all(runner.ages[sel] == 0)
    assert runner.population().ages.max() <= 10


def test_stationary_ages_start_in_steady_state():
    chain = optimal_markov_chain(100, 15, 10).chain
    pop = stationary_ages(ClientPopulation.homogeneous(20_000), chain, 0)
    counts = np.bincount(pop.ages, minlength=11) / pop.n
    assert np.allclose(counts, [0.15] * 6 + [0.1] + [0] * 4, atol=0.01)
    start = ClientPopulation.homogeneous(100).with_ages(pop.ages[:100])
    tr = run_selection(start, PolicySpec.build("markov_optimal", 100, 15, 10), 200, burn_in=0, rng=1)
    assert not tr.forced.any()
