import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from mspr.model import InvalidParamsError, MsprParams, count_covariance, marginal_rates, table1_params
from mspr.simulator import SpikeDataset, event_streams, simulate_dataset, simulate_trial, trial_rng
from mspr.skellam_math import fp_cdf, fp_moments

from test_model import random_params


def uncoupled(up, down):
    p = len(up)
    return MsprParams(up, down, np.zeros((p, p)), np.zeros((p, p), int))


# --- SpikeDataset ----------------------------------------------------------


def test_dataset_validation():
    ok = SpikeDataset(1.0, ((np.array([0.2, 1.0]),),))
    assert ok.n_trials == 1 and ok.p == 1
    with pytest.raises(ValueError):
        SpikeDataset(1.0, ((np.array([0.0]),),))
    with pytest.raises(ValueError):
        SpikeDataset(1.0, ((np.array([1.5]),),))
    with pytest.raises(ValueError):
        SpikeDataset(1.0, ((np.array([0.5, 0.5]),),))
    with pytest.raises(ValueError):
        SpikeDataset(1.0, ((np.array([0.5]),), (np.array([0.1]), np.array([0.2]))))
    with pytest.raises(ValueError):
        SpikeDataset(1.0, ())
    with pytest.raises(ValueError):
        SpikeDataset(-1.0, ((np.array([]),),))


def test_dataset_counts_and_selection():
    d = SpikeDataset(2.0, ((np.array([0.5, 1.0]), np.array([])), (np.array([1.5]), np.array([0.1, 0.2, 0.3]))))
    assert d.counts().tolist() == [[2, 0], [1, 3]]
    sub = d.select_trials([1, 1])
    assert sub.counts().tolist() == [[1, 3], [1, 3]]
    assert d.select_neurons([1]).counts().tolist() == [[0], [3]]
    assert d == SpikeDataset(2.0, tuple(tuple(np.array(t) for t in tr) for tr in d.spikes))


# --- event streams ---------------------------------------------------------


def test_event_streams_layout():
    gamma = np.array([[0, 2.0], [2.0, 0]])
    par = MsprParams([3.0, 4.0], [1.0, 0.5], gamma, [[0, 1], [-1, 0]])
    rates, incs = event_streams(par)
    assert rates.tolist() == [3.0, 1.0, 4.0, 0.5, 2.0, 2.0]
    assert incs[4].tolist() == [1, -1]
    assert incs[5].tolist() == [-1, 1]
    assert incs[:4].tolist() == [[1, 0], [-1, 0], [0, 1], [0, -1]]


# --- single-trial behaviour ------------------------------------------------


def test_invalid_params_rejected():
    with pytest.raises(InvalidParamsError):
        simulate_trial(uncoupled([1.0], [-1.0]), 1.0, np.random.default_rng(0))
    with pytest.raises(ValueError):
        simulate_trial(uncoupled([1.0], [1.0]), math.inf, np.random.default_rng(0))


def test_pure_up_neuron_is_poisson_process():
    par = uncoupled([8.0], [0.0])
    data = simulate_dataset(par, 50.0, 40, seed=3)
    isis = np.concatenate([np.diff(tr) for tr in data.neuron_trains(0)])
    assert stats.kstest(isis, "expon", args=(0, 1 / 8.0)).pvalue > 1e-3
    counts = data.counts()[:, 0]
    assert abs(counts.mean() - 400) < 4 * math.sqrt(400 / 40)


def test_pure_up_neuron_spikes_at_every_event():
    par = uncoupled([5.0], [0.0])
    spikes, tr = simulate_trial(par, 10.0, np.random.default_rng(1), trace=True)
    assert np.array_equal(spikes[0], tr.neurons[0].times)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), p=st.integers(1, 4), T=st.floats(0.5, 20.0))
def test_trace_invariants(seed, p, T):
    rng = np.random.default_rng(seed)
    par = random_params(p, rng)
    spikes, trace = simulate_trial(par, T, rng, trace=True)
    for i, nt in enumerate(trace.neurons):
        assert nt.resets.sum() == len(spikes[i])
        assert np.array_equal(nt.times[nt.resets], spikes[i])
        # resets make the recorded path a running max minus itself, never above 0
        assert np.all(nt.path() <= 0)
        # each reset happens exactly where the reset path would have reached +1
        before = np.concatenate(([0], nt.path()[:-1]))
        assert np.array_equal(nt.resets, before + nt.increments == 1)
        running_max = max(0, nt.unreset_path().max(initial=0))
        assert len(spikes[i]) == running_max
        assert np.all(np.isin(nt.increments, (-1, 1)))
        assert np.all(np.diff(nt.times) >= 0) and np.all(nt.times <= T)


def test_coupled_events_hit_both_neurons_at_once():
    gamma = np.array([[0, 50.0], [50.0, 0]])
    par = MsprParams([0.0, 0.0], [0.0, 0.0], gamma, [[0, 1], [1, 0]])
    spikes, _ = simulate_trial(par, 5.0, np.random.default_rng(2), trace=True)
    # the only streams are shared, so both latent paths are identical
    assert np.array_equal(spikes[0], spikes[1])


def test_latent_trace_value_is_sum_of_increments():
    par = table1_params()
    _, tr = simulate_trial(par, 3.0, np.random.default_rng(4), trace=True)
    for nt in tr.neurons:
        assert nt.increments.size > 0
        assert nt.value == int(nt.unreset_path()[-1])


# --- datasets --------------------------------------------------------------


def test_determinism_and_substreams():
    par = table1_params()
    a = simulate_dataset(par, 10.0, 6, seed=9)
    b = simulate_dataset(par, 10.0, 6, seed=9)
    c = simulate_dataset(par, 10.0, 6, seed=10)
    assert a == b
    assert a != c
    # trial r depends only on (seed, r)
    first = simulate_dataset(par, 10.0, 3, seed=9)
    assert first == a.select_trials([0, 1, 2])
    spikes, _ = simulate_trial(par, 10.0, trial_rng(9, 4))
    assert all(np.array_equal(x, y) for x, y in zip(spikes, a.spikes[4]))


def test_parallel_equals_serial():
    par = table1_params()
    assert simulate_dataset(par, 5.0, 8, seed=1, n_jobs=2) == simulate_dataset(par, 5.0, 8, seed=1)


def test_single_trial_dataset_and_zero_trials():
    d = simulate_dataset(table1_params(), 10.0, 1, seed=1)
    assert d.n_trials == 1 and d.p == 3
    with pytest.raises(ValueError):
        simulate_dataset(table1_params(), 10.0, 0, seed=1)


def expected_record_count(l1, l2, T, n, rng):
    """E[max(0, max_s S(s))] on [0, T] from the jump chain of S, independently."""
    total = l1 + l2
    n_events = rng.poisson(total * T, size=n)
    out = np.empty(n)
    for r, m in enumerate(n_events):
        steps = np.where(rng.random(m) < l1 / total, 1, -1)
        out[r] = max(0, np.cumsum(steps).max(initial=0))
    return out


def test_table1_dataset_counts_match_record_count_oracle():
    par = table1_params()
    data = simulate_dataset(par, 10.0, 50, seed=1)
    assert data.n_trials == 50 and data.p == 3
    big = simulate_dataset(par, 10.0, 2000, seed=2)
    counts = big.counts()
    rng = np.random.default_rng(0)
    for i in range(3):
        r = marginal_rates(par, i)
        ref = expected_record_count(r.lambda1, r.lambda2, 10.0, 4000, rng)
        diff = counts[:, i].mean() - ref.mean()
        se = math.sqrt(counts[:, i].var() / 2000 + ref.var() / 4000)
        assert abs(diff) < 4 * se
    # neuron 1 (0-based 0) runs near (l1 - l2) T = 50 spikes per trial
    assert 30 < counts[:, 0].mean() < 60


def test_marginal_law_matches_reparameterised_single_neuron():
    par = table1_params()
    coupled = simulate_dataset(par, 10.0, 400, seed=5)
    r = marginal_rates(par, 2)
    alone = simulate_dataset(uncoupled([r.lambda1], [r.lambda2]), 10.0, 400, seed=6)
    a = np.concatenate([np.diff(t) for t in coupled.neuron_trains(2)])
    b = np.concatenate([np.diff(t) for t in alone.neuron_trains(0)])
    assert stats.ks_2samp(a, b).pvalue > 1e-3


def test_isi_moments_converge_to_first_passage_moments():
    # fast-mixing marginal so a long window makes truncation negligible
    gamma = np.array([[0, 3.0], [3.0, 0]])
    par = MsprParams([17.0, 12.0], [2.0, 1.0], gamma, [[0, 1], [1, 0]])
    data = simulate_dataset(par, 500.0, 20, seed=8)
    for i in range(2):
        isis = np.concatenate([np.diff(t) for t in data.neuron_trains(i)])
        m, v = fp_moments(marginal_rates(par, i))
        n = isis.size
        assert abs(isis.mean() - m) < 3.5 * math.sqrt(v / n)
        se_v = math.sqrt((np.mean((isis - isis.mean()) ** 4) - isis.var() ** 2) / n)
        assert abs(isis.var(ddof=1) - v) < 3.5 * se_v
        r = marginal_rates(par, i)
        assert stats.kstest(isis, lambda t: fp_cdf(t, r, method="series")).pvalue > 1e-3


@pytest.mark.parametrize("sign", [1, -1])
def test_count_correlation_sign(sign):
    gamma = np.array([[0, 10.0], [10.0, 0]])
    par = MsprParams([5.0, 5.0], [3.0, 3.0], gamma, [[0, 1], [sign, 0]])
    data = simulate_dataset(par, 10.0, 300, seed=12)  # gamma T = 100
    c = np.corrcoef(data.counts().T)[0, 1]
    assert np.sign(c) == sign
    assert abs(c) > 0.2


def test_latent_covariance_matches_model():
    par = table1_params()
    T, n = 2.0, 4000
    vals = np.empty((n, 3))
    for r in range(n):
        _, tr = simulate_trial(par, T, trial_rng(21, r), trace=True)
        vals[r] = [nt.value for nt in tr.neurons]
    c = np.cov(vals, rowvar=False)
    for i, j in [(0, 1), (0, 2), (1, 2)]:
        target = count_covariance(par, i, j, T)
        var_i = vals[:, i].var()
        var_j = vals[:, j].var()
        se = math.sqrt((var_i * var_j + target**2) / n)
        assert abs(c[i, j] - target) < 3.5 * se
