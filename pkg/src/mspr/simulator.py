"""Exact event-driven simulation of the MSPR.

Every neuron's latent Skellam path is driven by its own up/down Poisson
streams plus, for each coupled pair ``i < j``, two shared streams at rate
``gamma_ij``: the shared "up" stream moves neuron ``i`` by ``a_ij`` and
neuron ``j`` by ``a_ji`` at the same instant, the "down" stream by the
negatives.  A neuron spikes each time its path reaches +1 and is then reset
to 0.  Equivalently, spikes are the record times of the unreset path, which
is how they are detected here (one cumulative sum per neuron).
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .model import MsprParams, check

__all__ = [
    "SpikeDataset",
    "NeuronTrace",
    "LatentTrace",
    "event_streams",
    "simulate_trial",
    "simulate_dataset",
    "trial_rng",
]


@dataclass(frozen=True, eq=False)
class SpikeDataset:
    """Multi-trial, multi-neuron spike times sharing one trial duration ``T``.

    ``spikes[r][i]`` is the sorted array of spike times of neuron ``i`` in
    trial ``r``; every time lies in ``(0, T]``.
    """

    T: float
    spikes: tuple

    def __post_init__(self):
        T = float(self.T)
        if not (math.isfinite(T) and T > 0):
            raise ValueError(f"trial duration T must be positive and finite, got {self.T!r}")
        trials = []
        p = None
        for r, trial in enumerate(self.spikes):
            trains = []
            for i, train in enumerate(trial):
                a = np.array(train, dtype=float).reshape(-1)
                if a.size:
                    if not np.all(np.isfinite(a)) or a[0] <= 0 or a[-1] > T:
                        raise ValueError(f"trial {r}, neuron {i}: spike times must lie in (0, {T}]")
                    if np.any(np.diff(a) <= 0):
                        raise ValueError(f"trial {r}, neuron {i}: spike times must be strictly increasing")
                a.setflags(write=False)
                trains.append(a)
            if p is None:
                p = len(trains)
            elif len(trains) != p:
                raise ValueError(f"trial {r} has {len(trains)} neurons, expected {p}")
            trials.append(tuple(trains))
        if not trials or not p:
            raise ValueError("dataset needs at least one trial and one neuron")
        object.__setattr__(self, "T", T)
        object.__setattr__(self, "spikes", tuple(trials))

    @property
    def n_trials(self) -> int:
        return len(self.spikes)

    @property
    def p(self) -> int:
        return len(self.spikes[0])

    def neuron_trains(self, i: int) -> list:
        """Trains of neuron ``i`` across trials."""
        return [trial[i] for trial in self.spikes]

    def counts(self) -> np.ndarray:
        """Spike counts, shape ``(n_trials, p)``."""
        return np.array([[len(tr) for tr in trial] for trial in self.spikes], dtype=np.int64)

    def select_trials(self, idx) -> "SpikeDataset":
        return SpikeDataset(self.T, tuple(self.spikes[int(r)] for r in idx))

    def select_neurons(self, idx) -> "SpikeDataset":
        return SpikeDataset(self.T, tuple(tuple(trial[int(i)] for i in idx) for trial in self.spikes))

    def __eq__(self, other):
        if not isinstance(other, SpikeDataset):
            return NotImplemented
        if self.T != other.T or self.n_trials != other.n_trials or self.p != other.p:
            return False
        return all(
            np.array_equal(a, b) for ta, tb in zip(self.spikes, other.spikes) for a, b in zip(ta, tb)
        )


@dataclass(frozen=True)
class NeuronTrace:
    """Events that moved one neuron's latent path during a trial."""

    times: np.ndarray
    increments: np.ndarray  # +1 / -1
    streams: np.ndarray  # stream ids, see event_streams
    resets: np.ndarray  # bool, True where the event produced a spike

    def unreset_path(self) -> np.ndarray:
        """Latent Skellam path ``S_i`` after each event, without resetting."""
        return np.cumsum(self.increments)

    def path(self) -> np.ndarray:
        """Reset path after each event (resets applied at the spike instant)."""
        return self.unreset_path() - np.cumsum(self.resets)

    @property
    def value(self) -> int:
        """Latent unreset value at the end of the trial."""
        return int(self.increments.sum())


@dataclass(frozen=True)
class LatentTrace:
    neurons: tuple


def event_streams(params: MsprParams):
    """Rates and per-neuron increments of every driving Poisson stream.

    Stream ``2i`` / ``2i+1`` are neuron ``i``'s own up/down streams; the
    ``k``-th coupled pair (row-major ``i < j``) owns streams ``2p + 2k``
    (shared up) and ``2p + 2k + 1`` (shared down).

    Returns
    -------
    rates : ndarray, shape (n_streams,)
    incs : ndarray of int8, shape (n_streams, p)
    """
    p = params.p
    pairs = params.pairs()
    rates = np.empty(2 * p + 2 * len(pairs))
    incs = np.zeros((rates.size, p), dtype=np.int8)
    for i in range(p):
        rates[2 * i], rates[2 * i + 1] = params.base_up[i], params.base_down[i]
        incs[2 * i, i], incs[2 * i + 1, i] = 1, -1
    for k, (i, j) in enumerate(pairs):
        s = 2 * p + 2 * k
        rates[s] = rates[s + 1] = params.gamma[i, j]
        incs[s, i], incs[s, j] = params.signs[i, j], params.signs[j, i]
        incs[s + 1] = -incs[s]
    return rates, incs


def _event_times(rate, T, rng):
    # exponential inter-event gaps, drawn in blocks until the window is covered
    mean_n = rate * T
    block = int(mean_n + 6 * math.sqrt(mean_n) + 16)
    times = np.cumsum(rng.exponential(1.0 / rate, size=block))
    while times[-1] <= T:
        more = times[-1] + np.cumsum(rng.exponential(1.0 / rate, size=block))
        times = np.concatenate([times, more])
    return times[: np.searchsorted(times, T, side="right")]


def simulate_trial(params: MsprParams, T: float, rng, trace: bool = False):
    """Simulate one trial on ``[0, T]``.

    Returns
    -------
    spikes : list of ndarray
        Spike times per neuron.
    trace : LatentTrace or None
        Only when ``trace=True``.
    """
    check(params)
    if not (math.isfinite(T) and T > 0):
        raise ValueError(f"T must be positive and finite, got {T!r}")
    rates, incs = event_streams(params)
    total = rates.sum()
    times = _event_times(total, T, rng)
    streams = rng.choice(rates.size, size=times.size, p=rates / total)

    spikes, traces = [], []
    for i in range(params.p):
        step = incs[streams, i]
        moved = step != 0
        step = step[moved].astype(np.int64)
        path = np.cumsum(step)
        prev_max = np.maximum.accumulate(np.concatenate(([0], path)))[:-1]
        spike = path > prev_max
        t_i = times[moved]
        spikes.append(t_i[spike])
        if trace:
            traces.append(NeuronTrace(t_i, step, streams[moved], spike))
    return spikes, (LatentTrace(tuple(traces)) if trace else None)


def trial_rng(seed: int, r: int) -> np.random.Generator:
    """Independent generator for trial ``r`` of a run seeded with ``seed``."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(r,)))


def _trial_job(args):
    params, T, seed, r = args
    return simulate_trial(params, T, trial_rng(seed, r))[0]


def simulate_dataset(params: MsprParams, T: float, n_trials: int, seed: int, n_jobs: int = 1) -> SpikeDataset:
    """Simulate ``n_trials`` independent trials.

    Trial ``r`` draws from ``trial_rng(seed, r)``, so output depends only on
    ``(params, T, n_trials, seed)`` and not on ``n_jobs``.
    """
    check(params)
    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    jobs = [(params, T, seed, r) for r in range(n_trials)]
    if n_jobs > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as ex:
            trials = list(ex.map(_trial_job, jobs, chunksize=max(1, n_trials // (4 * n_jobs))))
    else:
        trials = [_trial_job(job) for job in jobs]
    return SpikeDataset(T, tuple(tuple(tr) for tr in trials))
