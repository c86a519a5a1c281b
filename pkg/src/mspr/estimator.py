"""Moment/profile-likelihood estimation of MSPR parameters.

Pipeline, per dataset:

1. ``gamma_ij`` from the sample covariance of per-trial spike counts,
   ``|cov_ij| / (2 T)``, with the covariance sign kept as the estimated
   sign product ``a_ij a_ji``.
2. For each neuron, the marginal up/down rates maximise the marginal SPR
   likelihood subject to both exceeding ``g_i = sum_j gamma_ij`` (so the
   implied base rates stay nonnegative).
3. Base rates are the marginal rates minus ``g_i``.

Standard errors come from resampling whole trials with replacement.
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import optimize

from . import skellam_math as sm
from .simulator import SpikeDataset, trial_rng
from .skellam_math import SkellamRatePair

__all__ = [
    "BOX_EPS",
    "NeuronFit",
    "MomEstimate",
    "FitResult",
    "BootstrapResult",
    "trial_counts",
    "mom_gamma",
    "marginal_loglik",
    "profile_fit",
    "fit",
    "bootstrap",
    "param_names",
]

BOX_EPS = 1e-8
_LOG_RATE_CAP = math.log(1e6)  # events/s; far beyond any spiking rate
GTOL = 1e-6
_MAX_RESTARTS = 4
XRTOL = 1e-8


def trial_counts(data: SpikeDataset) -> np.ndarray:
    """Spike counts per trial and neuron, shape ``(n_trials, p)``."""
    return data.counts()


@dataclass(frozen=True)
class MomEstimate:
    gamma: np.ndarray  # (p, p), zero diagonal
    sign: np.ndarray  # (p, p) of {-1, 0, 1}, zero diagonal
    cov: np.ndarray  # (p, p) unbiased count covariance
    pvalues: np.ndarray | None = None  # only when thresholded


def mom_gamma(
    data: SpikeDataset,
    threshold_alpha: float | None = None,
    n_perm: int = 10_000,
    perm_seed: int = 0,
) -> MomEstimate:
    """Method-of-moments estimate of the shared rates.

    With ``threshold_alpha`` set, pairs whose permutation p-value for the
    count correlation is not below ``threshold_alpha`` get ``gamma = 0``.
    """
    if data.n_trials < 2:
        raise ValueError(f"need >= 2 trials for a count covariance, got {data.n_trials}")
    counts = trial_counts(data).astype(float)
    cov = np.atleast_2d(np.cov(counts, rowvar=False, ddof=1))
    off = ~np.eye(data.p, dtype=bool)
    gamma = np.where(off, np.abs(cov) / (2.0 * data.T), 0.0)
    sign = np.where(off, np.sign(cov), 0.0).astype(int)
    pvals = None
    if threshold_alpha is not None:
        from .diagnostics import count_correlations

        _, pvals = count_correlations(data, n_perm=n_perm, seed=perm_seed)
        keep = np.nan_to_num(pvals, nan=1.0) < threshold_alpha
        gamma = np.where(keep, gamma, 0.0)
        sign = np.where(keep, sign, 0)
    sign = np.where(gamma > 0, sign, 0)
    gamma = np.where(sign != 0, gamma, 0.0)
    return MomEstimate(gamma, sign, cov, pvals)


@dataclass(frozen=True)
class _Intervals:
    """Sufficient pieces of one neuron's trains for the marginal likelihood."""

    intervals: np.ndarray  # first interval measured from trial start
    tails: np.ndarray  # censored time after the last spike, > 0 only
    isis: np.ndarray  # between-spike intervals only

    @property
    def n_obs(self) -> int:
        return self.intervals.size + self.tails.size

    @classmethod
    def from_trains(cls, trains, T):
        ivals, tails, isis = [], [], []
        for tr in trains:
            tr = np.asarray(tr, dtype=float)
            if tr.size:
                ivals.append(np.diff(tr, prepend=0.0))
                isis.append(np.diff(tr))
                last = tr[-1]
            else:
                last = 0.0
            if T - last > 0:
                tails.append(T - last)
        cat = lambda xs: np.concatenate(xs) if xs else np.empty(0)
        return cls(cat(ivals), np.asarray(tails, dtype=float), cat(isis))


def _loglik_grad(d: _Intervals, l1, l2, need_grad=True):
    ll, g1, g2 = 0.0, 0.0, 0.0
    if d.intervals.size:
        lf, a1, a2 = sm._log_density_grad(d.intervals, l1, l2)
        ll += lf.sum()
        g1 += a1.sum()
        g2 += a2.sum()
    if d.tails.size:
        ls, b1, b2 = sm._log_survival_grad(d.tails, l1, l2)
        ll += ls.sum()
        g1 += b1.sum()
        g2 += b2.sum()
    return ll, g1, g2


def marginal_loglik(trains, T: float, rates: SkellamRatePair) -> float:
    """Log-likelihood of one neuron's trains under a univariate SPR.

    Each trial starts in the reset state at time 0: the first spike time is
    a first-passage time, later spikes contribute their ISIs, and the gap
    after the last spike enters through the survival function.
    """
    if rates.lambda1 <= 0:
        raise ValueError("lambda1 must be > 0")
    d = _Intervals.from_trains(trains, T)
    with np.errstate(divide="ignore"):
        ll = _loglik_grad(d, rates.lambda1, rates.lambda2)[0]
    return float(ll) if not math.isnan(ll) else -math.inf


@dataclass(frozen=True)
class NeuronFit:
    rate_up: float
    rate_down: float
    loglik: float
    iterations: int
    converged: bool
    flags: tuple = ()
    message: str = ""


def _initial_rates(d: _Intervals, g, T, n_trials):
    if d.isis.size >= 2 and d.isis.var() > 0:
        m, v = d.isis.mean(), d.isis.var(ddof=1)
        diff = 1.0 / m
        tot = v / m**3
        l1, l2 = 0.5 * (tot + diff), 0.5 * (tot - diff)
    else:
        l1, l2 = max(d.intervals.size / (n_trials * T), 1.0 / T), 0.0
    # start well inside the box: log-distance to a face is badly scaled near it
    floor = 0.05 * max(l1, 1.0)
    return max(l1 - g - BOX_EPS, floor), max(l2 - g, floor)


def _fit_neuron(d: _Intervals, g: float, T: float, n_trials: int) -> NeuronFit:
    if d.intervals.size == 0:
        # likelihood is increasing as lambda1 falls: pin to the box face
        l1, l2 = g + BOX_EPS, g
        with np.errstate(divide="ignore"):
            ll = _loglik_grad(d, l1, l2)[0] if l2 > 0 else -l1 * d.tails.sum()
        return NeuronFit(l1, l2, float(ll), 0, True, ("no_spikes", "at_lower_bound"), "no spikes in any trial")

    n_obs = d.n_obs

    def objective(z):
        if max(z) > _LOG_RATE_CAP:
            return math.inf, np.zeros(2)
        eu, ev = math.exp(z[0]), math.exp(z[1])
        l1, l2 = g + BOX_EPS + eu, g + ev
        ll, g1, g2 = _loglik_grad(d, l1, l2)
        if not math.isfinite(ll):
            return math.inf, np.zeros(2)
        return -ll / n_obs, -np.array([g1 * eu, g2 * ev]) / n_obs

    z = np.log(_initial_rates(d, g, T, n_trials))
    nit = 0
    # a line-search failure usually means a stale Hessian estimate; restart
    for _ in range(_MAX_RESTARTS):
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            res = optimize.minimize(
                objective, z, jac=True, method="BFGS",
                options={"gtol": GTOL, "xrtol": XRTOL, "maxiter": 1000},
            )
        nit += res.nit
        moved = np.max(np.abs(res.x - z))
        z = res.x
        if res.success or np.linalg.norm(res.jac) < 10 * GTOL or moved == 0:
            break
    l1, l2 = g + BOX_EPS + math.exp(z[0]), g + math.exp(z[1])
    grad_norm = float(np.linalg.norm(res.jac))
    # BFGS stops with "precision loss" when the line search cannot improve
    # further; accept that as converged only if the gradient is flat anyway
    converged = bool(res.success) or grad_norm < 10 * GTOL
    flags = []
    if not converged:
        flags.append("not_converged")
    if l1 <= l2:
        flags.append("defective_isi")
    if math.exp(z[1]) < 1e-6 * max(l2, 1.0):
        flags.append("down_rate_at_lower_bound")
    return NeuronFit(
        l1, l2, float(-res.fun * n_obs), int(nit), converged, tuple(flags),
        f"{res.message} (|grad|={grad_norm:.2e})",
    )


def profile_fit(data: SpikeDataset, g) -> list[NeuronFit]:
    """Maximise each neuron's marginal likelihood with rates bounded below by ``g_i``."""
    g = np.asarray(g, dtype=float)
    if np.any(g < 0):
        raise ValueError("gamma row sums must be >= 0")
    return [
        _fit_neuron(_Intervals.from_trains(data.neuron_trains(i), data.T), float(g[i]), data.T, data.n_trials)
        for i in range(data.p)
    ]


def param_names(p: int) -> list[str]:
    """Names of the reported parameters, 1-based like the usual table layout."""
    names = []
    for i in range(1, p + 1):
        names += [f"lambda_{i}1", f"lambda_{i}2"]
    names += [f"gamma_{i}{j}" for i in range(1, p + 1) for j in range(i + 1, p + 1)]
    for i in range(1, p + 1):
        names += [f"marginal_up_{i}", f"marginal_down_{i}"]
    return names


@dataclass(frozen=True)
class BootstrapResult:
    names: tuple
    replicates: np.ndarray  # (n_ok, n_params), failed replicates dropped
    se: np.ndarray
    n_requested: int
    n_failed: int
    seed: int

    @property
    def failure_rate(self) -> float:
        return self.n_failed / self.n_requested

    def se_dict(self) -> dict:
        return dict(zip(self.names, self.se.tolist()))

    def column(self, name) -> np.ndarray:
        return self.replicates[:, self.names.index(name)]


@dataclass(frozen=True, eq=False)
class FitResult:
    T: float
    n_trials: int
    rate_up: np.ndarray
    rate_down: np.ndarray
    gamma: np.ndarray
    sign: np.ndarray
    cov: np.ndarray
    neurons: tuple
    settings: dict = field(default_factory=dict)
    bootstrap: BootstrapResult | None = None

    @property
    def p(self) -> int:
        return len(self.rate_up)

    @property
    def gamma_rowsum(self) -> np.ndarray:
        return self.gamma.sum(axis=1)

    @property
    def base_up(self) -> np.ndarray:
        return self.rate_up - self.gamma_rowsum

    @property
    def base_down(self) -> np.ndarray:
        return self.rate_down - self.gamma_rowsum

    @property
    def converged(self) -> bool:
        return all(n.converged for n in self.neurons)

    def marginal(self, i: int) -> SkellamRatePair:
        return SkellamRatePair(float(self.rate_up[i]), float(self.rate_down[i]))

    def vector(self) -> np.ndarray:
        """Estimates in :func:`param_names` order."""
        p = self.p
        base = np.column_stack([self.base_up, self.base_down]).ravel()
        iu = np.triu_indices(p, k=1)
        marg = np.column_stack([self.rate_up, self.rate_down]).ravel()
        return np.concatenate([base, self.gamma[iu], marg])

    def estimates(self) -> dict:
        return dict(zip(param_names(self.p), self.vector().tolist()))

    def with_bootstrap(self, boot: BootstrapResult) -> "FitResult":
        return replace(self, bootstrap=boot)

    def to_dict(self) -> dict:
        d = {
            "T": self.T,
            "n_trials": self.n_trials,
            "p": self.p,
            "estimates": self.estimates(),
            "marginal_rates": [[float(a), float(b)] for a, b in zip(self.rate_up, self.rate_down)],
            "gamma": self.gamma.tolist(),
            "sign_product": self.sign.tolist(),
            "count_covariance": self.cov.tolist(),
            "covariance_denominator": "n-1",
            "neurons": [
                {
                    "rate_up": n.rate_up,
                    "rate_down": n.rate_down,
                    "loglik": n.loglik,
                    "iterations": n.iterations,
                    "converged": n.converged,
                    "flags": list(n.flags),
                    "message": n.message,
                }
                for n in self.neurons
            ],
            "settings": dict(self.settings),
        }
        if self.bootstrap is not None:
            b = self.bootstrap
            d["bootstrap"] = {
                "B": b.n_requested,
                "n_failed": b.n_failed,
                "seed": b.seed,
                "se": b.se_dict(),
                "replicates": b.replicates.tolist(),
            }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FitResult":
        neurons = tuple(
            NeuronFit(n["rate_up"], n["rate_down"], n["loglik"], n["iterations"], n["converged"],
                      tuple(n["flags"]), n.get("message", ""))
            for n in d["neurons"]
        )
        marg = np.asarray(d["marginal_rates"], dtype=float).reshape(-1, 2)
        boot = None
        if d.get("bootstrap"):
            b = d["bootstrap"]
            names = tuple(param_names(int(d["p"])))
            reps = np.asarray(b["replicates"], dtype=float).reshape(-1, len(names))
            boot = BootstrapResult(
                names, reps, np.array([b["se"][n] for n in names], dtype=float),
                int(b["B"]), int(b["n_failed"]), int(b["seed"]),
            )
        return cls(
            float(d["T"]), int(d["n_trials"]), marg[:, 0], marg[:, 1],
            np.asarray(d["gamma"], dtype=float), np.asarray(d["sign_product"], dtype=int),
            np.asarray(d["count_covariance"], dtype=float), neurons, dict(d.get("settings", {})), boot,
        )


def fit(
    data: SpikeDataset,
    threshold_alpha: float | None = None,
    n_perm: int = 10_000,
    perm_seed: int = 0,
) -> FitResult:
    """Full moment + profile-likelihood fit; deterministic given the data."""
    mom = mom_gamma(data, threshold_alpha=threshold_alpha, n_perm=n_perm, perm_seed=perm_seed)
    fits = profile_fit(data, mom.gamma.sum(axis=1))
    settings = {"threshold_alpha": threshold_alpha}
    if threshold_alpha is not None:
        settings.update(n_perm=n_perm, perm_seed=perm_seed)
    for i, nf in enumerate(fits):
        if "defective_isi" in nf.flags:
            warnings.warn(f"neuron {i}: fitted up-rate <= down-rate, ISI moments undefined", stacklevel=2)
    return FitResult(
        T=data.T,
        n_trials=data.n_trials,
        rate_up=np.array([f.rate_up for f in fits]),
        rate_down=np.array([f.rate_down for f in fits]),
        gamma=mom.gamma,
        sign=mom.sign,
        cov=mom.cov,
        neurons=tuple(fits),
        settings=settings,
    )


def _replicate(args):
    data, seed, b, fit_kwargs = args
    rng = trial_rng(seed, b)
    idx = rng.integers(0, data.n_trials, size=data.n_trials)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            res = fit(data.select_trials(idx), **fit_kwargs)
    except (ValueError, FloatingPointError, np.linalg.LinAlgError):
        return None
    if not res.converged:
        return None
    return res.vector()


def bootstrap(data: SpikeDataset, B: int = 200, seed: int = 0, n_jobs: int = 1, **fit_kwargs) -> BootstrapResult:
    """Trial-resampling bootstrap standard errors of every fitted parameter.

    Replicate ``b`` resamples with ``trial_rng(seed, b)``; replicates whose
    fit fails or does not converge are dropped and counted.
    """
    if B < 2:
        raise ValueError("B must be >= 2")
    if data.n_trials < 2:
        raise ValueError(f"need >= 2 trials to bootstrap, got {data.n_trials}")
    jobs = [(data, seed, b, fit_kwargs) for b in range(B)]
    if n_jobs > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as ex:
            out = list(ex.map(_replicate, jobs, chunksize=max(1, B // (4 * n_jobs))))
    else:
        out = [_replicate(j) for j in jobs]
    names = tuple(param_names(data.p))
    ok = [v for v in out if v is not None]
    n_failed = B - len(ok)
    reps = np.array(ok).reshape(-1, len(names))
    se = reps.std(axis=0, ddof=1) if len(ok) >= 2 else np.full(len(names), np.nan)
    if n_failed > 0.2 * B:
        warnings.warn(f"{n_failed} of {B} bootstrap replicates failed", stacklevel=2)
    return BootstrapResult(names, reps, se, B, n_failed, seed)
