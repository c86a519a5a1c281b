"""Goodness-of-fit and ensemble-structure diagnostics.

Covers the ISI moment table (observed vs model, each with bootstrap SEs),
spike-count correlations with permutation p-values, and PP-transform points.
Missing values are ``nan`` throughout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import skellam_math as sm
from .estimator import FitResult
from .simulator import SpikeDataset, trial_rng

__all__ = [
    "MomentRow",
    "DiagnosticsReport",
    "pooled_isis",
    "isi_moments_observed",
    "isi_moments_model",
    "count_correlations",
    "pp_points",
    "pp_max_deviation",
    "ks_band",
    "diagnose",
]


@dataclass(frozen=True)
class MomentRow:
    mean: float
    var: float
    mean_se: float
    var_se: float

    @property
    def missing(self) -> bool:
        return math.isnan(self.mean)

    def as_list(self):
        return [self.mean, self.mean_se, self.var, self.var_se]


_MISSING = MomentRow(math.nan, math.nan, math.nan, math.nan)


def pooled_isis(data: SpikeDataset, i: int) -> np.ndarray:
    """Within-trial inter-spike intervals of neuron ``i``, pooled over trials."""
    parts = [np.diff(tr) for tr in data.neuron_trains(i) if len(tr) > 1]
    return np.concatenate(parts) if parts else np.empty(0)


def _moments(x):
    if x.size < 2:
        return math.nan, math.nan
    return float(x.mean()), float(x.var(ddof=1))


def isi_moments_observed(data: SpikeDataset, n_boot: int = 200, seed: int = 0) -> list[MomentRow]:
    """Pooled ISI mean/variance per neuron with trial-bootstrap SEs.

    Neurons with fewer than two pooled ISIs are reported as missing.
    """
    per_trial = [[np.diff(tr) for tr in data.neuron_trains(i)] for i in range(data.p)]
    rows = []
    boot_idx = [trial_rng(seed, b).integers(0, data.n_trials, data.n_trials) for b in range(n_boot)]
    for i in range(data.p):
        pooled = np.concatenate(per_trial[i])
        mean, var = _moments(pooled)
        if math.isnan(mean):
            rows.append(_MISSING)
            continue
        reps = np.array([_moments(np.concatenate([per_trial[i][r] for r in idx])) for idx in boot_idx])
        reps = reps.reshape(-1, 2)
        reps = reps[~np.isnan(reps[:, 0])]
        if len(reps) >= 2:
            se_m, se_v = reps.std(axis=0, ddof=1)
        else:
            se_m = se_v = math.nan
        rows.append(MomentRow(mean, var, float(se_m), float(se_v)))
    return rows


def _fp_moments_or_nan(l1, l2):
    if l1 <= l2:
        return math.nan, math.nan
    return sm.fp_moments(sm.SkellamRatePair(l1, l2))


def isi_moments_model(fit: FitResult) -> list[MomentRow]:
    """Model-implied ISI mean/variance per neuron.

    SEs propagate the bootstrap replicates of the marginal rates through the
    first-passage moments (nan without bootstrap).  Neurons whose fitted
    up-rate does not exceed the down-rate have undefined moments and are
    reported as missing.
    """
    rows = []
    boot = fit.bootstrap
    for i in range(fit.p):
        mean, var = _fp_moments_or_nan(fit.rate_up[i], fit.rate_down[i])
        if math.isnan(mean):
            rows.append(_MISSING)
            continue
        se_m = se_v = math.nan
        if boot is not None and len(boot.replicates) >= 2:
            up = boot.column(f"marginal_up_{i + 1}")
            down = boot.column(f"marginal_down_{i + 1}")
            reps = np.array([_fp_moments_or_nan(a, b) for a, b in zip(up, down)])
            reps = reps[~np.isnan(reps[:, 0])]
            if len(reps) >= 2:
                se_m, se_v = (float(s) for s in reps.std(axis=0, ddof=1))
        rows.append(MomentRow(mean, var, se_m, se_v))
    return rows


def _standardize(x):
    x = x - x.mean(axis=-1, keepdims=True)
    norm = np.sqrt((x * x).sum(axis=-1, keepdims=True))
    with np.errstate(invalid="ignore", divide="ignore"):
        return x / norm


def count_correlations(data: SpikeDataset, n_perm: int = 10_000, seed: int = 0):
    """Pearson correlations of per-trial counts and permutation p-values.

    Each p-value is two-sided, ``(1 + #{|r_perm| >= |r_obs|}) / (n_perm + 1)``.
    The permutation set is closed under inversion (an odd ``n_perm`` is
    rounded up by one), which makes the p-value matrix exactly symmetric and
    equivariant under relabelling neurons.

    Returns
    -------
    corr, pvals : ndarray, shape (p, p)
        Unit diagonal / zero-diagonal p-values; entries touching a
        zero-variance neuron are nan.
    """
    n = data.n_trials
    if n < 3:
        raise ValueError(f"need >= 3 trials for count correlations, got {n}")
    if n_perm < 2:
        raise ValueError("n_perm must be >= 2")
    z = _standardize(data.counts().T.astype(float))  # (p, n)
    p = data.p
    corr = np.clip(z @ z.T, -1.0, 1.0)
    np.fill_diagonal(corr, 1.0)
    degenerate = ~np.all(np.isfinite(z), axis=1)
    corr[degenerate, :] = np.nan
    corr[:, degenerate] = np.nan
    corr[np.diag_indices(p)] = np.where(degenerate, np.nan, 1.0)

    rng = trial_rng(seed, 0)
    half = (n_perm + 1) // 2
    perms = np.argsort(rng.random((half, n)), axis=1)
    perms = np.concatenate([perms, np.argsort(perms, axis=1)])
    n_eff = len(perms)

    pvals = np.full((p, p), np.nan)
    np.fill_diagonal(pvals, 0.0)
    tol = 1e-12
    for i in range(p):
        for j in range(i + 1, p):
            if degenerate[i] or degenerate[j]:
                continue
            r_perm = z[j][perms] @ z[i]
            hits = np.count_nonzero(np.abs(r_perm) >= abs(corr[i, j]) - tol)
            pvals[i, j] = pvals[j, i] = (1 + hits) / (n_eff + 1)
    pvals[degenerate, degenerate] = np.nan
    return corr, pvals


def pp_points(data: SpikeDataset, fit: FitResult, i: int, window_conditional: bool = True) -> np.ndarray:
    """PP-transform of neuron ``i``'s pooled ISIs under its fitted marginal law.

    Each ISI ``d`` following a spike at ``s`` is mapped to
    ``F(d) / F(T - s)``: only intervals that end inside the trial window are
    observed, and conditioning on that makes the transform exactly uniform
    under the model.  With ``window_conditional=False`` the divisor is the
    total hitting mass ``F(inf)`` instead, which is biased towards short
    intervals for windows that are not long relative to the ISI tail.

    Returns an ``(m, 2)`` array of ``(u_model, u_empirical)`` rows, sorted,
    with ``u_empirical = (k - 0.5) / m``.
    """
    isis, starts = [], []
    for tr in data.neuron_trains(i):
        if len(tr) > 1:
            isis.append(np.diff(tr))
            starts.append(tr[:-1])
    if not isis:
        raise ValueError(f"neuron {i} has no inter-spike intervals")
    isis, starts = np.concatenate(isis), np.concatenate(starts)
    rates = fit.marginal(i)
    u = sm.fp_cdf(isis, rates, method="series")
    if window_conditional:
        u = u / sm.fp_cdf(data.T - starts, rates, method="series")
    else:
        u = u / sm.fp_hit_probability(rates)
    u = np.clip(np.sort(u), 0.0, 1.0)
    m = u.size
    emp = (np.arange(1, m + 1) - 0.5) / m
    return np.column_stack([u, emp])


def pp_max_deviation(points: np.ndarray) -> float:
    """Kolmogorov distance implied by a set of PP points."""
    u = points[:, 0]
    m = u.size
    k = np.arange(1, m + 1)
    return float(max(np.max(k / m - u), np.max(u - (k - 1) / m)))


def ks_band(m: int, level: float = 0.99) -> float:
    """Critical Kolmogorov distance for ``m`` points at the given level."""
    from scipy.stats import kstwo

    return float(kstwo.ppf(level, m))


@dataclass(frozen=True, eq=False)
class DiagnosticsReport:
    observed: list  # MomentRow per neuron
    model: list  # MomentRow per neuron
    corr: np.ndarray
    pvalues: np.ndarray
    alpha: float
    pp: list  # (m, 2) array per neuron, or None

    @property
    def significant(self) -> np.ndarray:
        with np.errstate(invalid="ignore"):
            sig = self.pvalues < self.alpha
        np.fill_diagonal(sig, False)
        return sig

    def significant_corr(self) -> np.ndarray:
        """Correlation matrix with non-significant off-diagonal entries zeroed."""
        out = np.where(self.significant, self.corr, 0.0)
        np.fill_diagonal(out, np.diag(self.corr))
        return out

    def isi_table(self) -> list[dict]:
        rows = []
        for i, (o, m) in enumerate(zip(self.observed, self.model)):
            for kind, r in (("observed", o), ("model", m)):
                rows.append({"neuron": i, "kind": kind, "mean": r.mean, "mean_se": r.mean_se,
                             "var": r.var, "var_se": r.var_se})
        return rows

    def to_dict(self) -> dict:
        nan_to_none = lambda a: [[None if math.isnan(v) else v for v in row] for row in np.asarray(a).tolist()]
        return {
            "alpha": self.alpha,
            "isi_table": [{k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in row.items()}
                          for row in self.isi_table()],
            "count_correlation": nan_to_none(self.corr),
            "pvalues": nan_to_none(self.pvalues),
            "significant": self.significant.astype(int).tolist(),
            "pp_max_deviation": [None if pts is None else pp_max_deviation(pts) for pts in self.pp],
            "pp_n_points": [0 if pts is None else int(len(pts)) for pts in self.pp],
        }


def diagnose(
    data: SpikeDataset,
    fit: FitResult,
    n_boot: int = 200,
    n_perm: int = 10_000,
    alpha: float = 0.05,
    seed: int = 0,
) -> DiagnosticsReport:
    """Assemble the full diagnostics report for a dataset and its fit."""
    if not 0 < alpha < 1:
        raise ValueError("alpha must be in (0, 1)")
    if fit.p != data.p:
        raise ValueError(f"fit has {fit.p} neurons but data has {data.p}")
    observed = isi_moments_observed(data, n_boot=n_boot, seed=seed)
    model = isi_moments_model(fit)
    corr, pvals = count_correlations(data, n_perm=n_perm, seed=seed)
    pp = [pp_points(data, fit, i) if pooled_isis(data, i).size else None for i in range(data.p)]
    return DiagnosticsReport(observed, model, corr, pvals, alpha, pp)
