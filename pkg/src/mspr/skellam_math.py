"""Skellam distribution and first-passage primitives.

Everything that touches modified Bessel functions works with the
exponentially scaled form ``exp(-x) * I_n(x)`` so that rate-time products in
the hundreds do not overflow.

First passage here always means the first time a Skellam process started at
0 reaches level +1.  Because the process is skip-free upwards, the hitting
time density is ``f(t) = P(S(t) = 1) / t``, and the survival function has a
closed series obtained from the reflection principle::

    P(tau > t) = exp(-t (sqrt(l1) - sqrt(l2))**2)
                 * sum_{n>=0} (l2/l1)**(n/2) * (2 (n+1) / x) * ive(n+1, x)

with ``x = 2 t sqrt(l1 l2)``.  The series is what the likelihood uses; the
quadrature route in :func:`fp_cdf` is kept as an independent check.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import integrate, special

__all__ = [
    "SkellamRatePair",
    "bessel_i_scaled",
    "skellam_pmf",
    "skellam_sample",
    "fp_density",
    "fp_log_density",
    "fp_cdf",
    "fp_survival",
    "fp_log_survival",
    "fp_hit_probability",
    "fp_moments",
]

_SMALL_X = 1e-4
_MAX_CELLS = 1 << 20  # bounds memory of one survival-series block
_LOG_TINY = math.log(1e-290)


@dataclass(frozen=True)
class SkellamRatePair:
    """Up/down rates (events per second) of a Skellam process."""

    lambda1: float
    lambda2: float

    def __post_init__(self):
        for name in ("lambda1", "lambda2"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {v!r}")
        if self.lambda1 + self.lambda2 <= 0:
            raise ValueError("lambda1 + lambda2 must be > 0")
        object.__setattr__(self, "lambda1", float(self.lambda1))
        object.__setattr__(self, "lambda2", float(self.lambda2))


def _check_nonneg_finite(x, name):
    a = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} must be finite")
    if np.any(a < 0):
        raise ValueError(f"{name} must be >= 0")
    return a


def bessel_i_scaled(n, x):
    """Return ``exp(-x) * I_n(x)``, the scaled modified Bessel function.

    Parameters
    ----------
    n : int or array_like of int
        Nonnegative order.
    x : float or array_like
        Nonnegative, finite argument.
    """
    n_arr = np.asarray(n)
    if np.any(n_arr < 0) or not np.all(np.equal(np.mod(n_arr, 1), 0)):
        raise ValueError("order n must be a nonnegative integer")
    x_arr = _check_nonneg_finite(x, "x")
    out = special.ive(n_arr.astype(float), x_arr)
    return float(out) if np.ndim(out) == 0 else out


def _log_ive(n, x):
    """log(ive(n, x)) that survives underflow of ive at small x / large n."""
    n = np.asarray(n, dtype=float)
    x = np.asarray(x, dtype=float)
    with np.errstate(divide="ignore"):
        out = np.log(special.ive(n, x))
    # below the normal range ive loses its relative accuracy (or returns 0);
    # there the power series converges fast because x^2/4 < n + 1
    nb, xb = np.broadcast_arrays(n, x)
    bad = (out < _LOG_TINY) & (xb > 0) & (xb * xb < 4 * (nb + 1))
    if np.any(bad):
        nb, xb = nb[bad], xb[bad]
        q = xb * xb / 4
        term = np.ones_like(q)
        total = np.ones_like(q)
        for m in range(1, 60):
            term = term * q / (m * (nb + m))
            total += term
        out = np.array(np.broadcast_to(out, bad.shape), copy=True)
        out[bad] = nb * np.log(xb / 2) - special.gammaln(nb + 1) - xb + np.log(total)
    return out


def skellam_pmf(k, mu1, mu2):
    """P(N1 - N2 = k) for independent N1 ~ Poisson(mu1), N2 ~ Poisson(mu2).

    ``k`` may be an integer or an integer array.
    """
    mu1 = float(_check_nonneg_finite(mu1, "mu1"))
    mu2 = float(_check_nonneg_finite(mu2, "mu2"))
    k_arr = np.asarray(k)
    if not np.all(np.equal(np.mod(k_arr, 1), 0)):
        raise ValueError("k must be an integer")
    k_arr = k_arr.astype(float)

    if mu1 == 0 and mu2 == 0:
        out = (k_arr == 0).astype(float)
    elif mu2 == 0:
        out = _poisson_pmf(k_arr, mu1)
    elif mu1 == 0:
        out = _poisson_pmf(-k_arr, mu2)
    else:
        x = 2.0 * math.sqrt(mu1) * math.sqrt(mu2)
        logp = (
            -(math.sqrt(mu1) - math.sqrt(mu2)) ** 2
            + 0.5 * k_arr * (math.log(mu1) - math.log(mu2))
            + _log_ive(np.abs(k_arr), x)
        )
        out = np.exp(logp)
    return float(out) if np.ndim(out) == 0 else out


def _poisson_pmf(k, mu):
    k = np.asarray(k, dtype=float)
    ok = k >= 0
    kk = np.where(ok, k, 0.0)
    with np.errstate(divide="ignore"):
        logp = kk * np.log(mu) - mu - special.gammaln(kk + 1)
    return np.where(ok, np.exp(logp), 0.0)


def skellam_sample(rates: SkellamRatePair, t, rng, size=None):
    """Draw ``N1(t) - N2(t)`` from two independent Poisson counts."""
    if not (t > 0 and math.isfinite(t)):
        raise ValueError("t must be positive and finite")
    up = rng.poisson(rates.lambda1 * t, size=size)
    down = rng.poisson(rates.lambda2 * t, size=size)
    return up - down


def _check_fp(t, rates):
    if rates.lambda1 <= 0:
        raise ValueError("lambda1 must be > 0: level 1 is unreachable")
    t = np.asarray(t, dtype=float)
    if np.any(np.isnan(t)) or np.any(t <= 0):
        raise ValueError("t must be > 0")
    return t


def fp_log_density(t, rates: SkellamRatePair):
    """Log of the first-passage density to level +1 (vectorised in ``t``)."""
    t = _check_fp(t, rates)
    l1, l2 = rates.lambda1, rates.lambda2
    if l2 == 0:
        out = math.log(l1) - l1 * t
    else:
        x = 2.0 * t * (math.sqrt(l1) * math.sqrt(l2))
        out = (
            -np.log(t)
            - t * (math.sqrt(l1) - math.sqrt(l2)) ** 2
            + 0.5 * (math.log(l1) - math.log(l2))
            + _log_ive(1, x)
        )
    return float(out) if np.ndim(out) == 0 else out


def fp_density(t, rates: SkellamRatePair):
    """First-passage density ``f(t) = P(S(t) = 1) / t``."""
    out = np.exp(fp_log_density(t, rates))
    return float(out) if np.ndim(out) == 0 else out


def _log_density_grad(t, l1, l2):
    """log f(t) and its partial derivatives in (l1, l2), for arrays ``t``."""
    t = np.asarray(t, dtype=float)
    if l2 == 0:
        return math.log(l1) - l1 * t, 1.0 / l1 - t, -t + 0.5 * l1 * t**2
    x = 2.0 * t * (math.sqrt(l1) * math.sqrt(l2))
    log_i0 = _log_ive(0, x)
    log_i1 = _log_ive(1, x)
    logf = (
        -np.log(t)
        - t * (math.sqrt(l1) - math.sqrt(l2)) ** 2
        + 0.5 * (math.log(l1) - math.log(l2))
        + log_i1
    )
    ratio = np.exp(log_i0 - log_i1)  # I0/I1 ~ 2/x + x/4 as x -> 0
    d1 = -t + x / (2 * l1) * ratio
    small = x < _SMALL_X
    # -1/l2 + x/(2 l2) * I0/I1 cancels catastrophically for small x
    d2 = np.where(
        small,
        -t + x**2 / (8 * l2) * (1 - x**2 / 24),
        -t - 1.0 / l2 + x / (2 * l2) * ratio,
    )
    return logf, d1, d2


def fp_hit_probability(rates: SkellamRatePair) -> float:
    """Total mass of the first-passage law, ``min(1, lambda1/lambda2)``."""
    if rates.lambda1 <= 0:
        raise ValueError("lambda1 must be > 0: level 1 is unreachable")
    if rates.lambda2 <= rates.lambda1:
        return 1.0
    return rates.lambda1 / rates.lambda2


def _n_terms(t, l1, l2):
    # terms fall off like exp(-n^2 / 2x) once l1 >= l2; 8 sd leaves < 1e-14
    return np.ceil(8.0 * np.sqrt((l1 + l2) * t) + 20).astype(int)


def _series_terms(t, l1, l2, n_terms):
    """Per-term logs and log-derivatives of the survival series.

    Returns ``(logterm, dl1, dl2)`` each shaped ``(len(t), n_terms)``.
    """
    n = np.arange(n_terms, dtype=float)
    x = (2.0 * t * (math.sqrt(l1) * math.sqrt(l2)))[:, None]
    orders = np.arange(n_terms + 1, dtype=float)
    log_iv = _log_ive(orders[None, :], x)  # orders 0..n_terms
    log_ip1 = log_iv[:, 1:]  # order n+1
    log_in = log_iv[:, :-1]  # order n
    tt = t[:, None]
    logterm = (
        -tt * (math.sqrt(l1) - math.sqrt(l2)) ** 2
        - 0.5 * n * (math.log(l1) - math.log(l2))
        + np.log(2.0 * (n + 1.0))
        - np.log(x)
        + log_ip1
    )
    with np.errstate(invalid="ignore"):
        ratio = np.exp(log_in - log_ip1)
    ratio = np.where(np.isfinite(ratio), ratio, 0.0)
    dlogx = ratio - (n + 2.0) / x
    dl1 = -tt - n / (2 * l1) + x / (2 * l1) * dlogx
    dl2 = -tt + n / (2 * l2) + x / (2 * l2) * dlogx
    return logterm, dl1, dl2


def _log_survival_grad(t, l1, l2):
    """log P(tau > t) and its partial derivatives in (l1, l2)."""
    t = np.atleast_1d(np.asarray(t, dtype=float))
    if l2 < 1e-200 * l1:
        # a down-rate this small changes S by O(l2 t), far below double
        # precision, while n / l2 in the term derivatives would overflow
        l2 = 0.0
    if l2 == 0:
        # one down-event then fewer than two up-events: dS/dl2 = S * l1 t^2 / 2
        return -l1 * t, -t, 0.5 * l1 * t**2
    if l1 < l2:
        # conditioned on hitting, the walk runs with swapped rates, so
        # F(t; l1, l2) = rho * F(t; l2, l1) with rho = l1 / l2 < 1
        ls, ga, gb = _log_survival_grad(t, l2, l1)
        rho = l1 / l2
        s_sw = np.exp(ls)
        surv = 1.0 - rho + rho * s_sw
        d1 = ((s_sw - 1.0) / l2 + rho * s_sw * gb) / surv
        d2 = (-(s_sw - 1.0) * rho / l2 + rho * s_sw * ga) / surv
        return np.log(surv), d1, d2
    need = _n_terms(t, l1, l2)
    # bucket by series length so short censoring gaps stay cheap
    bucket = 32 * np.ceil(need / 32).astype(int)
    logs = np.empty_like(t)
    g1 = np.empty_like(t)
    g2 = np.empty_like(t)
    for nb in np.unique(bucket):
        idx = np.flatnonzero(bucket == nb)
        rows = max(1, _MAX_CELLS // int(nb))
        for lo in range(0, idx.size, rows):
            sel = idx[lo : lo + rows]
            logterm, dl1, dl2 = _series_terms(t[sel], l1, l2, int(nb))
            ls = special.logsumexp(logterm, axis=1)
            w = np.exp(logterm - ls[:, None])
            logs[sel] = ls
            g1[sel] = np.sum(w * dl1, axis=1)
            g2[sel] = np.sum(w * dl2, axis=1)
    return logs, g1, g2


def fp_log_survival(t, rates: SkellamRatePair):
    """log P(first passage > t), by the reflection series."""
    t_arr = _check_fp(t, rates)
    out = _log_survival_grad(t_arr, rates.lambda1, rates.lambda2)[0]
    out = np.minimum(out, 0.0)
    return float(out[0]) if np.ndim(t_arr) == 0 else out.reshape(t_arr.shape)


def fp_survival(t, rates: SkellamRatePair):
    """P(first passage > t), by the reflection series."""
    out = np.exp(fp_log_survival(t, rates))
    return float(out) if np.ndim(out) == 0 else out


def _breakpoints(rates: SkellamRatePair, upper):
    scale = 1.0 / (rates.lambda1 + rates.lambda2)
    pts = [0.0]
    s = scale
    while s < upper:
        pts.append(s)
        s *= 4.0
    pts.append(upper)
    return pts


def _quad_cdf_scalar(t, rates, epsabs):
    f = lambda s: fp_density(s, rates) if s > 0 else rates.lambda1
    if math.isinf(t):
        kappa = (math.sqrt(rates.lambda1) - math.sqrt(rates.lambda2)) ** 2
        horizon = 60.0 / kappa if kappa > 0 else 1e6 / (rates.lambda1 + rates.lambda2)
        pts = _breakpoints(rates, horizon)
    else:
        pts = _breakpoints(rates, t)
    total = 0.0
    for a, b in zip(pts[:-1], pts[1:]):
        total += integrate.quad(f, a, b, epsabs=epsabs, epsrel=1e-12, limit=200)[0]
    if math.isinf(t):
        total += integrate.quad(f, pts[-1], math.inf, epsabs=epsabs, epsrel=1e-12, limit=200)[0]
    return total


def fp_cdf(t, rates: SkellamRatePair, method: str = "quad"):
    """P(first passage <= t).

    ``method="quad"`` integrates :func:`fp_density` adaptively (absolute
    tolerance 1e-8 overall); ``t`` may be ``inf``, giving the hitting
    probability.  ``method="series"`` evaluates ``1 - fp_survival`` and is
    the fast path for large arrays.
    """
    if method == "series":
        t_arr = _check_fp(t, rates)
        out = -np.expm1(np.atleast_1d(fp_log_survival(t_arr, rates)))
        out = np.clip(out, 0.0, 1.0)
        return float(out[0]) if np.ndim(t_arr) == 0 else out.reshape(t_arr.shape)
    if method != "quad":
        raise ValueError(f"unknown method {method!r}")
    t_arr = _check_fp(t, rates)
    flat = t_arr.ravel()
    out = np.empty_like(flat)
    # cumulate over sorted times so each segment is integrated once
    order = np.argsort(flat)
    acc, prev = 0.0, 0.0
    for idx in order:
        ti = flat[idx]
        if math.isinf(ti):
            out[idx] = _quad_cdf_scalar(math.inf, rates, 1e-10)
            continue
        if ti > prev:
            if prev == 0.0:
                acc = _quad_cdf_scalar(ti, rates, 1e-10)
            else:
                acc += integrate.quad(
                    lambda s: fp_density(s, rates), prev, ti, epsabs=1e-11, epsrel=1e-12, limit=200
                )[0]
            prev = ti
        out[idx] = acc
    out = np.clip(out, 0.0, 1.0)
    return float(out[0]) if np.ndim(t_arr) == 0 else out.reshape(t_arr.shape)


def fp_moments(rates: SkellamRatePair) -> tuple[float, float]:
    """Mean and variance of the first-passage time; needs ``lambda1 > lambda2``."""
    l1, l2 = rates.lambda1, rates.lambda2
    if l1 <= l2:
        raise ValueError("first-passage moments are infinite unless lambda1 > lambda2")
    d = l1 - l2
    return 1.0 / d, (l1 + l2) / d**3
