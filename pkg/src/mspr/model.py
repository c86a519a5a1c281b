"""Parameter containers and model-implied quantities for the MSPR."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .skellam_math import SkellamRatePair

__all__ = [
    "InvalidParamsError",
    "MsprParams",
    "check",
    "marginal_rates",
    "count_covariance",
    "validate",
    "canonical_signs",
    "table1_params",
]


class InvalidParamsError(ValueError):
    """Raised when an operation needs valid parameters and gets invalid ones."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("invalid MSPR parameters: " + "; ".join(self.violations))


@dataclass(frozen=True, eq=False)
class MsprParams:
    """Full MSPR parameterisation.

    Attributes
    ----------
    base_up, base_down : ndarray, shape (p,)
        Neuron-specific up/down rates ``lambda_i1``, ``lambda_i2``.
    gamma : ndarray, shape (p, p)
        Symmetric shared-component rates, zero diagonal.
    signs : ndarray of int, shape (p, p)
        Sign matrix ``a_ij`` in {-1, 0, +1}, zero diagonal.  Row ``i`` holds
        the sign with which pair ``(i, j)``'s shared component enters neuron
        ``i``.

    Arrays are copied and made read-only on construction.  Construction
    never raises on invariant breaches; use :func:`validate`.
    """

    base_up: np.ndarray
    base_down: np.ndarray
    gamma: np.ndarray
    signs: np.ndarray

    def __post_init__(self):
        for name, dtype in (("base_up", float), ("base_down", float), ("gamma", float), ("signs", int)):
            arr = np.array(getattr(self, name), dtype=dtype)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def p(self) -> int:
        return int(self.base_up.shape[0])

    def pairs(self):
        """Coupled pairs ``(i, j)`` with ``i < j``, in row-major order."""
        return [(i, j) for i, j in itertools.combinations(range(self.p), 2) if self.signs[i, j] != 0]

    def __eq__(self, other):
        if not isinstance(other, MsprParams):
            return NotImplemented
        return all(
            np.array_equal(getattr(self, f), getattr(other, f))
            for f in ("base_up", "base_down", "gamma", "signs")
        )

    def to_dict(self) -> dict:
        return {
            "base_up": self.base_up.tolist(),
            "base_down": self.base_down.tolist(),
            "gamma": self.gamma.tolist(),
            "signs": self.signs.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MsprParams":
        p = len(d["base_up"])
        gamma = d.get("gamma", np.zeros((p, p)))
        signs = d.get("signs")
        if signs is None:
            signs = (np.asarray(gamma) > 0).astype(int)
        return cls(d["base_up"], d["base_down"], gamma, signs)

    def scaled(self, factor: float) -> "MsprParams":
        """All rates multiplied by ``factor`` (signs unchanged)."""
        return MsprParams(self.base_up * factor, self.base_down * factor, self.gamma * factor, self.signs)


def validate(params: MsprParams) -> list[str]:
    """Return every invariant violation as a message; empty list means valid."""
    out = []
    p = params.base_up.shape[0] if params.base_up.ndim == 1 else -1
    if p < 1:
        return ["base_up must be a nonempty vector"]
    if params.base_down.shape != (p,):
        out.append(f"base_down must have shape ({p},), got {params.base_down.shape}")
    if params.gamma.shape != (p, p):
        out.append(f"gamma must have shape ({p}, {p}), got {params.gamma.shape}")
    if params.signs.shape != (p, p):
        out.append(f"signs must have shape ({p}, {p}), got {params.signs.shape}")
    if out:
        return out

    for name in ("base_up", "base_down", "gamma"):
        arr = getattr(params, name)
        if not np.all(np.isfinite(arr)):
            out.append(f"{name} has non-finite entries")
        for idx in zip(*np.nonzero(arr < 0)):
            out.append(f"{name}{list(map(int, idx))} = {arr[idx]} is negative")

    a, g = params.signs, params.gamma
    for idx in zip(*np.nonzero(~np.isin(a, (-1, 0, 1)))):
        out.append(f"signs{list(map(int, idx))} = {a[idx]} not in {{-1, 0, 1}}")
    for i in range(p):
        if a[i, i] != 0:
            out.append(f"signs[{i}, {i}] must be 0")
        if g[i, i] != 0:
            out.append(f"gamma[{i}, {i}] must be 0")
    for i, j in itertools.combinations(range(p), 2):
        if (a[i, j] == 0) != (a[j, i] == 0):
            out.append(f"signs[{i}, {j}] and signs[{j}, {i}] must be zero together")
        if g[i, j] != g[j, i]:
            out.append(f"gamma[{i}, {j}] != gamma[{j}, {i}]")
        if (g[i, j] > 0) != (a[i, j] != 0):
            out.append(f"gamma[{i}, {j}] > 0 must coincide with signs[{i}, {j}] != 0")

    if not out:
        for i in range(p):
            pair = _marginal_pair(params, i)
            if not (pair[0] > 0 and pair[1] >= 0 and sum(pair) > 0):
                out.append(f"neuron {i}: marginal up-rate must be > 0, got {pair}")
    return out


def check(params: MsprParams) -> MsprParams:
    """Raise :class:`InvalidParamsError` unless ``params`` is valid."""
    violations = validate(params)
    if violations:
        raise InvalidParamsError(violations)
    return params


def _marginal_pair(params, i):
    shared = float(np.sum(params.gamma[i][params.signs[i] != 0]))
    return params.base_up[i] + shared, params.base_down[i] + shared


def marginal_rates(params: MsprParams, i: int) -> SkellamRatePair:
    """Up/down rates of neuron ``i``'s marginal SPR (0-based index)."""
    if not 0 <= i < params.p:
        raise IndexError(f"neuron index {i} out of range for p={params.p}")
    return SkellamRatePair(*_marginal_pair(params, i))


def count_covariance(params: MsprParams, i: int, j: int, t: float) -> float:
    """Model covariance ``2 a_ij a_ji gamma_ij t`` of the latent values at time ``t``."""
    p = params.p
    if not (0 <= i < p and 0 <= j < p):
        raise IndexError(f"neuron indices ({i}, {j}) out of range for p={p}")
    if i == j:
        raise ValueError("count_covariance needs i != j")
    if not t > 0:
        raise ValueError("t must be > 0")
    return 2.0 * int(params.signs[i, j]) * int(params.signs[j, i]) * float(params.gamma[i, j]) * t


def canonical_signs(sign_products) -> np.ndarray:
    """Sign matrix with ``a_ij = +1`` above the diagonal and ``a_ji = s_ij`` below."""
    s = np.asarray(sign_products, dtype=int)
    upper = np.triu(s != 0, k=1).astype(int)
    return upper + np.triu(s, k=1).T


def table1_params() -> MsprParams:
    """Ground truth of the three-neuron simulation study, all couplings excitatory."""
    gamma = np.array([[0, 5, 15], [5, 0, 10], [15, 10, 0]], dtype=float)
    signs = (gamma > 0).astype(int)
    return MsprParams([15.0, 20.0, 10.0], [10.0, 15.0, 7.0], gamma, signs)
