"""Fock-diagonal photon statistics, displaced number distributions, parity and
Wigner point values.

Everything here works with phase-averaged (diagonal) states, so displacements
are described by their magnitude only.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import TruncationError

TWO_OVER_PI = 2.0 / math.pi
DEFAULT_N_MAX = 20
DEFAULT_LEAKAGE_THRESHOLD = 1e-6


@dataclass(frozen=True)
class PhotonStatistics:
    """Probability vector over photon number ``n = 0 .. n_max``.

    ``probs`` may carry small negative entries when it comes straight out of
    an unconstrained inversion; use :meth:`is_valid` to check nonnegativity.
    ``leakage`` is the probability mass lost to truncation when the vector was
    produced by a truncated computation.
    """

    probs: np.ndarray
    leakage: float = 0.0

    def __post_init__(self):
        p = np.array(self.probs, dtype=float).ravel()
        if p.size == 0:
            raise ValueError("photon statistics need at least one entry")
        if not np.all(np.isfinite(p)):
            raise ValueError("photon statistics contain non-finite entries")
        p.setflags(write=False)
        object.__setattr__(self, "probs", p)

    @property
    def n_max(self) -> int:
        return self.probs.size - 1

    @property
    def total(self) -> float:
        return float(self.probs.sum())

    @property
    def mean(self) -> float:
        return float(np.arange(self.probs.size) @ self.probs)

    def is_valid(self, tol: float = 1e-9) -> bool:
        return bool(np.all(self.probs >= -tol) and abs(self.total - 1.0) <= tol)

    def padded(self, n_max: int) -> "PhotonStatistics":
        """Zero-pad (or truncate, moving nothing) to ``n_max``."""
        if n_max < self.n_max:
            dropped = float(self.probs[n_max + 1:].sum())
            return PhotonStatistics(self.probs[: n_max + 1], self.leakage + dropped)
        out = np.zeros(n_max + 1)
        out[: self.probs.size] = self.probs
        return PhotonStatistics(out, self.leakage)

    def __len__(self):
        return self.probs.size

    def __getitem__(self, n):
        return self.probs[n]


@dataclass(frozen=True)
class ParityValue:
    value: float
    uncertainty: float | None = None


@dataclass(frozen=True)
class WignerPoint:
    alpha_mag: float
    value: float
    uncertainty: float | None = None


def as_statistics(rho) -> PhotonStatistics:
    if isinstance(rho, PhotonStatistics):
        return rho
    return PhotonStatistics(rho)


def _check_alpha(alpha_mag) -> float:
    a = float(alpha_mag)
    if not math.isfinite(a):
        raise ValueError(f"displacement magnitude must be finite, got {alpha_mag!r}")
    return abs(a)


def _laguerre_columns(k: int, a: np.ndarray, x: float) -> np.ndarray:
    """Generalized Laguerre L_k^(a)(x) for a vector of orders ``a``.

    Three-term recurrence in the degree; stable for the small arguments used here.
    """
    prev = np.ones_like(a, dtype=float)
    if k == 0:
        return prev
    cur = 1.0 + a - x
    for j in range(1, k):
        prev, cur = cur, ((2 * j + 1 + a - x) * cur - (j + a) * prev) / (j + 1)
    return cur


def displaced_fock_prob(n: int, m: int, alpha_mag: float) -> float:
    """|<n|D(alpha)|m>|^2 for a displacement of magnitude ``alpha_mag``."""
    if int(n) != n or int(m) != m or n < 0 or m < 0:
        raise ValueError(f"photon numbers must be nonnegative integers, got n={n}, m={m}")
    n, m = int(n), int(m)
    x = _check_alpha(alpha_mag) ** 2
    lo, hi = min(n, m), max(n, m)
    if x == 0.0:
        return 1.0 if n == m else 0.0
    lag = _laguerre_columns(lo, np.array([float(hi - lo)]), x)[0]
    log_pref = math.lgamma(lo + 1) - math.lgamma(hi + 1) + (hi - lo) * math.log(x) - x
    return math.exp(log_pref) * lag * lag


def displacement_matrix(alpha_mag: float, n_out: int, m_max: int) -> np.ndarray:
    """Transition matrix T[n, m] = |<n|D(alpha)|m>|^2, n <= n_out, m <= m_max."""
    x = _check_alpha(alpha_mag) ** 2
    T = np.zeros((n_out + 1, m_max + 1))
    if x == 0.0:
        k = min(n_out, m_max) + 1
        T[np.arange(k), np.arange(k)] = 1.0
        return T
    logx = math.log(x)
    lgam = np.array([math.lgamma(j + 1) for j in range(max(n_out, m_max) + 1)])
    for m in range(m_max + 1):
        # n >= m: Laguerre degree m, order n - m
        n_hi = np.arange(m, n_out + 1)
        if n_hi.size:
            d = (n_hi - m).astype(float)
            lag = _laguerre_columns(m, d, x)
            T[n_hi, m] = np.exp(lgam[m] - lgam[n_hi] + d * logx - x) * lag**2
        # n < m: degree n, order m - n; done per n to reuse the recurrence shape
        for nn in range(min(m, n_out + 1)):
            d = float(m - nn)
            lag = _laguerre_columns(nn, np.array([d]), x)[0]
            T[nn, m] = math.exp(lgam[nn] - lgam[m] + d * logx - x) * lag**2
    return T


def default_cutoff(n_max: int, mean: float) -> int:
    """Output truncation that keeps the tail of a displaced distribution tiny."""
    mean = max(float(mean), 0.0)
    return int(max(DEFAULT_N_MAX, n_max + math.ceil(mean + 10.0 * math.sqrt(mean + n_max + 1)) + 10))


def _leakage_check(leakage: float, threshold: float | None, what: str):
    if threshold is not None and leakage > threshold:
        raise TruncationError(
            f"{what}: truncation leakage {leakage:.3g} exceeds threshold {threshold:.3g}; "
            "increase the output cutoff", leakage=leakage)


def displaced_statistics(rho, alpha_mag: float, n_out: int | None = None,
                         leakage_threshold: float | None = DEFAULT_LEAKAGE_THRESHOLD) -> PhotonStatistics:
    """Photon statistics of a diagonal state after a displacement of ``alpha_mag``.

    ``n_out`` defaults to a cutoff large enough that the leakage stays well
    below ``leakage_threshold``; the lost mass is stored on the result.
    """
    rho = as_statistics(rho)
    a = _check_alpha(alpha_mag)
    if n_out is None:
        n_out = default_cutoff(rho.n_max, a * a)
    if n_out < rho.n_max:
        raise ValueError(f"output cutoff {n_out} is below the input truncation {rho.n_max}")
    out = displacement_matrix(a, n_out, rho.n_max) @ rho.probs
    leakage = float(rho.total - out.sum()) + rho.leakage
    _leakage_check(leakage, leakage_threshold, "displaced_statistics")
    return PhotonStatistics(out, max(leakage, 0.0))


def parity(rho) -> ParityValue:
    """Alternating sum sum_n (-1)^n rho_n; raw inverted statistics are fine."""
    p = as_statistics(rho).probs
    signs = np.where(np.arange(p.size) % 2, -1.0, 1.0)
    return ParityValue(float(signs @ p))


def wigner_point(rho, alpha_mag: float, uncertainty: float | None = None) -> WignerPoint:
    """Wigner value at the probe point, from statistics measured after displacing by -alpha."""
    a = _check_alpha(alpha_mag)
    value = TWO_OVER_PI * parity(rho).value
    unc = None if uncertainty is None else TWO_OVER_PI * float(uncertainty)
    return WignerPoint(a, value, unc)


def fock_state(n: int, n_max: int | None = None) -> PhotonStatistics:
    n_max = n if n_max is None else n_max
    p = np.zeros(n_max + 1)
    p[n] = 1.0
    return PhotonStatistics(p)
