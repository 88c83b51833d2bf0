"""Time-multiplexed detector model.

A pulse is split over ``B`` bins read by binary click detectors.  Loss acts
first (binomial thinning with efficiency eta), then the surviving photons are
distributed independently over the bins; the detector reports how many bins
fired.  Both steps are column-stochastic matrices, ``p_click = C L(eta) rho``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import binom

from .fock import PhotonStatistics, as_statistics

DEFAULT_BINS = 8


def _uniform(bin_count: int) -> np.ndarray:
    return np.full(bin_count, 1.0 / bin_count)


@dataclass(frozen=True)
class DetectorModel:
    bin_count: int = DEFAULT_BINS
    efficiency: float = 1.0
    n_max: int = DEFAULT_BINS
    bin_probs: np.ndarray | None = None

    def __post_init__(self):
        if int(self.bin_count) != self.bin_count or self.bin_count < 1:
            raise ValueError(f"bin_count must be a positive integer, got {self.bin_count}")
        if int(self.n_max) != self.n_max or self.n_max < 0:
            raise ValueError(f"n_max must be a nonnegative integer, got {self.n_max}")
        eta = float(self.efficiency)
        if not (0.0 < eta <= 1.0):
            raise ValueError(f"efficiency must lie in (0, 1], got {self.efficiency}")
        if self.bin_probs is None:
            probs = _uniform(self.bin_count)
        else:
            probs = np.array(self.bin_probs, dtype=float).ravel()
            if probs.size != self.bin_count:
                raise ValueError(f"expected {self.bin_count} bin probabilities, got {probs.size}")
            if np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-12:
                raise ValueError("bin probabilities must be nonnegative and sum to 1")
        probs.setflags(write=False)
        object.__setattr__(self, "bin_count", int(self.bin_count))
        object.__setattr__(self, "n_max", int(self.n_max))
        object.__setattr__(self, "efficiency", eta)
        object.__setattr__(self, "bin_probs", probs)

    @property
    def is_uniform(self) -> bool:
        return bool(np.allclose(self.bin_probs, 1.0 / self.bin_count, rtol=0, atol=1e-15))

    def loss_matrix(self) -> np.ndarray:
        return loss_matrix(self.efficiency, self.n_max)

    def convolution_matrix(self) -> np.ndarray:
        return convolution_matrix(self)

    def response_matrix(self) -> np.ndarray:
        """C @ L(eta), mapping photon statistics to click statistics."""
        return self.convolution_matrix() @ self.loss_matrix()

    def replace(self, **changes) -> "DetectorModel":
        kw = dict(bin_count=self.bin_count, efficiency=self.efficiency,
                  n_max=self.n_max, bin_probs=self.bin_probs)
        kw.update(changes)
        if "bin_count" in changes and "bin_probs" not in changes:
            kw["bin_probs"] = None
        return DetectorModel(**kw)


@dataclass(frozen=True)
class ClickStatistics:
    """Distribution over click number k = 0 .. len-1, optionally with raw counts."""

    probs: np.ndarray
    counts: np.ndarray | None = None

    def __post_init__(self):
        p = np.array(self.probs, dtype=float).ravel()
        if not np.all(np.isfinite(p)):
            raise ValueError("click probabilities contain non-finite entries")
        p.setflags(write=False)
        object.__setattr__(self, "probs", p)
        if self.counts is not None:
            c = np.array(self.counts).ravel()
            if c.shape != p.shape:
                raise ValueError("counts and probabilities have different lengths")
            c.setflags(write=False)
            object.__setattr__(self, "counts", c)

    @classmethod
    def from_counts(cls, counts) -> "ClickStatistics":
        c = np.asarray(counts)
        if np.any(c < 0):
            raise ValueError("click counts must be nonnegative")
        total = c.sum()
        if total <= 0:
            raise ValueError("click counts have zero total")
        return cls(c / total, c)

    @property
    def total_events(self):
        return None if self.counts is None else int(self.counts.sum())

    @property
    def k_max(self) -> int:
        return self.probs.size - 1


def loss_matrix(eta: float, n_max: int) -> np.ndarray:
    """L[m, n] = P(m of n photons survive) = binom(n, m) eta^m (1-eta)^(n-m)."""
    eta = float(eta)
    if not (0.0 < eta <= 1.0):
        raise ValueError(f"efficiency must lie in (0, 1], got {eta}")
    if n_max < 0:
        raise ValueError(f"n_max must be nonnegative, got {n_max}")
    m = np.arange(n_max + 1)[:, None]
    n = np.arange(n_max + 1)[None, :]
    L = binom.pmf(m, n, eta)
    L[m > n] = 0.0
    return L


def _stirling2_table(n_max: int, k_max: int) -> list[list[int]]:
    S = [[0] * (k_max + 1) for _ in range(n_max + 1)]
    S[0][0] = 1
    for n in range(1, n_max + 1):
        for k in range(1, min(n, k_max) + 1):
            S[n][k] = k * S[n - 1][k] + S[n - 1][k - 1]
    return S


def convolution_matrix_uniform(bin_count: int, n_max: int) -> np.ndarray:
    """Closed form for equal bins: C[k, n] = S(n, k) k! binom(B, k) / B^n."""
    if bin_count < 1 or n_max < 0:
        raise ValueError("need bin_count >= 1 and n_max >= 0")
    S = _stirling2_table(n_max, bin_count)
    C = np.zeros((bin_count + 1, n_max + 1))
    for n in range(n_max + 1):
        for k in range(min(n, bin_count) + 1):
            if S[n][k]:
                num = S[n][k] * math.factorial(k) * math.comb(bin_count, k)
                C[k, n] = float(num / bin_count**n) if n <= 30 else math.exp(
                    math.log(num) - n * math.log(bin_count))
    return C


def convolution_matrix_dp(bin_probs, n_max: int) -> np.ndarray:
    """C[k, n] for arbitrary per-photon bin probabilities.

    Walks the bins one at a time, tracking (photons placed, bins occupied);
    a bin receiving r photons contributes p_i^r / r!, and the final weight is
    multiplied by n! (multinomial coefficient).
    """
    p = np.asarray(bin_probs, dtype=float)
    B = p.size
    if B < 1 or n_max < 0:
        raise ValueError("need at least one bin and n_max >= 0")
    r = np.arange(n_max + 1)
    lfact = np.array([math.lgamma(j + 1) for j in range(n_max + 1)])
    # w[j, k]: placed j photons into the bins seen so far, k of them occupied
    w = np.zeros((n_max + 1, B + 1))
    w[0, 0] = 1.0
    for pi in p:
        if pi == 0.0:
            continue
        with np.errstate(divide="ignore"):
            fac = np.exp(r * math.log(pi) - lfact)
        new = w.copy()  # r = 0
        for j in range(n_max + 1):
            for k in range(B):
                if w[j, k] == 0.0:
                    continue
                hi = n_max - j
                new[j + 1: j + hi + 1, k + 1] += w[j, k] * fac[1: hi + 1]
        w = new
    C = np.exp(lfact)[None, :] * w.T
    return C


def convolution_matrix(model: DetectorModel) -> np.ndarray:
    """(B+1) x (n_max+1) matrix of P(k bins fire | n photons reach the detector)."""
    if model.is_uniform:
        return convolution_matrix_uniform(model.bin_count, model.n_max)
    return convolution_matrix_dp(model.bin_probs, model.n_max)


def forward(model: DetectorModel, rho) -> ClickStatistics:
    """Click statistics C L(eta) rho.  ``rho`` shorter than the model is zero-padded."""
    rho = as_statistics(rho)
    if rho.n_max > model.n_max:
        raise ValueError(
            f"photon statistics truncated at {rho.n_max} exceed detector model n_max={model.n_max}")
    p = model.response_matrix() @ rho.padded(model.n_max).probs
    return ClickStatistics(p)


def max_invertible_n_max(model: DetectorModel) -> int:
    """Largest truncation for which C L(eta) has full column rank."""
    return int(np.count_nonzero(model.bin_probs > 0))
