"""Displacement with imperfect mode overlap.

Only the fraction ``M`` of the reference amplitude interferes with the signal;
the rest arrives as an independent coherent field, so the measured statistics
are the displaced signal (amplitude sqrt(M)|alpha|) convolved with a Poisson
distribution of mean (1 - M)|alpha|^2.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.stats import poisson

from .errors import DataError
from .fock import (DEFAULT_LEAKAGE_THRESHOLD, PhotonStatistics, _leakage_check,
                   as_statistics, default_cutoff, displaced_statistics)


class OverlapClampWarning(UserWarning):
    """The best-fit overlap wanted to leave [0, 1] and was clamped."""


@dataclass(frozen=True)
class DisplacementSetting:
    alpha_mag: float
    overlap: float = 1.0

    def __post_init__(self):
        a = float(self.alpha_mag)
        M = float(self.overlap)
        if not math.isfinite(a) or a < 0:
            raise ValueError(f"alpha_mag must be finite and >= 0, got {self.alpha_mag}")
        if not (0.0 <= M <= 1.0):
            raise ValueError(f"overlap must lie in [0, 1], got {self.overlap}")
        object.__setattr__(self, "alpha_mag", a)
        object.__setattr__(self, "overlap", M)

    @property
    def background_mean(self) -> float:
        return (1.0 - self.overlap) * self.alpha_mag**2

    @property
    def matched_alpha(self) -> float:
        return math.sqrt(self.overlap) * self.alpha_mag


def poisson_vector(mean: float, n_max: int) -> PhotonStatistics:
    if not math.isfinite(mean) or mean < 0:
        raise ValueError(f"Poisson mean must be finite and >= 0, got {mean}")
    if n_max < 0:
        raise ValueError(f"n_max must be >= 0, got {n_max}")
    p = poisson.pmf(np.arange(n_max + 1), mean)
    return PhotonStatistics(p, float(poisson.sf(n_max, mean)))


def displaced_with_mismatch(rho, setting: DisplacementSetting, n_out: int | None = None,
                            leakage_threshold: float | None = DEFAULT_LEAKAGE_THRESHOLD) -> PhotonStatistics:
    """Statistics of ``rho`` displaced by ``setting`` with partial mode overlap."""
    rho = as_statistics(rho)
    if n_out is None:
        n_out = default_cutoff(rho.n_max, setting.alpha_mag**2)
    matched = displaced_statistics(rho, setting.matched_alpha, n_out=n_out, leakage_threshold=None)
    background = poisson_vector(setting.background_mean, n_out)
    out = np.convolve(background.probs, matched.probs)[: n_out + 1]
    leakage = max(float(rho.total - out.sum()) + rho.leakage, 0.0)
    _leakage_check(leakage, leakage_threshold, "displaced_with_mismatch")
    return PhotonStatistics(out, leakage)


@dataclass(frozen=True)
class OverlapFit:
    overlap: float
    uncertainty: float
    objective: float
    clamped: bool = False


def _model_low_components(rho, alphas, M):
    rows = []
    for a in alphas:
        out = displaced_with_mismatch(rho, DisplacementSetting(a, M), leakage_threshold=None)
        rows.append(out.probs[:2])
    return np.array(rows)


def fit_overlap(measured: Sequence[tuple[float, object]], rho_signal, weights=None,
                xatol: float = 1e-9) -> OverlapFit:
    """Fit the overlap M to measured vacuum and one-photon components.

    ``measured`` holds ``(alpha_mag, statistics)`` pairs; ``weights`` is an
    optional array of shape ``(len(measured), 2)`` (e.g. inverse variances)
    for the rho_0 / rho_1 residuals.  The uncertainty comes from the
    curvature of the least-squares objective at the optimum.
    """
    if len(measured) < 2:
        raise DataError("fitting the overlap needs at least two displacement settings")
    alphas = np.array([float(a) for a, _ in measured])
    if np.all(alphas == 0):
        raise DataError("all displacement settings are zero; the overlap is unconstrained")
    data = np.array([as_statistics(r).padded(max(1, as_statistics(r).n_max)).probs[:2]
                     for _, r in measured])
    w = np.ones_like(data) if weights is None else np.asarray(weights, dtype=float)
    if w.shape != data.shape:
        raise ValueError(f"weights must have shape {data.shape}, got {w.shape}")
    rho_signal = as_statistics(rho_signal)

    def objective(M):
        r = _model_low_components(rho_signal, alphas, M) - data
        return float(np.sum(w * r * r))

    res = minimize_scalar(objective, bounds=(0.0, 1.0), method="bounded",
                          options={"xatol": xatol})
    M = float(res.x)
    # snap to a bound when the bound itself is at least as good
    for edge in (0.0, 1.0):
        if objective(edge) <= objective(M):
            M = edge
    S = objective(M)

    h = 1e-4
    clamped = False
    if M <= h:
        slope = (objective(h) - S) / h
        clamped = slope > 1e-8 * (1.0 + S) and S > 1e-20
        M0, Mp, Mpp = M, M + h, M + 2 * h
        curv = (objective(Mpp) - 2 * objective(Mp) + objective(M0)) / h**2
    elif M >= 1 - h:
        slope = (S - objective(M - h)) / h
        clamped = slope < -1e-8 * (1.0 + S) and S > 1e-20
        curv = (objective(M) - 2 * objective(M - h) + objective(M - 2 * h)) / h**2
    else:
        curv = (objective(M + h) - 2 * S + objective(M - h)) / h**2
    if clamped:
        warnings.warn(f"best-fit overlap lies outside [0, 1]; clamped to {M:g}",
                      OverlapClampWarning, stacklevel=2)

    dof = data.size - 1
    if weights is None:
        sigma2 = S / dof if dof > 0 else 0.0
    else:
        sigma2 = 1.0
    unc = math.sqrt(2.0 * sigma2 / curv) if curv > 0 else math.inf
    return OverlapFit(M, unc, S, clamped)
