"""Loss-tolerant inversion of click statistics and Monte Carlo error bars."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import nnls

from .detector import ClickStatistics, DetectorModel, max_invertible_n_max
from .errors import DataError, MonteCarloRejectionError, RankDeficientError
from .fock import PhotonStatistics, parity

NEGATIVITY_TOL = 1e-10
MIN_KEPT_FRACTION = 0.01
DEFAULT_TRIALS = 1000


@dataclass(frozen=True)
class InversionResult:
    """Inverted photon statistics.

    ``rho_raw`` is the plain least-squares solution and may dip below zero;
    ``rho_constrained`` is the nonnegative solution, renormalized.  The error
    fields are filled by :func:`monte_carlo_errors` only.
    """

    rho_raw: np.ndarray
    rho_constrained: PhotonStatistics
    condition_number: float
    rho_mode: np.ndarray | None = None
    err_lo: np.ndarray | None = None
    err_hi: np.ndarray | None = None
    parity_samples: np.ndarray | None = None
    mc_trials_kept: int = 0
    mc_trials_total: int = 0

    @property
    def n_max(self) -> int:
        return self.rho_raw.size - 1

    @property
    def parity_raw(self) -> float:
        return parity(self.rho_raw).value

    def parity_interval(self) -> tuple[float, float]:
        """16th and 84th percentiles of the kept-trial parity values."""
        if self.parity_samples is None or self.parity_samples.size == 0:
            return (math.nan, math.nan)
        lo, hi = np.percentile(self.parity_samples, [16, 84])
        return float(lo), float(hi)

    @property
    def parity_mode(self) -> float:
        """Most probable parity among the kept Monte Carlo trials."""
        if self.parity_samples is None or self.parity_samples.size == 0:
            return math.nan
        return _fd_mode(self.parity_samples)

    @property
    def parity_error(self) -> float:
        """Half width of the central 68% band of the kept-trial parities."""
        lo, hi = self.parity_interval()
        return 0.5 * (hi - lo)


def _click_vector(model: DetectorModel, clicks) -> np.ndarray:
    if isinstance(clicks, ClickStatistics):
        p = clicks.probs
    else:
        p = np.asarray(clicks, dtype=float)
    rows = model.bin_count + 1
    if p.size > rows:
        if np.any(p[rows:] != 0):
            raise DataError(f"click statistics extend to k={p.size - 1} but the detector has "
                            f"{model.bin_count} bins")
        p = p[:rows]
    elif p.size < rows:
        p = np.concatenate([p, np.zeros(rows - p.size)])
    total = p.sum()
    if not total > 0:
        raise DataError("click statistics have zero total")
    return p / total


def response(model: DetectorModel) -> np.ndarray:
    limit = max_invertible_n_max(model)
    if model.n_max > limit:
        raise RankDeficientError(
            f"C L(eta) is rank deficient for n_max={model.n_max}; with {limit} usable bins "
            f"the largest invertible n_max is {limit}", max_n_max=limit)
    return model.response_matrix()


def _constrained(A: np.ndarray, p: np.ndarray) -> PhotonStatistics:
    x, _ = nnls(A, p)
    s = x.sum()
    if s > 0:
        x = x / s
    return PhotonStatistics(x)


def invert(model: DetectorModel, clicks) -> InversionResult:
    """Point estimate of the photon statistics behind ``clicks``."""
    A = response(model)
    p = _click_vector(model, clicks)
    raw = np.linalg.lstsq(A, p, rcond=None)[0]
    return InversionResult(raw, _constrained(A, p), float(np.linalg.cond(A)))


def _fd_mode(x: np.ndarray) -> float:
    """Mode of a sample from a histogram with Freedman-Diaconis bin width."""
    lo, hi = float(x.min()), float(x.max())
    if hi == lo:
        return lo
    q75, q25 = np.percentile(x, [75, 25])
    width = 2.0 * (q75 - q25) * x.size ** (-1.0 / 3.0)
    if width <= 0:
        nbins = 1
    else:
        nbins = int(min(max(math.ceil((hi - lo) / width), 1), 10_000))
    counts, edges = np.histogram(x, bins=nbins, range=(lo, hi))
    i = int(np.argmax(counts))
    return 0.5 * (edges[i] + edges[i + 1])


def _trial_noise(seed, trials: int, size: int) -> np.ndarray:
    # one independent substream per trial so results do not depend on execution order
    children = np.random.SeedSequence(seed).spawn(trials)
    return np.stack([np.random.default_rng(c).standard_normal(size) for c in children])


def monte_carlo_errors(model: DetectorModel, click_counts, trials: int = DEFAULT_TRIALS,
                       seed=None, negativity_tol: float = NEGATIVITY_TOL,
                       min_kept_fraction: float = MIN_KEPT_FRACTION) -> InversionResult:
    """Point estimate plus Monte Carlo error bars from Gaussian count noise.

    Every count is perturbed by a normal deviate of width sqrt(count), clamped
    at zero, renormalized and inverted.  Trials whose raw inversion has an
    entry below ``-negativity_tol`` are discarded.  Error bars are the
    distances from the per-entry mode of the kept trials to their 16th and
    84th percentiles.
    """
    counts = np.asarray(click_counts, dtype=float).ravel()
    if np.any(counts < 0) or not np.all(np.isfinite(counts)):
        raise DataError("click counts must be finite and nonnegative")
    if trials < 1:
        raise ValueError(f"trials must be >= 1, got {trials}")
    point = invert(model, counts)
    A = response(model)
    pinv = np.linalg.pinv(A)
    rows = model.bin_count + 1
    c = _click_vector(model, counts) * counts.sum()

    noise = _trial_noise(seed, trials, rows)
    perturbed = np.clip(c + noise * np.sqrt(c), 0.0, None)
    totals = perturbed.sum(axis=1, keepdims=True)
    ok = totals[:, 0] > 0
    probs = np.divide(perturbed, totals, out=np.zeros_like(perturbed), where=totals > 0)
    samples = probs @ pinv.T
    keep = ok & np.all(samples >= -negativity_tol, axis=1)
    kept = samples[keep]
    n_kept = int(keep.sum())
    if n_kept < max(1, math.ceil(min_kept_fraction * trials)):
        raise MonteCarloRejectionError(
            f"only {n_kept} of {trials} Monte Carlo trials gave nonnegative statistics "
            f"(condition number {point.condition_number:.3g}); the model is badly conditioned "
            "for this data or the data are inconsistent with it",
            kept=n_kept, total=trials)

    mode = np.array([_fd_mode(kept[:, j]) for j in range(kept.shape[1])])
    q16, q84 = np.percentile(kept, [16, 84], axis=0)
    err_lo = np.clip(mode - q16, 0.0, None)
    err_hi = np.clip(q84 - mode, 0.0, None)
    signs = np.where(np.arange(kept.shape[1]) % 2, -1.0, 1.0)
    return InversionResult(
        point.rho_raw, point.rho_constrained, point.condition_number,
        rho_mode=mode, err_lo=err_lo, err_hi=err_hi, parity_samples=kept @ signs,
        mc_trials_kept=n_kept, mc_trials_total=trials)
