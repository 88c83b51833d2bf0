"""Calibration estimators: Klyshko efficiency, reference displacement, bin probabilities."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .detector import DetectorModel
from .errors import DataError
from .inversion import _trial_noise, invert


@dataclass(frozen=True)
class Estimate:
    value: float
    uncertainty: float

    def __iter__(self):
        return iter((self.value, self.uncertainty))


@dataclass
class CalibrationReport:
    eta: Estimate
    bin_probs: np.ndarray
    alpha_mags: dict = field(default_factory=dict)  # label -> Estimate
    source_counts: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "eta": self.eta.value,
            "eta_err": self.eta.uncertainty,
            "bin_probs": [float(x) for x in self.bin_probs],
            "alpha": {k: {"value": v.value, "err": v.uncertainty} for k, v in self.alpha_mags.items()},
            "source_counts": self.source_counts,
            "notes": list(self.notes),
        }


def klyshko_efficiency(coincidences: int, idler_singles: int) -> Estimate:
    """eta = coincidences / idler singles, with the binomial standard error."""
    if idler_singles <= 0:
        raise DataError("Klyshko calibration needs at least one idler count")
    if coincidences < 0:
        raise DataError("negative coincidence count")
    if coincidences > idler_singles:
        raise DataError(f"coincidences ({coincidences}) exceed idler singles ({idler_singles})")
    eta = coincidences / idler_singles
    return Estimate(eta, math.sqrt(eta * (1.0 - eta) / idler_singles))


def displacement_magnitude(reference_counts, model: DetectorModel, trials: int = 200,
                           seed=None) -> Estimate:
    """|alpha| = sqrt(<n>_ref / eta) from a signal-blocked reference run.

    <n>_ref is the mean of the statistics that reached the detector: the
    clicks are inverted through the bin-splitting matrix only, leaving the
    loss in place, and the division by eta then undoes it.  The uncertainty
    is the spread of the same estimate over Gaussian-perturbed counts.
    """
    counts = np.asarray(reference_counts, dtype=float).ravel()
    if counts.sum() <= 0:
        raise DataError("reference run has zero counts")
    splitting_only = model.replace(efficiency=1.0)
    n = np.arange(splitting_only.n_max + 1)

    def alpha_of(c):
        mean = float(n @ invert(splitting_only, c).rho_raw)
        return math.sqrt(max(mean, 0.0) / model.efficiency)

    value = alpha_of(counts)
    if trials <= 1:
        return Estimate(value, math.nan)
    noise = _trial_noise(seed, trials, counts.size)
    perturbed = np.clip(counts + noise * np.sqrt(counts), 0.0, None)
    samples = [alpha_of(row) for row in perturbed if row.sum() > 0]
    return Estimate(value, float(np.std(samples, ddof=1)))


def estimate_bin_probs(bin_occupation_counts) -> np.ndarray:
    c = np.asarray(bin_occupation_counts, dtype=float).ravel()
    if np.any(c < 0):
        raise DataError("bin occupation counts must be nonnegative")
    total = c.sum()
    if total <= 0:
        raise DataError("bin occupation counts are all zero")
    p = c / total
    # push the rounding residue into the largest entry so the sum is exactly 1
    p[np.argmax(p)] += 1.0 - p.sum()
    return p
