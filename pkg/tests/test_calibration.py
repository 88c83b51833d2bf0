import math

import numpy as np
import pytest

from tmdwigner.calibration import (CalibrationReport, Estimate, displacement_magnitude,
                                   estimate_bin_probs, klyshko_efficiency)
from tmdwigner.detector import DetectorModel, forward
from tmdwigner.errors import DataError
from tmdwigner.fock import displaced_statistics, fock_state


def test_klyshko_examples():
    eta, err = klyshko_efficiency(165, 1000)
    assert eta == pytest.approx(0.165)
    assert err == pytest.approx(math.sqrt(0.165 * 0.835 / 1000))
    assert klyshko_efficiency(0, 10).value == 0.0
    assert klyshko_efficiency(10, 10) == Estimate(1.0, 0.0)


def test_klyshko_scale_invariant():
    a = klyshko_efficiency(33, 200)
    b = klyshko_efficiency(330_000, 2_000_000)
    assert a.value == b.value
    assert b.uncertainty == pytest.approx(a.uncertainty / 100)


@pytest.mark.parametrize("args", [(1, 0), (-1, 10), (11, 10)])
def test_klyshko_rejects(args):
    with pytest.raises(DataError):
        klyshko_efficiency(*args)


def _reference_counts(alpha, model, total=1e6):
    # coherent reference: Poisson photon statistics, no signal
    rho = displaced_statistics([1.0], alpha)
    big = model.replace(n_max=rho.n_max)
    return np.round(forward(big, rho).probs * total)


def test_lossless_fock_four_gives_two():
    model = DetectorModel(8, 1.0, 8)
    counts = forward(model, fock_state(4)).probs * 1e6
    est = displacement_magnitude(counts, model, trials=50, seed=0)
    assert est.value == pytest.approx(2.0, abs=1e-9)


def test_vacuum_reference_gives_zero():
    est = displacement_magnitude([1000, 0, 0, 0, 0, 0, 0, 0, 0], DetectorModel(8, 0.165, 8), trials=20, seed=0)
    assert est.value == pytest.approx(0.0, abs=1e-6)


@pytest.mark.parametrize("eta", [0.165, 0.5, 1.0])
@pytest.mark.parametrize("alpha", [0.5, 1.0, 1.5])
def test_displacement_closed_loop(eta, alpha):
    model = DetectorModel(8, eta, 8)
    est = displacement_magnitude(_reference_counts(alpha, model), model, trials=100, seed=1)
    assert est.value == pytest.approx(alpha, rel=0.01)
    assert 0 < est.uncertainty < 0.02


def test_displacement_rejects_empty():
    with pytest.raises(DataError):
        displacement_magnitude([0, 0, 0], DetectorModel(2, 0.5, 2))


def test_bin_probs_examples():
    assert estimate_bin_probs([1, 1, 2]).tolist() == [0.25, 0.25, 0.5]
    p = estimate_bin_probs([1, 1, 1])
    assert p.sum() == 1.0
    with pytest.raises(DataError):
        estimate_bin_probs([0, 0])
    with pytest.raises(DataError):
        estimate_bin_probs([3, -1])


def test_bin_probs_closed_loop():
    rng = np.random.default_rng(4)
    truth = np.array([0.2, 0.1, 0.15, 0.05, 0.1, 0.1, 0.2, 0.1])
    model = DetectorModel(8, 0.5, 3, truth)
    # bins hit by single detected photons reproduce the splitting ratios
    occ = rng.multinomial(400_000, model.bin_probs)
    assert np.max(np.abs(estimate_bin_probs(occ) - truth)) < 0.003


def test_report_serializes():
    r = CalibrationReport(Estimate(0.165, 0.001), np.full(2, 0.5), {"1.0": Estimate(1.0, 0.01)})
    d = r.to_dict()
    assert d["eta"] == 0.165 and d["alpha"]["1.0"] == {"value": 1.0, "err": 0.01}
    assert d["bin_probs"] == [0.5, 0.5]
