"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line that pytest prints in its terminal summary.
"""
import json
import math
import time

import numpy as np
import pytest

from oracles import displacement_unitary_probs
from tmdwigner.calibration import displacement_magnitude, klyshko_efficiency
from tmdwigner.cli import main
from tmdwigner.detector import DetectorModel, convolution_matrix, forward, loss_matrix
from tmdwigner.displacement import DisplacementSetting, displaced_with_mismatch
from tmdwigner.fock import TWO_OVER_PI, displaced_fock_prob, fock_state, parity, wigner_point
from tmdwigner.inversion import invert
from tmdwigner.tags import GatingConfig, SourceConfig, generate, ingest

RHO = [0.002, 0.942, 0.054, 0.002]
ETA = 0.165
SWEEP = [0.0, 0.5, 1.0, 1.5, 2.0]


def test_criterion_1_negativity(record_criterion):
    p = parity(RHO).value
    w = wigner_point(RHO, 0.0).value
    reps = 1000
    t0 = time.perf_counter()
    for _ in range(reps):
        wigner_point(RHO, 0.0)
    per_call = (time.perf_counter() - t0) / reps
    ok = abs(p + 0.888) <= 1e-12 and abs(w + 0.5653) <= 5e-5 and abs(w + 0.565) <= 0.005 and per_call < 1e-3
    record_criterion(1, ok, f"parity={p:.12f} W(0)={w:.6f} per-call={per_call * 1e6:.1f}us")
    assert ok


def test_criterion_2_ideal_fock(record_criterion):
    w = wigner_point([0.0, 1.0], 0.0).value
    err = abs(w + 2 / math.pi)
    record_criterion(2, err <= 1e-12, f"W(0)={w:.15f} |W+2/pi|={err:.1e}")
    assert err <= 1e-12


def test_criterion_3_round_trip(record_criterion):
    rng = np.random.default_rng(3)
    model = DetectorModel(8, ETA, 4)
    worst = 0.0
    t0 = time.perf_counter()
    for _ in range(100):
        rho = rng.dirichlet(np.ones(5))
        worst = max(worst, np.max(np.abs(invert(model, forward(model, rho)).rho_raw - rho)))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-9 and elapsed < 1.0
    record_criterion(3, ok, f"max error={worst:.2e} over 100 states in {elapsed:.3f}s")
    assert ok


def test_criterion_4_displaced_fock_oracle(record_criterion):
    worst = 0.0
    t0 = time.perf_counter()
    for alpha in (0.1, 0.5, 1.0, 2.0, 3.0):
        oracle = displacement_unitary_probs(alpha, dim=80)
        for n in range(11):
            for m in range(11):
                worst = max(worst, abs(displaced_fock_prob(n, m, alpha) - oracle[n, m]))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-9 and elapsed < 10
    record_criterion(4, ok, f"max deviation={worst:.2e} in {elapsed:.2f}s")
    assert ok


def _sweep(out, overlap):
    t0 = time.perf_counter()
    common = ["--out-dir", str(out), "--set", "displacement.alphas=" + ",".join(map(str, SWEEP)),
              "--set", f"displacement.overlap={overlap}"]
    assert main(["simulate", *common]) == 0
    code = main(["analyze", *common])
    assert code in (0, 4)
    report = json.loads((out / "report.json").read_text())
    return report, time.perf_counter() - t0


@pytest.fixture(scope="module")
def sweeps(tmp_path_factory):
    matched, t1 = _sweep(tmp_path_factory.mktemp("overlap070"), 0.70)
    unmatched, t2 = _sweep(tmp_path_factory.mktemp("overlap000"), 0.0)
    return {"0.70": matched, "0.00": unmatched, "seconds": t1 + t2}


def _model_w(alpha, overlap):
    return TWO_OVER_PI * parity(displaced_with_mismatch(RHO, DisplacementSetting(alpha, overlap))).value


def _within_two_bars(points, overlap):
    lines = []
    ok = True
    for p in points:
        model = _model_w(p["alpha_nominal"], overlap)
        dev = abs(p["W"] - model)
        good = p["status"] == "ok" and math.isfinite(p["W_err"]) and dev <= 2 * p["W_err"]
        ok &= good
        lines.append(f"|a|={p['alpha_nominal']:g}: W={p['W']:.4f}+-{p['W_err']:.4f} model={model:.4f}"
                     f" kept={p['mc_trials_kept']}/{p['mc_trials_total']}{'' if good else ' X'}")
    return ok, lines


def test_criterion_5_end_to_end_sweep(sweeps, record_criterion):
    pts = sweeps["0.70"]["points"]
    heralds_ok = all(p["heralds"] >= 1_000_000 for p in pts)
    w_ok, lines = _within_two_bars(pts, 0.70)
    rho0 = [p["rho"][0] for p in pts]
    rho1 = [p["rho"][1] for p in pts]
    mono = all(np.diff(rho0) > 0) and all(np.diff(rho1) < 0)
    vac = [p["rho"][0] for p in sweeps["0.00"]["points"]]
    vac_ok = all(v <= 0.01 for v in vac)
    fast = sweeps["seconds"] < 300
    ok = heralds_ok and w_ok and mono and vac_ok and fast
    detail = (f"W within 2 bars: {w_ok}; rho0 {np.round(rho0, 3).tolist()} / rho1 {np.round(rho1, 3).tolist()}"
              f" monotone: {mono}; M=0 rho0 max {max(vac):.4f} (<=0.01: {vac_ok}); heralds>=1e6: {heralds_ok};"
              f" both sweeps {sweeps['seconds']:.0f}s; " + "; ".join(lines))
    record_criterion(5, ok, detail)
    assert ok, detail


def test_criterion_6_mismatch_parity_law(sweeps, record_criterion):
    w0 = _model_w(0.0, 0.0)
    analytic = max(abs(_model_w(a, 0.0) - w0 * math.exp(-2 * a * a)) for a in np.linspace(0, 3, 31))
    sim_ok, lines = _within_two_bars(sweeps["0.00"]["points"], 0.0)
    ok = analytic <= 1e-9 and sim_ok
    detail = f"analytic max deviation={analytic:.1e}; simulated within 2 bars: {sim_ok}; " + "; ".join(lines)
    record_criterion(6, ok, detail)
    assert ok, detail


def test_criterion_7_calibration_closed_loop(record_criterion):
    model = DetectorModel(8, ETA, 8)
    gating = GatingConfig.evenly_spaced(8)
    pulses = 1_000_000
    h = ingest(generate(SourceConfig(fock_state(1)), DisplacementSetting(0.0), model, pulses, [2010, 7, 1]),
               gating, pulses)
    eta = klyshko_efficiency(h.coincidences, h.herald_singles)
    eta_rel = abs(eta.value - ETA) / ETA

    blocked = SourceConfig(fock_state(0), signal_blocked=True)
    ref = ingest(generate(blocked, DisplacementSetting(1.0, 1.0), model, pulses, [2010, 7, 2]), gating, pulses)
    alpha = displacement_magnitude(ref.unconditioned_counts, model.replace(efficiency=eta.value), seed=[2010, 7, 3])
    alpha_rel = abs(alpha.value - 1.0)
    ok = h.herald_singles >= 1_000_000 and eta_rel <= 0.01 and alpha_rel <= 0.02
    record_criterion(7, ok, f"eta={eta.value:.5f}+-{eta.uncertainty:.5f} ({eta_rel:.2%} off, heralds={h.herald_singles});"
                            f" |alpha|={alpha.value:.4f}+-{alpha.uncertainty:.4f} ({alpha_rel:.2%} off)")
    assert ok


def test_criterion_8_stochasticity(record_criterion):
    worst = 0.0
    for B in (2, 4, 8):
        for eta in (0.165, 0.5, 1.0):
            for n_max in range(11):
                C = convolution_matrix(DetectorModel(B, eta, n_max))
                worst = max(worst, np.max(np.abs(C.sum(axis=0) - 1)),
                            np.max(np.abs(loss_matrix(eta, n_max).sum(axis=0) - 1)))
    comp = 0.0
    for e1 in (0.165, 0.5, 0.9, 1.0):
        for e2 in (0.165, 0.3, 1.0):
            comp = max(comp, np.max(np.abs(loss_matrix(e1, 10) @ loss_matrix(e2, 10) - loss_matrix(e1 * e2, 10))))
    ok = worst <= 1e-12 and comp <= 1e-12
    record_criterion(8, ok, f"max column-sum deviation={worst:.1e}; max composition deviation={comp:.1e}")
    assert ok
