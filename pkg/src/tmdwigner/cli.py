"""Command-line front end: simulate, analyze, calibrate, matrices.

Typical use::

    tmdwigner simulate --out-dir run1
    tmdwigner analyze --out-dir run1

``simulate`` writes the tag files, a ``manifest.json`` and a ``config.ini``
snapshot; ``analyze`` reads them back from the same directory.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
import tempfile
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from .calibration import (CalibrationReport, Estimate, displacement_magnitude,
                          estimate_bin_probs, klyshko_efficiency)
from .config import ExperimentConfig, default_config_text, load_config
from .detector import convolution_matrix, loss_matrix
from .displacement import DisplacementSetting, OverlapClampWarning, fit_overlap
from .errors import ConfigError, DataError, MonteCarloRejectionError, NumericalError, TmdWignerError
from .fock import TWO_OVER_PI, fock_state
from .inversion import invert, monte_carlo_errors
from .tags import (HeraldedHistogram, SourceConfig, ingest_file, iter_generate,
                   write_binary, write_text)

log = logging.getLogger("tmdwigner")

MANIFEST = "manifest.json"
CONFIG_SNAPSHOT = "config.ini"

# seed substream labels
_SIM, _MC, _REF = 1, 2, 3


def _seed(cfg: ExperimentConfig, *key) -> list[int]:
    return [cfg.seed, *key]


def _atomic_write(path: Path, text: str):
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    with os.fdopen(fd, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _config_ini(cfg: ExperimentConfig) -> str:
    lines = []
    for section, kv in cfg.to_dict().items():
        lines.append(f"[{section}]")
        lines.extend(f"{k} = {v}" for k, v in kv.items())
        lines.append("")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# simulate


def _write_tags(path: Path, chunks, cfg: ExperimentConfig, pulses: int, channels):
    tmp = path.with_name(f".{path.name}.tmp")
    if cfg.format == "binary":
        write_binary(tmp, chunks)
    else:
        tags = np.concatenate(list(chunks))
        write_text(tmp, tags, cfg.rep_period_ps, channels, pulses)
    os.replace(tmp, path)


def cmd_simulate(cfg: ExperimentConfig, out_dir) -> dict:
    """Write one tag file per sweep point, reference-only files and a pair-source file."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ext = "bin" if cfg.format == "binary" else "txt"
    model = cfg.detector()
    gating = cfg.gating()
    files = []

    def emit(name, role, source, setting, pulses, seed_key, **extra):
        path = out / name
        seed = _seed(cfg, *seed_key)
        chunks = iter_generate(source, setting, model, pulses, seed, gating, cfg.dark_rate_hz)
        _write_tags(path, chunks, cfg, pulses, gating.channels)
        entry = {"role": role, "path": name, "alpha": setting.alpha_mag, "overlap": setting.overlap,
                 "pulses": pulses, "seed": seed, **extra}
        files.append(entry)
        log.info("wrote %s", path)

    signal = cfg.source()
    blocked = SourceConfig(fock_state(0), cfg.pair_probability, cfg.herald_efficiency, signal_blocked=True)
    for i, setting in enumerate(cfg.settings()):
        emit(f"signal_{i:02d}_alpha{setting.alpha_mag:.3f}.{ext}", "signal", signal, setting,
             cfg.pulses, (_SIM, 0, i), index=i)
        if setting.alpha_mag > 0:
            emit(f"reference_{i:02d}_alpha{setting.alpha_mag:.3f}.{ext}", "reference", blocked,
                 DisplacementSetting(setting.alpha_mag, 1.0), cfg.reference_pulses, (_SIM, 1, i), index=i)
    pair_source = SourceConfig(fock_state(1), cfg.pair_probability, cfg.herald_efficiency)
    emit(f"calibration.{ext}", "calibration", pair_source, DisplacementSetting(0.0, 1.0),
         cfg.calibration_pulses, (_SIM, 2))

    manifest = {"tool": "tmdwigner", "version": __version__, "seed": cfg.seed,
                "format": cfg.format, "files": files}
    _atomic_write(out / CONFIG_SNAPSHOT, f"# seed={cfg.seed}\n" + _config_ini(cfg))
    _atomic_write(out / MANIFEST, json.dumps(manifest, indent=2) + "\n")
    return manifest


# ---------------------------------------------------------------------------
# analyze / calibrate


def _load_manifest(out_dir) -> dict:
    path = Path(out_dir) / MANIFEST
    if not path.exists():
        raise DataError(f"{path}: manifest not found; run 'simulate' first")
    with open(path) as fh:
        manifest = json.load(fh)
    for entry in manifest.get("files", []):
        if not (Path(out_dir) / entry["path"]).exists():
            raise DataError(f"{Path(out_dir) / entry['path']}: listed in the manifest but missing")
    return manifest


def _ingest(out_dir, entry, cfg) -> HeraldedHistogram:
    return ingest_file(Path(out_dir) / entry["path"], cfg.gating(), entry.get("pulses"))


def run_calibration(cfg: ExperimentConfig, out_dir, manifest: dict | None = None) -> CalibrationReport:
    manifest = manifest or _load_manifest(out_dir)
    cal = [e for e in manifest["files"] if e["role"] == "calibration"]
    if cal:
        h = _ingest(out_dir, cal[0], cfg)
        eta = klyshko_efficiency(h.coincidences, h.herald_singles)
        counts = {"coincidences": h.coincidences, "idler_singles": h.herald_singles,
                  "bin_occupations": [int(x) for x in h.bin_occupations]}
    else:
        if cfg.efficiency_source == "klyshko" or cfg.bin_probs_source == "estimate":
            raise DataError("no calibration file in the manifest")
        h = None
        eta = Estimate(cfg.efficiency, 0.0)
        counts = {}
    notes = []
    if cfg.efficiency_source == "config":
        eta = Estimate(cfg.efficiency, 0.0)
        notes.append("efficiency taken from the configuration")
    if cfg.bin_probs_source == "estimate":
        bin_probs = estimate_bin_probs(h.bin_occupations)
    else:
        bin_probs = cfg.detector().bin_probs
    notes.append("reference mean photon number taken from splitting-inverted, not loss-corrected, statistics")
    report = CalibrationReport(eta, np.asarray(bin_probs), source_counts=counts, notes=notes)

    model = cfg.detector(efficiency=eta.value, bin_probs=bin_probs)
    for e in manifest["files"]:
        if e["role"] != "reference":
            continue
        h = _ingest(out_dir, e, cfg)
        est = displacement_magnitude(h.unconditioned_counts, model, seed=_seed(cfg, _REF, e["index"]))
        report.alpha_mags[str(e["index"])] = est
        report.source_counts.setdefault("reference_mean_clicks", {})[str(e["index"])] = float(
            np.arange(h.unconditioned_counts.size) @ h.unconditioned_counts / max(h.total_pulses, 1))
    return report


def cmd_calibrate(cfg: ExperimentConfig, out_dir) -> CalibrationReport:
    report = run_calibration(cfg, out_dir)
    _atomic_write(Path(out_dir) / "calibration.json", json.dumps(report.to_dict(), indent=2) + "\n")
    return report


def _fmt(x) -> str:
    return "nan" if x is None or (isinstance(x, float) and math.isnan(x)) else repr(float(x))


def cmd_analyze(cfg: ExperimentConfig, out_dir) -> dict:
    """Invert every sweep point, attach error bars, probe W, fit the overlap.

    Points whose Monte Carlo rejection rate is too high are kept in the
    output with NaN error bars and ``status = "failed"``.
    """
    out = Path(out_dir)
    manifest = _load_manifest(out)
    signals = sorted((e for e in manifest["files"] if e["role"] == "signal"), key=lambda e: e["index"])
    if not signals:
        raise DataError("the manifest lists no signal files (empty sweep)")
    calib = run_calibration(cfg, out, manifest)
    model = cfg.detector(efficiency=calib.eta.value, bin_probs=calib.bin_probs)

    points = []
    for e in signals:
        i = e["index"]
        h = _ingest(out, e, cfg)
        alpha_cal = calib.alpha_mags.get(str(i), Estimate(0.0, 0.0) if e["alpha"] == 0 else None)
        if alpha_cal is None:
            raise DataError(f"sweep point {i} (|alpha|={e['alpha']}) has no reference file")
        point = {"index": i, "alpha_nominal": e["alpha"], "alpha": float(alpha_cal.value),
                 "alpha_err": float(alpha_cal.uncertainty), "heralds": h.total_heralds,
                 "click_counts": [int(c) for c in h.click_counts]}
        try:
            res = monte_carlo_errors(model, h.click_counts, cfg.mc_trials, seed=_seed(cfg, _MC, i))
            point["status"] = "ok"
            rho_best, err_lo, err_hi = res.rho_mode, res.err_lo, res.err_hi
            parity_best = res.parity_mode
            w_err = TWO_OVER_PI * res.parity_error
        except MonteCarloRejectionError as exc:
            log.error("sweep point %d (|alpha|=%g): %s", i, e["alpha"], exc)
            res = invert(model, h.click_counts)
            point["status"] = "failed"
            point["error"] = str(exc)
            rho_best = res.rho_constrained.probs
            parity_best = res.parity_raw
            err_lo = err_hi = np.full(res.n_max + 1, math.nan)
            w_err = math.nan
        point.update({
            "rho": rho_best.tolist(), "rho_constrained": res.rho_constrained.probs.tolist(),
            "rho_raw": res.rho_raw.tolist(), "err_lo": err_lo.tolist(), "err_hi": err_hi.tolist(),
            "parity": float(parity_best), "parity_raw": float(res.parity_raw),
            "W": float(TWO_OVER_PI * parity_best), "W_err": float(w_err),
            "condition_number": float(res.condition_number),
            "mc_trials_kept": res.mc_trials_kept, "mc_trials_total": res.mc_trials_total or cfg.mc_trials,
        })
        points.append(point)

    fit = None
    ok = [p for p in points if p["status"] == "ok"]
    zero = [p for p in ok if p["alpha_nominal"] == 0]
    if zero and len(ok) >= 2 and any(p["alpha"] > 0 for p in ok):
        measured = [(p["alpha"], np.array(p["rho"])) for p in ok]
        weights = None
        if cfg.weighted_fit:
            sig = np.array([[0.5 * (p["err_lo"][n] + p["err_hi"][n]) for n in (0, 1)] for p in ok])
            weights = 1.0 / np.maximum(sig, 1e-12) ** 2
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", OverlapClampWarning)
            f = fit_overlap(measured, np.array(zero[0]["rho"]), weights=weights)
        fit = {"overlap": f.overlap, "err": f.uncertainty, "objective": f.objective,
               "clamped": f.clamped or bool(caught), "points_used": [p["index"] for p in ok]}
    else:
        log.warning("overlap fit skipped: need the |alpha|=0 point and one displaced point with valid error bars")

    header = f"# tmdwigner {__version__}; seed={cfg.seed}; eta={calib.eta.value!r}\n"
    stats = [header, "alpha,n,rho,err_lo,err_hi\n"]
    for p in points:
        for n, r in enumerate(p["rho"]):
            stats.append(f"{p['alpha']!r},{n},{r!r},{_fmt(p['err_lo'][n])},{_fmt(p['err_hi'][n])}\n")
    wig = [header, "alpha,W,err\n"]
    wig += [f"{p['alpha']!r},{p['W']!r},{_fmt(p['W_err'])}\n" for p in points]
    _atomic_write(out / "statistics.csv", "".join(stats))
    _atomic_write(out / "wigner.csv", "".join(wig))
    for p, e in zip(points, signals):
        lines = [header, "k,conditioned_count,unconditioned_count\n"]
        h = _ingest(out, e, cfg)
        lines += [f"{k},{int(c)},{int(u)}\n" for k, (c, u) in enumerate(zip(h.click_counts, h.unconditioned_counts))]
        _atomic_write(out / f"histogram_{p['index']:02d}.csv", "".join(lines))

    report = {"tool": "tmdwigner", "version": __version__, "seed": cfg.seed,
              "calibration": calib.to_dict(), "overlap_fit": fit, "points": points,
              "failed_points": [p["index"] for p in points if p["status"] != "ok"]}
    _atomic_write(out / "report.json", json.dumps(report, indent=2, allow_nan=True) + "\n")
    return report


# ---------------------------------------------------------------------------
# matrices


def cmd_matrices(cfg: ExperimentConfig, out_dir) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model = cfg.detector()
    C = convolution_matrix(model)
    L = loss_matrix(model.efficiency, model.n_max)
    CL = C @ L
    cond = float(np.linalg.cond(CL))
    header = f"# B={model.bin_count}; eta={model.efficiency!r}; n_max={model.n_max}\n"

    def dump(name, M, rows):
        cols = ",".join(f"n{j}" for j in range(M.shape[1]))
        body = "".join(f"{rows}{i}," + ",".join(repr(float(x)) for x in row) + "\n" for i, row in enumerate(M))
        _atomic_write(out / name, header + f"row,{cols}\n" + body)

    dump("C.csv", C, "k")
    dump("L.csv", L, "m")
    dump("CL.csv", CL, "k")
    _atomic_write(out / "condition.csv", header + "matrix,condition_number\nCL," + repr(cond) + "\n")
    return {"C": C, "L": L, "CL": CL, "condition_number": cond}


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tmdwigner", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI configuration file")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one configuration value (repeatable)")
    common.add_argument("--out-dir", default=".", help="output (and, for analyze, input) directory")
    common.add_argument("--seed", type=int, help="root seed, overrides run.seed")
    common.add_argument("--trials", type=int, help="Monte Carlo trials, overrides run.mc_trials")
    common.add_argument("--format", choices=["csv"], default="csv", help="result table format")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="generate synthetic time-tag files")
    sub.add_parser("analyze", parents=[common], help="invert, probe W and fit the overlap")
    sub.add_parser("calibrate", parents=[common], help="Klyshko efficiency and reference displacements")
    sub.add_parser("matrices", parents=[common], help="dump C, L(eta), C L(eta) and the condition number")
    sub.add_parser("default-config", help="print the default configuration")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "default-config":
        print(default_config_text())
        return 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config_path = args.config
        if config_path is None and args.command in ("analyze", "calibrate"):
            snap = Path(args.out_dir) / CONFIG_SNAPSHOT
            config_path = snap if snap.exists() else None
        cfg = load_config(config_path, args.set, seed=args.seed, trials=args.trials)
        if args.command == "simulate":
            cmd_simulate(cfg, args.out_dir)
        elif args.command == "analyze":
            report = cmd_analyze(cfg, args.out_dir)
            if report["failed_points"]:
                bad = ", ".join(f"{p['index']} (|alpha|={p['alpha_nominal']:g})"
                                for p in report["points"] if p["status"] != "ok")
                print(f"tmdwigner: Monte Carlo inversion failed at sweep point(s) {bad}", file=sys.stderr)
                return NumericalError.exit_code
        elif args.command == "calibrate":
            cmd_calibrate(cfg, args.out_dir)
        elif args.command == "matrices":
            cmd_matrices(cfg, args.out_dir)
    except TmdWignerError as exc:
        print(f"tmdwigner: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"tmdwigner: {exc}", file=sys.stderr)
        return DataError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
