"""Experiment configuration: one INI-style file with flat sections.

Any value can be overridden with ``section.key=value`` strings.  Validation
errors point at the line that set the offending value.
"""
from __future__ import annotations

import configparser
import re
from dataclasses import asdict, dataclass, field

import numpy as np

from .detector import DetectorModel
from .displacement import DisplacementSetting
from .errors import ConfigError
from .fock import PhotonStatistics
from .tags import GatingConfig, SourceConfig

DEFAULTS = {
    "detector": {
        "bins": "8",
        "bin_probs": "uniform",
        "efficiency": "0.165",
        "n_max": "8",
    },
    "source": {
        "rho": "0.002, 0.942, 0.054, 0.002",
        "pair_probability": "0.6",
        "herald_efficiency": "0.8",
    },
    "displacement": {
        "alphas": "0, 0.25, 0.5, 0.75, 1.0, 1.25, 1.5, 1.75, 2.0",
        "overlap": "0.70",
    },
    "run": {
        "pulses": "2200000",
        "reference_pulses": "1000000",
        "calibration_pulses": "2200000",
        "mc_trials": "1000",
        "seed": "2010",
        "dark_rate_hz": "0",
        "format": "binary",
    },
    "timing": {
        "rep_period_ps": "500000",
        "gate_width_ps": "4000",
    },
    "analysis": {
        "efficiency": "klyshko",
        "bin_probs": "config",
        "weighted_fit": "false",
    },
}


@dataclass
class ExperimentConfig:
    bins: int
    bin_probs: np.ndarray | None
    efficiency: float
    n_max: int
    rho: PhotonStatistics
    pair_probability: float
    herald_efficiency: float
    alphas: list
    overlap: float
    pulses: int
    reference_pulses: int
    calibration_pulses: int
    mc_trials: int
    seed: int
    dark_rate_hz: float
    format: str
    rep_period_ps: int
    gate_width_ps: int
    efficiency_source: str
    bin_probs_source: str
    weighted_fit: bool
    raw: dict = field(default_factory=dict, repr=False)

    def detector(self, efficiency: float | None = None, bin_probs=None) -> DetectorModel:
        return DetectorModel(self.bins, self.efficiency if efficiency is None else efficiency,
                             self.n_max, self.bin_probs if bin_probs is None else bin_probs)

    def gating(self) -> GatingConfig:
        return GatingConfig.evenly_spaced(self.bins, self.rep_period_ps, self.gate_width_ps)

    def source(self) -> SourceConfig:
        return SourceConfig(self.rho, self.pair_probability, self.herald_efficiency)

    def settings(self) -> list[DisplacementSetting]:
        return [DisplacementSetting(a, self.overlap) for a in self.alphas]

    def to_dict(self) -> dict:
        return {s: dict(kv) for s, kv in self.raw.items()}


class _Values:
    """Raw string values plus where each one came from."""

    def __init__(self, path=None):
        self.values = {s: dict(kv) for s, kv in DEFAULTS.items()}
        self.origin = {}
        self.path = path

    def where(self, section, key):
        return self.origin.get((section, key), (None, None))

    def error(self, section, key, message):
        src, line = self.where(section, key)
        if src == "--set":
            return ConfigError(f"--set {section}.{key}: {message}")
        if src is not None:
            return ConfigError(f"[{section}] {key}: {message}", line=line, path=src)
        return ConfigError(f"[{section}] {key}: {message}")


def _line_numbers(text: str) -> dict:
    lines = {}
    section = None
    for i, line in enumerate(text.splitlines(), start=1):
        s = line.strip()
        m = re.match(r"^\[([^\]]+)\]", s)
        if m:
            section = m.group(1).strip()
            continue
        m = re.match(r"^([^=:#;\s][^=:]*?)\s*[=:]", s)
        if m and section is not None:
            lines[(section, m.group(1).strip().lower())] = i
    return lines


def _read(values: _Values, text: str, path):
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text, source=str(path))
    except configparser.ParsingError as exc:
        lineno = exc.errors[0][0] if exc.errors else None
        raise ConfigError(f"cannot parse: {exc.errors[0][1] if exc.errors else exc}",
                          line=lineno, path=path) from None
    except configparser.Error as exc:
        line = getattr(exc, "lineno", None)
        raise ConfigError(str(exc).splitlines()[0], line=line, path=path) from None
    lines = _line_numbers(text)
    for section in parser.sections():
        if section not in DEFAULTS:
            raise ConfigError(f"unknown section [{section}]", path=path,
                              line=next((l for (s, _), l in sorted(lines.items(), key=lambda x: x[1]) if s == section), None))
        for key, value in parser.items(section, raw=True):
            if key not in DEFAULTS[section]:
                raise ConfigError(f"unknown key {key!r} in [{section}]", line=lines.get((section, key)), path=path)
            values.values[section][key] = value
            values.origin[(section, key)] = (str(path), lines.get((section, key)))


def _apply_overrides(values: _Values, overrides):
    for item in overrides or ():
        name, sep, value = item.partition("=")
        section, dot, key = name.strip().partition(".")
        if not sep or not dot:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        section, key = section.strip(), key.strip().lower()
        if section not in DEFAULTS or key not in DEFAULTS[section]:
            raise ConfigError(f"--set {name.strip()}: unknown setting")
        values.values[section][key] = value.strip()
        values.origin[(section, key)] = ("--set", None)


def _get(values, section, key, conv, check=None, message=None):
    raw = values.values[section][key]
    try:
        v = conv(raw)
    except (TypeError, ValueError):
        raise values.error(section, key, f"cannot interpret {raw!r}") from None
    if check is not None and not check(v):
        raise values.error(section, key, message or f"invalid value {raw!r}")
    return v


def _floats(s):
    items = [x for x in re.split(r"[,\s]+", s.strip()) if x]
    return [float(x) for x in items]


def _bool(s):
    t = s.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(s)


def _int(s):
    f = float(s)
    if f != int(f):
        raise ValueError(s)
    return int(f)


def load_config(path=None, overrides=None, seed=None, trials=None) -> ExperimentConfig:
    values = _Values(path)
    if path is not None:
        try:
            with open(path) as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc.strerror}", path=path) from None
        _read(values, text, path)
    _apply_overrides(values, overrides)
    if seed is not None:
        values.values["run"]["seed"] = str(seed)
        values.origin[("run", "seed")] = ("--set", None)
    if trials is not None:
        values.values["run"]["mc_trials"] = str(trials)
        values.origin[("run", "mc_trials")] = ("--set", None)

    bins = _get(values, "detector", "bins", _int, lambda v: v >= 1, "must be a positive integer")
    bp_raw = values.values["detector"]["bin_probs"].strip().lower()
    if bp_raw == "uniform":
        bin_probs = None
    else:
        bin_probs = np.array(_get(values, "detector", "bin_probs", _floats))
        if bin_probs.size != bins or np.any(bin_probs < 0) or bin_probs.sum() <= 0:
            raise values.error("detector", "bin_probs",
                               f"need {bins} nonnegative probabilities (or 'uniform')")
        bin_probs = bin_probs / bin_probs.sum()
    eta = _get(values, "detector", "efficiency", float, lambda v: 0 < v <= 1, "must lie in (0, 1]")
    n_max = _get(values, "detector", "n_max", _int, lambda v: 0 <= v <= bins,
                 f"must lie between 0 and the bin count ({bins})")

    rho = _get(values, "source", "rho", _floats,
               lambda v: len(v) > 0 and min(v) >= 0 and abs(sum(v) - 1) < 1e-6,
               "must be nonnegative probabilities summing to 1")
    rho = np.array(rho) / sum(rho)
    pair_p = _get(values, "source", "pair_probability", float, lambda v: 0 < v <= 1, "must lie in (0, 1]")
    herald_eff = _get(values, "source", "herald_efficiency", float, lambda v: 0 < v <= 1, "must lie in (0, 1]")

    alphas = _get(values, "displacement", "alphas", _floats,
                  lambda v: len(v) > 0 and all(np.isfinite(v)) and min(v) >= 0,
                  "must be a non-empty list of nonnegative magnitudes")
    overlap = _get(values, "displacement", "overlap", float, lambda v: 0 <= v <= 1, "must lie in [0, 1]")

    positive = lambda v: v >= 1
    pulses = _get(values, "run", "pulses", _int, positive, "must be a positive integer")
    ref_pulses = _get(values, "run", "reference_pulses", _int, positive, "must be a positive integer")
    cal_pulses = _get(values, "run", "calibration_pulses", _int, positive, "must be a positive integer")
    trials_v = _get(values, "run", "mc_trials", _int, positive, "must be a positive integer")
    seed_v = _get(values, "run", "seed", _int, lambda v: v >= 0, "must be a nonnegative integer")
    dark = _get(values, "run", "dark_rate_hz", float, lambda v: v >= 0, "must be nonnegative")
    fmt = _get(values, "run", "format", lambda s: s.strip().lower(), lambda v: v in ("binary", "text"),
               "must be 'binary' or 'text'")

    rep = _get(values, "timing", "rep_period_ps", _int, positive, "must be a positive integer")
    gate = _get(values, "timing", "gate_width_ps", _int, lambda v: 0 < v < rep,
                "must be positive and shorter than the repetition period")

    eff_src = _get(values, "analysis", "efficiency", lambda s: s.strip().lower(),
                   lambda v: v in ("klyshko", "config"), "must be 'klyshko' or 'config'")
    bp_src = _get(values, "analysis", "bin_probs", lambda s: s.strip().lower(),
                  lambda v: v in ("config", "estimate"), "must be 'config' or 'estimate'")
    weighted = _get(values, "analysis", "weighted_fit", _bool)

    cfg = ExperimentConfig(bins, bin_probs, eta, n_max, PhotonStatistics(rho), pair_p, herald_eff,
                           alphas, overlap, pulses, ref_pulses, cal_pulses, trials_v, seed_v, dark, fmt,
                           rep, gate, eff_src, bp_src, weighted, raw=values.values)
    try:
        cfg.gating()
    except ConfigError as exc:
        raise values.error("timing", "gate_width_ps", str(exc)) from None
    return cfg


def default_config_text() -> str:
    out = []
    for section, kv in DEFAULTS.items():
        out.append(f"[{section}]")
        out.extend(f"{k} = {v}" for k, v in kv.items())
        out.append("")
    return "\n".join(out)
