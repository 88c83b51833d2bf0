"""Time tags: synthetic generation, gating, heralding, and file formats.

A tag stream is a numpy structured array with fields ``channel`` (uint8)
and ``timestamp`` (uint64, picoseconds since the start of the acquisition).
Pulse frames start at multiples of the laser repetition period.  Every TMD
bin is a gate window of fixed width at a fixed delay within the frame, on
one of the TMD APD channels; the herald APD has a gate of its own.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from typing import Iterable, Iterator, NamedTuple, Sequence

import numpy as np

from .detector import DetectorModel
from .displacement import DisplacementSetting, displaced_with_mismatch
from .errors import ConfigError, DataError
from .fock import PhotonStatistics, as_statistics, fock_state

TAG_DTYPE = np.dtype([("channel", "u1"), ("timestamp", "<u8")])
BINARY_MAGIC = b"WPTAGBIN1" + b"\0" * 7
TEXT_HEADER_PREFIX = "# timetag v1"

HERALD_CHANNEL = 0
TMD_CHANNELS = (1, 2)
REP_PERIOD_PS = 500_000  # 2 MHz
GATE_WIDTH_PS = 4_000
CHUNK_PULSES = 1 << 18


class TimeTagRecord(NamedTuple):
    channel: int
    timestamp: int


@dataclass(frozen=True)
class GatingConfig:
    """Frame and gate layout.

    ``bin_windows`` lists ``(channel, offset_ps)`` for each TMD bin; the gate
    of a bin is ``[offset - gate/2, offset + gate/2)`` within the frame.
    """

    rep_period_ps: int = REP_PERIOD_PS
    gate_width_ps: int = GATE_WIDTH_PS
    herald_channel: int = HERALD_CHANNEL
    herald_offset_ps: int = 20_000
    bin_windows: tuple = ()

    def __post_init__(self):
        if self.rep_period_ps <= 0:
            raise ConfigError(f"repetition period must be positive, got {self.rep_period_ps}")
        if not 0 < self.gate_width_ps < self.rep_period_ps:
            raise ConfigError(
                f"gate width {self.gate_width_ps} ps must be positive and below the repetition "
                f"period {self.rep_period_ps} ps")
        object.__setattr__(self, "bin_windows", tuple((int(c), int(o)) for c, o in self.bin_windows))
        half = self.gate_width_ps / 2
        windows = [(self.herald_channel, self.herald_offset_ps)] + list(self.bin_windows)
        for ch, off in windows:
            if off - half < 0 or off + half > self.rep_period_ps:
                raise ConfigError(f"gate at {off} ps on channel {ch} does not fit inside the frame")
        seen = {}
        for i, (ch, off) in enumerate(windows):
            for j, other in seen.get(ch, []):
                if abs(off - other) < self.gate_width_ps:
                    raise ConfigError(f"gate windows {j} and {i} on channel {ch} overlap")
            seen.setdefault(ch, []).append((i, off))

    @classmethod
    def evenly_spaced(cls, bin_count: int, rep_period_ps: int = REP_PERIOD_PS,
                      gate_width_ps: int = GATE_WIDTH_PS, tmd_channels: Sequence[int] = TMD_CHANNELS,
                      herald_channel: int = HERALD_CHANNEL, first_offset_ps: int = 50_000) -> "GatingConfig":
        """Bins split evenly over the TMD channels, equally spaced in time."""
        slots = math.ceil(bin_count / len(tmd_channels))
        spacing = (rep_period_ps - first_offset_ps) // slots
        windows = [(tmd_channels[i // slots], first_offset_ps + (i % slots) * spacing)
                   for i in range(bin_count)]
        return cls(rep_period_ps, gate_width_ps, herald_channel,
                   min(20_000, first_offset_ps // 2), tuple(windows))

    @property
    def bin_count(self) -> int:
        return len(self.bin_windows)

    @property
    def channels(self) -> tuple:
        return tuple(sorted({self.herald_channel} | {c for c, _ in self.bin_windows}))


@dataclass
class HeraldedHistogram:
    click_counts: np.ndarray
    unconditioned_counts: np.ndarray
    bin_occupations: np.ndarray
    total_pulses: int = 0
    total_heralds: int = 0
    coincidences: int = 0
    dropped_out_of_gate: int = 0
    dropped_out_of_range: int = 0
    malformed: int = 0

    @classmethod
    def empty(cls, bin_count: int) -> "HeraldedHistogram":
        z = np.zeros(bin_count + 1, dtype=np.int64)
        return cls(z.copy(), z.copy(), np.zeros(bin_count, dtype=np.int64))

    def merge(self, other: "HeraldedHistogram") -> "HeraldedHistogram":
        return HeraldedHistogram(
            self.click_counts + other.click_counts,
            self.unconditioned_counts + other.unconditioned_counts,
            self.bin_occupations + other.bin_occupations,
            self.total_pulses + other.total_pulses,
            self.total_heralds + other.total_heralds,
            self.coincidences + other.coincidences,
            self.dropped_out_of_gate + other.dropped_out_of_gate,
            self.dropped_out_of_range + other.dropped_out_of_range,
            self.malformed + other.malformed,
        )

    @property
    def herald_singles(self) -> int:
        return self.total_heralds

    def to_csv(self, path, header_lines: Iterable[str] = ()):
        with open(path, "w") as fh:
            for line in header_lines:
                fh.write(f"# {line}\n")
            fh.write("k,conditioned_count,unconditioned_count\n")
            for k, (c, u) in enumerate(zip(self.click_counts, self.unconditioned_counts)):
                fh.write(f"{k},{int(c)},{int(u)}\n")


# ---------------------------------------------------------------------------
# Generation


@dataclass(frozen=True)
class SourceConfig:
    """Heralded pair source feeding the displacement and the detector.

    ``rho`` is the photon statistics of the signal given that a pair was
    emitted; ``signal_blocked`` models the reference-only calibration runs.
    """

    rho: PhotonStatistics = field(default_factory=lambda: fock_state(1))
    pair_probability: float = 1.0
    herald_efficiency: float = 1.0
    signal_blocked: bool = False

    def __post_init__(self):
        object.__setattr__(self, "rho", as_statistics(self.rho))
        if not self.rho.is_valid(1e-9):
            raise ConfigError("source statistics must be nonnegative and normalized")
        for name in ("pair_probability", "herald_efficiency"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")


def _sampling_table(source: SourceConfig, setting: DisplacementSetting) -> np.ndarray:
    """CDF of the detected-side photon number for each emitted signal number m."""
    m_max = 0 if source.signal_blocked else source.rho.n_max
    rows = [displaced_with_mismatch(fock_state(m), setting, leakage_threshold=None).probs
            for m in range(m_max + 1)]
    width = max(r.size for r in rows)
    table = np.zeros((m_max + 1, width))
    for m, r in enumerate(rows):
        table[m, : r.size] = r
    cdf = np.cumsum(table, axis=1)
    cdf[:, -1] = 1.0  # truncation leakage goes to the last entry
    return cdf


def _chunk_rng(seed, chunk: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(chunk,)))


def _generate_chunk(rng, start, n, source, cdf, model, gating, dark_rate_hz):
    half_j = gating.gate_width_ps // 8
    pair = rng.random(n) < source.pair_probability
    herald = pair & (rng.random(n) < source.herald_efficiency)
    if source.signal_blocked:
        m = np.zeros(n, dtype=np.int64)
    else:
        m = np.searchsorted(np.cumsum(source.rho.probs)[:-1], rng.random(n), side="right")
        m[~pair] = 0
    u = rng.random(n)
    photons = np.empty(n, dtype=np.int64)
    for mm in range(cdf.shape[0]):
        sel = m == mm
        if sel.any():
            photons[sel] = np.searchsorted(cdf[mm], u[sel], side="right")
    photons = np.minimum(photons, cdf.shape[1] - 1)
    detected = rng.binomial(photons, model.efficiency)
    hit = np.nonzero(detected)[0]
    occupancy = rng.multinomial(detected[hit], model.bin_probs) if hit.size else np.zeros((0, model.bin_count))
    pulse_idx, bin_idx = np.nonzero(occupancy > 0)
    pulse_idx = hit[pulse_idx]

    frame0 = (start + np.arange(n, dtype=np.uint64)) * np.uint64(gating.rep_period_ps)
    win_ch = np.array([c for c, _ in gating.bin_windows], dtype=np.uint8)
    win_off = np.array([o for _, o in gating.bin_windows], dtype=np.int64)

    hp = np.nonzero(herald)[0]
    parts_ch = [np.full(hp.size, gating.herald_channel, dtype=np.uint8), win_ch[bin_idx]]
    offs = [gating.herald_offset_ps + rng.integers(-half_j, half_j + 1, hp.size),
            win_off[bin_idx] + rng.integers(-half_j, half_j + 1, bin_idx.size)]
    parts_ts = [frame0[hp] + offs[0].astype(np.uint64), frame0[pulse_idx] + offs[1].astype(np.uint64)]

    if dark_rate_hz > 0:
        lam = dark_rate_hz * gating.rep_period_ps * 1e-12
        for ch in gating.channels:
            k = rng.poisson(lam * n)
            t = rng.integers(0, n * gating.rep_period_ps, k).astype(np.uint64)
            parts_ch.append(np.full(k, ch, dtype=np.uint8))
            parts_ts.append(frame0[0] + t)

    out = np.empty(sum(p.size for p in parts_ch), dtype=TAG_DTYPE)
    out["channel"] = np.concatenate(parts_ch)
    out["timestamp"] = np.concatenate(parts_ts)
    return out[np.lexsort((out["channel"], out["timestamp"]))]


def iter_generate(source: SourceConfig, setting: DisplacementSetting, model: DetectorModel,
                  pulses: int, seed, gating: GatingConfig | None = None,
                  dark_rate_hz: float = 0.0, chunk_pulses: int = CHUNK_PULSES) -> Iterator[np.ndarray]:
    """Yield the synthetic tag stream chunk by chunk (each chunk sorted, chunks in order).

    Each chunk of pulses draws from its own seed substream, so the stream is a
    pure function of ``seed`` and the configuration.
    """
    if int(pulses) != pulses or pulses < 1:
        raise ConfigError(f"pulses must be a positive integer, got {pulses}")
    gating = gating or GatingConfig.evenly_spaced(model.bin_count)
    if gating.bin_count != model.bin_count:
        raise ConfigError(f"gating defines {gating.bin_count} bins, detector has {model.bin_count}")
    if dark_rate_hz < 0:
        raise ConfigError("dark count rate must be nonnegative")
    cdf = _sampling_table(source, setting)
    for chunk, start in enumerate(range(0, int(pulses), chunk_pulses)):
        n = min(chunk_pulses, int(pulses) - start)
        yield _generate_chunk(_chunk_rng(seed, chunk), start, n, source, cdf, model, gating, dark_rate_hz)


def generate(source: SourceConfig, setting: DisplacementSetting, model: DetectorModel,
             pulses: int, seed, gating: GatingConfig | None = None,
             dark_rate_hz: float = 0.0) -> np.ndarray:
    """Whole synthetic tag stream as one structured array."""
    chunks = list(iter_generate(source, setting, model, pulses, seed, gating, dark_rate_hz))
    return np.concatenate(chunks) if chunks else np.empty(0, dtype=TAG_DTYPE)


# ---------------------------------------------------------------------------
# Ingestion


def _as_tag_array(records) -> np.ndarray:
    if isinstance(records, np.ndarray) and records.dtype == TAG_DTYPE:
        return records
    arr = np.array([tuple(r) for r in records], dtype=TAG_DTYPE)
    return arr


def _ingest_block(tags: np.ndarray, gating: GatingConfig, total_pulses: int | None) -> HeraldedHistogram:
    """Histogram of the frames present in ``tags``; absent frames are added by the caller."""
    B = gating.bin_count
    hist = HeraldedHistogram.empty(B)
    if tags.size == 0:
        return hist
    ch = tags["channel"]
    ts = tags["timestamp"]
    rep = np.uint64(gating.rep_period_ps)
    frame = ts // rep
    phase = (ts % rep).astype(np.int64)

    known = np.isin(ch, np.array(gating.channels, dtype=np.uint8))
    hist.malformed = int((~known).sum())
    in_range = np.ones(tags.size, dtype=bool) if total_pulses is None else frame < np.uint64(total_pulses)
    hist.dropped_out_of_range = int((known & ~in_range).sum())
    valid = known & in_range

    half = gating.gate_width_ps / 2
    dh = phase - gating.herald_offset_ps
    is_herald = valid & (ch == gating.herald_channel) & (dh >= -half) & (dh < half)
    bin_of = np.full(tags.size, -1, dtype=np.int64)
    for b, (bch, off) in enumerate(gating.bin_windows):
        d = phase - off
        bin_of[valid & (ch == bch) & (d >= -half) & (d < half)] = b
    hist.dropped_out_of_gate = int((valid & ~is_herald & (bin_of < 0)).sum())

    frames_h = np.unique(frame[is_herald])
    clicked = bin_of >= 0
    # a bin that fires twice in a frame is still one click
    keys = np.unique(frame[clicked] * np.uint64(B) + bin_of[clicked].astype(np.uint64))
    click_frame = keys // np.uint64(B)
    click_bin = (keys % np.uint64(B)).astype(np.int64)
    frames_c, k = np.unique(click_frame, return_counts=True)

    hist.bin_occupations = np.bincount(click_bin, minlength=B).astype(np.int64)
    hist.unconditioned_counts = np.bincount(k, minlength=B + 1).astype(np.int64)
    heralded_clicks = np.isin(frames_c, frames_h)
    cond = np.bincount(k[heralded_clicks], minlength=B + 1).astype(np.int64)
    cond[0] += frames_h.size - int(heralded_clicks.sum())
    hist.click_counts = cond
    hist.total_heralds = int(frames_h.size)
    hist.coincidences = int(heralded_clicks.sum())
    return hist


def _finalize(hist: HeraldedHistogram, total_pulses: int) -> HeraldedHistogram:
    seen = int(hist.unconditioned_counts.sum())
    if seen > total_pulses:
        raise DataError(f"{seen} frames with clicks but only {total_pulses} pulses declared")
    hist.unconditioned_counts[0] += total_pulses - seen
    hist.total_pulses = int(total_pulses)
    return hist


def ingest(records, gating: GatingConfig, total_pulses: int | None = None) -> HeraldedHistogram:
    """Gate, bin and herald a tag stream into click-number histograms.

    Frames are ``timestamp // rep_period``.  When ``total_pulses`` is omitted
    it is taken as the last frame seen plus one, which undercounts trailing
    empty frames.
    """
    tags = _as_tag_array(records)
    if tags.size > 1 and np.any(np.diff(tags["timestamp"].astype(np.int64)) < 0):
        tags = tags[np.argsort(tags["timestamp"], kind="stable")]
    if total_pulses is None:
        total_pulses = 0 if tags.size == 0 else int(tags["timestamp"].max() // gating.rep_period_ps) + 1
    return _finalize(_ingest_block(tags, gating, total_pulses), total_pulses)


def ingest_chunks(chunks: Iterable[np.ndarray], gating: GatingConfig, total_pulses: int) -> HeraldedHistogram:
    """Streaming variant of :func:`ingest` for time-ordered chunks.

    Records of the last (possibly incomplete) frame of a chunk are carried
    over to the next one so that no frame is split.
    """
    hist = HeraldedHistogram.empty(gating.bin_count)
    carry = np.empty(0, dtype=TAG_DTYPE)
    last_ts = 0
    rep = np.uint64(gating.rep_period_ps)
    for chunk in chunks:
        if chunk.size == 0:
            continue
        if int(chunk["timestamp"][0]) < last_ts or np.any(np.diff(chunk["timestamp"].astype(np.int64)) < 0):
            raise DataError("tag stream is not sorted by timestamp")
        last_ts = int(chunk["timestamp"][-1])
        block = np.concatenate([carry, chunk]) if carry.size else chunk
        last_frame = block["timestamp"][-1] // rep
        split = np.searchsorted(block["timestamp"], last_frame * rep, side="left")
        hist = hist.merge(_ingest_block(block[:split], gating, total_pulses))
        carry = block[split:]
    hist = hist.merge(_ingest_block(carry, gating, total_pulses))
    return _finalize(hist, total_pulses)


# ---------------------------------------------------------------------------
# Files


def write_text(path, tags: np.ndarray, rep_period_ps: int, channels: Sequence[int], pulses: int | None = None):
    header = f"{TEXT_HEADER_PREFIX}; rep_period_ps={rep_period_ps}; channels={','.join(map(str, channels))}"
    if pulses is not None:
        header += f"; pulses={pulses}"
    with open(path, "w") as fh:
        fh.write(header + "\n")
        if tags.size:
            lines = np.char.add(np.char.add(tags["channel"].astype(str), ","), tags["timestamp"].astype(str))
            fh.write("\n".join(lines.tolist()))
            fh.write("\n")


def parse_text_header(line: str) -> dict:
    line = line.strip()
    if not line.startswith(TEXT_HEADER_PREFIX):
        raise DataError(f"not a v1 time-tag file header: {line[:40]!r}")
    meta = {}
    for part in line[len(TEXT_HEADER_PREFIX):].split(";"):
        part = part.strip()
        if not part:
            continue
        key, _, value = part.partition("=")
        meta[key.strip()] = value.strip()
    out = {}
    if "rep_period_ps" in meta:
        out["rep_period_ps"] = int(meta["rep_period_ps"])
    if meta.get("channels"):
        out["channels"] = tuple(int(c) for c in meta["channels"].split(","))
    if "pulses" in meta:
        out["pulses"] = int(meta["pulses"])
    return out


def read_text(path) -> tuple[np.ndarray, dict]:
    with open(path) as fh:
        meta = parse_text_header(fh.readline())
        rows = []
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                c, t = line.split(",")
                rows.append((int(c), int(t)))
            except ValueError:
                raise DataError(f"{path}:{lineno}: malformed record {line!r}") from None
    tags = np.array(rows, dtype=TAG_DTYPE) if rows else np.empty(0, dtype=TAG_DTYPE)
    return tags, meta


def write_binary(path, chunks: Iterable[np.ndarray] | np.ndarray):
    if isinstance(chunks, np.ndarray):
        chunks = [chunks]
    with open(path, "wb") as fh:
        fh.write(BINARY_MAGIC)
        for c in chunks:
            fh.write(np.ascontiguousarray(c, dtype=TAG_DTYPE).tobytes())


def iter_binary(path, chunk_records: int = 1 << 20) -> Iterator[np.ndarray]:
    with open(path, "rb") as fh:
        if fh.read(len(BINARY_MAGIC)) != BINARY_MAGIC:
            raise DataError(f"{path}: missing binary time-tag magic header")
        while True:
            buf = fh.read(chunk_records * TAG_DTYPE.itemsize)
            if not buf:
                break
            if len(buf) % TAG_DTYPE.itemsize:
                raise DataError(f"{path}: truncated record at end of file")
            yield np.frombuffer(buf, dtype=TAG_DTYPE)


def read_binary(path) -> np.ndarray:
    chunks = list(iter_binary(path))
    return np.concatenate(chunks) if chunks else np.empty(0, dtype=TAG_DTYPE)


def is_binary(path) -> bool:
    with open(path, "rb") as fh:
        return fh.read(len(BINARY_MAGIC)) == BINARY_MAGIC


def ingest_file(path, gating: GatingConfig, total_pulses: int | None = None) -> HeraldedHistogram:
    """Ingest a text or binary tag file; binary files are streamed."""
    if is_binary(path):
        if total_pulses is None:
            return ingest(read_binary(path), gating)
        try:
            return ingest_chunks(iter_binary(path), gating, total_pulses)
        except DataError:
            return ingest(read_binary(path), gating, total_pulses)
    tags, meta = read_text(path)
    if "rep_period_ps" in meta and meta["rep_period_ps"] != gating.rep_period_ps:
        raise DataError(f"{path}: file repetition period {meta['rep_period_ps']} ps does not match "
                        f"the gating configuration ({gating.rep_period_ps} ps)")
    if total_pulses is None:
        total_pulses = meta.get("pulses")
    return ingest(tags, gating, total_pulses)
