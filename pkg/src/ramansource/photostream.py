"""Detector model and time-tag streams.

Timestamps are stored as integers in units of the detector resolution, so
correlation arithmetic is exact.
"""
from __future__ import annotations

import csv
import io
import struct
from collections.abc import Iterable, Iterator, Sequence
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class EmissionEvent:
    sequence_index: int
    time: float  # ns within the sequence
    channel: int  # index into build_jump_operators()
    detected_flag: bool


@dataclass
class EmissionRecord:
    """Columnar store of emission events from the quantum-jump unraveling."""

    sequence_index: np.ndarray
    time: np.ndarray
    channel: np.ndarray
    detected: np.ndarray
    n_sequences: int
    repetition_period: float

    def __post_init__(self):
        self.sequence_index = np.asarray(self.sequence_index, dtype=np.int64)
        self.time = np.asarray(self.time, dtype=float)
        self.channel = np.asarray(self.channel, dtype=np.int64)
        self.detected = np.asarray(self.detected, dtype=bool)
        if len(self.time) and (self.time.min() < 0 or self.time.max() >= self.repetition_period):
            raise ValueError("event time outside [0, repetition_period)")

    def __len__(self) -> int:
        return len(self.time)

    def __iter__(self) -> Iterator[EmissionEvent]:
        for s, t, c, d in zip(self.sequence_index, self.time, self.channel, self.detected):
            yield EmissionEvent(int(s), float(t), int(c), bool(d))

    def __getitem__(self, i: int) -> EmissionEvent:
        return EmissionEvent(int(self.sequence_index[i]), float(self.time[i]), int(self.channel[i]),
                             bool(self.detected[i]))

    @classmethod
    def from_events(cls, events: Iterable[EmissionEvent], n_sequences: int, repetition_period: float):
        ev = list(events)
        return cls(
            np.array([e.sequence_index for e in ev], dtype=np.int64),
            np.array([e.time for e in ev], dtype=float),
            np.array([e.channel for e in ev], dtype=np.int64),
            np.array([e.detected_flag for e in ev], dtype=bool),
            n_sequences, repetition_period,
        )

    def detected_only(self) -> EmissionRecord:
        m = self.detected
        return EmissionRecord(self.sequence_index[m], self.time[m], self.channel[m], self.detected[m],
                              self.n_sequences, self.repetition_period)


@dataclass(frozen=True)
class DetectorModel:
    efficiency: float = 1.0
    dark_rate: float = 0.0  # counts / ns
    gate_windows: tuple[tuple[float, float], ...] = ()
    jitter_sigma: float = 0.0  # ns
    resolution: float = 1.0  # ns

    def __post_init__(self):
        if not 0.0 <= self.efficiency <= 1.0:
            raise ValueError("efficiency outside [0, 1]")
        if self.dark_rate < 0 or self.jitter_sigma < 0:
            raise ValueError("dark_rate and jitter_sigma must be non-negative")
        if not self.resolution > 0:
            raise ValueError("resolution must be positive")
        wins = tuple(sorted((float(a), float(b)) for a, b in self.gate_windows))
        for a, b in wins:
            if not b > a:
                raise ValueError(f"gate_windows: empty window ({a}, {b})")
        for (a0, b0), (a1, b1) in zip(wins[:-1], wins[1:]):
            if a1 < b0:
                raise ValueError("gate_windows overlap")
        object.__setattr__(self, "gate_windows", wins)

    def validate_period(self, repetition_period: float) -> None:
        for a, b in self.gate_windows:
            if a < 0 or b > repetition_period:
                raise ValueError("gate_windows must lie within [0, repetition_period)")

    def windows(self, repetition_period: float) -> tuple[tuple[float, float], ...]:
        return self.gate_windows or ((0.0, repetition_period),)

    def gated_time(self, repetition_period: float) -> float:
        return float(sum(b - a for a, b in self.windows(repetition_period)))

    def in_gate(self, t: np.ndarray, repetition_period: float) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        m = np.zeros(t.shape, dtype=bool)
        for a, b in self.windows(repetition_period):
            m |= (t >= a) & (t < b)
        return m


@dataclass
class TimeTagStream:
    detector_id: int
    sequence_index: np.ndarray  # int64
    ticks: np.ndarray  # int64, timestamp / resolution
    n_sequences: int
    repetition_period: float
    resolution: float = 1.0
    digest: str = ""
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.sequence_index = np.asarray(self.sequence_index, dtype=np.int64)
        self.ticks = np.asarray(self.ticks, dtype=np.int64)
        if self.sequence_index.shape != self.ticks.shape:
            raise ValueError("sequence_index and ticks differ in length")
        order = np.lexsort((self.ticks, self.sequence_index))
        if np.any(order != np.arange(len(order))):
            self.sequence_index = self.sequence_index[order]
            self.ticks = self.ticks[order]

    def __len__(self) -> int:
        return len(self.ticks)

    @property
    def timestamp(self) -> np.ndarray:
        return self.ticks * self.resolution

    @property
    def period_ticks(self) -> int:
        p = self.repetition_period / self.resolution
        if abs(p - round(p)) > 1e-9:
            raise ValueError("repetition period is not a multiple of the resolution")
        return int(round(p))

    def absolute_ticks(self) -> np.ndarray:
        return self.sequence_index * self.period_ticks + self.ticks

    @property
    def records(self) -> list[tuple[int, float]]:
        return list(zip(self.sequence_index.tolist(), self.timestamp.tolist()))

    def compatible(self, other: TimeTagStream) -> bool:
        return (self.repetition_period == other.repetition_period and self.resolution == other.resolution
                and self.n_sequences == other.n_sequences)

    def subset(self, mask: np.ndarray, detector_id: int | None = None) -> TimeTagStream:
        return replace(self, detector_id=self.detector_id if detector_id is None else detector_id,
                       sequence_index=self.sequence_index[mask], ticks=self.ticks[mask], extra=dict(self.extra))

    @classmethod
    def merge(cls, streams: Sequence[TimeTagStream], detector_id: int) -> TimeTagStream:
        first = streams[0]
        for s in streams[1:]:
            if not first.compatible(s):
                raise ValueError("cannot merge streams with different metadata")
        return cls(detector_id, np.concatenate([s.sequence_index for s in streams]),
                   np.concatenate([s.ticks for s in streams]), first.n_sequences,
                   first.repetition_period, first.resolution, first.digest)


def _quantize(t: np.ndarray, resolution: float) -> np.ndarray:
    # small epsilon keeps exact grid values from flooring one tick low
    return np.floor(np.asarray(t) / resolution + 1e-9).astype(np.int64)


def detect(events: EmissionRecord, det: DetectorModel, seed: int, detector_id: int = 0,
           digest: str = "") -> TimeTagStream:
    """Turn emission events into detector clicks.

    Each detected-flag event survives with probability ``efficiency`` (one
    uniform per event, so raising the efficiency only adds clicks), gets
    Gaussian jitter and is floored to the resolution grid. Dark counts are
    Poisson at ``dark_rate`` inside the gate windows. Clicks outside the
    gates are dropped.
    """
    period = events.repetition_period
    det.validate_period(period)
    ss = np.random.SeedSequence(seed)
    keep_rng, jitter_rng, dark_rng = (np.random.default_rng(s) for s in ss.spawn(3))
    sig = events.detected_only()
    u = keep_rng.random(len(sig))
    jitter = jitter_rng.standard_normal(len(sig)) * det.jitter_sigma
    keep = u < det.efficiency
    t = sig.time[keep] + jitter[keep]
    seq = sig.sequence_index[keep]
    gate = det.in_gate(t, period) & (t >= 0) & (t < period)
    seq, t = seq[gate], t[gate]

    dseq, dt = [], []
    if det.dark_rate > 0:
        for a, b in det.windows(period):
            n = dark_rng.poisson(det.dark_rate * (b - a) * events.n_sequences)
            dseq.append(dark_rng.integers(0, events.n_sequences, n))
            dt.append(dark_rng.uniform(a, b, n))
    seq = np.concatenate([seq] + dseq).astype(np.int64)
    t = np.concatenate([t] + dt)
    return TimeTagStream(detector_id, seq, _quantize(t, det.resolution), events.n_sequences, period,
                         det.resolution, digest)


def split_hbt(stream: TimeTagStream, seed: int) -> tuple[TimeTagStream, TimeTagStream]:
    """Route every record to one of two outputs of a 50/50 beam splitter."""
    rng = np.random.default_rng(seed)
    to_one = rng.random(len(stream)) >= 0.5
    return stream.subset(~to_one, detector_id=0), stream.subset(to_one, detector_id=1)


# -- serialization ---------------------------------------------------------

CSV_HEADER = ("detector_id", "sequence_index", "timestamp_ns")


def write_csv(streams: TimeTagStream | Sequence[TimeTagStream], path: str | Path) -> None:
    if isinstance(streams, TimeTagStream):
        streams = [streams]
    first = streams[0]
    with open(path, "w", newline="") as fh:
        fh.write(f"# digest: {first.digest}\n")
        fh.write(f"# n_sequences: {first.n_sequences}\n")
        fh.write(f"# repetition_period_ns: {first.repetition_period!r}\n")
        fh.write(f"# resolution_ns: {first.resolution!r}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for s in streams:
            for q, k in zip(s.sequence_index.tolist(), s.ticks.tolist()):
                w.writerow((s.detector_id, q, repr(k * s.resolution)))


def read_csv(path: str | Path) -> list[TimeTagStream]:
    meta = {}
    rows = []
    with open(path, newline="") as fh:
        lines = []
        for line in fh:
            if line.startswith("#"):
                key, _, val = line[1:].partition(":")
                meta[key.strip()] = val.strip()
            else:
                lines.append(line)
    reader = csv.reader(io.StringIO("".join(lines)))
    header = next(reader, None)
    if header is None or tuple(header) != CSV_HEADER:
        raise ValueError(f"{path}: expected header {','.join(CSV_HEADER)}")
    for row in reader:
        if row:
            rows.append((int(row[0]), int(row[1]), float(row[2])))
    try:
        period = float(meta["repetition_period_ns"])
        nseq = int(meta["n_sequences"])
    except KeyError as e:
        raise ValueError(f"{path}: missing '# {e.args[0]}:' header line") from None
    res = float(meta.get("resolution_ns", 1.0))
    ids = sorted({r[0] for r in rows}) or [0]
    out = []
    for d in ids:
        sel = [r for r in rows if r[0] == d]
        seq = np.array([r[1] for r in sel], dtype=np.int64)
        ticks = np.rint(np.array([r[2] for r in sel], dtype=float) / res).astype(np.int64)
        out.append(TimeTagStream(d, seq, ticks, nseq, period, res, meta.get("digest", "")))
    return out


_MAGIC = b"RPST"
_HEADER = struct.Struct("<4sHHddQ64s")
RECORD_DTYPE = np.dtype([("sequence_index", "<u4"), ("ticks", "<u8")])


def write_binary(stream: TimeTagStream, path: str | Path) -> None:
    """Header followed by packed little-endian (u32 sequence_index, u64 ticks) records."""
    if len(stream) and stream.sequence_index.max() >= 2**32:
        raise ValueError("sequence index does not fit in u32")
    header = _HEADER.pack(_MAGIC, 1, stream.detector_id, stream.resolution, stream.repetition_period,
                          stream.n_sequences, stream.digest.encode()[:64])
    rec = np.empty(len(stream), dtype=RECORD_DTYPE)
    rec["sequence_index"] = stream.sequence_index
    rec["ticks"] = stream.ticks
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(rec.tobytes())


def read_binary(path: str | Path) -> TimeTagStream:
    raw = Path(path).read_bytes()
    magic, version, det_id, res, period, nseq, digest = _HEADER.unpack_from(raw)
    if magic != _MAGIC or version != 1:
        raise ValueError(f"{path}: not a time-tag stream file")
    rec = np.frombuffer(raw, dtype=RECORD_DTYPE, offset=_HEADER.size)
    return TimeTagStream(det_id, rec["sequence_index"].astype(np.int64), rec["ticks"].astype(np.int64),
                         int(nseq), period, res, digest.rstrip(b"\0").decode())


def split_events(events: EmissionRecord, seed: int) -> tuple[EmissionRecord, EmissionRecord]:
    """Route each detected-flag emission to splitter output 0 or 1 with
    probability 1/2, before detection."""
    sig = events.detected_only()
    port = np.random.default_rng(seed).random(len(sig)) >= 0.5
    return tuple(EmissionRecord(sig.sequence_index[m], sig.time[m], sig.channel[m], sig.detected[m],
                                events.n_sequences, events.repetition_period) for m in (~port, port))


def route_two_sources(a: EmissionRecord, b: EmissionRecord, p_coincidence, seed: int,
                      window: tuple[float, float] | None = None) -> tuple[EmissionRecord, EmissionRecord]:
    """Send the photons of two sources through a 50/50 beam splitter.

    In sequences with exactly one photon from each source the pair leaves by
    different ports with probability ``p_coincidence(t_a, t_b)`` (two-photon
    interference); every other photon picks a port independently. Only
    photons inside ``window`` are routed.
    """
    if a.n_sequences != b.n_sequences or a.repetition_period != b.repetition_period:
        raise ValueError("sources differ in sequence count or period")
    rng = np.random.default_rng(seed)

    def inside(r: EmissionRecord) -> EmissionRecord:
        r = r.detected_only()
        if window is None:
            return r
        m = (r.time >= window[0]) & (r.time < window[1])
        return EmissionRecord(r.sequence_index[m], r.time[m], r.channel[m], r.detected[m],
                              r.n_sequences, r.repetition_period)

    a, b = inside(a), inside(b)
    seq = np.concatenate([a.sequence_index, b.sequence_index])
    t = np.concatenate([a.time, b.time])
    ch = np.concatenate([a.channel, b.channel])
    src = np.concatenate([np.zeros(len(a), dtype=np.int64), np.ones(len(b), dtype=np.int64)])
    order = np.lexsort((t, src, seq))
    seq, t, ch, src = seq[order], t[order], ch[order], src[order]
    port = (rng.random(len(t)) >= 0.5).astype(np.int64)
    u_pair = rng.random(len(t))
    # one photon from each source in the same sequence
    na = np.bincount(a.sequence_index, minlength=a.n_sequences)
    nb = np.bincount(b.sequence_index, minlength=b.n_sequences)
    pair_seq = np.nonzero((na == 1) & (nb == 1))[0]
    if len(pair_seq):
        first = np.searchsorted(seq, pair_seq)  # source-a photon, then source-b photon
        ta, tb = t[first], t[first + 1]
        pc = np.clip(np.asarray(p_coincidence(ta, tb), dtype=float), 0.0, 1.0)
        split = u_pair[first] < pc
        # split pairs take opposite ports; bunched pairs share the first photon's port
        port[first + 1] = np.where(split, 1 - port[first], port[first])
    outs = []
    for p in (0, 1):
        m = port == p
        outs.append(EmissionRecord(seq[m], t[m], ch[m], np.ones(int(m.sum()), dtype=bool),
                                   a.n_sequences, a.repetition_period))
    return outs[0], outs[1]
