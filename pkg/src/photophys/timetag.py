"""Time-tag event streams: container, stream algebra and file formats.

Timestamps are integer picoseconds held in ``int64`` arrays; channels are
``uint8``. Streams are immutable once built: the backing arrays are marked
read-only and every operation returns a new stream.

Binary layout (little-endian)::

    header  16 B   magic b"PPTTAG\\r\\n" (8) | version u32 | reserved u32
    records 9 B    timestamp u64 (ps) | channel u8, tightly packed
    footer  40 B   record count u64 | repetition period u64 (ps, 0 = CW)
                   | duration u64 (ps) | laser wavelength f64 (nm, NaN = unset)
                   | excitation power f64 (uW, NaN = unset)
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, MetaMismatch

MAGIC = b"PPTTAG\r\n"
VERSION = 1
_HEADER = struct.Struct("<8sII")
_FOOTER = struct.Struct("<QQQdd")
RECORD_DTYPE = np.dtype([("t", "<u8"), ("channel", "u1")])
assert RECORD_DTYPE.itemsize == 9

HBT_CHANNELS = (0, 1)


@dataclass(frozen=True)
class StreamMeta:
    """Acquisition descriptor shared by every tag of a stream."""

    rep_period_ps: int | None = None
    laser_wavelength_nm: float | None = None
    power_uw: float | None = None

    def __post_init__(self):
        if self.rep_period_ps is not None and self.rep_period_ps <= 0:
            raise ValueError("rep_period_ps must be > 0 for pulsed streams")

    @property
    def pulsed(self) -> bool:
        return self.rep_period_ps is not None


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype, copy=True).reshape(-1)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class TimeTagStream:
    t: np.ndarray
    channel: np.ndarray
    duration_ps: int
    meta: StreamMeta = field(default_factory=StreamMeta)

    def __post_init__(self):
        t = _frozen(self.t, np.int64)
        ch = _frozen(self.channel, np.uint8)
        if t.shape != ch.shape:
            raise ValueError("t and channel must have equal length")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "channel", ch)
        object.__setattr__(self, "duration_ps", int(self.duration_ps))

    @classmethod
    def empty(cls, duration_ps=0, meta=None):
        return cls(np.empty(0, np.int64), np.empty(0, np.uint8), duration_ps, meta or StreamMeta())

    @classmethod
    def from_times(cls, t, channel=0, duration_ps=None, meta=None):
        """Build a stream with every tag on one channel (or per-tag channels)."""
        t = np.asarray(t, dtype=np.int64)
        ch = np.broadcast_to(np.asarray(channel, dtype=np.uint8), t.shape)
        if duration_ps is None:
            duration_ps = int(t.max()) if t.size else 0
        return cls(t, ch, duration_ps, meta or StreamMeta())

    def __len__(self):
        return self.t.size

    def __eq__(self, other):
        if not isinstance(other, TimeTagStream):
            return NotImplemented
        return (
            self.duration_ps == other.duration_ps
            and self.meta == other.meta
            and np.array_equal(self.t, other.t)
            and np.array_equal(self.channel, other.channel)
        )

    __hash__ = None

    def select(self, channel: int) -> TimeTagStream:
        m = self.channel == channel
        return TimeTagStream(self.t[m], self.channel[m], self.duration_ps, self.meta)

    def is_sorted(self) -> bool:
        return bool(np.all(self.t[1:] >= self.t[:-1]))

    def shifted(self, offset_ps: int) -> TimeTagStream:
        """Uniform time translation; duration grows by the offset."""
        return TimeTagStream(self.t + offset_ps, self.channel, self.duration_ps + offset_ps, self.meta)

    def count_rate_hz(self) -> float:
        if self.duration_ps <= 0:
            return 0.0
        return len(self) / (self.duration_ps * 1e-12)


def merge_streams(a: TimeTagStream, b: TimeTagStream) -> TimeTagStream:
    """Merge two streams into one sorted stream.

    Ties are ordered by (t, channel, source), where tags from `a` precede
    tags from `b` and each source keeps its internal order.
    """
    if a.meta != b.meta:
        raise MetaMismatch(f"cannot merge streams with different meta: {a.meta} != {b.meta}")
    t = np.concatenate([a.t, b.t])
    ch = np.concatenate([a.channel, b.channel])
    order = np.arange(t.size)
    idx = np.lexsort((order, ch, t))
    return TimeTagStream(t[idx], ch[idx], max(a.duration_ps, b.duration_ps), a.meta)


def hbt_split(s: TimeTagStream, transmittance: float, seed: int) -> tuple[TimeTagStream, TimeTagStream]:
    """Route each tag through a beamsplitter onto channel 0 or channel 1.

    Each tag independently goes to channel 0 with probability `transmittance`.
    Timestamps are untouched, so both outputs stay sorted if the input was.
    """
    if not 0.0 <= transmittance <= 1.0:
        raise ValueError("transmittance must lie in [0, 1]")
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0x4842,)))
    to0 = rng.random(len(s)) < transmittance
    out0 = TimeTagStream(s.t[to0], np.zeros(int(to0.sum()), np.uint8), s.duration_ps, s.meta)
    n1 = len(s) - len(out0)
    out1 = TimeTagStream(s.t[~to0], np.ones(n1, np.uint8), s.duration_ps, s.meta)
    return out0, out1


@dataclass
class ValidationReport:
    unsorted_indices: list[int] = field(default_factory=list)
    bad_channel_indices: list[int] = field(default_factory=list)
    negative_time_indices: list[int] = field(default_factory=list)
    beyond_duration_indices: list[int] = field(default_factory=list)
    meta_problems: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not (
            self.unsorted_indices
            or self.bad_channel_indices
            or self.negative_time_indices
            or self.beyond_duration_indices
            or self.meta_problems
        )

    def __bool__(self):
        # truthy when there is something to report
        return not self.ok

    def summary(self) -> str:
        if self.ok:
            return "stream valid"
        parts = []
        if self.unsorted_indices:
            parts.append(f"{len(self.unsorted_indices)} out-of-order tags (first at {self.unsorted_indices[0]})")
        if self.bad_channel_indices:
            parts.append(f"{len(self.bad_channel_indices)} tags outside channels {HBT_CHANNELS}")
        if self.negative_time_indices:
            parts.append(f"{len(self.negative_time_indices)} negative timestamps")
        if self.beyond_duration_indices:
            parts.append(f"{len(self.beyond_duration_indices)} tags beyond duration")
        parts.extend(self.meta_problems)
        return "; ".join(parts)


def validate(s: TimeTagStream) -> ValidationReport:
    """Collect every contract violation in `s` without raising."""
    rep = ValidationReport()
    if len(s) > 1:
        rep.unsorted_indices = (np.flatnonzero(s.t[1:] < s.t[:-1]) + 1).tolist()
    rep.bad_channel_indices = np.flatnonzero(~np.isin(s.channel, HBT_CHANNELS)).tolist()
    rep.negative_time_indices = np.flatnonzero(s.t < 0).tolist()
    rep.beyond_duration_indices = np.flatnonzero(s.t > s.duration_ps).tolist()
    if s.duration_ps < 0:
        rep.meta_problems.append("negative duration")
    return rep


# --- binary format -----------------------------------------------------------


def _opt_float(x):
    return math.nan if x is None else float(x)


def _from_float(x):
    return None if math.isnan(x) else x


def encode(s: TimeTagStream) -> bytes:
    if np.any(s.t < 0):
        raise FormatError("negative timestamps cannot be encoded")
    rec = np.empty(len(s), dtype=RECORD_DTYPE)
    rec["t"] = s.t
    rec["channel"] = s.channel
    footer = _FOOTER.pack(
        len(s),
        s.meta.rep_period_ps or 0,
        s.duration_ps,
        _opt_float(s.meta.laser_wavelength_nm),
        _opt_float(s.meta.power_uw),
    )
    return _HEADER.pack(MAGIC, VERSION, 0) + rec.tobytes() + footer


def decode(buf: bytes) -> TimeTagStream:
    if len(buf) < _HEADER.size + _FOOTER.size:
        raise FormatError("file too short for header and footer")
    magic, version, _ = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    n, rep, duration, wl, power = _FOOTER.unpack_from(buf, len(buf) - _FOOTER.size)
    body = len(buf) - _HEADER.size - _FOOTER.size
    if body != n * RECORD_DTYPE.itemsize:
        raise FormatError(f"footer claims {n} records but body holds {body} bytes")
    rec = np.frombuffer(buf, dtype=RECORD_DTYPE, count=n, offset=_HEADER.size)
    if n and rec["t"].max() > np.iinfo(np.int64).max:
        raise FormatError("timestamp overflows int64")
    meta = StreamMeta(rep or None, _from_float(wl), _from_float(power))
    return TimeTagStream(rec["t"].astype(np.int64), rec["channel"], duration, meta)


def write_stream(path, s: TimeTagStream) -> None:
    Path(path).write_bytes(encode(s))


def read_stream(path) -> TimeTagStream:
    return decode(Path(path).read_bytes())


def write_csv(path, s: TimeTagStream) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t_ps", "channel"])
        for t, ch in zip(s.t.tolist(), s.channel.tolist()):
            w.writerow([t, ch])


def read_csv(path, duration_ps=None, meta=None) -> TimeTagStream:
    """Read a ``t_ps,channel`` CSV. Duration defaults to the last timestamp."""
    try:
        data = np.loadtxt(path, delimiter=",", skiprows=1, dtype=np.int64, ndmin=2)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    with open(path) as fh:
        header = fh.readline().strip().replace(" ", "").split(",")
    if header != ["t_ps", "channel"]:
        raise FormatError(f"{path}: expected header 't_ps,channel', got {header}")
    if data.size == 0:
        return TimeTagStream.empty(duration_ps or 0, meta)
    t, ch = data[:, 0], data[:, 1]
    if duration_ps is None:
        duration_ps = int(t.max())
    return TimeTagStream(t, ch, duration_ps, meta or StreamMeta())
