"""Time-tag records, streams, histogram geometry and tag-file I/O.

Everything downstream (simulators, correlator, fitters) exchanges data through
the types defined here. Timestamps are integer picoseconds, matching
time-to-digital converter semantics; keeping them integral makes coincidence
counting exact and bit-reproducible.

Two on-disk formats are supported:

* ``binary`` ("PTAG1"): 32-byte header
  (magic ``PTAG1\\0\\0\\0``, version u32 LE = 1, resolution_ps u32 LE,
  duration_ps u64 LE, record count u64 LE) followed by 16-byte records
  (timestamp_ps u64 LE, channel u16 LE, 6 reserved zero bytes).
* ``csv``: header line ``channel,timestamp_ps`` and one decimal-integer
  record per line. CSV carries no stream metadata, so on read the duration
  is taken from the last timestamp and the resolution defaults to 1 ps.

Channel labels are in-memory convenience metadata only; neither format has
room for them (the binary layout is fixed at 32 + 16 n bytes).
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np

MAGIC = b"PTAG1\x00\x00\x00"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<8sIIQQ")  # magic, version, resolution_ps, duration_ps, n_records
_RECORD_DTYPE = np.dtype([("timestamp_ps", "<u8"), ("channel", "<u2"), ("reserved", "V6")])


class TagFileFormatError(ValueError):
    """Malformed tag file. ``byte_offset`` points at the offending byte."""

    def __init__(self, message: str, byte_offset: int):
        super().__init__(f"{message} (byte offset {byte_offset})")
        self.byte_offset = byte_offset


class TagOrderingError(ValueError):
    """Timestamps decrease somewhere. ``index`` is the first offending tag."""

    def __init__(self, message: str, index: int):
        super().__init__(f"{message} (first offending index {index})")
        self.index = index


class TimeTag(NamedTuple):
    timestamp_ps: int
    channel: int


def _first_order_violation(timestamps: np.ndarray) -> int | None:
    """Index of the first tag whose timestamp decreases, or None if sorted."""
    if timestamps.size < 2:
        return None
    bad = np.nonzero(np.diff(timestamps) < 0)[0]
    if bad.size:
        return int(bad[0]) + 1
    return None


class TagStream:
    """Immutable, time-ordered sequence of detector tags.

    Parameters
    ----------
    timestamps_ps, channels : array-like
        Parallel arrays (int64 ps, uint16 channel index), non-decreasing in time.
    resolution_ps : int
        Native tick of the (virtual) tagger, default 1.
    duration_ps : int, optional
        Acquisition span; defaults to the last timestamp. Every tag must
        satisfy ``0 <= t <= duration_ps``.
    channel_labels : dict, optional
        channel index -> name. Not persisted by the file formats.
    """

    __slots__ = ("timestamps_ps", "channels", "resolution_ps", "duration_ps", "channel_labels")

    def __init__(
        self,
        timestamps_ps,
        channels,
        resolution_ps: int = 1,
        duration_ps: int | None = None,
        channel_labels: dict[int, str] | None = None,
    ):
        t = np.ascontiguousarray(timestamps_ps, dtype=np.int64)
        ch = np.ascontiguousarray(channels, dtype=np.uint16)
        if t.ndim != 1 or ch.shape != t.shape:
            raise ValueError("timestamps and channels must be 1-d arrays of equal length")
        if t.size and t[0] < 0:
            raise ValueError("timestamps must be >= 0")
        bad = _first_order_violation(t)
        if bad is not None:
            raise TagOrderingError("tags are not sorted by timestamp", bad)
        if resolution_ps < 1:
            raise ValueError("resolution_ps must be >= 1")
        last = int(t[-1]) if t.size else 0
        if duration_ps is None:
            duration_ps = last
        elif duration_ps < last:
            raise ValueError(f"duration_ps={duration_ps} is before the last tag at {last}")
        t.setflags(write=False)
        ch.setflags(write=False)
        object.__setattr__(self, "timestamps_ps", t)
        object.__setattr__(self, "channels", ch)
        object.__setattr__(self, "resolution_ps", int(resolution_ps))
        object.__setattr__(self, "duration_ps", int(duration_ps))
        object.__setattr__(self, "channel_labels", dict(channel_labels or {}))

    def __setattr__(self, name, value):
        raise AttributeError("TagStream is immutable")

    def __len__(self) -> int:
        return self.timestamps_ps.size

    def __getitem__(self, i) -> TimeTag:
        return TimeTag(int(self.timestamps_ps[i]), int(self.channels[i]))

    def __iter__(self) -> Iterator[TimeTag]:
        for t, c in zip(self.timestamps_ps, self.channels):
            yield TimeTag(int(t), int(c))

    def __eq__(self, other) -> bool:
        if not isinstance(other, TagStream):
            return NotImplemented
        return (
            self.resolution_ps == other.resolution_ps
            and self.duration_ps == other.duration_ps
            and self.channel_labels == other.channel_labels
            and np.array_equal(self.timestamps_ps, other.timestamps_ps)
            and np.array_equal(self.channels, other.channels)
        )

    def __repr__(self) -> str:
        return (
            f"TagStream(n_tags={len(self)}, resolution_ps={self.resolution_ps}, "
            f"duration_ps={self.duration_ps})"
        )

    def select_channel(self, channel: int) -> "TagStream":
        """Sub-stream containing only the given channel."""
        mask = self.channels == channel
        return TagStream(
            self.timestamps_ps[mask],
            self.channels[mask],
            self.resolution_ps,
            self.duration_ps,
            self.channel_labels,
        )


@dataclass(frozen=True)
class HistogramSpec:
    """Delay-axis geometry: left-closed right-open bins over [delay_min, delay_max)."""

    bin_width_ps: int
    delay_min_ps: int
    delay_max_ps: int

    def __post_init__(self):
        if self.bin_width_ps <= 0:
            raise ValueError("bin_width_ps must be positive")
        if self.delay_min_ps >= self.delay_max_ps:
            raise ValueError("delay_min_ps must be < delay_max_ps")
        span = self.delay_max_ps - self.delay_min_ps
        if span % self.bin_width_ps != 0:
            raise ValueError("delay range must be an exact multiple of bin_width_ps")
        if self.delay_min_ps % self.bin_width_ps or self.delay_max_ps % self.bin_width_ps:
            raise ValueError("delay_min_ps and delay_max_ps must be multiples of bin_width_ps")

    @property
    def n_bins(self) -> int:
        return (self.delay_max_ps - self.delay_min_ps) // self.bin_width_ps

    def bin_centers(self) -> np.ndarray:
        """Bin centers in ps (float; centers are half-integral for odd widths)."""
        edges = self.delay_min_ps + self.bin_width_ps * np.arange(self.n_bins, dtype=np.float64)
        return edges + self.bin_width_ps / 2.0


def histogram_bin_index(delay_ps: int, spec: HistogramSpec) -> int | None:
    """Bin index for a delay, or None when the delay is out of range.

    Bins are left-closed right-open, so ``delay == delay_max_ps`` is out.
    """
    if delay_ps < spec.delay_min_ps or delay_ps >= spec.delay_max_ps:
        return None
    return (delay_ps - spec.delay_min_ps) // spec.bin_width_ps


@dataclass
class CorrelationHistogram:
    """Binned coincidence counts versus delay, with pair bookkeeping."""

    spec: HistogramSpec
    counts: np.ndarray
    n_a: int
    n_b: int
    total_pairs: int

    def __post_init__(self):
        self.counts = np.ascontiguousarray(self.counts, dtype=np.int64)
        if self.counts.shape != (self.spec.n_bins,):
            raise ValueError(
                f"counts has {self.counts.size} bins, spec defines {self.spec.n_bins}"
            )
        if np.any(self.counts < 0):
            raise ValueError("counts must be non-negative")
        if int(self.counts.sum()) != self.total_pairs:
            raise ValueError("total_pairs must equal sum(counts)")

    def bin_centers(self) -> np.ndarray:
        return self.spec.bin_centers()


# ---------------------------------------------------------------------------
# File I/O


def write_tag_file(stream: TagStream, path, format: str = "binary") -> None:
    """Write a stream so that reading it back reproduces tags and metadata.

    CSV keeps only the records; see the module docstring.
    """
    path = Path(path)
    if format == "binary":
        header = _HEADER.pack(
            MAGIC, FORMAT_VERSION, stream.resolution_ps, stream.duration_ps, len(stream)
        )
        records = np.zeros(len(stream), dtype=_RECORD_DTYPE)
        records["timestamp_ps"] = stream.timestamps_ps
        records["channel"] = stream.channels
        with open(path, "wb") as fh:
            fh.write(header)
            records.tofile(fh)
    elif format == "csv":
        with open(path, "w", newline="") as fh:
            fh.write("channel,timestamp_ps\n")
            for t, c in zip(stream.timestamps_ps, stream.channels):
                fh.write(f"{c},{t}\n")
    else:
        raise ValueError(f"unknown tag file format {format!r}")


def read_tag_file(path, format: str = "binary") -> TagStream:
    """Read and validate a tag file.

    Raises TagFileFormatError (with byte offset) on malformed input and
    TagOrderingError (with tag index) when timestamps decrease; unsorted
    input is rejected rather than silently re-sorted.
    """
    path = Path(path)
    if format == "binary":
        return _read_binary(path)
    if format == "csv":
        return _read_csv(path)
    raise ValueError(f"unknown tag file format {format!r}")


def _read_binary(path: Path) -> TagStream:
    with open(path, "rb") as fh:
        raw = fh.read(_HEADER.size)
        if len(raw) < _HEADER.size:
            raise TagFileFormatError("truncated header", len(raw))
        magic, version, resolution_ps, duration_ps, n_records = _HEADER.unpack(raw)
        if magic != MAGIC:
            raise TagFileFormatError("bad magic", 0)
        if version != FORMAT_VERSION:
            raise TagFileFormatError(f"unsupported format version {version}", 8)
        payload = fh.read()
    expected = n_records * _RECORD_DTYPE.itemsize
    if len(payload) != expected:
        raise TagFileFormatError(
            f"payload is {len(payload)} bytes, header promises {expected}",
            _HEADER.size + min(len(payload), expected),
        )
    records = np.frombuffer(payload, dtype=_RECORD_DTYPE)
    reserved = records["reserved"].view(np.uint8).reshape(-1, 6) if n_records else None
    if reserved is not None and reserved.any():
        bad = int(np.nonzero(reserved.any(axis=1))[0][0])
        raise TagFileFormatError(
            "reserved bytes are not zero", _HEADER.size + bad * _RECORD_DTYPE.itemsize + 10
        )
    timestamps = records["timestamp_ps"]
    if timestamps.size and int(timestamps.max()) > np.iinfo(np.int64).max:
        raise TagFileFormatError("timestamp exceeds signed 64-bit range", _HEADER.size)
    timestamps = timestamps.astype(np.int64)
    bad = _first_order_violation(timestamps)
    if bad is not None:
        raise TagOrderingError("tag file is not time-ordered", bad)
    try:
        return TagStream(
            timestamps,
            records["channel"].astype(np.uint16),
            resolution_ps=resolution_ps,
            duration_ps=duration_ps,
        )
    except ValueError as exc:
        raise TagFileFormatError(str(exc), _HEADER.size) from exc


def _read_csv(path: Path) -> TagStream:
    offset = 0
    channels: list[int] = []
    timestamps: list[int] = []
    with open(path, "rb") as fh:
        header = fh.readline()
        if header.strip() != b"channel,timestamp_ps":
            raise TagFileFormatError("bad CSV header", 0)
        offset = fh.tell()
        for line in fh:
            text = line.strip()
            if text:
                parts = text.split(b",")
                ok = len(parts) == 2
                if ok:
                    try:
                        c, t = int(parts[0]), int(parts[1])
                        ok = 0 <= c < 2**16 and t >= 0
                    except ValueError:
                        ok = False
                if not ok:
                    raise TagFileFormatError(f"bad CSV record {text!r}", offset)
                channels.append(c)
                timestamps.append(t)
            offset += len(line)
    ts = np.asarray(timestamps, dtype=np.int64)
    bad = _first_order_violation(ts)
    if bad is not None:
        raise TagOrderingError("tag file is not time-ordered", bad)
    return TagStream(ts, np.asarray(channels, dtype=np.uint16))


# ---------------------------------------------------------------------------
# Histogram I/O (CSV + JSON sidecar)


def sidecar_path(csv_path) -> Path:
    return Path(csv_path).with_suffix(".json")


def write_histogram_csv(hist: CorrelationHistogram, path) -> None:
    """CSV of ``delay_ps,counts`` per bin center, plus a JSON sidecar with
    the bin geometry and pair totals."""
    path = Path(path)
    centers = hist.bin_centers()
    with open(path, "w", newline="") as fh:
        fh.write("delay_ps,counts\n")
        for c, n in zip(centers, hist.counts):
            label = int(c) if float(c).is_integer() else c
            fh.write(f"{label},{n}\n")
    meta = {
        "bin_width_ps": hist.spec.bin_width_ps,
        "delay_min_ps": hist.spec.delay_min_ps,
        "delay_max_ps": hist.spec.delay_max_ps,
        "n_a": hist.n_a,
        "n_b": hist.n_b,
        "total_pairs": hist.total_pairs,
    }
    with open(sidecar_path(path), "w") as fh:
        json.dump(meta, fh, indent=2)
        fh.write("\n")


def read_histogram_csv(path) -> CorrelationHistogram:
    """Read a histogram CSV written by :func:`write_histogram_csv`.

    The JSON sidecar is used when present; otherwise the bin geometry is
    inferred from the bin centers (requires at least two bins).
    """
    path = Path(path)
    centers: list[float] = []
    counts: list[int] = []
    with open(path) as fh:
        header = fh.readline().strip()
        if header != "delay_ps,counts":
            raise TagFileFormatError("bad histogram CSV header", 0)
        for line in fh:
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 2:
                raise TagFileFormatError(f"bad histogram row {line!r}", 0)
            centers.append(float(parts[0]))
            counts.append(int(parts[1]))
    side = sidecar_path(path)
    if side.exists():
        with open(side) as fh:
            meta = json.load(fh)
        spec = HistogramSpec(meta["bin_width_ps"], meta["delay_min_ps"], meta["delay_max_ps"])
        return CorrelationHistogram(
            spec, np.asarray(counts), meta["n_a"], meta["n_b"], meta["total_pairs"]
        )
    if len(centers) < 2:
        raise ValueError("cannot infer bin geometry from fewer than two bins without a sidecar")
    width = centers[1] - centers[0]
    if width <= 0 or not float(width).is_integer():
        raise ValueError("bin centers do not describe an integral bin width")
    lo = centers[0] - width / 2.0
    spec = HistogramSpec(int(width), int(round(lo)), int(round(lo + width * len(centers))))
    arr = np.asarray(counts)
    total = int(arr.sum())
    return CorrelationHistogram(spec, arr, 0, 0, total)
