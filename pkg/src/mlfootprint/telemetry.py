"""Power telemetry: parsing, energy integration, extrapolation, fluctuation detection.

Canonical units are watts, milliseconds and kWh. Conversions to anything else
happen at the parse and render boundaries only.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field
from typing import IO, Iterable

import numpy as np

log = logging.getLogger(__name__)

H100_MAX_W = 700.0
POWER_SLACK = 1.1
MAX_GAP_MS = 10_000
MIN_PARSE_FRACTION = 0.99
MS_PER_HOUR = 3_600_000.0
WH_PER_KWH = 1000.0

FIELDS = ("timestamp_ms", "device_id", "power_w")


class TraceError(ValueError):
    """Base class for telemetry ingestion errors."""


class TraceFormatError(TraceError):
    pass


class EmptyTraceError(TraceError):
    pass


class TraceRejectedError(TraceError):
    def __init__(self, bad_lines: list[int], total: int):
        self.bad_lines = bad_lines
        self.total = total
        shown = ", ".join(str(n) for n in bad_lines[:20])
        more = "" if len(bad_lines) <= 20 else f" (+{len(bad_lines) - 20} more)"
        super().__init__(
            f"{len(bad_lines)} of {total} lines malformed (limit 1%): lines {shown}{more}"
        )


@dataclass(frozen=True)
class PowerSample:
    timestamp: int
    device_id: str
    power: float


@dataclass
class DeviceSeries:
    t_ms: np.ndarray  # int64, strictly increasing
    watts: np.ndarray  # float64

    def __len__(self) -> int:
        return len(self.t_ms)


@dataclass
class PowerTrace:
    devices: dict[str, DeviceSeries]
    measured_node_count: int = 1
    gpus_per_node: int = 8
    malformed_lines: list[int] = field(default_factory=list)
    flagged: list[PowerSample] = field(default_factory=list)

    def __post_init__(self):
        if self.measured_node_count < 1 or self.gpus_per_node < 1:
            raise ValueError("measured_node_count and gpus_per_node must be positive")

    @property
    def sample_count(self) -> int:
        return sum(len(s) for s in self.devices.values())

    @property
    def start_ms(self) -> int:
        return min(int(s.t_ms[0]) for s in self.devices.values())

    @property
    def end_ms(self) -> int:
        return max(int(s.t_ms[-1]) for s in self.devices.values())

    @property
    def duration_s(self) -> float:
        return (self.end_ms - self.start_ms) / 1000.0

    def samples(self) -> Iterable[PowerSample]:
        for dev in sorted(self.devices):
            s = self.devices[dev]
            for t, p in zip(s.t_ms.tolist(), s.watts.tolist()):
                yield PowerSample(t, dev, p)

    @classmethod
    def from_samples(
        cls,
        samples: Iterable[PowerSample],
        measured_node_count: int = 1,
        gpus_per_node: int = 8,
    ) -> "PowerTrace":
        grouped: dict[str, tuple[list[int], list[float]]] = {}
        for s in samples:
            ts, ps = grouped.setdefault(s.device_id, ([], []))
            ts.append(int(s.timestamp))
            ps.append(float(s.power))
        devices = {}
        for dev, (ts, ps) in grouped.items():
            t = np.asarray(ts, dtype=np.int64)
            order = np.argsort(t, kind="stable")
            devices[dev] = DeviceSeries(t[order], np.asarray(ps, dtype=np.float64)[order])
        return cls(devices, measured_node_count, gpus_per_node)


@dataclass
class FluctuationReport:
    event_count: int
    events: list[tuple[int, int, float, float]]
    duty_cycle_active: float
    max_ramp: float
    hi_threshold: float
    lo_threshold: float


# -- parsing ------------------------------------------------------------------


def _parse_record(rec) -> tuple[int, str, float]:
    t = rec["timestamp_ms"]
    dev = rec["device_id"]
    p = rec["power_w"]
    if isinstance(t, str):
        t = t.strip()
    t_f = float(t)
    if not math.isfinite(t_f) or t_f != int(t_f):
        raise ValueError("timestamp must be an integer")
    p = float(p)
    if not math.isfinite(p) or p < 0:
        raise ValueError("power must be finite and non-negative")
    dev = str(dev).strip()
    if not dev:
        raise ValueError("empty device_id")
    return int(t_f), dev, p


def _iter_csv(text: str):
    lines = text.splitlines()
    if not lines or not any(l.strip() for l in lines):
        raise EmptyTraceError("empty trace")
    header = [h.strip() for h in next(csv.reader([lines[0]]))]
    if tuple(header) != FIELDS:
        raise TraceFormatError(f"bad CSV header {lines[0]!r}; expected {','.join(FIELDS)}")
    for lineno, row in enumerate(csv.reader(lines[1:]), start=2):
        if not row or (len(row) == 1 and not row[0].strip()):
            continue
        if len(row) != 3:
            yield lineno, None
            continue
        yield lineno, dict(zip(FIELDS, row))


def _iter_jsonl(text: str):
    lines = text.splitlines()
    if not any(l.strip() for l in lines):
        raise EmptyTraceError("empty trace")
    first = True
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError:
            obj = None
        if first:
            first = False
            if not isinstance(obj, dict) or set(obj) != set(FIELDS):
                raise TraceFormatError(
                    f"line {lineno}: JSONL records need exactly the keys {', '.join(FIELDS)}"
                )
        if not isinstance(obj, dict) or set(obj) != set(FIELDS):
            yield lineno, None
            continue
        yield lineno, obj


def parse_trace(
    stream: IO[bytes] | IO[str] | bytes | str,
    format: str = "csv",
    measured_node_count: int = 1,
    gpus_per_node: int = 8,
    device_max: float = H100_MAX_W,
) -> PowerTrace:
    """Read a CSV or JSONL power log into a :class:`PowerTrace`.

    Lines that fail to parse are recorded in ``malformed_lines``; the trace is
    rejected when more than 1% of data lines are malformed. A repeated
    timestamp on one device counts as malformed. Samples above
    ``device_max * 1.1`` are kept but listed in ``flagged``.
    """
    if hasattr(stream, "read"):
        stream = stream.read()
    if isinstance(stream, bytes):
        try:
            stream = stream.decode("utf-8-sig")
        except UnicodeDecodeError as exc:
            raise TraceFormatError(f"trace is not UTF-8: {exc}") from None
    if format == "csv":
        records = _iter_csv(stream)
    elif format == "jsonl":
        records = _iter_jsonl(stream)
    else:
        raise TraceFormatError(f"unknown trace format {format!r}")

    bad: list[int] = []
    samples: list[PowerSample] = []
    lines_of: list[int] = []
    total = 0
    for lineno, rec in records:
        total += 1
        if rec is None:
            bad.append(lineno)
            continue
        try:
            t, dev, p = _parse_record(rec)
        except (ValueError, TypeError, KeyError):
            bad.append(lineno)
            continue
        samples.append(PowerSample(t, dev, p))
        lines_of.append(lineno)
    if total == 0:
        raise EmptyTraceError("trace has a header but no samples")

    # duplicate timestamps within a device break strict ordering
    seen: set[tuple[str, int]] = set()
    kept = []
    for s, lineno in zip(samples, lines_of):
        key = (s.device_id, s.timestamp)
        if key in seen:
            bad.append(lineno)
        else:
            seen.add(key)
            kept.append(s)
    bad.sort()
    if len(bad) > (1.0 - MIN_PARSE_FRACTION) * total:
        raise TraceRejectedError(bad, total)
    if not kept:
        raise EmptyTraceError("no valid samples")
    if bad:
        log.warning("%d of %d lines malformed and skipped", len(bad), total)

    trace = PowerTrace.from_samples(kept, measured_node_count, gpus_per_node)
    trace.malformed_lines = bad
    limit = device_max * POWER_SLACK
    trace.flagged = [s for s in kept if s.power > limit]
    if trace.flagged:
        log.warning("%d samples exceed %.0f W", len(trace.flagged), limit)
    return trace


def read_trace(path, measured_node_count: int = 1, gpus_per_node: int = 8, format: str | None = None) -> PowerTrace:
    path = str(path)
    if format is None:
        if path.endswith(".json"):
            with open(path, "r", encoding="utf-8") as fh:
                return loads_trace(fh.read())
        format = "jsonl" if path.endswith(".jsonl") else "csv"
    with open(path, "rb") as fh:
        return parse_trace(fh, format, measured_node_count, gpus_per_node)


# -- canonical serialization -------------------------------------------------


def dumps_trace(trace: PowerTrace) -> str:
    """Serialize to the canonical single-document JSON form.

    Python's float repr is shortest-round-trip, so loads(dumps(x)) is bit-exact.
    """
    doc = {
        "measured_node_count": trace.measured_node_count,
        "gpus_per_node": trace.gpus_per_node,
        "samples": [[s.timestamp, s.device_id, s.power] for s in trace.samples()],
    }
    return json.dumps(doc, separators=(",", ":"))


def loads_trace(text: str) -> PowerTrace:
    doc = json.loads(text)
    try:
        samples = [PowerSample(int(t), str(d), float(p)) for t, d, p in doc["samples"]]
        nodes = int(doc["measured_node_count"])
        gpn = int(doc["gpus_per_node"])
    except (KeyError, TypeError, ValueError) as exc:
        raise TraceFormatError(f"not a canonical trace document: {exc}") from None
    if not samples:
        raise EmptyTraceError("empty trace")
    return PowerTrace.from_samples(samples, nodes, gpn)


def write_csv(trace: PowerTrace, fh: IO[str]) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(FIELDS)
    for s in trace.samples():
        w.writerow((s.timestamp, s.device_id, repr(s.power)))


def to_csv(trace: PowerTrace) -> str:
    buf = io.StringIO()
    write_csv(trace, buf)
    return buf.getvalue()


# -- energy -------------------------------------------------------------------


def _device_energy_wms(s: DeviceSeries, max_gap_ms: int) -> float:
    dt = np.diff(s.t_ms)
    if np.any(dt <= 0):
        raise RuntimeError("device samples not strictly increasing; trace invariant violated")
    gaps = dt > max_gap_ms
    if gaps.any():
        log.warning("%d gaps longer than %d ms contribute no energy", int(gaps.sum()), max_gap_ms)
    seg = 0.5 * (s.watts[1:] + s.watts[:-1]) * dt
    seg[gaps] = 0.0
    return math.fsum(seg.tolist())


def integrate_energy(
    trace: PowerTrace, node_overhead: float = 1.0, max_gap_ms: int = MAX_GAP_MS
) -> float:
    """Trapezoidal energy of all devices in the trace, in kWh.

    This is the energy of the measured nodes; feed it to
    :func:`extrapolate_energy` to scale to the full allocation.
    """
    if node_overhead < 1.0:
        raise ValueError("node_overhead must be >= 1")
    total = []
    for dev in sorted(trace.devices):
        s = trace.devices[dev]
        if len(s) < 2:
            log.warning("device %s has a single sample; contributes 0 kWh", dev)
            continue
        total.append(_device_energy_wms(s, max_gap_ms))
    wh = math.fsum(total) / MS_PER_HOUR
    return node_overhead * wh / WH_PER_KWH


def extrapolate_energy(node_energy: float, measured_nodes: int, total_nodes: int) -> float:
    if measured_nodes < 1:
        raise ValueError("measured_nodes must be >= 1")
    if total_nodes < measured_nodes:
        raise ValueError(f"total_nodes ({total_nodes}) < measured_nodes ({measured_nodes})")
    return node_energy * total_nodes / measured_nodes


# -- fluctuations -------------------------------------------------------------


def mean_power_series(trace: PowerTrace) -> tuple[np.ndarray, np.ndarray]:
    """Mean per-device power on the union of all device timestamps.

    Devices are linearly interpolated onto the union grid; outside a device's
    own time range it is left out of the mean.
    """
    devs = [trace.devices[d] for d in sorted(trace.devices)]
    if len(devs) == 1:
        return devs[0].t_ms.copy(), devs[0].watts.copy()
    grid = np.unique(np.concatenate([d.t_ms for d in devs]))
    acc = np.zeros(len(grid))
    cnt = np.zeros(len(grid))
    for d in devs:
        inside = (grid >= d.t_ms[0]) & (grid <= d.t_ms[-1])
        acc[inside] += np.interp(grid[inside], d.t_ms, d.watts)
        cnt[inside] += 1
    return grid, acc / cnt


def _runs(states: np.ndarray) -> list[tuple[int, int, int]]:
    """(state, first index, last index) of maximal constant runs."""
    edges = np.flatnonzero(np.diff(states)) + 1
    starts = np.concatenate([[0], edges])
    ends = np.concatenate([edges - 1, [len(states) - 1]])
    return [(int(states[a]), int(a), int(b)) for a, b in zip(starts, ends)]


HIGH, MID, LOW = 1, 0, -1


def detect_fluctuations(
    trace: PowerTrace,
    device_max: float = H100_MAX_W,
    hi_frac: float = 0.85,
    lo_frac: float = 0.25,
    min_dwell: int = 2000,
) -> FluctuationReport:
    """Find checkpoint-style dips in mean device power.

    Each sample holds its value until the next one. A dip is a maximal run of
    samples below ``lo_frac * device_max`` lasting at least ``min_dwell`` ms
    whose nearest non-transitional neighbours on both sides are at or above
    ``hi_frac * device_max``.
    """
    if not (0.0 <= lo_frac < hi_frac <= 1.0):
        raise ValueError("need 0 <= lo_frac < hi_frac <= 1")
    if min_dwell <= 0:
        raise ValueError("min_dwell must be positive")
    hi = hi_frac * device_max
    lo = lo_frac * device_max
    t, p = mean_power_series(trace)
    if len(t) < 2:
        return FluctuationReport(0, [], 1.0 if p[0] >= hi else 0.0, 0.0, hi, lo)

    # sample-and-hold weights; the last sample closes the window
    dt = np.diff(t).astype(np.float64)
    hold = np.append(dt, 0.0)
    states = np.where(p >= hi, HIGH, np.where(p < lo, LOW, MID))
    total = float(t[-1] - t[0])
    duty = float(hold[states == HIGH].sum() / total)
    ramp = float(np.max(np.abs(np.diff(p)) / (dt / 1000.0)))

    runs = _runs(states)
    solid = [r for r in runs if r[0] != MID]
    events = []
    for k, (state, a, b) in enumerate(solid):
        if state != LOW or k == 0 or k == len(solid) - 1:
            continue
        before, after = solid[k - 1], solid[k + 1]
        if before[0] != HIGH or after[0] != HIGH:
            continue
        end = int(t[b + 1]) if b + 1 < len(t) else int(t[b])
        if end - int(t[a]) < min_dwell:
            continue
        pre = float(p[before[1]: before[2] + 1].mean())
        dip = float(p[a: b + 1].mean())
        events.append((int(t[a]), end, pre, dip))
    return FluctuationReport(len(events), events, min(max(duty, 0.0), 1.0), ramp, hi, lo)


# -- synthetic generators (used by tests and the demo CLI path) ---------------


def square_wave_trace(
    high_w: float = 610.0,
    low_w: float = 110.0,
    high_s: int = 60,
    low_s: int = 10,
    cycles: int = 10,
    step_ms: int = 1000,
    device_id: str = "gpu0",
) -> tuple[PowerTrace, int]:
    """Alternating high/low power ending on a high segment.

    Returns the trace and the number of bracketed dips it contains.
    """
    t, p = [], []
    now = 0
    for _ in range(cycles):
        for _ in range(high_s * 1000 // step_ms):
            t.append(now); p.append(high_w); now += step_ms
        for _ in range(low_s * 1000 // step_ms):
            t.append(now); p.append(low_w); now += step_ms
    for _ in range(high_s * 1000 // step_ms + 1):
        t.append(now); p.append(high_w); now += step_ms
    series = DeviceSeries(np.asarray(t, dtype=np.int64), np.asarray(p))
    return PowerTrace({device_id: series}), cycles
