"""File formats: a raw binary signal record and CSV views.

Binary record layout (all little-endian)::

    magic      8 bytes   b"KLJNSIG\\0"
    version    uint32    1
    channels   uint32    number of channels C
    count      uint64    samples per channel N
    dt         float64   sample spacing in seconds
    names      C x 16 bytes, ASCII, NUL padded
    data       C x N float64, channel after channel
"""

from __future__ import annotations

import csv
import struct
from pathlib import Path

import numpy as np

from .channel import Trace
from .noise import Signal

MAGIC = b"KLJNSIG\0"
VERSION = 1
_HEADER = struct.Struct("<8sIIQd")
_NAME_BYTES = 16

TRACE_COLUMNS = ("t", "U_A", "U_B", "U_1", "U_2", "I")
VERDICT_COLUMNS = ("trial", "attack", "truth", "guess", "statistic", "correct")


def fmt(x):
    """Shortest round-tripping text for a float (deterministic across runs)."""
    return repr(float(x))


def write_record(path, channels, dt):
    """Write named equal-length channels to a binary record."""
    names = list(channels)
    if not names:
        raise ValueError("at least one channel is required")
    data = [np.ascontiguousarray(channels[k], dtype="<f8") for k in names]
    n = data[0].size
    if any(d.ndim != 1 or d.size != n for d in data):
        raise ValueError("channels must be 1-D and of equal length")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, len(names), n, float(dt)))
        for k in names:
            raw = k.encode("ascii")
            if len(raw) > _NAME_BYTES:
                raise ValueError(f"channel name {k!r} longer than {_NAME_BYTES} bytes")
            fh.write(raw.ljust(_NAME_BYTES, b"\0"))
        for d in data:
            fh.write(d.tobytes())


def read_record(path):
    """Return ``(channels, dt)`` from a binary record."""
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise ValueError("file too short for a signal record")
    magic, version, c, n, dt = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise ValueError("not a signal record (bad magic)")
    if version != VERSION:
        raise ValueError(f"unsupported record version {version}")
    off = _HEADER.size
    names = []
    for _ in range(c):
        names.append(blob[off:off + _NAME_BYTES].rstrip(b"\0").decode("ascii"))
        off += _NAME_BYTES
    if len(blob) != off + 8 * c * n:
        raise ValueError("record size does not match its header")
    data = np.frombuffer(blob, dtype="<f8", offset=off).reshape(c, n)
    return {k: data[i].astype(np.float64) for i, k in enumerate(names)}, dt


def save_signal(path, s, name="value"):
    write_record(path, {name: s.samples}, s.dt)


def load_signal(path):
    channels, dt = read_record(path)
    if len(channels) != 1:
        raise ValueError(f"expected a single-channel record, found {len(channels)}")
    return Signal(next(iter(channels.values())), dt)


def save_trace(path, t):
    """Binary record of a trace's channels; resistances and tap are not stored."""
    write_record(path, t.channels(), t.dt)


def load_trace(path, R_A, R_B, tap="end2", bandwidth_hz=None):
    ch, dt = read_record(path)
    return Trace(dt, ch["U_A"], ch["U_B"], ch["U_1"], ch["U_2"], ch["I"], R_A, R_B, tap,
                 bandwidth_hz, ch.get("I_2"))


def signal_to_csv(path, s):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("t", "value"))
        for ti, v in zip(s.t, s.samples):
            w.writerow((fmt(ti), fmt(v)))


def signal_from_csv(path):
    arr = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if arr.shape[0] < 2:
        raise ValueError("need at least two rows to recover dt")
    return Signal(arr[:, 1], float(arr[1, 0] - arr[0, 0]))


def trace_to_csv(path, t):
    tt = np.arange(t.n) * t.dt
    cols = (tt, t.U_A, t.U_B, t.U_1, t.U_2, t.I)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_COLUMNS)
        for row in zip(*cols):
            w.writerow([fmt(v) for v in row])


def spectrum_to_csv(path, spec):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("freq", "power"))
        for f, p in zip(spec.freq, spec.power):
            w.writerow((fmt(f), fmt(p)))


def _hyp_text(flag):
    if flag is None:
        return "abstain"
    return "bob_high" if flag else "bob_low"


def verdict_row(trial, attack, truth, verdict):
    """One CSV row ``trial, attack, truth, guess, statistic, correct``."""
    if verdict.guess is None:
        correct = 0.5
    else:
        correct = 1.0 if verdict.guess == bool(truth) else 0.0
    return [trial, attack, _hyp_text(bool(truth)), _hyp_text(verdict.guess),
            fmt(verdict.statistic), fmt(correct)]


def verdicts_to_csv(path, rows):
    """Write ``(trial, attack, truth, verdict)`` tuples."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(VERDICT_COLUMNS)
        for trial, attack, truth, verdict in rows:
            w.writerow(verdict_row(trial, attack, truth, verdict))
