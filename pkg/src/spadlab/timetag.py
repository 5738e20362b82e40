"""Time-tag streams: loading, validation, session bookkeeping, serialization.

Two on-disk formats are supported:

``binary-ticks``
    Little-endian unsigned 64-bit tick counts, no header. The tick duration
    is supplied out of band (default 78.125 ps).
``csv-seconds``
    One or more timestamps in seconds per line (comma or whitespace
    separated). Lines starting with ``#`` are comments; ``# key=value``
    comments become stream metadata and a bare ``# session`` line starts a
    new session.

Timestamps are assumed to be pre-unwrapped; tagger rollover correction is
the recorder's job.
"""

from __future__ import annotations

import io
import os
import re
from dataclasses import dataclass, field
from decimal import Decimal, localcontext
from typing import Any, Sequence

import numpy as np

from .errors import InputError

DEFAULT_TICK_SECONDS = 78.125e-12

FORMATS = ("binary-ticks", "csv-seconds")

# float64 quotients t/tick stay exact to well under half a tick below this
_EXACT_TICK_LIMIT = 2**50


@dataclass(frozen=True)
class TagStream:
    """Immutable single-channel detection record.

    ``sessions`` holds half-open ``(start, end)`` index ranges into ``ticks``;
    ticks are nondecreasing inside each session but sessions are independent
    time axes and are never paired across.
    """

    ticks: np.ndarray
    tick_seconds: float = DEFAULT_TICK_SECONDS
    sessions: tuple[tuple[int, int], ...] = ()
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        ticks = np.ascontiguousarray(self.ticks, dtype=np.uint64)
        ticks.setflags(write=False)
        object.__setattr__(self, "ticks", ticks)
        if not self.sessions:
            object.__setattr__(self, "sessions", ((0, len(ticks)),))
        else:
            object.__setattr__(
                self, "sessions", tuple((int(a), int(b)) for a, b in self.sessions)
            )
        object.__setattr__(self, "meta", dict(self.meta))
        if not (self.tick_seconds > 0 and np.isfinite(self.tick_seconds)):
            raise InputError(f"tick_seconds must be positive, got {self.tick_seconds!r}")
        pos = 0
        for a, b in self.sessions:
            if a != pos or b < a:
                raise InputError(
                    f"sessions must be ordered, disjoint and cover all ticks; "
                    f"got range ({a}, {b}) where start {pos} was expected"
                )
            bad = _first_decrease(ticks[a:b])
            if bad is not None:
                raise InputError(f"ticks decrease at index {a + bad} within session ({a}, {b})")
            pos = b
        if pos != len(ticks):
            raise InputError(f"sessions cover {pos} ticks but stream has {len(ticks)}")

    def __len__(self):
        return len(self.ticks)

    @property
    def n_sessions(self) -> int:
        return len(self.sessions)

    def session_ticks(self, i: int) -> np.ndarray:
        a, b = self.sessions[i]
        return self.ticks[a:b]

    def seconds(self) -> np.ndarray:
        """Timestamps in seconds (float64; loses tick precision beyond ~2**52 ticks)."""
        return self.ticks.astype(np.float64) * self.tick_seconds


@dataclass(frozen=True)
class StreamStats:
    total_counts: int
    live_seconds: float
    mean_rate_cps: float
    per_session: tuple[dict, ...]

    def to_dict(self) -> dict:
        return {
            "total_counts": self.total_counts,
            "live_seconds": self.live_seconds,
            "mean_rate_cps": self.mean_rate_cps,
            "per_session": [dict(s) for s in self.per_session],
        }


def _first_decrease(ticks: np.ndarray):
    if len(ticks) < 2:
        return None
    bad = np.flatnonzero(ticks[1:] < ticks[:-1])
    return int(bad[0]) + 1 if bad.size else None


def _read_source(source) -> bytes | str:
    if isinstance(source, (bytes, bytearray, memoryview)):
        return bytes(source)
    if isinstance(source, str):
        return source
    if isinstance(source, os.PathLike):
        with open(source, "rb") as fh:
            return fh.read()
    if hasattr(source, "read"):
        return source.read()
    raise InputError(f"unsupported tag source type {type(source).__name__}")


def _parse_meta_value(text: str):
    for conv in (int, float):
        try:
            return conv(text)
        except ValueError:
            pass
    return text


def _seconds_to_ticks(values: list[str], tick_seconds: float, line_of: list[int]) -> np.ndarray:
    try:
        secs = np.array([float(v) for v in values], dtype=np.float64)
    except ValueError:
        for v, ln in zip(values, line_of):
            try:
                float(v)
            except ValueError:
                raise InputError(f"malformed timestamp {v!r} on line {ln}") from None
        raise
    if secs.size and not np.all(np.isfinite(secs)):
        i = int(np.flatnonzero(~np.isfinite(secs))[0])
        raise InputError(f"non-finite timestamp {values[i]!r} on line {line_of[i]}")
    if secs.size and secs.min() < 0:
        i = int(np.flatnonzero(secs < 0)[0])
        raise InputError(f"negative timestamp {values[i]!r} on line {line_of[i]}")
    q = secs / tick_seconds
    ticks = np.rint(q).astype(np.uint64)
    # redo in exact decimal arithmetic where the float quotient cannot decide
    # the nearest tick: very long records and values within rounding error of
    # a half-tick boundary
    near_half = np.abs(np.abs(q - np.floor(q)) - 0.5) <= 1e-12 + 8 * np.finfo(float).eps * q
    redo = np.flatnonzero((q >= _EXACT_TICK_LIMIT) | near_half)
    if redo.size:
        tick_dec = Decimal(repr(tick_seconds))
        with localcontext() as ctx:
            ctx.prec = 60
            for i in redo:
                ticks[i] = int((Decimal(values[i]) / tick_dec).to_integral_value())
    return ticks


_SPLIT = re.compile(r"[,\s]+")


def _parse_csv(text: str, tick_seconds: float) -> TagStream:
    values: list[str] = []
    line_of: list[int] = []
    meta: dict[str, Any] = {}
    boundaries = [0]
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            body = line[1:].strip()
            if body == "session":
                if len(values) != boundaries[-1]:
                    boundaries.append(len(values))
            elif "=" in body:
                key, _, val = body.partition("=")
                meta[key.strip()] = _parse_meta_value(val.strip())
            continue
        for tok in _SPLIT.split(line):
            if tok:
                values.append(tok)
                line_of.append(ln)
    ticks = _seconds_to_ticks(values, tick_seconds, line_of)
    boundaries.append(len(values))
    sessions = tuple(zip(boundaries[:-1], boundaries[1:]))
    for a, b in sessions:
        bad = _first_decrease(ticks[a:b])
        if bad is not None:
            raise InputError(
                f"non-monotone timestamp at index {a + bad} (line {line_of[a + bad]})"
            )
    return TagStream(ticks, tick_seconds, sessions, meta)


def _parse_binary(data: bytes, tick_seconds: float) -> TagStream:
    if len(data) % 8:
        whole = len(data) - len(data) % 8
        raise InputError(
            f"truncated binary record at byte {whole}: {len(data) % 8} trailing bytes "
            f"(file length {len(data)} is not a multiple of 8)"
        )
    ticks = np.frombuffer(data, dtype="<u8").astype(np.uint64)
    bad = _first_decrease(ticks)
    if bad is not None:
        raise InputError(f"non-monotone timestamp at index {bad} (byte offset {8 * bad})")
    return TagStream(ticks, tick_seconds)


def load_tags(source, format: str = "binary-ticks", tick_seconds: float = DEFAULT_TICK_SECONDS) -> TagStream:
    """Load a tag stream from bytes, text, a path, or an open file.

    Binary tick values are taken verbatim; CSV seconds are rounded to the
    nearest tick.
    """
    if format not in FORMATS:
        raise InputError(f"unknown format {format!r}; expected one of {FORMATS}")
    if not (tick_seconds > 0):
        raise InputError(f"tick_seconds must be positive, got {tick_seconds!r}")
    data = _read_source(source)
    if format == "binary-ticks":
        if isinstance(data, str):
            raise InputError("binary-ticks format needs a byte source, got text")
        return _parse_binary(data, tick_seconds)
    if isinstance(data, bytes):
        try:
            data = data.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise InputError(f"csv input is not UTF-8 text (byte {exc.start})") from None
    return _parse_csv(data, tick_seconds)


def _format_seconds(tick: int, tick_seconds: float) -> str:
    if tick < _EXACT_TICK_LIMIT:
        return repr(float(tick) * tick_seconds)
    return format(Decimal(tick) * Decimal(repr(tick_seconds)), "f")


def dump_tags(stream: TagStream, format: str = "binary-ticks") -> bytes | str:
    """Serialize ``stream``; inverse of :func:`load_tags`.

    Binary output carries no session or metadata information.
    """
    if format == "binary-ticks":
        return stream.ticks.astype("<u8").tobytes()
    if format != "csv-seconds":
        raise InputError(f"unknown format {format!r}; expected one of {FORMATS}")
    out = io.StringIO()
    for key in sorted(stream.meta):
        out.write(f"# {key}={stream.meta[key]}\n")
    for i, (a, b) in enumerate(stream.sessions):
        if i:
            out.write("# session\n")
        for t in stream.ticks[a:b].tolist():
            out.write(_format_seconds(t, stream.tick_seconds))
            out.write("\n")
    return out.getvalue()


def save_tags(stream: TagStream, path, format: str = "binary-ticks") -> None:
    payload = dump_tags(stream, format)
    mode = "wb" if isinstance(payload, bytes) else "w"
    with open(path, mode) as fh:
        fh.write(payload)


def merge_sessions(streams: Sequence[TagStream]) -> TagStream:
    """Concatenate streams, keeping each input as its own session.

    No global sort is performed; tick values are untouched. Metadata keys are
    kept only where all inputs agree.
    """
    streams = list(streams)
    if not streams:
        raise InputError("merge_sessions needs at least one stream")
    if len(streams) == 1:
        return streams[0]
    tick = streams[0].tick_seconds
    for s in streams[1:]:
        if s.tick_seconds != tick:
            raise InputError(
                f"cannot merge streams with tick_seconds {tick!r} and {s.tick_seconds!r}"
            )
    sessions = []
    offset = 0
    for s in streams:
        for a, b in s.sessions:
            if b > a or len(s) == 0:
                sessions.append((a + offset, b + offset))
        offset += len(s)
    # drop empty sessions produced by empty inputs, but keep at least one
    sessions = [se for se in sessions if se[1] > se[0]] or [(0, 0)]
    meta = dict(streams[0].meta)
    for s in streams[1:]:
        meta = {k: v for k, v in meta.items() if s.meta.get(k) == v}
    ticks = np.concatenate([s.ticks for s in streams])
    return TagStream(ticks, tick, tuple(sessions), meta)


def stream_stats(stream: TagStream, session_spans: Sequence[float] | None = None) -> StreamStats:
    """Counts, live time and mean rate.

    Without ``session_spans`` each session lasts from its first to its last
    tag, which underestimates wall-clock time for sparse streams; pass the
    measured durations (seconds, one per session) when they are known.
    """
    if session_spans is not None and len(session_spans) != stream.n_sessions:
        raise InputError(
            f"got {len(session_spans)} session durations for {stream.n_sessions} sessions"
        )
    per = []
    live = 0.0
    for i, (a, b) in enumerate(stream.sessions):
        n = b - a
        if session_spans is not None:
            dur = float(session_spans[i])
            if dur < 0:
                raise InputError(f"negative duration for session {i}")
        elif n >= 2:
            dur = float(int(stream.ticks[b - 1]) - int(stream.ticks[a])) * stream.tick_seconds
        else:
            dur = 0.0
        live += dur
        per.append({"counts": n, "live_seconds": dur, "rate_cps": n / dur if dur > 0 else 0.0})
    total = len(stream)
    if total and live <= 0:
        raise InputError("zero live time with nonzero counts; supply explicit session durations")
    rate = total / live if total else 0.0
    return StreamStats(total, live, rate, tuple(per))
