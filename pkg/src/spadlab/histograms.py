"""Adjacent-interval and long-time (all-pairs) lag histograms.

The long-time histogram counts, for every start event, *all* later events of
the same session within a window ``l``, on a bin grid whose widths grow
geometrically. Normalised by the number of starts and the bin width, each bin
is an estimate of the conditional intensity (cps) at that lag: the tail
levels off at the dark count rate and the afterpulse hump sits on top of it.

Binning is exact in tick space: every bin edge is converted to an integer
tick threshold using the same float comparison a brute-force loop would do
(``dt_ticks * tick_seconds`` against the edge), so counts agree bit-for-bit
with direct enumeration. Bins are half-open ``[a, b)`` except the last, which
is closed; ``dt == 0`` ties never count.
"""

from __future__ import annotations

import csv
import io
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import stats

from ._kernels import window_pair_counts
from .errors import InputError
from .timetag import TagStream

DEFAULT_WINDOW_S = 10.0
DEFAULT_T0_S = 78.125e-12
DEFAULT_RATIO = 1.2
DEFAULT_NBINS = 128

# leading empty bins count as dead time only if this many pairs were expected there
DEAD_REGION_MIN_EXPECTED = 10.0


@dataclass(frozen=True)
class BinGrid:
    edges: np.ndarray
    kind: str = "geometric"
    t0: float | None = None
    ratio: float | None = None

    def __post_init__(self):
        edges = np.asarray(self.edges, dtype=np.float64)
        if edges.ndim != 1 or edges.size < 2:
            raise InputError("a bin grid needs at least two edges")
        if not np.all(np.diff(edges) > 0):
            raise InputError("bin edges must be strictly increasing")
        if edges[0] < 0:
            raise InputError("bin edges must be nonnegative")
        edges.setflags(write=False)
        object.__setattr__(self, "edges", edges)

    @property
    def nbins(self) -> int:
        return self.edges.size - 1

    @property
    def widths(self) -> np.ndarray:
        return np.diff(self.edges)

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.edges[1:] + self.edges[:-1])

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "edges": self.edges.tolist()}
        if self.kind == "geometric":
            d.update(t0=self.t0, ratio=self.ratio)
        return d


def make_exp_grid(t0: float = DEFAULT_T0_S, ratio: float = DEFAULT_RATIO,
                  nbins: int = DEFAULT_NBINS) -> BinGrid:
    """Edges ``[0, t0, t0*ratio, ..., t0*ratio**(nbins-1)]``."""
    if not (t0 > 0):
        raise InputError(f"t0 must be positive, got {t0!r}")
    if not (ratio > 1):
        raise InputError(f"ratio must exceed 1, got {ratio!r}")
    if nbins < 1:
        raise InputError(f"nbins must be at least 1, got {nbins!r}")
    edges = np.empty(nbins + 1)
    edges[0] = 0.0
    edges[1:] = t0 * ratio ** np.arange(nbins, dtype=np.float64)
    return BinGrid(edges, "geometric", float(t0), float(ratio))


def make_uniform_grid(width: float, nbins: int, start: float = 0.0) -> BinGrid:
    if not (width > 0) or nbins < 1:
        raise InputError("uniform grid needs width > 0 and nbins >= 1")
    return BinGrid(start + width * np.arange(nbins + 1, dtype=np.float64), "uniform")


def _ceil_ticks(x: np.ndarray, tick: float) -> np.ndarray:
    """Smallest integer m with m * tick >= x (evaluated in float64)."""
    m = np.ceil(x / tick)
    m = np.where((m - 1) * tick >= x, m - 1, m)
    m = np.where(m * tick < x, m + 1, m)
    return m


def _floor_ticks(x, tick: float):
    """Largest integer m with m * tick <= x."""
    m = np.floor(x / tick)
    m = np.where(m * tick > x, m - 1, m)
    m = np.where((m + 1) * tick <= x, m + 1, m)
    return m


def tick_thresholds(edges: np.ndarray, tick: float, window_l: float | None = None) -> np.ndarray:
    """Integer tick thresholds M_k such that bin k holds M_k <= dt < M_{k+1}.

    Zero lags are excluded (M >= 1), the last edge is inclusive, and lags
    beyond ``window_l`` are excluded.
    """
    edges = np.asarray(edges, dtype=np.float64)
    m = np.empty(edges.size, dtype=np.float64)
    m[:-1] = _ceil_ticks(edges[:-1], tick)
    m[-1] = _floor_ticks(edges[-1], tick) + 1
    if window_l is not None:
        m = np.minimum(m, _floor_ticks(window_l, tick) + 1)
    m = np.maximum(m, 1)
    m = np.maximum.accumulate(m)
    if m[-1] >= 2**62:
        raise InputError("bin grid extends beyond the representable tick range")
    return m.astype(np.int64)


@dataclass(frozen=True)
class RateHistogram:
    """Lag histogram with its conditional-rate normalisation.

    ``pair_counts`` are integers for measured data; synthetic (expected-value)
    histograms may carry floats.
    """

    grid: BinGrid
    pair_counts: np.ndarray
    n_starts: int
    window_l: float | None = None
    tick_seconds: float | None = None
    method: str = "long-time"
    degenerate: bool = False

    def __post_init__(self):
        counts = np.asarray(self.pair_counts)
        if counts.shape != (self.grid.nbins,):
            raise InputError(
                f"pair_counts has shape {counts.shape}, grid has {self.grid.nbins} bins"
            )
        if np.any(counts < 0):
            raise InputError("pair counts must be nonnegative")
        counts = counts.copy()
        counts.setflags(write=False)
        object.__setattr__(self, "pair_counts", counts)

    @classmethod
    def from_rates(cls, grid: BinGrid, rates, n_starts: int = 10**6, **kw) -> "RateHistogram":
        """Noise-free histogram whose rates equal ``rates`` exactly."""
        rates = np.asarray(rates, dtype=np.float64)
        return cls(grid, rates * n_starts * grid.widths, n_starts, **kw)

    @property
    def widths(self) -> np.ndarray:
        return self.grid.widths

    @property
    def centers(self) -> np.ndarray:
        return self.grid.centers

    @property
    def total_pairs(self):
        return self.pair_counts.sum()

    @property
    def rate_cps(self) -> np.ndarray:
        if self.n_starts <= 0:
            return np.zeros(self.grid.nbins)
        return self.pair_counts / (self.n_starts * self.widths)

    @property
    def rate_sigma(self) -> np.ndarray:
        """Poisson error of ``rate_cps`` from the bin's own count."""
        if self.n_starts <= 0:
            return np.zeros(self.grid.nbins)
        return np.sqrt(self.pair_counts) / (self.n_starts * self.widths)

    @property
    def effective_widths(self) -> np.ndarray:
        """Width of each bin counted in representable tick lags.

        Bins narrower than a tick can hold zero or one lag value; an
        afterpulse-free stream fills each bin in proportion to this, not to
        the nominal width.
        """
        if self.tick_seconds is None:
            return self.widths
        m = tick_thresholds(self.grid.edges, self.tick_seconds, self.window_l)
        return np.diff(m) * self.tick_seconds

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "grid": self.grid.to_dict(),
            "pair_counts": self.pair_counts.tolist(),
            "n_starts": int(self.n_starts),
            "rate_cps": self.rate_cps.tolist(),
            "window_l": self.window_l,
            "tick_seconds": self.tick_seconds,
            "degenerate": self.degenerate,
        }

    def to_csv(self) -> str:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["bin_start_s", "bin_end_s", "pair_count", "rate_cps"])
        e = self.grid.edges
        counts = self.pair_counts
        as_int = np.issubdtype(counts.dtype, np.integer)
        for k, r in enumerate(self.rate_cps):
            c = int(counts[k]) if as_int else repr(float(counts[k]))
            w.writerow([repr(float(e[k])), repr(float(e[k + 1])), c, repr(float(r))])
        return out.getvalue()


def _session_int_ticks(stream: TagStream) -> np.ndarray:
    if len(stream) and int(stream.ticks.max()) >= 2**62:
        raise InputError("tick values beyond 2**62 are not supported")
    return stream.ticks.astype(np.int64)


def adjacent_interval_histogram(stream: TagStream, grid: BinGrid) -> RateHistogram:
    """Histogram of lags between consecutive tags of each session."""
    ticks = _session_int_ticks(stream)
    m = tick_thresholds(grid.edges, stream.tick_seconds)
    counts = np.zeros(grid.nbins, dtype=np.int64)
    n_starts = 0
    for a, b in stream.sessions:
        if b - a < 2:
            continue
        dt = np.diff(ticks[a:b])
        n_starts += dt.size
        pos = np.searchsorted(m, dt, side="right") - 1
        ok = (pos >= 0) & (pos < grid.nbins)
        counts += np.bincount(pos[ok], minlength=grid.nbins)
    degenerate = n_starts == 0
    if degenerate:
        warnings.warn("fewer than two tags in every session; adjacent histogram is empty",
                      stacklevel=2)
    return RateHistogram(grid, counts, n_starts, None, stream.tick_seconds,
                         "adjacent", degenerate)


def _count_numpy(ticks, first, last, seg_end, seg_start, m, out, chunk=1 << 15):
    seg = ticks[seg_start:seg_end]
    for c0 in range(first, last, chunk):
        c1 = min(c0 + chunk, last)
        q = ticks[c0:c1, None] + m[None, :]
        pos = np.searchsorted(seg, q, side="left")
        out += np.diff(pos, axis=1).sum(axis=0)


def long_time_histogram(
    stream: TagStream,
    window_l: float = DEFAULT_WINDOW_S,
    grid: BinGrid | None = None,
    *,
    workers: int = 1,
    engine: str = "numba",
    session_end_s: Sequence[float] | None = None,
) -> RateHistogram:
    """All-pairs lag histogram within ``window_l`` seconds.

    Only starts followed by at least ``window_l`` of session span (up to the
    session's last tag) contribute, so every contributing start sees a full
    window and the per-bin normalisation needs no edge correction.

    ``workers > 1`` splits starts across threads; the integer partial
    histograms are summed, so the result is identical to a sequential scan.
    ``engine="numpy"`` selects a vectorised searchsorted path (slower, kept as
    an independent implementation).

    ``session_end_s`` gives each session's end time (seconds, same axis as the
    ticks) when it is known to run past the last tag.
    """
    if grid is None:
        grid = make_exp_grid()
    if not (window_l > 0):
        raise InputError(f"window_l must be positive, got {window_l!r}")
    if grid.edges[-1] > window_l:
        warnings.warn(
            f"grid extends to {grid.edges[-1]:.3g} s beyond the window l={window_l:.3g} s; "
            "bins past the window stay empty",
            stacklevel=2,
        )
    if engine not in ("numba", "numpy"):
        raise InputError(f"unknown engine {engine!r}")
    if session_end_s is not None and len(session_end_s) != stream.n_sessions:
        raise InputError(
            f"got {len(session_end_s)} session end times for {stream.n_sessions} sessions"
        )
    tick = stream.tick_seconds
    ticks = _session_int_ticks(stream)
    m = tick_thresholds(grid.edges, tick, window_l)
    need = int(_ceil_ticks(np.float64(window_l), tick))
    counts = np.zeros(grid.nbins, dtype=np.int64)
    n_starts = 0
    jobs = []
    for si, (a, b) in enumerate(stream.sessions):
        if b - a < 1:
            continue
        last_tick = ticks[b - 1]
        if session_end_s is not None:
            end_tick = int(_floor_ticks(float(session_end_s[si]), tick))
            if end_tick < last_tick:
                raise InputError(f"session {si} ends before its last tag")
            last_tick = end_tick
        # starts with at least a full window of session span ahead of them
        i_max = a + int(np.searchsorted(ticks[a:b], last_tick - need, side="right"))
        if i_max <= a:
            continue
        n_starts += i_max - a
        n_parts = max(1, min(workers, i_max - a))
        bounds = np.linspace(a, i_max, n_parts + 1).astype(np.int64)
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            if hi > lo:
                jobs.append((int(lo), int(hi), a, b))
    if n_starts == 0:
        raise InputError(
            f"no start event has a full window of l={window_l:g} s ahead of it within its "
            "session; shorten the window or supply longer sessions"
        )

    def run(job):
        lo, hi, a, b = job
        part = np.zeros(grid.nbins, dtype=np.int64)
        if engine == "numpy":
            _count_numpy(ticks, lo, hi, b, a, m, part)
        else:
            ptr = a + np.searchsorted(ticks[a:b], ticks[lo] + m, side="left").astype(np.int64)
            window_pair_counts(ticks, lo, hi, b, m, ptr, part)
        return part

    if workers > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, jobs))
    else:
        parts = [run(j) for j in jobs]
    for p in parts:
        counts += p
    return RateHistogram(grid, counts, n_starts, float(window_l), tick, "long-time")


def _tail_mask(hist: RateHistogram, tail_fraction: float) -> np.ndarray:
    e = hist.grid.edges
    cut = (1.0 - tail_fraction) * e[-1]
    mask = e[:-1] >= cut
    if tail_fraction >= 1:
        mask[:] = True
    if not mask.any():
        mask[-1] = True
    return mask


def estimate_dcr_tail(hist: RateHistogram, tail_fraction: float = 0.5) -> float:
    """Dark rate from the flat tail of a long-time histogram.

    Pools the bins whose lower edge lies in the final ``tail_fraction`` of the
    grid's time span: total pairs over (starts x total width). This is the
    count-weighted mean of the bin rates with expected counts as weights.
    """
    if not (0 < tail_fraction <= 1):
        raise InputError(f"tail_fraction must be in (0, 1], got {tail_fraction!r}")
    if hist.n_starts <= 0 or hist.total_pairs <= 0:
        raise InputError("histogram is empty")
    mask = _tail_mask(hist, tail_fraction)
    width = hist.widths[mask].sum()
    pairs = hist.pair_counts[mask].sum()
    if pairs <= 0:
        raise InputError("no pairs in the tail region; widen tail_fraction or the window")
    return float(pairs / (hist.n_starts * width))


def extract_dead_recharge(hist: RateHistogram) -> tuple[float, float]:
    """Dead time and recharge time from the leading edge of the histogram.

    Dead time is the upper edge of the last leading empty bin. Sampling alone
    leaves the first few narrow bins empty, so the empty region only counts
    as dead time when the rate observed just past it would have put at least
    ``DEAD_REGION_MIN_EXPECTED`` pairs into it. Recharge runs from the end of
    the dead time to the centre of the peak bin.
    """
    counts = hist.pair_counts
    nz = np.flatnonzero(counts > 0)
    if nz.size == 0:
        warnings.warn("histogram has no pairs; dead time set to 0", stacklevel=2)
        return 0.0, 0.0
    first = int(nz[0])
    dead = 0.0
    if first == 0:
        warnings.warn("no leading empty region; dead time set to 0", stacklevel=2)
    else:
        t_zero = float(hist.grid.edges[first])
        w = hist.widths
        # rate over a stretch at least as long as the empty region
        cum = np.cumsum(w[first:])
        stop = first + int(np.searchsorted(cum, t_zero, side="left")) + 1
        ref = counts[first:stop].sum() / (hist.n_starts * w[first:stop].sum())
        expected = hist.n_starts * ref * t_zero
        if expected >= DEAD_REGION_MIN_EXPECTED:
            dead = t_zero
        else:
            warnings.warn(
                f"leading empty region up to {t_zero:.3g} s is consistent with sampling "
                f"({expected:.2g} pairs expected); dead time set to 0",
                stacklevel=2,
            )
    rate = hist.rate_cps
    peak = int(np.argmax(rate))
    recharge = max(float(hist.centers[peak]) - dead, 0.0)
    return dead, recharge


def afterpulse_probability(hist: RateHistogram, dcr: float, dead_time: float | None = None) -> float:
    """Area of the histogram above the dark level, after the dead time.

    The area is taken over the contiguous run of bins above ``dcr`` that
    contains the post-dead-time peak. Summing clipped excess over the whole
    grid would integrate counting noise from the wide tail bins, which on
    its own exceeds typical afterpulse probabilities.
    """
    if dcr < 0:
        raise InputError(f"dcr must be nonnegative, got {dcr!r}")
    if dead_time is None:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            dead_time, _ = extract_dead_recharge(hist)
    rate = hist.rate_cps
    # rates that differ from dcr only by float rounding count as "at" dcr
    level = dcr * (1 + 1e-12)
    k0 = int(np.searchsorted(hist.grid.edges[:-1], dead_time, side="left"))
    if k0 >= rate.size:
        return 0.0
    peak = k0 + int(np.argmax(rate[k0:]))
    if rate[peak] <= level:
        return 0.0
    lo = peak
    while lo > k0 and rate[lo - 1] > level:
        lo -= 1
    hi = peak + 1
    while hi < rate.size and rate[hi] > level:
        hi += 1
    area = float(np.sum((rate[lo:hi] - dcr) * hist.widths[lo:hi]))
    return min(max(area, 0.0), 1.0 - 1e-12)


@dataclass(frozen=True)
class AfterpulseSummary:
    dcr_cps: float
    dead_time_s: float
    recharge_time_s: float
    afterpulse_probability: float

    def to_dict(self) -> dict:
        return {
            "dcr_cps": self.dcr_cps,
            "dead_time_s": self.dead_time_s,
            "recharge_time_s": self.recharge_time_s,
            "afterpulse_probability": self.afterpulse_probability,
        }


def summarize_afterpulsing(hist: RateHistogram, tail_fraction: float = 0.5) -> AfterpulseSummary:
    dcr = estimate_dcr_tail(hist, tail_fraction)
    dead, recharge = extract_dead_recharge(hist)
    ap = afterpulse_probability(hist, dcr, dead)
    return AfterpulseSummary(dcr, dead, recharge, ap)


def dcr_from_counter(counts_per_gate: Sequence[int], gate_seconds: float,
                     confidence: float = 0.95) -> tuple[float, tuple[float, float]]:
    """Mean rate from gated counter readings with an exact Poisson interval."""
    counts = np.asarray(counts_per_gate)
    if counts.size == 0:
        raise InputError("no counter readings given")
    if not (gate_seconds > 0):
        raise InputError(f"gate_seconds must be positive, got {gate_seconds!r}")
    if np.any(counts < 0):
        raise InputError("counter readings must be nonnegative")
    total = int(counts.sum())
    live = counts.size * gate_seconds
    alpha = 1.0 - confidence
    lo = 0.0 if total == 0 else stats.chi2.ppf(alpha / 2, 2 * total) / 2
    hi = stats.chi2.ppf(1 - alpha / 2, 2 * total + 2) / 2
    return total / live, (float(lo) / live, float(hi) / live)


def poisson_consistent(observed, expected, nsigma: float = 4.0, overdispersion=None) -> np.ndarray:
    """Per-bin test that ``observed`` counts are within ``nsigma`` of ``expected``.

    Small expectations use exact Poisson tails at the two-sided Gaussian
    ``nsigma`` probability; large ones use a Gaussian with variance
    ``expected * (1 + overdispersion)``.
    """
    observed = np.asarray(observed, dtype=np.float64)
    expected = np.asarray(expected, dtype=np.float64)
    extra = 0.0 if overdispersion is None else np.asarray(overdispersion, dtype=np.float64)
    p_tail = math.erfc(nsigma / math.sqrt(2)) / 2
    ok = np.empty(observed.shape, dtype=bool)
    small = expected < 100
    mu = expected[small]
    obs = observed[small]
    upper = stats.poisson.sf(obs - 1, mu)
    lower = stats.poisson.cdf(obs, mu)
    ok[small] = (upper >= p_tail) & (lower >= p_tail)
    var = expected * (1 + extra)
    big = ~small
    ok[big] = np.abs(observed[big] - expected[big]) <= nsigma * np.sqrt(np.broadcast_to(var, expected.shape)[big])
    return ok
