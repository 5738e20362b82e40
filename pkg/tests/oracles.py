"""Independent reference computations used by the tests.

These deliberately avoid the package's code paths: pair counting is a
per-start float comparison, the blackbody rate is a series expansion, the
dead-time simulator is a plain Python loop.
"""

from __future__ import annotations

import math

import numpy as np
from scipy import special


def brute_long_time_pairs(ticks, sessions, tick, edges, window_l, session_end_s=None):
    """Direct enumeration of (start, later tag) pairs.

    A start contributes when (last - t_i) * tick >= l, where ``last`` is the
    session's last tag (or its given end). A pair with lag x = d * tick,
    d > 0, x <= l falls in bin k when edges[k] <= x < edges[k+1]; the final
    edge is inclusive.
    """
    ticks = np.asarray(ticks, dtype=np.int64)
    edges = np.asarray(edges, dtype=np.float64)
    nb = edges.size - 1
    counts = np.zeros(nb, dtype=np.int64)
    n_starts = 0
    for si, (a, b) in enumerate(sessions):
        t = ticks[a:b]
        if t.size == 0:
            continue
        last = int(t[-1])
        if session_end_s is not None:
            last = int(math.floor(session_end_s[si] / tick))
            while last * tick > session_end_s[si]:
                last -= 1
            while (last + 1) * tick <= session_end_s[si]:
                last += 1
        for i in range(t.size):
            if float(last - int(t[i])) * tick < window_l:
                continue
            n_starts += 1
            d = t[i + 1:] - t[i]
            x = d.astype(np.float64) * tick
            keep = (d > 0) & (x <= window_l)
            x = x[keep]
            k = np.searchsorted(edges, x, side="right") - 1
            k[x == edges[-1]] = nb - 1
            ok = (k >= 0) & (k < nb)
            counts += np.bincount(k[ok], minlength=nb)
    return counts, n_starts


def brute_adjacent(ticks, sessions, tick, edges):
    ticks = np.asarray(ticks, dtype=np.int64)
    edges = np.asarray(edges, dtype=np.float64)
    nb = edges.size - 1
    counts = np.zeros(nb, dtype=np.int64)
    n = 0
    for a, b in sessions:
        for i in range(a, b - 1):
            n += 1
            d = int(ticks[i + 1] - ticks[i])
            if d == 0:
                continue  # ties sit below the first edge
            x = float(d) * tick
            for k in range(nb):
                hi_ok = x < edges[k + 1] or (k == nb - 1 and x == edges[-1])
                if edges[k] <= x and hi_ok:
                    counts[k] += 1
                    break
    return counts, n


H = 6.62607015e-34
C = 299792458.0
K_B = 1.380649e-23


def blackbody_series(temperature_k, cutoff_m, area_m2, terms=200):
    """pi * area * 2c (kT/hc)^3 * sum_n Gamma(3, n u_c) / n^3."""
    kt = K_B * temperature_k
    uc = H * C / (cutoff_m * kt)
    pref = area_m2 * math.pi * 2 * C * (kt / (H * C)) ** 3
    total = 0.0
    for n in range(1, terms + 1):
        term = 2.0 * special.gammaincc(3, n * uc) / n ** 3
        total += term
        if term < 1e-18 * total:
            break
    return pref * total


def expected_afterpulse(traps, dead):
    return sum(a * tau * math.exp(-dead / tau) for a, tau in traps)


def dead_time_filter(times, dead):
    """Non-paralyzable dead time applied to sorted event times."""
    out = []
    last = -math.inf
    for t in times:
        if t - last >= dead:
            out.append(t)
            last = t
    return out


def binary_entropy(p):
    if p in (0.0, 1.0):
        return 0.0
    return -p * math.log2(p) - (1 - p) * math.log2(1 - p)
