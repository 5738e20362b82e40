"""Compiled inner loops. Everything here is deterministic integer/float code;
random draws happen in numpy before the call."""

import heapq

import numpy as np
from numba import njit


@njit(cache=True, nogil=True)
def window_pair_counts(ticks, first, last, seg_end, thresholds, ptr_init, out):
    """Accumulate all-pairs lag counts for starts ``first..last-1``.

    ``thresholds`` is a nondecreasing int64 array M_0..M_K in ticks; bin k
    receives pairs with M_k <= dt < M_{k+1}. ``ptr_init[k]`` must be the first
    index j with ticks[j] >= ticks[first] + M_k (bounded by ``seg_end``).
    Pointers only move forward as the start advances.
    """
    nk = thresholds.shape[0]
    ptr = ptr_init.copy()
    for i in range(first, last):
        t = np.int64(ticks[i])
        for k in range(nk):
            lim = t + thresholds[k]
            p = ptr[k]
            while p < seg_end and np.int64(ticks[p]) < lim:
                p += 1
            ptr[k] = p
        for k in range(nk - 1):
            out[k] += ptr[k + 1] - ptr[k]


@njit(cache=True)
def run_detector(
    prim_int, prim_frac, prim_spawns,
    tau_ticks, pool_counts, pool_exp,
    dead_ticks, cascade, end_int,
):
    """Sequential detector with non-paralyzable dead time and trap afterpulses.

    Times are (int64 tick, float fraction in [0, 1)) pairs so very long
    records keep sub-tick precision. Primary events come pre-sorted.
    Each registered event that is allowed to spawn (primaries always, afterpulses only
    with ``cascade``) consumes one row of ``pool_counts`` (per-trap candidate
    counts) and one unit exponential per candidate from ``pool_exp``.

    Returns (registered ticks, is_afterpulse flags, status) where status 0 is
    success, 1 means the count pool ran out and 2 the exponential pool.
    """
    n_prim = prim_int.shape[0]
    ntraps = tau_ticks.shape[0]
    heap = [(np.int64(0), 0.0)]
    heap.pop()
    out = np.empty(n_prim + 16, dtype=np.int64)
    kind = np.empty(n_prim + 16, dtype=np.uint8)
    n_out = 0
    pc = 0
    qc = 0
    ip = 0
    have_last = False
    last_i = np.int64(0)
    last_f = 0.0
    while True:
        use_prim = False
        if ip < n_prim:
            if len(heap) == 0:
                use_prim = True
            else:
                hi, hf = heap[0]
                if prim_int[ip] < hi or (prim_int[ip] == hi and prim_frac[ip] <= hf):
                    use_prim = True
        elif len(heap) == 0:
            break
        if use_prim:
            ti = prim_int[ip]
            tf = prim_frac[ip]
            spawn = prim_spawns[ip]
            is_ap = False
            ip += 1
        else:
            ti, tf = heapq.heappop(heap)
            spawn = cascade
            is_ap = True
        if ti >= end_int:
            if use_prim:
                ip = n_prim
            continue
        if have_last and (ti - last_i) + (tf - last_f) < dead_ticks:
            continue
        if n_out == out.shape[0]:
            grown = np.empty(2 * out.shape[0], dtype=np.int64)
            grown[:n_out] = out[:n_out]
            out = grown
            grown_k = np.empty(2 * kind.shape[0], dtype=np.uint8)
            grown_k[:n_out] = kind[:n_out]
            kind = grown_k
        out[n_out] = ti
        kind[n_out] = 1 if is_ap else 0
        n_out += 1
        have_last = True
        last_i = ti
        last_f = tf
        if spawn and ntraps > 0:
            if pc >= pool_counts.shape[0]:
                return out[:n_out], kind[:n_out], 1
            for k in range(ntraps):
                c = pool_counts[pc, k]
                for _ in range(c):
                    if qc >= pool_exp.shape[0]:
                        return out[:n_out], kind[:n_out], 2
                    x = tf + pool_exp[qc] * tau_ticks[k]
                    qc += 1
                    whole = np.floor(x)
                    heapq.heappush(heap, (ti + np.int64(whole), x - whole))
            pc += 1
    return out[:n_out], kind[:n_out], 0
