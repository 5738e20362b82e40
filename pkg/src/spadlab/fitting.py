"""Trap-decay fitting and the small estimators used by the characterization
procedures (FWHM of a delay histogram, linear extrapolation to zero).

The trap model is

    P(t) = D + sum_i A_i * exp(-t / tau_i),      i = 1..4

fitted to the conditional-rate form of a long-time histogram at bin
centres (linear time) with Poisson weights sigma_k = sqrt(n_k) / (N_starts w_k).
"""

from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import nnls

from .errors import InputError, NumericError
from .histograms import RateHistogram, estimate_dcr_tail, extract_dead_recharge

MAX_COMPONENTS = 4
ORDER_IMPROVEMENT = 0.05
DEGENERATE_TAU_RATIO = 1.5
N_TAU_CANDIDATES = 10


# ---------------------------------------------------------------- fit start

def _strict_run_start(rates: np.ndarray, peak: int, run: int = 4):
    for i in range(peak, rates.size - run):
        seg = rates[i:i + run + 1]
        if np.all(seg[:-1] > seg[1:]):
            return i
    return None


def find_fit_start(rates) -> tuple[int, bool]:
    """First bin at or after the global peak followed by four strictly
    decreasing bins. Returns ``(index, strict)``; when no such bin exists the
    peak itself is returned with ``strict=False``."""
    rates = np.asarray(rates, dtype=np.float64)
    if rates.size == 0:
        raise InputError("empty histogram")
    peak = int(np.argmax(rates))
    i = _strict_run_start(rates, peak)
    if i is None:
        return peak, False
    return i, True


def select_fit_start(hist) -> int:
    """Fit-start bin for a histogram (or a bare sequence of rates)."""
    rates = hist.rate_cps if isinstance(hist, RateHistogram) else hist
    i, strict = find_fit_start(rates)
    if not strict:
        warnings.warn(
            "no bin at or after the peak is followed by four decreasing bins; "
            "starting the fit at the peak", stacklevel=2,
        )
    return i


# ---------------------------------------------------------------- model

def trap_model(t, D: float, components: Sequence[tuple[float, float]]) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    out = np.full(t.shape, float(D))
    for a, tau in components:
        out += a * np.exp(-t / tau)
    return out


@dataclass(frozen=True)
class TrapFit:
    D: float
    components: tuple[tuple[float, float], ...]
    fit_start_bin: int
    residual_norm: float
    converged: bool
    n_points: int = 0
    dead_time_s: float = 0.0
    flags: tuple[str, ...] = ()
    order_rms: dict = field(default_factory=dict, compare=False)

    @property
    def n_components(self) -> int:
        return len(self.components)

    @property
    def amplitudes(self) -> np.ndarray:
        return np.array([a for a, _ in self.components])

    @property
    def taus(self) -> np.ndarray:
        return np.array([t for _, t in self.components])

    @property
    def area(self) -> float:
        """Analytic area of the fitted curve above D: sum A_i tau_i."""
        return float(sum(a * t for a, t in self.components))

    def untrusted(self) -> list[int]:
        """Components whose lifetime is below the measured dead time."""
        return [i for i, (_, t) in enumerate(self.components) if t < self.dead_time_s]

    def __call__(self, t):
        return trap_model(t, self.D, self.components)

    def to_dict(self) -> dict:
        return {
            "D": self.D,
            "components": [[a, t] for a, t in self.components],
            "residual_norm": self.residual_norm,
            "converged": self.converged,
            "fit_start_bin": self.fit_start_bin,
            "n_points": self.n_points,
            "dead_time_s": self.dead_time_s,
            "untrusted_components": self.untrusted(),
            "flags": list(self.flags),
            "order_rms": {str(k): v for k, v in sorted(self.order_rms.items())},
        }


# ---------------------------------------------------------------- LM core

@dataclass
class _LMResult:
    p: np.ndarray
    cost: float
    converged: bool
    n_iter: int


def levenberg_marquardt(fun, p0, *, max_iter: int = 400, gtol: float = 1e-9,
                        xtol: float = 1e-10, ftol: float = 1e-14, bounds=None) -> _LMResult:
    """Damped Gauss-Newton minimisation of 0.5*|r(p)|^2.

    ``fun(p)`` returns ``(r, J)``. Marquardt scaling by diag(J^T J); the
    damping shrinks after accepted steps and grows after rejected ones.
    Converged means the scaled gradient or the relative step fell below
    tolerance (a cost plateau alone is not enough).
    """
    p = np.array(p0, dtype=np.float64)
    lo = hi = None
    if bounds is not None:
        lo, hi = (np.asarray(b, dtype=np.float64) for b in bounds)
        p = np.clip(p, lo, hi)
    r, J = fun(p)
    cost = 0.5 * float(r @ r)
    if not math.isfinite(cost):
        raise NumericError("initial point gives non-finite residuals")
    lam = 1e-3
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        g = J.T @ r
        A = J.T @ J
        scale = np.maximum(np.diag(A), 1e-300)
        if np.max(np.abs(g) / np.sqrt(scale)) <= gtol * max(1.0, math.sqrt(2 * cost)):
            converged = True
            break
        accepted = False
        while lam < 1e16:
            try:
                step = np.linalg.solve(A + lam * np.diag(scale), -g)
            except np.linalg.LinAlgError:
                lam *= 10
                continue
            p_new = p + step
            if lo is not None:
                p_new = np.clip(p_new, lo, hi)
            r_new, J_new = fun(p_new)
            cost_new = 0.5 * float(r_new @ r_new)
            if math.isfinite(cost_new) and cost_new < cost:
                accepted = True
                break
            lam *= 4
        if not accepted:
            # no downhill direction at any damping: a (possibly flat) minimum
            converged = True
            break
        dp = p_new - p
        drop = cost - cost_new
        p, r, J, cost = p_new, r_new, J_new, cost_new
        lam = max(lam / 3, 1e-15)
        if np.max(np.abs(dp)) <= xtol * (np.max(np.abs(p)) + xtol):
            converged = True
            break
        if drop <= ftol * cost and np.max(np.abs(dp)) <= 1e-6 * (np.max(np.abs(p)) + 1e-6):
            converged = True
            break
    return _LMResult(p, cost, converged, it)


class _Problem:
    """Weighted residuals for the trap model in log parameters
    p = [log D, log A_1, log tau_1, ...]."""

    def __init__(self, t, y, sigma):
        self.t = t
        self.y = y
        self.w = 1.0 / sigma

    def __call__(self, p):
        k = (p.size - 1) // 2
        D = math.exp(p[0])
        model = np.full(self.t.shape, D)
        J = np.empty((self.t.size, p.size))
        J[:, 0] = D
        for i in range(k):
            a = math.exp(p[1 + 2 * i])
            tau = math.exp(p[2 + 2 * i])
            e = a * np.exp(-self.t / tau)
            model += e
            J[:, 1 + 2 * i] = e
            J[:, 2 + 2 * i] = e * self.t / tau
        r = (self.y - model) * self.w
        return r, -J * self.w[:, None]

    def rms(self, D, comps) -> float:
        r = (self.y - trap_model(self.t, D, comps)) * self.w
        return float(math.sqrt(np.mean(r * r)))


def _pack(D, comps):
    p = [math.log(max(D, 1e-300))]
    for a, t in comps:
        p += [math.log(max(a, 1e-300)), math.log(t)]
    return np.array(p)


def _unpack(p):
    D = math.exp(p[0])
    comps = [(math.exp(p[1 + 2 * i]), math.exp(p[2 + 2 * i])) for i in range((p.size - 1) // 2)]
    return D, sorted(comps, key=lambda c: c[1])


# ---------------------------------------------------------------- initial guesses

def _nnls_amplitudes(t, y, w, taus):
    X = np.column_stack([np.ones_like(t)] + [np.exp(-t / tau) for tau in taus])
    coef, rnorm = nnls(X * w[:, None], y * w)
    return coef, rnorm


def _grid_starts(t, y, w, k, tau_lo, tau_hi, keep=2):
    cands = np.geomspace(tau_lo, tau_hi, N_TAU_CANDIDATES)
    scored = []
    for combo in itertools.combinations(cands, k):
        coef, rnorm = _nnls_amplitudes(t, y, w, combo)
        scored.append((rnorm, combo, coef))
    scored.sort(key=lambda s: (s[0], s[1]))
    starts = []
    for rnorm, combo, coef in scored[:keep]:
        D = max(coef[0], 1e-12 * max(y.max(), 1e-300))
        comps = [(max(a, 1e-6 * max(y.max(), 1e-300)), tau) for a, tau in zip(coef[1:], combo)]
        starts.append((D, comps))
    return starts


def _peel_start(t, y, sigma, D0, k, t_hi):
    """Sequential peeling: fit the slowest exponential on the latest segment,
    subtract it, move to the next-earlier segment."""
    resid = y - D0
    bounds = np.geomspace(max(t[0], 1e-300), max(t_hi, t[0] * 1.01), k + 1)
    comps = []
    for j in range(k - 1, -1, -1):
        a_, b_ = bounds[j], bounds[j + 1]
        sel = (t >= a_) & (t <= b_) & (resid > sigma)
        tau = a_ if j == 0 else math.sqrt(a_ * b_)
        amp = None
        if sel.sum() >= 2:
            ts = t[sel]
            ly = np.log(resid[sel])
            wt = resid[sel] / sigma[sel]
            slope, icpt = np.polyfit(ts, ly, 1, w=wt)
            if slope < 0:
                tau = -1.0 / slope
                amp = math.exp(icpt)
        if amp is None:
            near = (t >= a_) & (t <= b_)
            peak = float(resid[near].max()) if near.any() else float(resid.max())
            tmid = math.sqrt(a_ * b_)
            amp = max(peak, 1e-6 * abs(D0) + 1e-12) * math.exp(min(tmid / tau, 50.0))
        comps.append((amp, tau))
        resid = resid - amp * np.exp(-t / tau)
    return D0, comps


def _merge_degenerate(comps):
    comps = sorted(comps, key=lambda c: c[1])
    merged = False
    i = 0
    while i < len(comps) - 1:
        (a1, t1), (a2, t2) = comps[i], comps[i + 1]
        if t2 / t1 < DEGENERATE_TAU_RATIO:
            a = a1 + a2
            tau = (a1 * t1 + a2 * t2) / a if a > 0 else math.sqrt(t1 * t2)
            comps[i:i + 2] = [(a, tau)]
            merged = True
        else:
            i += 1
    return comps, merged


# ---------------------------------------------------------------- driver

def _fit_data(hist: RateHistogram, start: int):
    stop = hist.grid.nbins
    if hist.window_l is not None:
        stop = int(np.searchsorted(hist.grid.edges[:-1], hist.window_l, side="left"))
    sl = slice(start, stop)
    t = hist.centers[sl]
    y = hist.rate_cps[sl]
    c = np.asarray(hist.pair_counts[sl], dtype=np.float64)
    sigma = np.sqrt(np.maximum(c, 1.0)) / (hist.n_starts * hist.widths[sl])
    return t, y, c, sigma


def _fit_order(prob: _Problem, k: int, D0: float, tau_lo: float, tau_hi: float,
               t_sig: float, initial=None):
    t, y, w = prob.t, prob.y, prob.w
    logt_lo = math.log(tau_lo * 1e-3)
    logt_hi = math.log(max(tau_hi, t[-1]) * 10)
    big = math.log(max(np.abs(y).max(), 1e-300) * 1e9)
    lo = np.array([-700.0] + [-700.0, logt_lo] * k)
    hi = np.array([big] + [big, logt_hi] * k)
    if initial is not None:
        starts = [(D0, list(initial))]
    else:
        starts = _grid_starts(t, y, w, k, tau_lo, tau_hi)
        starts.append(_peel_start(t, y, 1.0 / w, D0, k, t_sig))
    best = None
    for D, comps in starts:
        res = levenberg_marquardt(prob, _pack(D, comps), bounds=(lo, hi))
        Df, cf = _unpack(res.p)
        key = (prob.rms(Df, cf), tuple(v for c in cf for v in c))
        if best is None or key < best[0]:
            best = (key, Df, cf, res.converged)
    (rms, _), Df, cf, conv = best
    return Df, cf, rms, conv


def fit_trap_decay(
    hist: RateHistogram,
    start: int | None = None,
    max_components: int = MAX_COMPONENTS,
    *,
    n_components: int | None = None,
    initial: Sequence[tuple[float, float]] | None = None,
    tail_fraction: float = 0.5,
) -> TrapFit:
    """Fit D + sum A_i exp(-t/tau_i) to the histogram from bin ``start`` on.

    With ``n_components`` unset the order is chosen automatically: the
    smallest k for which adding one more component improves the weighted
    RMS by less than 5%. ``initial`` (a list of (A, tau)) replaces the
    built-in multi-start initialisation and fixes the order.
    """
    if not 1 <= max_components <= MAX_COMPONENTS:
        raise InputError(f"max_components must be in 1..{MAX_COMPONENTS}")
    if n_components is not None and not 0 <= n_components <= MAX_COMPONENTS:
        raise InputError(f"n_components must be in 0..{MAX_COMPONENTS}")
    flags = []
    if start is None:
        start, strict = find_fit_start(hist.rate_cps)
        if not strict:
            flags.append("fallback-start")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        dead, _ = extract_dead_recharge(hist)
    t, y, c, sigma = _fit_data(hist, start)
    if t.size == 0:
        raise InputError("no bins at or after the fit start")
    prob = _Problem(t, y, sigma)
    nonzero = int(np.count_nonzero(c))

    # order 0: the pooled mean rate over the fit range
    w_sl = hist.widths[start:start + t.size]
    D_flat = float(c.sum() / (hist.n_starts * w_sl.sum())) if c.sum() > 0 else 0.0
    order_rms = {0: prob.rms(D_flat, [])}
    fits = {0: (D_flat, [], order_rms[0], True)}

    if initial is not None:
        orders = [len(initial)]
    elif n_components is not None:
        orders = list(range(1, n_components + 1))
    else:
        orders = list(range(1, max_components + 1))
    orders = [k for k in orders if k >= 1]

    try:
        D0 = estimate_dcr_tail(hist, tail_fraction)
    except InputError:
        D0 = max(D_flat, 1e-12)
    D0 = max(D0, 1e-12 * max(y.max(), 1e-300))
    excess_sig = np.flatnonzero((y - D0) > 3 * sigma)
    t_sig = float(t[excess_sig[-1]]) if excess_sig.size else float(t[-1])
    first_live = min(int(np.searchsorted(hist.grid.edges, dead, side="right")) - 1, start)
    tau_lo = float(hist.centers[max(first_live, 0)]) if dead > 0 else float(t[0])
    tau_hi = max(t_sig, tau_lo * 4)

    for k in orders:
        if nonzero < 3 * (2 * k + 1):
            flags.append(f"too-few-points-for-{k}")
            break
        fits[k] = _fit_order(prob, k, D0, tau_lo, tau_hi, t_sig, initial)
        order_rms[k] = fits[k][2]

    if initial is not None:
        chosen = len(initial) if len(initial) in fits else 0
    elif n_components is not None:
        chosen = n_components if n_components in fits else max(fits)
    else:
        chosen = max(fits)
        for k in sorted(fits):
            if k + 1 not in fits or order_rms[k + 1] > (1 - ORDER_IMPROVEMENT) * order_rms[k]:
                chosen = k
                break

    D, comps, rms, conv = fits[chosen]
    comps, merged = _merge_degenerate(comps)
    if merged:
        flags.append("merged-degenerate")
        D, comps, rms, conv = _fit_order(prob, len(comps), D, tau_lo, tau_hi, t_sig, comps)
        comps, _ = _merge_degenerate(comps)
        rms = prob.rms(D, comps)
    if not conv:
        flags.append("not-converged")
    if any(tau < dead for _, tau in comps):
        flags.append("tau-below-dead-time")
    return TrapFit(
        D=float(D),
        components=tuple((float(a), float(tau)) for a, tau in comps),
        fit_start_bin=int(start),
        residual_norm=float(rms),
        converged=bool(conv),
        n_points=int(t.size),
        dead_time_s=float(dead),
        flags=tuple(flags),
        order_rms={k: float(v) for k, v in order_rms.items()},
    )


def fit_residual_norm(hist: RateHistogram, fit: TrapFit) -> float:
    """Recompute the weighted RMS of ``fit`` on ``hist`` (independent check)."""
    t, y, c, sigma = _fit_data(hist, fit.fit_start_bin)
    r = (y - fit(t)) / sigma
    return float(np.sqrt(np.mean(r * r)))


# ---------------------------------------------------------------- FWHM

@dataclass(frozen=True)
class FwhmResult:
    fwhm_seconds: float
    peak_bin_center_seconds: float
    left_seconds: float
    right_seconds: float
    multimodal: bool = False
    degenerate: bool = False

    def to_dict(self) -> dict:
        return {
            "fwhm_seconds": self.fwhm_seconds,
            "peak_bin_center_seconds": self.peak_bin_center_seconds,
            "left_seconds": self.left_seconds,
            "right_seconds": self.right_seconds,
            "multimodal": self.multimodal,
            "degenerate": self.degenerate,
        }


def fwhm(values, edges=None, *, bin_width: float | None = None) -> FwhmResult:
    """Full width at half maximum of a delay histogram.

    ``values`` are bin counts when ``edges`` is given, otherwise raw delay
    samples that are histogrammed with ``bin_width`` (default: Freedman-
    Diaconis). Half-maximum crossings are linearly interpolated between
    neighbouring bin centres; with more than two crossings the outermost
    pair is used and the result is flagged multimodal.
    """
    values = np.asarray(values, dtype=np.float64)
    if edges is None:
        if values.size == 0:
            raise InputError("no samples")
        if bin_width is None:
            edges = np.histogram_bin_edges(values, bins="fd")
        else:
            lo = math.floor(values.min() / bin_width) * bin_width
            n = int(math.ceil((values.max() - lo) / bin_width)) + 1
            edges = lo + bin_width * np.arange(n + 1)
        counts, edges = np.histogram(values, bins=edges)
        y = counts.astype(np.float64)
    else:
        edges = np.asarray(edges, dtype=np.float64)
        y = values
        if y.size != edges.size - 1:
            raise InputError("need len(edges) == len(counts) + 1")
    if y.size == 0 or y.max() <= 0:
        raise InputError("histogram has no positive bins")
    # pad with empty bins so a peak at the border still has two crossings
    w0 = edges[1] - edges[0]
    w1 = edges[-1] - edges[-2]
    centers = np.concatenate([[edges[0] - w0 / 2], 0.5 * (edges[1:] + edges[:-1]),
                              [edges[-1] + w1 / 2]])
    y = np.concatenate([[0.0], y, [0.0]])
    peak = int(np.argmax(y))
    half = y[peak] / 2
    above = y >= half
    flips = np.flatnonzero(above[1:] != above[:-1])
    rising = [i for i in flips if not above[i] and above[i + 1]]
    falling = [i for i in flips if above[i] and not above[i + 1]]

    def cross(i):
        y0, y1 = y[i], y[i + 1]
        return centers[i] + (half - y0) / (y1 - y0) * (centers[i + 1] - centers[i])

    left = cross(rising[0])
    right = cross(falling[-1])
    degenerate = int(np.count_nonzero(y > 0)) == 1
    return FwhmResult(
        fwhm_seconds=float(right - left),
        peak_bin_center_seconds=float(centers[peak]),
        left_seconds=float(left),
        right_seconds=float(right),
        multimodal=len(flips) > 2,
        degenerate=degenerate,
    )


# ---------------------------------------------------------------- extrapolation

@dataclass(frozen=True)
class LinearExtrapolation:
    slope: float
    intercept: float
    x_at_zero: float
    included: tuple[int, ...]
    residuals: tuple[float, ...]
    rms: float

    def to_dict(self) -> dict:
        return {
            "slope": self.slope,
            "intercept": self.intercept,
            "x_at_zero": self.x_at_zero,
            "included": list(self.included),
            "residuals": list(self.residuals),
            "rms": self.rms,
        }


def _ols(x, y):
    xm, ym = x.mean(), y.mean()
    sxx = np.sum((x - xm) ** 2)
    slope = np.sum((x - xm) * (y - ym)) / sxx if sxx > 0 else 0.0
    return slope, ym - slope * xm


def _rms_line(x, y):
    slope, icpt = _ols(x, y)
    r = y - (slope * x + icpt)
    return math.sqrt(float(np.mean(r * r))), slope, icpt


def linear_extrapolate_zero(points, include="auto", *, min_points: int = 3,
                            improvement: float = 0.2) -> LinearExtrapolation:
    """Least-squares line through (x, y) points and its zero crossing.

    ``include`` is ``"all"``, ``"auto"`` or an explicit list of point
    indices. ``"auto"`` repeatedly drops the lowest-x point while doing so
    lowers the RMS residual by more than ``improvement`` (20%), which strips
    the curved region near the crossing.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise InputError("points must be a sequence of (x, y) pairs")
    x, y = pts[:, 0], pts[:, 1]
    order = np.argsort(x, kind="stable")
    if isinstance(include, str):
        if include not in ("auto", "all"):
            raise InputError(f"unknown region policy {include!r}")
        idx = list(order)
    else:
        idx = sorted({int(i) for i in include}, key=lambda i: (x[i], i))
    if len(idx) < min_points:
        raise InputError(f"need at least {min_points} points, got {len(idx)}")
    rms, slope, icpt = _rms_line(x[idx], y[idx])
    if include == "auto":
        while len(idx) > min_points and rms > 0:
            trial = idx[1:]
            r2, s2, i2 = _rms_line(x[trial], y[trial])
            if r2 < (1 - improvement) * rms:
                idx, rms, slope, icpt = trial, r2, s2, i2
            else:
                break
    xi, yi = x[idx], y[idx]
    scale = max(np.abs(yi).max(), 1e-300)
    if abs(slope) * (xi.max() - xi.min()) <= 1e-9 * scale:
        raise NumericError("fitted slope is zero; the line never crosses zero")
    resid = y - (slope * x + icpt)
    return LinearExtrapolation(
        slope=float(slope),
        intercept=float(icpt),
        x_at_zero=float(-icpt / slope),
        included=tuple(int(i) for i in sorted(idx)),
        residuals=tuple(float(r) for r in resid),
        rms=float(rms),
    )
