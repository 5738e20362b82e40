"""Generative detector model: thermal dark counts, trap afterpulsing, dead time,
optional pulsed illumination with Gaussian timing jitter.

Every registered count fills each trap independently with a Poisson(A*tau)
number of carriers, each released after an Exp(tau) delay. To first order
the conditional intensity after a count is therefore

    D + sum_i A_i * exp(-t / tau_i)

which is exactly the form the trap fit assumes. Candidates (thermal,
photon or afterpulse) arriving within the dead time of the previous
registered count are discarded without extending it (non-paralyzable).
With ``cascade`` on, registered afterpulses fill traps in turn.

Continuous times are carried as (integer tick, fraction) pairs and floored
to ticks at the very end, so multi-week records keep sub-tick precision.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from ._kernels import run_detector
from .errors import InputError
from .histograms import _ceil_ticks
from .timetag import DEFAULT_TICK_SECONDS, TagStream

MAX_TRAPS = 4

TABLE1_MODELS = (
    "table1_0C", "table1_-20C", "table1_-40C",
    "table1_-60C", "table1_-80C", "table1_-100C",
)


@dataclass(frozen=True)
class DetectorModel:
    thermal_dcr_cps: float
    dead_time_s: float = 0.0
    traps: tuple[tuple[float, float], ...] = ()
    efficiency: float = 1.0
    jitter_sigma_s: float = 0.0
    cascade: bool = True
    name: str | None = None
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        traps = tuple((float(a), float(t)) for a, t in self.traps)
        object.__setattr__(self, "traps", traps)
        for label in ("thermal_dcr_cps", "dead_time_s", "jitter_sigma_s"):
            v = getattr(self, label)
            if not (v >= 0 and math.isfinite(v)):
                raise InputError(f"{label} must be finite and nonnegative, got {v!r}")
        if not (0 <= self.efficiency <= 1):
            raise InputError(f"efficiency must be in [0, 1], got {self.efficiency!r}")
        if len(traps) > MAX_TRAPS:
            raise InputError(f"at most {MAX_TRAPS} traps are supported, got {len(traps)}")
        for a, tau in traps:
            if not (a >= 0 and tau > 0):
                raise InputError(f"trap needs A >= 0 and tau > 0, got ({a!r}, {tau!r})")
        if self.cascade and self.branching_ratio >= 1:
            raise InputError(
                f"sum(A*tau) = {self.branching_ratio:.3g} >= 1: afterpulse cascade is "
                "supercritical"
            )

    @property
    def branching_ratio(self) -> float:
        """Mean afterpulse candidates per registered count, sum(A_i * tau_i)."""
        return float(sum(a * t for a, t in self.traps))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["traps"] = [list(t) for t in self.traps]
        if not d["meta"]:
            d.pop("meta")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DetectorModel":
        known = {"thermal_dcr_cps", "dead_time_s", "traps", "efficiency",
                 "jitter_sigma_s", "cascade", "name", "meta"}
        extra = {k: v for k, v in d.items() if k not in known}
        kw = {k: v for k, v in d.items() if k in known}
        if "thermal_dcr_cps" not in kw:
            raise InputError("model is missing thermal_dcr_cps")
        kw["traps"] = tuple(tuple(t) for t in kw.get("traps", ()))
        meta = dict(kw.pop("meta", {}) or {})
        meta.update(extra)
        return cls(**kw, meta=meta)

    @classmethod
    def load(cls, path) -> "DetectorModel":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    @classmethod
    def bundled(cls, name: str) -> "DetectorModel":
        name = name.removesuffix(".json")
        res = resources.files("spadlab") / "data" / "models" / f"{name}.json"
        if not res.is_file():
            raise InputError(f"no bundled model named {name!r}; available: {', '.join(TABLE1_MODELS)}")
        return cls.from_dict(json.loads(res.read_text()))

    @classmethod
    def resolve(cls, spec: str) -> "DetectorModel":
        """A path to a model JSON, or the name of a bundled fixture."""
        p = Path(spec)
        if p.is_file():
            return cls.load(p)
        return cls.bundled(p.name)


@dataclass(frozen=True)
class PulseTrain:
    rate_hz: float
    mean_photons_per_pulse: float
    duration_s: float
    wavelength_m: float = 808e-9
    start_s: float = 0.0

    def __post_init__(self):
        if not (self.rate_hz > 0):
            raise InputError(f"pulse rate must be positive, got {self.rate_hz!r}")
        if not (self.mean_photons_per_pulse >= 0):
            raise InputError("mean photons per pulse must be nonnegative")
        if not (self.duration_s > 0):
            raise InputError("pulse train duration must be positive")

    def times_s(self) -> np.ndarray:
        n = self.n_pulses
        return self.start_s + np.arange(n) / self.rate_hz

    @property
    def n_pulses(self) -> int:
        n = math.ceil((self.duration_s - self.start_s) * self.rate_hz)
        while n > 0 and self.start_s + (n - 1) / self.rate_hz >= self.duration_s:
            n -= 1
        return max(n, 0)


def expected_afterpulse_probability(model: DetectorModel) -> float:
    """First-order afterpulse probability: sum A_i tau_i exp(-dead/tau_i).

    Counts the candidates that survive the dead time of their parent;
    cascades and dead time from intervening counts are ignored.
    """
    d = model.dead_time_s
    return float(sum(a * t * math.exp(-d / t) for a, t in model.traps))


def expected_count_rate(model: DetectorModel, extra_rate_cps: float = 0.0) -> float:
    """Approximate registered rate including dead-time loss and afterpulses."""
    lam = model.thermal_dcr_cps + extra_rate_cps
    m = expected_afterpulse_probability(model)
    if model.cascade:
        lam = lam / (1 - m)
    else:
        lam = lam * (1 + m)
    return lam / (1 + lam * model.dead_time_s)


def duration_for_events(model: DetectorModel, n_events: int) -> float:
    rate = expected_count_rate(model)
    if rate <= 0:
        raise InputError("model produces no counts")
    return n_events / rate


def _split(x: np.ndarray):
    whole = np.floor(x)
    return whole.astype(np.int64), x - whole


def _poisson_ticks(rng: np.random.Generator, rate_per_tick: float, end_int: int):
    """Homogeneous Poisson arrivals in [0, end_int) ticks as (int, frac) arrays."""
    if rate_per_tick <= 0 or end_int <= 0:
        return np.empty(0, np.int64), np.empty(0)
    mean_gap = 1.0 / rate_per_tick
    expected = rate_per_tick * end_int
    block = int(expected + 6 * math.sqrt(expected) + 16)
    ints, fracs = [], []
    base_i, base_f = np.int64(0), 0.0
    while True:
        gi, gf = _split(rng.exponential(mean_gap, block))
        ci = np.cumsum(gi) + base_i
        cf = np.cumsum(gf) + base_f
        carry, cf = _split(cf)
        ci = ci + carry
        inside = ci < end_int
        if not inside.all():
            n = int(np.argmin(inside))
            ints.append(ci[:n])
            fracs.append(cf[:n])
            break
        ints.append(ci)
        fracs.append(cf)
        base_i, base_f = ci[-1], cf[-1]
        block = max(16, block // 4)
    return np.concatenate(ints), np.concatenate(fracs)


def _photon_ticks(rng: np.random.Generator, model: DetectorModel, pulses: PulseTrain,
                  tick: float, end_int: int):
    n = pulses.n_pulses
    p_det = -math.expm1(-pulses.mean_photons_per_pulse * model.efficiency)
    if n == 0 or p_det <= 0:
        return np.empty(0, np.int64), np.empty(0)
    hit = np.flatnonzero(rng.random(n) < p_det)
    period = 1.0 / (pulses.rate_hz * tick)
    p_i, p_f = math.floor(period), period - math.floor(period)
    s_i, s_f = _split(np.array([pulses.start_s / tick]))
    k = hit.astype(np.int64)
    frac = s_f[0] + k * p_f
    if model.jitter_sigma_s > 0:
        frac = frac + rng.normal(0.0, model.jitter_sigma_s / tick, size=k.size)
    carry, frac = _split(frac)
    ints = s_i[0] + k * p_i + carry
    keep = (ints >= 0) & (ints < end_int)
    ints, frac = ints[keep], frac[keep]
    order = np.lexsort((frac, ints))
    return ints[order], frac[order]


def _simulate(model: DetectorModel, duration_s: float, seed, tick: float,
              pulses: PulseTrain | None = None):
    if not (duration_s > 0):
        raise InputError(f"duration must be positive, got {duration_s!r}")
    if not (tick > 0):
        raise InputError("tick_seconds must be positive")
    end_int = int(math.ceil(duration_s / tick))
    if end_int >= 2**62:
        raise InputError("duration exceeds the representable tick range")
    ss = np.random.SeedSequence(seed)
    rng_thermal, rng_photon, rng_counts, rng_exp = (np.random.default_rng(s) for s in ss.spawn(4))

    prim_i, prim_f = _poisson_ticks(rng_thermal, model.thermal_dcr_cps * tick, end_int)
    if pulses is not None:
        ph_i, ph_f = _photon_ticks(rng_photon, model, pulses, tick, end_int)
        prim_i = np.concatenate([prim_i, ph_i])
        prim_f = np.concatenate([prim_f, ph_f])
        order = np.lexsort((prim_f, prim_i))
        prim_i, prim_f = prim_i[order], prim_f[order]
    spawns = np.ones(prim_i.size, dtype=np.bool_)

    lam = np.array([a * t for a, t in model.traps], dtype=np.float64)
    tau_ticks = np.array([t / tick for _, t in model.traps], dtype=np.float64)
    m = float(lam.sum())
    n_rows = int(prim_i.size * (1 + 3 * m) + 10 * math.sqrt(prim_i.size * m + 1) + 64)
    pool_counts = rng_counts.poisson(lam, size=(n_rows, lam.size)).astype(np.int64)
    n_exp = int(n_rows * m * 1.5 + 10 * math.sqrt(n_rows * m + 1) + 64)
    pool_exp = rng_exp.standard_exponential(n_exp)
    # whole ticks, so floor-quantised output still honours the dead time exactly
    dead_ticks = float(_ceil_ticks(np.float64(model.dead_time_s), tick)) if model.dead_time_s > 0 else 0.0

    while True:
        out, kind, status = run_detector(
            prim_i, prim_f, spawns, tau_ticks, pool_counts, pool_exp,
            dead_ticks, model.cascade, np.int64(end_int),
        )
        if status == 0:
            break
        # extend the exhausted pool; prefixes are unchanged so the result is
        # the same as if the pool had been large enough from the start
        if status == 1:
            more = rng_counts.poisson(lam, size=(pool_counts.shape[0], lam.size))
            pool_counts = np.concatenate([pool_counts, more.astype(np.int64)])
        else:
            pool_exp = np.concatenate([pool_exp, rng_exp.standard_exponential(pool_exp.size)])
    return out, kind


def _to_stream(out, model, duration_s, seed, tick, extra=None) -> TagStream:
    meta = {"source": "simulation", "duration_s": duration_s, "seed": seed}
    if model.name:
        meta["model"] = model.name
    if extra:
        meta.update(extra)
    return TagStream(out.astype(np.uint64), tick, ((0, out.size),), meta)


def simulate_dark(model: DetectorModel, duration_s: float, seed=0,
                  tick_seconds: float = DEFAULT_TICK_SECONDS) -> TagStream:
    """Dark-count record of ``duration_s`` seconds, deterministic per seed."""
    out, _ = _simulate(model, duration_s, seed, tick_seconds)
    return _to_stream(out, model, duration_s, seed, tick_seconds)


def simulate_illuminated(model: DetectorModel, pulses: PulseTrain, seed=0,
                         tick_seconds: float = DEFAULT_TICK_SECONDS) -> TagStream:
    """Dark process plus detections from a periodic weak pulse train.

    Each pulse is detected with probability 1 - exp(-mu * efficiency) at the
    pulse time plus a Gaussian jitter delay; photon counts fill traps like
    any other count and share the dead time.
    """
    out, _ = _simulate(model, pulses.duration_s, seed, tick_seconds, pulses)
    extra = {"pulse_rate_hz": pulses.rate_hz, "mean_photons_per_pulse": pulses.mean_photons_per_pulse}
    return _to_stream(out, model, pulses.duration_s, seed, tick_seconds, extra)


def simulate_with_labels(model: DetectorModel, duration_s: float, seed=0,
                         tick_seconds: float = DEFAULT_TICK_SECONDS,
                         pulses: PulseTrain | None = None):
    """Like :func:`simulate_dark` but also returns a per-tag afterpulse flag."""
    out, kind = _simulate(model, duration_s, seed, tick_seconds, pulses)
    return _to_stream(out, model, duration_s, seed, tick_seconds), kind.astype(bool)


def pulse_delays(stream: TagStream, pulses: PulseTrain) -> np.ndarray:
    """Delay of each tag from its nearest pulse, in seconds."""
    tick = stream.tick_seconds
    period = 1.0 / (pulses.rate_hz * tick)
    t = stream.ticks.astype(np.float64) - pulses.start_s / tick
    k = np.rint(t / period)
    return (t - k * period) * tick
