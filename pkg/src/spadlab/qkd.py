"""Entangled-pair dual-downlink link budget: singles, true and accidental
coincidences, QBER, SNR and an asymptotic secure key rate versus loss."""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .errors import InputError

PRESETS = ("geo-dual-downlink", "canary-143km")


def binary_entropy(p: float) -> float:
    if p <= 0.0 or p >= 1.0:
        return 0.0
    return -p * math.log2(p) - (1 - p) * math.log2(1 - p)


@dataclass(frozen=True)
class LinkScenario:
    pair_rate_cps: float = 5e7
    loss_db_per_link: tuple[float, float] = (69.0, 69.0)
    detector_efficiency: float = 0.5
    dcr_cps_per_station: float = 1.0
    coincidence_window_s: float = 1e-9
    intrinsic_error: float = 0.05
    error_correction_inefficiency: float = 1.1
    sifting_factor: float = 0.5
    dcr_per_detector: bool = False
    detectors_per_station: int = 4
    jitter_sigma_s: float | None = None
    name: str = ""

    def __post_init__(self):
        losses = tuple(float(x) for x in self.loss_db_per_link)
        if len(losses) != 2:
            raise InputError("loss_db_per_link needs exactly two values")
        object.__setattr__(self, "loss_db_per_link", losses)
        if any(not (x >= 0 and math.isfinite(x)) for x in losses):
            raise InputError(f"losses must be finite and nonnegative, got {losses}")
        if not 0 <= self.detector_efficiency <= 1:
            raise InputError("detector_efficiency must be in [0, 1]")
        if not self.coincidence_window_s > 0:
            raise InputError("coincidence window must be positive")
        if self.pair_rate_cps < 0 or self.dcr_cps_per_station < 0:
            raise InputError("rates must be nonnegative")
        if self.error_correction_inefficiency < 1:
            raise InputError("error_correction_inefficiency must be >= 1")
        if not 0 <= self.intrinsic_error <= 0.5:
            raise InputError("intrinsic_error must be in [0, 0.5]")
        if not 0 < self.sifting_factor <= 1:
            raise InputError("sifting_factor must be in (0, 1]")
        if self.detectors_per_station < 1:
            raise InputError("detectors_per_station must be >= 1")
        if self.jitter_sigma_s is not None and self.jitter_sigma_s < 0:
            raise InputError("jitter_sigma_s must be nonnegative")

    @property
    def station_dcr(self) -> float:
        """Dark counts per station (summed over its detectors)."""
        if self.dcr_per_detector:
            return self.dcr_cps_per_station * self.detectors_per_station
        return self.dcr_cps_per_station

    @property
    def window_acceptance(self) -> float:
        """Fraction of true pairs inside the window; 1 unless a per-detector
        Gaussian jitter is given (relative delay sigma = sqrt(2) * jitter)."""
        if not self.jitter_sigma_s:
            return 1.0
        sigma_rel = math.sqrt(2) * self.jitter_sigma_s
        return math.erf(self.coincidence_window_s / 2 / (sigma_rel * math.sqrt(2)))

    @property
    def detector_loss_db(self) -> float:
        if self.detector_efficiency <= 0:
            return math.inf
        return -10 * math.log10(self.detector_efficiency)

    def replace(self, **kw) -> "LinkScenario":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["loss_db_per_link"] = list(self.loss_db_per_link)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LinkScenario":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise InputError(f"unknown scenario keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def preset(cls, name: str) -> "LinkScenario":
        if name not in PRESETS:
            raise InputError(f"unknown preset {name!r}; available: {', '.join(PRESETS)}")
        text = (resources.files("spadlab") / "data" / "presets" / f"{name}.json").read_text()
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class LinkEvaluation:
    singles_cps: tuple[float, float]
    true_coincidences_cps: float
    accidental_coincidences_cps: float
    snr: float | None
    qber: float
    key_rate_bps: float
    flags: tuple[str, ...] = field(default=())

    def to_dict(self) -> dict:
        return {
            "singles_cps": list(self.singles_cps),
            "true_coincidences_cps": self.true_coincidences_cps,
            "accidental_coincidences_cps": self.accidental_coincidences_cps,
            "snr": self.snr,
            "qber": self.qber,
            "key_rate_bps": self.key_rate_bps,
            "flags": list(self.flags),
        }


def evaluate_scenario(s: LinkScenario) -> LinkEvaluation:
    eta = [10 ** (-loss / 10) * s.detector_efficiency for loss in s.loss_db_per_link]
    singles = tuple(s.pair_rate_cps * e + s.station_dcr for e in eta)
    c_true = s.pair_rate_cps * eta[0] * eta[1] * s.window_acceptance
    c_acc = singles[0] * singles[1] * s.coincidence_window_s
    total = c_true + c_acc
    flags = []
    if total <= 0:
        flags.append("no-coincidences")
        return LinkEvaluation(singles, c_true, c_acc, None, 0.5, 0.0, tuple(flags))
    snr = c_true / c_acc if c_acc > 0 else math.inf
    qber = (s.intrinsic_error * c_true + 0.5 * c_acc) / total
    h = binary_entropy(qber)
    frac = 1 - s.error_correction_inefficiency * h - h
    key = s.sifting_factor * total * max(0.0, frac)
    return LinkEvaluation(singles, c_true, c_acc, snr, qber, key, tuple(flags))


def _key_at_total(s: LinkScenario, total_db: float) -> float:
    per_link = (total_db - 2 * s.detector_loss_db) / 2
    if per_link < 0:
        per_link = 0.0
    return evaluate_scenario(s.replace(loss_db_per_link=(per_link, per_link))).key_rate_bps


@dataclass(frozen=True)
class LossSweep:
    total_loss_db: np.ndarray
    evaluations: tuple[LinkEvaluation, ...]
    cutoff_db: float | None
    flags: tuple[str, ...] = ()

    @property
    def key_rate_bps(self) -> np.ndarray:
        return np.array([e.key_rate_bps for e in self.evaluations])

    @property
    def curve(self) -> list[tuple[float, float]]:
        return [(float(x), e.key_rate_bps) for x, e in zip(self.total_loss_db, self.evaluations)]

    def to_csv(self) -> str:
        lines = ["loss_db,key_rate_bps,snr,qber"]
        for x, e in zip(self.total_loss_db, self.evaluations):
            snr = "" if e.snr is None else repr(e.snr)
            lines.append(f"{float(x)!r},{e.key_rate_bps!r},{snr},{e.qber!r}")
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return {
            "cutoff_db": self.cutoff_db,
            "flags": list(self.flags),
            "curve": [{"loss_db": float(x), **e.to_dict()}
                      for x, e in zip(self.total_loss_db, self.evaluations)],
        }


def sweep_loss(s: LinkScenario, total_loss_range_db=(100.0, 170.0), steps: int = 141,
               resolution_db: float = 0.1) -> LossSweep:
    """Evaluate the key rate over total dual-link loss.

    Total loss includes both detector efficiencies; the remainder is split
    equally between the two channels. The cutoff (largest loss with positive
    key) is refined by bisection to ``resolution_db``.
    """
    lo, hi = (float(v) for v in total_loss_range_db)
    if not hi > lo:
        raise InputError("loss range must be increasing")
    if steps < 2:
        raise InputError("need at least 2 sweep points")
    if s.detector_efficiency <= 0:
        raise InputError("detector efficiency must be positive for a loss sweep")
    grid = np.linspace(lo, hi, int(steps))
    evals = []
    flags = []
    for x in grid:
        per_link = (x - 2 * s.detector_loss_db) / 2
        if per_link < 0:
            if "clamped-negative-link-loss" not in flags:
                flags.append("clamped-negative-link-loss")
            per_link = 0.0
        evals.append(evaluate_scenario(s.replace(loss_db_per_link=(per_link, per_link))))
    keys = np.array([e.key_rate_bps for e in evals])
    positive = np.flatnonzero(keys > 0)
    if positive.size == 0:
        cutoff = None
        flags.append("no-positive-key")
    elif positive[-1] == grid.size - 1:
        cutoff = float(grid[-1])
        flags.append("cutoff-beyond-range")
    else:
        a, b = float(grid[positive[-1]]), float(grid[positive[-1] + 1])
        while b - a > resolution_db:
            mid = 0.5 * (a + b)
            if _key_at_total(s, mid) > 0:
                a = mid
            else:
                b = mid
        cutoff = a
    return LossSweep(grid, tuple(evals), cutoff, tuple(flags))
