"""Scalar detector characterization: detection efficiency from a calibrated
optical power, the blackbody background bound, and breakdown voltage by
linear extrapolation of avalanche amplitude versus bias."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import constants as _const
from scipy.integrate import quad

from .errors import InputError, NumericError
from .fitting import LinearExtrapolation, linear_extrapolate_zero

H = _const.h
C = _const.c
K_B = _const.k

WAVELENGTH_BAND_M = (300e-9, 1100e-9)
EFFICIENCY_SYSTEMATIC = 0.10


@dataclass(frozen=True)
class EfficiencyInput:
    detected_rate_cps: float
    dcr_cps: float
    laser_power_w: float
    wavelength_m: float
    pulse_rate_hz: float = 0.0

    def __post_init__(self):
        for name in ("detected_rate_cps", "dcr_cps", "laser_power_w", "wavelength_m", "pulse_rate_hz"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise InputError(f"{name} must be finite and nonnegative, got {v!r}")
        lo, hi = WAVELENGTH_BAND_M
        if not lo < self.wavelength_m < hi:
            warnings.warn(
                f"wavelength {self.wavelength_m * 1e9:.0f} nm is outside the silicon "
                f"band {lo * 1e9:.0f}-{hi * 1e9:.0f} nm", stacklevel=3,
            )


@dataclass(frozen=True)
class EfficiencyResult:
    eta: float
    photons_per_second: float
    photons_per_pulse: float | None
    eta_low: float
    eta_high: float

    def to_dict(self) -> dict:
        return {
            "eta": self.eta,
            "eta_band": [self.eta_low, self.eta_high],
            "photons_per_second": self.photons_per_second,
            "photons_per_pulse": self.photons_per_pulse,
        }


def photon_rate(power_w: float, wavelength_m: float) -> float:
    """Photons per second carried by ``power_w`` at ``wavelength_m``."""
    return power_w * wavelength_m / (H * C)


def power_for_photon_rate(rate: float, wavelength_m: float) -> float:
    return rate * H * C / wavelength_m


def detection_efficiency(inp: EfficiencyInput) -> EfficiencyResult:
    """eta = (N_det - DCR) / N_sent with N_sent = P lambda / (h c).

    The per-pulse mean photon number P lambda / (f h c) is reported too. A
    +-10% systematic band accompanies eta (power calibration).
    """
    if inp.laser_power_w <= 0:
        raise InputError("laser power must be positive")
    n_sent = photon_rate(inp.laser_power_w, inp.wavelength_m)
    mu = n_sent / inp.pulse_rate_hz if inp.pulse_rate_hz > 0 else None
    excess = inp.detected_rate_cps - inp.dcr_cps
    if excess < 0:
        warnings.warn("detected rate is below the dark count rate; efficiency clamped to 0",
                      stacklevel=2)
        excess = 0.0
    eta = excess / n_sent
    return EfficiencyResult(
        eta=eta,
        photons_per_second=n_sent,
        photons_per_pulse=mu,
        eta_low=eta * (1 - EFFICIENCY_SYSTEMATIC),
        eta_high=eta * (1 + EFFICIENCY_SYSTEMATIC),
    )


@dataclass(frozen=True)
class BlackbodyQuery:
    temperature_k: float
    cutoff_wavelength_m: float
    aperture_area_m2: float

    def __post_init__(self):
        if not self.temperature_k > 0:
            raise InputError("temperature must be positive")
        if not self.cutoff_wavelength_m > 0:
            raise InputError("cutoff wavelength must be positive")
        if not self.aperture_area_m2 > 0:
            raise InputError("aperture area must be positive")


def disc_area(diameter_m: float) -> float:
    return math.pi * (diameter_m / 2) ** 2


def blackbody_photon_rate(q: BlackbodyQuery, rtol: float = 1e-6) -> float:
    """Photons per second with wavelength below the cutoff reaching a flat
    aperture from a hemispherical Lambertian blackbody enclosure.

    The spectral photon radiance 2c/lambda^4 / (exp(hc/lambda kT) - 1) is
    integrated in u = hc/(lambda k T), where it becomes
    2c (kT/hc)^3 u^2/(e^u - 1) over [u_c, inf). The factor e^-u_c is taken
    out analytically so the quadrature sees an O(1) integrand.
    """
    kt = K_B * q.temperature_k
    uc = H * C / (q.cutoff_wavelength_m * kt)
    prefactor = q.aperture_area_m2 * math.pi * 2 * C * (kt / (H * C)) ** 3
    if uc > 700:
        return 0.0

    def g(x):
        u = uc + x
        return u * u * math.exp(-x) / -math.expm1(-u)

    val, err, info = quad(g, 0.0, np.inf, epsabs=0.0, epsrel=rtol, limit=200, full_output=1)[:3]
    if not math.isfinite(val) or err > 10 * rtol * abs(val):
        raise NumericError(f"blackbody quadrature did not converge: value {val!r}, "
                           f"error estimate {err!r}, {info.get('neval')} evaluations")
    return prefactor * math.exp(-uc) * val


@dataclass(frozen=True)
class BreakdownResult:
    v_bd: float
    fit: LinearExtrapolation

    def to_dict(self) -> dict:
        return {"v_bd": self.v_bd, **self.fit.to_dict()}


def breakdown_voltage(points, policy="auto") -> BreakdownResult:
    """Breakdown voltage as the zero-amplitude intercept of the linear part of
    the amplitude-versus-bias curve. ``points`` are (bias_v, amplitude)."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 3:
        raise InputError("need at least 3 (bias_v, amplitude) points")
    span = pts[:, 0].max() - pts[:, 0].min()
    if span < 5.0:
        raise InputError(f"bias points span {span:.2f} V; at least 5 V is required")
    fit = linear_extrapolate_zero(pts, include=policy)
    return BreakdownResult(fit.x_at_zero, fit)


def temperature_coefficient(temperatures_c, v_bd) -> tuple[float, float]:
    """Least-squares slope (V per degree C) and intercept of v_bd(T)."""
    t = np.asarray(temperatures_c, dtype=np.float64)
    v = np.asarray(v_bd, dtype=np.float64)
    if t.size < 2 or t.size != v.size:
        raise InputError("need matching temperature and voltage arrays of length >= 2")
    slope, icpt = np.polyfit(t, v, 1)
    return float(slope), float(icpt)
