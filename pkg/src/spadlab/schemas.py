"""JSON schemas for the summaries written by each CLI subcommand."""

_num = {"type": "number"}
_nnum = {"type": "number", "minimum": 0}
_str = {"type": "string"}
_bool = {"type": "boolean"}
_int = {"type": "integer", "minimum": 0}
_warnings = {"type": "array", "items": _str}

_grid = {
    "type": "object",
    "required": ["edges"],
    "properties": {"edges": {"type": "array", "items": _nnum, "minItems": 2}},
}


def _obj(required: dict, optional: dict | None = None) -> dict:
    props = dict(required)
    props.update(optional or {})
    props["warnings"] = _warnings
    return {"type": "object", "required": sorted(required), "properties": props}


SCHEMAS = {
    "ingest": _obj(
        {"input": _str, "format": _str, "tick_seconds": _nnum, "meta": {"type": "object"},
         "total_counts": _int, "live_seconds": _nnum, "mean_rate_cps": _nnum,
         "per_session": {"type": "array", "items": {"type": "object"}}},
        {"converted": {"type": "object"}},
    ),
    "afterpulse": _obj(
        {"input": _str, "n_tags": _int, "n_starts": _int, "total_pairs": _int, "grid": _grid,
         "window_l": _nnum, "dcr_cps": _nnum, "dead_time_s": _nnum, "recharge_time_s": _nnum,
         "afterpulse_probability": {"type": "number", "minimum": 0, "maximum": 1}},
    ),
    "fit": _obj(
        {"input": _str, "fit_start_strict": _bool, "D": _nnum,
         "components": {"type": "array", "maxItems": 4,
                        "items": {"type": "array", "items": _nnum, "minItems": 2, "maxItems": 2}},
         "residual_norm": _nnum, "converged": _bool, "fit_start_bin": _int,
         "n_points": _int, "dead_time_s": _nnum,
         "untrusted_components": {"type": "array", "items": _int},
         "flags": {"type": "array", "items": _str}, "order_rms": {"type": "object"}},
    ),
    "simulate": _obj(
        {"model": {"type": "object"}, "seed": {"type": "integer"}, "duration_s": _nnum,
         "n_tags": _int, "tick_seconds": _nnum, "tags_path": _str, "tags_format": _str,
         "expected_afterpulse_probability": _nnum},
    ),
    "jitter": _obj(
        {"bin_width_s": _nnum, "fwhm_seconds": {"type": "number", "exclusiveMinimum": 0},
         "peak_bin_center_seconds": _num, "left_seconds": _num, "right_seconds": _num,
         "multimodal": _bool, "degenerate": _bool},
        {"input": _str, "sigma_s": _nnum, "n": _int, "seed": {"type": "integer"}},
    ),
    "efficiency": _obj(
        {"detected_rate_cps": _nnum, "dcr_cps": _nnum, "laser_power_w": _nnum,
         "wavelength_m": _nnum, "pulse_rate_hz": _nnum, "eta": _nnum,
         "eta_band": {"type": "array", "items": _nnum, "minItems": 2, "maxItems": 2},
         "photons_per_second": _nnum, "photons_per_pulse": {"type": ["number", "null"]}},
    ),
    "breakdown": _obj(
        {"input": _str, "v_bd": _num, "slope": _num, "intercept": _num, "x_at_zero": _num,
         "included": {"type": "array", "items": _int, "minItems": 3},
         "residuals": {"type": "array", "items": _num}, "rms": _nnum},
    ),
    "blackbody": _obj(
        {"temperature_k": _nnum, "cutoff_wavelength_m": _nnum, "aperture_area_m2": _nnum,
         "photons_per_second": _nnum, "photons_per_hour": _nnum},
    ),
    "keyrate": _obj(
        {"scenario": {"type": "object"},
         "evaluation": {
             "type": "object",
             "required": ["singles_cps", "true_coincidences_cps", "accidental_coincidences_cps",
                          "snr", "qber", "key_rate_bps"],
             "properties": {
                 "singles_cps": {"type": "array", "items": _nnum, "minItems": 2, "maxItems": 2},
                 "true_coincidences_cps": _nnum, "accidental_coincidences_cps": _nnum,
                 "snr": {"type": ["number", "null"]},
                 "qber": {"type": "number", "minimum": 0, "maximum": 0.5},
                 "key_rate_bps": _nnum,
             },
         }},
        {"cutoff_db": {"type": ["number", "null"]}, "sweep_flags": {"type": "array", "items": _str},
         "sweep": {"type": "object"}},
    ),
}
