"""Single-photon detector characterization from time-tag records."""

__version__ = "0.1.0"

from .errors import InputError, NumericError, SpadlabError
from .timetag import TagStream, load_tags, dump_tags, save_tags, merge_sessions, stream_stats
from .histograms import (
    BinGrid, RateHistogram, make_exp_grid, make_uniform_grid,
    adjacent_interval_histogram, long_time_histogram,
    estimate_dcr_tail, extract_dead_recharge, afterpulse_probability,
    summarize_afterpulsing, dcr_from_counter,
)
from .fitting import TrapFit, FwhmResult, LinearExtrapolation, select_fit_start, fit_trap_decay, fwhm, linear_extrapolate_zero
from .simulate import DetectorModel, PulseTrain, simulate_dark, simulate_illuminated, expected_afterpulse_probability
from .radiometry import EfficiencyInput, BlackbodyQuery, detection_efficiency, blackbody_photon_rate, breakdown_voltage
from .qkd import LinkScenario, LinkEvaluation, evaluate_scenario, sweep_loss

__all__ = [
    "InputError", "NumericError", "SpadlabError",
    "TagStream", "load_tags", "dump_tags", "save_tags", "merge_sessions", "stream_stats",
    "BinGrid", "RateHistogram", "make_exp_grid", "make_uniform_grid",
    "adjacent_interval_histogram", "long_time_histogram",
    "estimate_dcr_tail", "extract_dead_recharge", "afterpulse_probability",
    "summarize_afterpulsing", "dcr_from_counter",
    "TrapFit", "FwhmResult", "LinearExtrapolation", "select_fit_start", "fit_trap_decay", "fwhm",
    "linear_extrapolate_zero",
    "DetectorModel", "PulseTrain", "simulate_dark", "simulate_illuminated",
    "expected_afterpulse_probability",
    "EfficiencyInput", "BlackbodyQuery", "detection_efficiency", "blackbody_photon_rate",
    "breakdown_voltage",
    "LinkScenario", "LinkEvaluation", "evaluate_scenario", "sweep_loss",
]
