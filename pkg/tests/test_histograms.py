import math
import warnings
from decimal import Decimal, getcontext

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import brute_adjacent, brute_long_time_pairs
from spadlab.errors import InputError
from spadlab.histograms import (
    RateHistogram, adjacent_interval_histogram, afterpulse_probability, dcr_from_counter,
    estimate_dcr_tail, extract_dead_recharge, long_time_histogram, make_exp_grid,
    make_uniform_grid, poisson_consistent, summarize_afterpulsing,
)
from spadlab.simulate import DetectorModel, duration_for_events, simulate_dark
from spadlab.timetag import TagStream, merge_sessions

TICK = 78.125e-12


# ---------------------------------------------------------------- grids

def test_default_grid_last_edge_high_precision():
    getcontext().prec = 50
    exact = Decimal("78.125e-12") * Decimal("1.2") ** 127
    g = make_exp_grid()
    assert g.nbins == 128
    assert g.edges[-1] == pytest.approx(float(exact), rel=1e-12)
    assert 0.88 < g.edges[-1] < 0.90


def test_small_grids():
    assert make_exp_grid(1.0, 2.0, 1).edges.tolist() == [0.0, 1.0]
    assert make_exp_grid(1.0, 2.0, 3).edges.tolist() == [0.0, 1.0, 2.0, 4.0]


def test_grid_rejects_bad_parameters():
    for args in [(1.0, 1.0, 3), (0.0, 1.2, 3), (1.0, 1.2, 0)]:
        with pytest.raises(InputError):
            make_exp_grid(*args)


# ---------------------------------------------------------------- adjacent

def test_adjacent_counting_example():
    us = round(1e-6 / TICK)
    s = TagStream(np.array([0, us, 2 * us]), TICK)
    h = adjacent_interval_histogram(s, make_uniform_grid(0.5e-6, 4))
    assert h.pair_counts.tolist() == [0, 0, 2, 0]
    assert h.n_starts == 2


def test_adjacent_single_tag_is_degenerate():
    with pytest.warns(UserWarning):
        h = adjacent_interval_histogram(TagStream(np.array([5])), make_uniform_grid(1e-6, 3))
    assert h.degenerate and h.total_pairs == 0


@given(st.lists(st.lists(st.integers(0, 5000), max_size=40).map(sorted), min_size=1, max_size=3))
@settings(max_examples=60, deadline=None)
def test_adjacent_matches_brute_force(groups):
    m = merge_sessions([TagStream(np.array(g, dtype=np.uint64), TICK) for g in groups])
    g = make_exp_grid(TICK, 1.5, 20)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        h = adjacent_interval_histogram(m, g)
    c, n = brute_adjacent(m.ticks, m.sessions, TICK, g.edges)
    assert h.pair_counts.tolist() == c.tolist() and h.n_starts == n


def test_adjacent_exponential_law_on_poisson_stream():
    r = 1000.0
    s = simulate_dark(DetectorModel(r), 1000.0, seed=11)
    g = make_uniform_grid(0.5e-3, 12)
    h = adjacent_interval_histogram(s, g)
    a, b = g.edges[:-1], g.edges[1:]
    expected = h.n_starts * (np.exp(-r * a) - np.exp(-r * b))
    assert poisson_consistent(h.pair_counts, expected, 4).all()


# ---------------------------------------------------------------- long-time

def test_long_time_window_example():
    sec = round(1.0 / TICK)
    s = TagStream(np.array([0, sec, 2 * sec, 3 * sec]), TICK)
    g = make_uniform_grid(0.5, 8)
    h = long_time_histogram(s, 10.0, g, session_end_s=[13.0])
    # start 0 -> {1,2,3}; start 1 -> {1,2}; start 2 -> {1}; start 3 -> {}
    assert h.n_starts == 4
    assert h.pair_counts.tolist() == [0, 0, 3, 0, 2, 0, 1, 0]
    c, n = brute_long_time_pairs(s.ticks, s.sessions, TICK, g.edges, 10.0, [13.0])
    assert c.tolist() == h.pair_counts.tolist() and n == 4


def test_no_full_window_is_rejected():
    s = TagStream(np.array([0, 10, 20]), TICK)
    with pytest.raises(InputError, match="shorten"):
        long_time_histogram(s, 1.0, make_uniform_grid(0.1, 5))


def test_no_pairs_across_sessions():
    a = TagStream(np.arange(0, 10**6, 1000, dtype=np.uint64), TICK)
    b = TagStream(np.arange(0, 10**6, 1000, dtype=np.uint64) + 5, TICK)
    m = merge_sessions([a, b])
    g = make_exp_grid(TICK, 1.5, 24)
    window = 1e-6
    h = long_time_histogram(m, window, g)
    ha = long_time_histogram(a, window, g)
    hb = long_time_histogram(b, window, g)
    assert np.array_equal(h.pair_counts, ha.pair_counts + hb.pair_counts)


def _random_stream(rng, n):
    scale = rng.choice([1e2, 1e4, 1e6, 1e8])
    gaps = np.floor(rng.exponential(scale, n))
    gaps[rng.random(n) < 0.05] = 0  # ties
    return np.cumsum(gaps).astype(np.uint64)


@pytest.mark.parametrize("engine", ["numba", "numpy"])
def test_long_time_matches_brute_force(engine):
    rng = np.random.default_rng(2024)
    for _ in range(15):
        t = _random_stream(rng, int(rng.integers(2, 1500)))
        g = make_exp_grid(TICK * rng.choice([1, 16, 1000]), rng.choice([1.2, 2.0]), int(rng.integers(5, 60)))
        window = float(g.edges[-1] * rng.choice([0.5, 1.0, 3.0]))
        s = TagStream(t, TICK)
        c, n = brute_long_time_pairs(t, s.sessions, TICK, g.edges, window)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            if n == 0:
                with pytest.raises(InputError):
                    long_time_histogram(s, window, g, engine=engine)
                continue
            h = long_time_histogram(s, window, g, engine=engine)
        assert h.n_starts == n
        assert h.pair_counts.tolist() == c.tolist()


@given(st.lists(st.integers(0, 3000), min_size=2, max_size=120).map(sorted),
       st.sampled_from([1.2, 1.5, 2.0]), st.integers(3, 20), st.integers(1, 8))
@settings(max_examples=80, deadline=None)
def test_pair_conservation_property(ticks, ratio, nbins, t0_ticks):
    s = TagStream(np.array(ticks, dtype=np.uint64), TICK)
    g = make_exp_grid(TICK * t0_ticks, ratio, nbins)
    window = float(g.edges[-1])
    c, n = brute_long_time_pairs(s.ticks, s.sessions, TICK, g.edges, window)
    if n == 0:
        return
    h = long_time_histogram(s, window, g)
    assert h.pair_counts.tolist() == c.tolist()


def test_exact_edge_lag_falls_in_upper_bin():
    # edges at whole ticks: a lag equal to an edge belongs to the upper bin
    g = make_exp_grid(4 * TICK, 2.0, 4)  # 0, 4, 8, 16, 32 ticks
    s = TagStream(np.array([0, 8, 10**6]), TICK)
    h = long_time_histogram(s, float(g.edges[-1]), g)
    assert h.pair_counts[2] == 1 and h.pair_counts[1] == 0


def test_workers_give_identical_result():
    s = simulate_dark(DetectorModel(2000.0, 5e-7), 200.0, seed=3)
    h1 = long_time_histogram(s, 1.0)
    h4 = long_time_histogram(s, 1.0, workers=4)
    assert np.array_equal(h1.pair_counts, h4.pair_counts) and h1.n_starts == h4.n_starts


def _poisson_hist(rate=1000.0, n_events=10**6, seed=5):
    s = simulate_dark(DetectorModel(rate), n_events / rate, seed=seed)
    return long_time_histogram(s, 10.0)


@pytest.fixture(scope="module")
def poisson_hist():
    return _poisson_hist()


def test_poisson_stream_is_flat(poisson_hist):
    h = poisson_hist
    r = 1000.0
    expected = h.n_starts * r * h.effective_widths
    # pairs from one start are not independent of other starts' pairs; the
    # variance of a bin count grows by E/n_starts relative to Poisson
    ok = poisson_consistent(h.pair_counts, expected, 4.0, expected / h.n_starts)
    assert ok[1:].all()


def test_poisson_afterpulse_near_zero(poisson_hist):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        summ = summarize_afterpulsing(poisson_hist)
    assert summ.afterpulse_probability <= 5e-4
    assert summ.dead_time_s == 0.0


def test_tail_fraction_one_equals_mean_rate(poisson_hist):
    d = estimate_dcr_tail(poisson_hist, 1.0)
    assert abs(d - 1000.0) < 4 * 1000.0 * math.sqrt(1 / poisson_hist.total_pairs + 1 / poisson_hist.n_starts)


def test_doubling_record_changes_rates_within_error():
    m = DetectorModel(1000.0)
    s1 = simulate_dark(m, 200.0, seed=8)
    s2 = simulate_dark(m, 400.0, seed=8)
    g = make_exp_grid(1e-6, 1.5, 20)
    h1 = long_time_histogram(s1, 1.0, g)
    h2 = long_time_histogram(s2, 1.0, g)
    sig = np.hypot(h1.rate_sigma, h2.rate_sigma)
    assert np.all(np.abs(h1.rate_cps - h2.rate_cps) <= 4 * sig + 1e-12)


# ---------------------------------------------------------------- tail, dead time, area

def test_flat_synthetic_tail():
    g = make_exp_grid()
    h = RateHistogram.from_rates(g, np.full(g.nbins, 100.0))
    assert estimate_dcr_tail(h) == pytest.approx(100.0, rel=1e-12)
    assert afterpulse_probability(h, 100.0) == 0.0


def test_empty_tail_rejected():
    g = make_uniform_grid(1.0, 4)
    h = RateHistogram(g, np.array([5, 0, 0, 0]), 10)
    with pytest.raises(InputError):
        estimate_dcr_tail(h, 0.5)
    with pytest.raises(InputError):
        estimate_dcr_tail(h, 0.0)


def test_dead_recharge_synthetic():
    g = make_uniform_grid(0.25e-6, 40)
    rates = np.full(g.nbins, 100.0)
    rates[:4] = 0.0  # zero up to 1 us
    rates[g.centers.searchsorted(1.5e-6) - 1] = 5e4  # bin centred at 1.375 us
    peak_bin = int(np.argmax(rates))
    h = RateHistogram.from_rates(g, rates, n_starts=10**6)
    dead, rech = extract_dead_recharge(h)
    assert dead == pytest.approx(1e-6)
    assert rech == pytest.approx(g.centers[peak_bin] - 1e-6)
    # with the peak centred exactly at 1.5 us
    g = make_uniform_grid(1e-6, 10)
    rates = np.array([0, 5e4] + [100.0] * 8)
    dead, rech = extract_dead_recharge(RateHistogram.from_rates(g, rates))
    assert (dead, rech) == pytest.approx((1e-6, 0.5e-6))


def test_no_leading_zero_warns():
    g = make_uniform_grid(1e-6, 10)
    with pytest.warns(UserWarning):
        dead, _ = extract_dead_recharge(RateHistogram.from_rates(g, np.full(10, 50.0)))
    assert dead == 0.0


def test_dcr_from_counter_examples():
    assert dcr_from_counter([30], 100.0)[0] == pytest.approx(0.3)
    rate, (lo, hi) = dcr_from_counter([0], 100.0)
    assert rate == 0 and lo == 0 and hi == pytest.approx(3.689 / 100, rel=1e-3)
    assert dcr_from_counter([100, 100], 100.0)[0] == 1.0
    with pytest.raises(InputError):
        dcr_from_counter([], 1.0)


def test_csv_export_columns():
    g = make_uniform_grid(1.0, 2)
    h = RateHistogram(g, np.array([3, 4]), 2)
    lines = h.to_csv().splitlines()
    assert lines[0] == "bin_start_s,bin_end_s,pair_count,rate_cps"
    assert lines[1] == "0.0,1.0,3,1.5"


# ---------------------------------------------------------------- simulated temperature rows

@pytest.fixture(scope="module")
def table1_hists():
    out = {}
    for name in ("table1_-100C", "table1_-20C"):
        m = DetectorModel.bundled(name)
        s = simulate_dark(m, duration_for_events(m, 10**6), seed=21)
        out[name] = (m, long_time_histogram(s, 10.0))
    return out


def test_dead_time_recovered_within_one_bin(table1_hists):
    m, h = table1_hists["table1_-100C"]
    dead, _ = extract_dead_recharge(h)
    k = int(np.searchsorted(h.grid.edges, m.dead_time_s)) - 1
    assert abs(dead - m.dead_time_s) <= h.widths[k]


def test_afterpulse_probability_cold_row(table1_hists):
    _, h = table1_hists["table1_-100C"]
    summ = summarize_afterpulsing(h)
    assert abs(summ.afterpulse_probability - 2.78e-3) <= 0.8e-3


def test_dcr_tail_warm_row(table1_hists):
    m, h = table1_hists["table1_-20C"]
    assert estimate_dcr_tail(h) == pytest.approx(1212.0, rel=0.03)
