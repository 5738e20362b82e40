import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from spadlab.errors import InputError
from spadlab.qkd import LinkScenario, binary_entropy, evaluate_scenario, sweep_loss


def test_binary_entropy_values():
    assert binary_entropy(0.5) == 1.0
    assert binary_entropy(0.0) == 0.0
    assert binary_entropy(1.0) == 0.0
    assert binary_entropy(0.11) == pytest.approx(0.4999, abs=1e-3)


@given(st.floats(0.0, 1.0))
def test_binary_entropy_matches_oracle(p):
    assert binary_entropy(p) == pytest.approx(oracles.binary_entropy(p), abs=1e-12)


def test_nominal_link_point():
    e = evaluate_scenario(LinkScenario())
    signal = e.singles_cps[0] - 1.0
    assert signal == pytest.approx(3.15, abs=0.01)
    assert e.singles_cps[0] == e.singles_cps[1]
    assert e.true_coincidences_cps == pytest.approx(1.99e-7, rel=0.01)
    assert e.accidental_coincidences_cps == pytest.approx(1.7e-8, rel=0.02)
    assert e.snr == pytest.approx(11.5, rel=0.01)
    assert 0 <= e.qber <= 0.5


def test_noiseless_limit():
    s = LinkScenario(pair_rate_cps=1e3, loss_db_per_link=(0, 0), dcr_cps_per_station=0.0,
                     intrinsic_error=0.0)
    e = evaluate_scenario(s)
    assert e.qber < 1e-5
    assert e.key_rate_bps == pytest.approx(0.5 * e.true_coincidences_cps, rel=1e-3)


def test_huge_dark_rate_kills_key():
    e = evaluate_scenario(LinkScenario(dcr_cps_per_station=1e9))
    assert e.snr < 1e-6
    assert e.key_rate_bps == 0.0
    assert e.qber == pytest.approx(0.5, abs=1e-3)


def test_no_coincidences_flagged():
    e = evaluate_scenario(LinkScenario(pair_rate_cps=0.0, dcr_cps_per_station=0.0))
    assert e.snr is None and e.key_rate_bps == 0.0
    assert "no-coincidences" in e.flags


def test_scenario_validation():
    with pytest.raises(InputError):
        LinkScenario(loss_db_per_link=(-1.0, 3.0))
    with pytest.raises(InputError):
        LinkScenario(detector_efficiency=1.5)
    with pytest.raises(InputError):
        LinkScenario(coincidence_window_s=0.0)
    with pytest.raises(InputError):
        LinkScenario.from_dict({"bogus": 1})


@given(st.floats(0, 90), st.floats(0, 90), st.floats(0, 50))
def test_link_symmetry(a, b, dcr):
    x = evaluate_scenario(LinkScenario(loss_db_per_link=(a, b), dcr_cps_per_station=dcr))
    y = evaluate_scenario(LinkScenario(loss_db_per_link=(b, a), dcr_cps_per_station=dcr))
    assert x.singles_cps == y.singles_cps[::-1]
    assert (x.true_coincidences_cps, x.snr, x.qber, x.key_rate_bps) == pytest.approx(
        (y.true_coincidences_cps, y.snr, y.qber, y.key_rate_bps), rel=1e-12)


def test_monotone_in_loss_dcr_window():
    losses = np.linspace(40, 90, 26)
    for dcr in (0.0, 1.0, 30.0):
        keys = [evaluate_scenario(LinkScenario(loss_db_per_link=(x, x), dcr_cps_per_station=dcr)).key_rate_bps
                for x in losses]
        assert np.all(np.diff(keys) <= 0)
    for loss in (50.0, 65.0, 69.0):
        keys = [evaluate_scenario(LinkScenario(loss_db_per_link=(loss, loss), dcr_cps_per_station=d)).key_rate_bps
                for d in (0.0, 0.1, 1, 10, 100, 1000)]
        assert np.all(np.diff(keys) <= 0)
        keys = [evaluate_scenario(LinkScenario(loss_db_per_link=(loss, loss), coincidence_window_s=w)).key_rate_bps
                for w in (1e-10, 1e-9, 1e-8, 1e-7)]
        assert np.all(np.diff(keys) <= 0)


def test_snr_threshold_brackets():
    # scan dcr at the nominal link: key must be on above snr 8.1 and off below snr 3
    for dcr in np.geomspace(0.01, 100, 200):
        e = evaluate_scenario(LinkScenario(dcr_cps_per_station=float(dcr)))
        if e.snr >= 8.1:
            assert e.key_rate_bps > 0
        if e.snr <= 3:
            assert e.key_rate_bps == 0


def test_sweep_cutoff_and_monotone_curve():
    sw = sweep_loss(LinkScenario(), (120.0, 170.0), 101)
    assert abs(sw.cutoff_db - 148.0) <= 4.0
    assert np.all(np.diff(sw.key_rate_bps) <= 0)
    zero = sweep_loss(LinkScenario(dcr_cps_per_station=0.0), (120.0, 250.0), 131)
    assert zero.cutoff_db > sw.cutoff_db


def test_sweep_cutoff_resolution():
    s = LinkScenario()
    sw = sweep_loss(s, (120.0, 170.0), 11)
    per = lambda tot: (tot - 2 * s.detector_loss_db) / 2
    key = lambda tot: evaluate_scenario(s.replace(loss_db_per_link=(per(tot), per(tot)))).key_rate_bps
    assert key(sw.cutoff_db) > 0
    assert key(sw.cutoff_db + 0.1) == 0


def test_sweep_preconditions_and_flags():
    with pytest.raises(InputError):
        sweep_loss(LinkScenario(), (150.0, 120.0))
    with pytest.raises(InputError):
        sweep_loss(LinkScenario(), (120.0, 150.0), steps=1)
    sw = sweep_loss(LinkScenario(), (0.0, 10.0), 3)
    assert "clamped-negative-link-loss" in sw.flags
    assert "cutoff-beyond-range" in sw.flags
    assert sweep_loss(LinkScenario(), (300.0, 310.0), 3).cutoff_db is None


def test_cutoff_decreases_with_dcr():
    cuts = [sweep_loss(LinkScenario(dcr_cps_per_station=d), (60.0, 200.0), 141).cutoff_db
            for d in (0.1, 0.3, 1, 10, 100)]
    assert all(a > b for a, b in zip(cuts, cuts[1:]))


def test_per_detector_dark_counts_and_jitter_option():
    s = LinkScenario(dcr_per_detector=True)
    assert s.station_dcr == 4.0
    assert evaluate_scenario(s).snr < evaluate_scenario(LinkScenario()).snr
    j = LinkScenario(jitter_sigma_s=361e-12)
    assert j.window_acceptance == pytest.approx(math.erf(0.5e-9 / (2 * 361e-12)))
    assert evaluate_scenario(j).true_coincidences_cps < evaluate_scenario(LinkScenario()).true_coincidences_cps


def test_presets_load():
    geo = LinkScenario.preset("geo-dual-downlink")
    assert geo.pair_rate_cps == 5e7 and geo.loss_db_per_link == (69.0, 69.0)
    canary = LinkScenario.preset("canary-143km")
    assert 30 <= canary.loss_db_per_link[1] <= 35
    assert LinkScenario.from_dict(canary.to_dict()) == canary
    with pytest.raises(InputError):
        LinkScenario.preset("nope")


def test_csv_layout():
    sw = sweep_loss(LinkScenario(), (140.0, 160.0), 5)
    lines = sw.to_csv().splitlines()
    assert lines[0] == "loss_db,key_rate_bps,snr,qber"
    assert len(lines) == 6
    assert float(lines[1].split(",")[0]) == 140.0
