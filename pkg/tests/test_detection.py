import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_scenario, seeds
from precert.detection import (
    FLAG_SIGNAL,
    HERALD_FLAG,
    DEFAULT_DETECTORS,
    TRIPLE,
    CoincidenceWindow,
    DetectorSpec,
    LossBudget,
    Mode,
    ScenarioConfig,
    analytic_rates,
    config_heralding_efficiency,
    db_to_transmission,
    fidelity_vs_loss,
    herald_inputs,
    heralding_efficiency,
    pair_capture,
    record_heralding_efficiency,
    snr_estimate,
    threshold_crossing,
)
from precert.errors import DomainError, UndefinedHeraldingError, UnreachableThresholdError
from precert.experiments import direct_scenario, improved_1e3dark


def test_db_conversion():
    assert db_to_transmission(10) == pytest.approx(0.1)
    assert db_to_transmission(0) == 1.0


def test_default_system_efficiencies():
    coupling = db_to_transmission(5)
    system = [d.efficiency * coupling for d in DEFAULT_DETECTORS[:4]]
    np.testing.assert_allclose(system, [0.10, 0.14, 0.19, 0.19])


def test_detector_validation():
    with pytest.raises(DomainError):
        DetectorSpec("D1", 1.4)
    with pytest.raises(DomainError):
        DetectorSpec("D1", 0.5, dark_rate=-1)
    with pytest.raises(DomainError):
        DetectorSpec("D9", 0.5)
    with pytest.raises(DomainError):
        LossBudget(channel_loss_db=-3)
    with pytest.raises(DomainError):
        CoincidenceWindow(0)


def test_heralding_efficiency_examples():
    assert heralding_efficiency(0.19, 0.0, 1e-6) == pytest.approx(0.19)
    assert heralding_efficiency(0.72, 0.056, 1.0) == pytest.approx(0.72 / 1.056)
    assert heralding_efficiency(0.72, 0.056, 1.0) == pytest.approx(0.6818, abs=1e-4)
    assert heralding_efficiency(0.4, 1e-3, 1e-3) == pytest.approx(0.2)
    with pytest.raises(UndefinedHeraldingError):
        heralding_efficiency(0.5, 0.0, 0.0)


@given(st.floats(0, 1), st.floats(0, 1), st.floats(1e-12, 1))
def test_heralding_efficiency_bounded(eta, p_dark, p_flag):
    assert 0 <= heralding_efficiency(eta, p_dark, p_flag) <= eta


def _conditional(config):
    """Signal & flag & D5 over flag & D5, counting only genuine flag photons."""
    return record_heralding_efficiency(analytic_rates(config))


def test_eq4_matches_rate_ratio_on_random_configs():
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(500):
        c = random_scenario(rng)
        try:
            a = config_heralding_efficiency(c)
        except UndefinedHeraldingError:
            continue
        worst = max(worst, abs(a - _conditional(c)))
    assert worst <= 1e-9


def test_direct_mode_without_darks_is_linear_in_loss():
    c = direct_scenario(ScenarioConfig()).with_detectors(dark_rate=0.0)
    rates = []
    for db in (0, 10, 20, 40, 80):
        r = analytic_rates(c.with_channel_loss(db)).coincidences[HERALD_FLAG]
        # photon accidentals from other pairs also scale with the transmission
        assert r.noise == 0
        rates.append(r.total)
    np.testing.assert_allclose(np.array(rates) / rates[0], 10 ** (-np.array([0, 10, 20, 40, 80]) / 10), rtol=1e-12)


def test_default_triple_rate():
    rate = analytic_rates(ScenarioConfig()).coincidences[TRIPLE].total
    assert 0.15 <= rate <= 0.6


def test_direct_rate_saturates():
    c = direct_scenario(ScenarioConfig())
    r = [analytic_rates(c.with_channel_loss(db)).coincidences[HERALD_FLAG].total for db in (59.5, 60.5)]
    slope = (math.log10(r[0]) - math.log10(r[1])) / 0.1
    assert abs(slope) < 0.1


def test_accidental_formula():
    c = ScenarioConfig().with_detectors(jitter=0.0)
    rec = analytic_rates(c)
    fs = rec.coincidences[FLAG_SIGNAL]
    rf = rec.singles["D1"] + rec.singles["D2"]
    rs = rec.singles["D3"] + rec.singles["D4"]
    assert fs.accidental == pytest.approx(rf * rs * c.window.width, rel=1e-12)


@settings(max_examples=40, deadline=None)
@given(seeds)
def test_record_invariants(seed):
    rec = analytic_rates(random_scenario(np.random.default_rng(seed)))
    for c in rec.coincidences.values():
        assert c.true >= 0 and c.accidental >= 0 and 0 <= c.noise <= c.total
        assert c.total == pytest.approx(c.true + c.accidental)


@settings(max_examples=40, deadline=None)
@given(seeds)
def test_losses_commute(seed):
    rng = np.random.default_rng(seed)
    c = random_scenario(rng)
    b = c.budget
    total = b.coupling_before_pdc_db + b.pdc_efficiency_db + b.channel_loss_db
    share = rng.dirichlet(np.ones(3)) * total
    moved = replace(c, budget=replace(b, coupling_before_pdc_db=share[0], pdc_efficiency_db=share[1], channel_loss_db=share[2]))
    r1, r2 = analytic_rates(c), analytic_rates(moved)
    for p in (HERALD_FLAG, FLAG_SIGNAL, TRIPLE):
        assert r2.coincidences[p].true == pytest.approx(r1.coincidences[p].true, rel=1e-12, abs=1e-300)


@settings(max_examples=30, deadline=None)
@given(seeds)
def test_heralding_monotone(seed):
    rng = np.random.default_rng(seed)
    c = random_scenario(rng).with_detectors(jitter=0.0)
    etas = [config_heralding_efficiency(c.with_channel_loss(db)) for db in np.linspace(0, 60, 13)]
    assert np.all(np.diff(etas) <= 1e-15)
    darker = replace(c, detectors=tuple(replace(d, dark_rate=2 * d.dark_rate + 1) for d in c.detectors))
    assert config_heralding_efficiency(darker) <= config_heralding_efficiency(c)
    narrow = replace(c, window=CoincidenceWindow(c.window.width / 2, c.window.herald_width / 2))
    assert config_heralding_efficiency(narrow) >= config_heralding_efficiency(c)


def test_fidelity_vs_loss_examples():
    c = ScenarioConfig().with_detectors(dark_rate=0.0)
    assert fidelity_vs_loss(c, 0.93) == pytest.approx(0.93)
    # equal signal and noise: F = (1 + 1/2)/2
    rec = analytic_rates(ScenarioConfig())
    coinc = rec.coincidences[TRIPLE]
    fake = replace(coinc, true=coinc.noise, accidental=coinc.noise)
    rec.coincidences[TRIPLE] = fake
    assert fidelity_vs_loss(ScenarioConfig(), 1.0, rec) == pytest.approx(0.75)
    rec.coincidences[TRIPLE] = replace(coinc, true=0.0, accidental=coinc.noise)
    assert fidelity_vs_loss(ScenarioConfig(), 0.9, rec) == pytest.approx(0.5)


def test_fidelity_vs_loss_monotone_and_bounded():
    c = ScenarioConfig()
    f = [fidelity_vs_loss(c.with_channel_loss(db), 0.9) for db in range(0, 40, 2)]
    assert np.all(np.diff(f) <= 1e-15)
    assert all(0.5 <= x <= 0.9 for x in f)


def test_threshold_zero_darks_unreachable():
    c = improved_1e3dark(ScenarioConfig()).with_detectors(dark_rate=0.0)
    eta = config_heralding_efficiency(c)
    with pytest.raises(UnreachableThresholdError):
        threshold_crossing(c, eta - 0.01)
    assert config_heralding_efficiency(c.with_channel_loss(80)) == pytest.approx(eta)


def test_threshold_improved_detectors():
    c = improved_1e3dark(ScenarioConfig())
    assert herald_inputs(c)[0] == pytest.approx(0.72)
    assert threshold_crossing(c, 0.66) == pytest.approx(35, abs=3)


def test_doubling_darks_shifts_crossing_by_3db():
    c = improved_1e3dark(ScenarioConfig())
    base = threshold_crossing(c, 0.66, tol_db=1e-4)
    flag = ("D1", "D2")
    doubled = replace(c, detectors=tuple(replace(d, dark_rate=2 * d.dark_rate) if d.label in flag else d for d in c.detectors))
    shift = threshold_crossing(doubled, 0.66, tol_db=1e-4) - base
    assert shift == pytest.approx(-10 * math.log10(2), abs=0.01)


def test_threshold_above_start_unreachable():
    with pytest.raises(UnreachableThresholdError):
        threshold_crossing(ScenarioConfig(), 0.66)


def test_pair_capture_limits():
    assert pair_capture(1e-9, 0, 0) == 1.0
    assert pair_capture(4e-10, 1e-10, 0) == pytest.approx(math.erf(2 / math.sqrt(2)))


def test_snr_window_scaling():
    c = ScenarioConfig().with_detectors(jitter=1e-12)
    s1, _ = snr_estimate(c)
    s2, _ = snr_estimate(replace(c, window=replace(c.window, width=2 * c.window.width)))
    assert s2 == pytest.approx(s1 / 2, rel=1e-3)


def test_snr_without_dark_counts():
    # only multi-pair accidentals remain
    snr, hist = snr_estimate(ScenarioConfig().with_detectors(dark_rate=0.0))
    assert snr > 1e6
    assert hist.edges[0] <= -50e-9 and hist.edges[-1] >= 50e-9
    silent = ScenarioConfig(alice_detected_singles=0.0).with_detectors(dark_rate=0.0)
    assert snr_estimate(silent)[0] == math.inf


def test_snr_histogram_peak_centered():
    c = ScenarioConfig().with_detectors(jitter=200e-12)
    _, hist = snr_estimate(c)
    assert np.argmax(hist.rates) == len(hist.rates) // 2
    assert hist.centers[len(hist.rates) // 2] == pytest.approx(0, abs=1e-15)


def test_scenario_validation():
    with pytest.raises(DomainError):
        ScenarioConfig(detectors=DEFAULT_DETECTORS[:3] + DEFAULT_DETECTORS[4:])
    with pytest.raises(DomainError):
        ScenarioConfig(alice_detected_singles=3e7)
    direct = ScenarioConfig(mode=Mode.DIRECT, detectors=DEFAULT_DETECTORS[:2] + DEFAULT_DETECTORS[4:])
    assert direct.mode is Mode.DIRECT
