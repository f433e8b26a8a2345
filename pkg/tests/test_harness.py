import math

import numpy as np
import pytest

from precert import __version__
from precert.cli import main
from precert.config import (
    CALIBRATED_NOISE,
    ExperimentSpec,
    ResultTable,
    Sweep,
    TomographySpec,
    load_spec,
    parse_spec,
)
from precert.detection import (
    DEFAULT_DETECTORS,
    CoincidenceWindow,
    LossBudget,
    Mode,
    ScenarioConfig,
)
from precert.errors import CalibrationError, DomainError, SpecParseError, SpecValidationError
from precert.experiments import (
    REFERENCE_FIDELITIES,
    PROCTOMO_MODES,
    calibrate_noise,
    fit_noise,
    model_fidelities,
    run_fig4,
    run_fig5,
    run_heralding,
    run_proctomo,
)
from precert.protocol import ChannelMode, NoiseParams

# -- spec parsing -------------------------------------------------------------


def test_minimal_spec_gives_default_config():
    spec = parse_spec('mode = "precert"\n')
    c = spec.scenario
    assert c.mode is Mode.PRECERT
    assert c.budget == LossBudget(6, 55, 5, 5, 0)
    assert c.window == CoincidenceWindow(2.3e-9, 20e-9)
    assert c.detectors == DEFAULT_DETECTORS
    assert c.alice_detected_singles == 1.2e7
    assert c.noise == CALIBRATED_NOISE
    assert spec.seed is None and spec.sweep is None


def test_negative_db_normalized():
    spec = parse_spec("[loss]\npdc_efficiency_db = -55\ncoupling_before_pdc_db = -6\n")
    assert spec.scenario.budget == LossBudget()


def test_full_spec(tmp_path):
    text = """
mode = "precert"
seed = 12
engine = "montecarlo"
duration = 30.0
output = "out/fig4.csv"

[source]
alice_detected_singles = 1e6
alice_herald_rate = 2e6
input_state = "H"

[window]
width_ns = 1.0

[detectors.D1]
efficiency = 0.5
jitter_ps = 100

[noise]
pockels_phase_error = 0.1

[sweep]
variable = "total_loss_db"
start = 70
stop = 90
step = 10

[tomography]
counts_per_setting = 5000
resamples = 120
"""
    path = tmp_path / "spec.toml"
    path.write_text(text)
    spec = load_spec(path)
    assert spec.seed == 12 and spec.engine == "montecarlo" and spec.duration == 30.0
    assert spec.scenario.detector("D1").efficiency == 0.5
    assert spec.scenario.detector("D1").jitter == pytest.approx(1e-10)
    assert spec.scenario.detector("D2") == DEFAULT_DETECTORS[1]
    assert spec.scenario.noise.pockels_phase_error == 0.1
    assert spec.scenario.noise.residual_rotation == CALIBRATED_NOISE.residual_rotation
    assert list(spec.sweep.values()) == [70, 80, 90]
    assert spec.tomography == TomographySpec(5000, 120)


@pytest.mark.parametrize(
    "text, field",
    [
        ("[detectors.D1]\nefficiency = 1.4\n", "detectors.D1.efficiency"),
        ("[detectors.D3]\ndark_rate = -5\n", "detectors.D3.dark_rate"),
        ("colour = 1\n", "colour"),
        ("[loss]\nfiber_db = 3\n", "loss.fiber_db"),
        ('mode = "teleport"\n', "mode"),
        ("[sweep]\nvariable = 'total_loss_db'\nstart = 5\nstop = 1\nstep = 1\n", "sweep.stop"),
        ("[sweep]\nvariable = 'total_loss_db'\nstart = 0\nstop = 1\nstep = 0\n", "sweep.step"),
        ("[sweep]\nvariable = 'total_loss_db'\nstart = 0\n", "sweep.stop"),
        ("[tomography]\nresamples = 10\n", "tomography.resamples"),
        ("[noise]\ninterferometer_dephasing = 2\n", "noise.interferometer_dephasing"),
        ("[detectors.D7]\nefficiency = 0.5\n", "detectors.D7"),
        ("[window]\nwidth_ns = 'wide'\n", "window.width_ns"),
    ],
)
def test_validation_errors_name_field(text, field):
    with pytest.raises(SpecValidationError) as info:
        parse_spec(text)
    assert info.value.field == field
    assert str(info.value).startswith(field + ":")


def test_parse_error_location():
    with pytest.raises(SpecParseError) as info:
        parse_spec('mode = "precert"\nseed = = 3\n')
    assert info.value.line == 2
    assert info.value.column is not None


def test_missing_file():
    with pytest.raises(SpecValidationError):
        load_spec("/nonexistent/spec.toml")


def test_seed_required_for_stochastic_runs():
    with pytest.raises(SpecValidationError):
        ExperimentSpec().require_seed()
    with pytest.raises(SpecValidationError):
        run_proctomo(ExperimentSpec(tomography=TomographySpec()))


def test_spec_hash_stable_and_sensitive():
    a = parse_spec("seed = 1\n")
    assert a.hash() == parse_spec("seed = 1\n").hash()
    assert a.hash() != parse_spec("seed = 2\n").hash()


# -- result tables --------------------------------------------------------------


def test_result_table_csv_round_trip(tmp_path):
    spec = ExperimentSpec(seed=4)
    t = ResultTable.build(("a", "b"), [[1.0, math.nan], [0.1, 2e-30]], spec, note="x")
    assert t.metadata["spec_hash"] == spec.hash()
    assert t.metadata["seed"] == 4
    assert t.metadata["version"] == __version__
    path = tmp_path / "t.csv"
    t.to_csv(path)
    text = path.read_text()
    assert text.startswith("# spec_hash=")
    back = ResultTable.from_csv(path)
    assert back.columns == ("a", "b")
    np.testing.assert_array_equal(back.rows, t.rows)


def test_result_table_rectangular():
    with pytest.raises(ValueError):
        ResultTable(("a", "b"), [1.0, 2.0, 3.0])


# -- calibration --------------------------------------------------------------


def test_calibration_of_perfect_targets_gives_zero_noise():
    noise = calibrate_noise({k: 1.0 for k in REFERENCE_FIDELITIES})
    assert noise.interferometer_dephasing == pytest.approx(0, abs=1e-6)
    assert noise.pockels_phase_error == pytest.approx(0, abs=1e-3)
    assert noise.residual_rotation == pytest.approx(0, abs=1e-3)


@pytest.mark.parametrize("eps", [0.3, 0.8, 1.5])
def test_calibration_recovers_phase_error(eps):
    truth = NoiseParams(pockels_phase_error=eps)
    targets = model_fidelities(truth)
    noise = calibrate_noise(targets)
    assert abs(noise.pockels_phase_error) == pytest.approx(eps, abs=1e-3)


def test_reference_calibration():
    result = fit_noise(REFERENCE_FIDELITIES)
    assert result.max_residual <= 0.02
    n = result.noise
    assert n.interferometer_dephasing == pytest.approx(CALIBRATED_NOISE.interferometer_dephasing, abs=1e-4)
    assert n.pockels_phase_error == pytest.approx(CALIBRATED_NOISE.pockels_phase_error, abs=1e-4)
    assert abs(n.residual_rotation) == pytest.approx(CALIBRATED_NOISE.residual_rotation, abs=1e-4)


def test_unexplainable_targets_fail():
    # perfect heralded channels cannot average to a poor pooled channel
    with pytest.raises(CalibrationError) as info:
        fit_noise({"F_I_herald_D": 1.0, "F_Z_herald_A": 1.0, "F_I_pooled_ff": 1.0, "F_IZ_pooled": 0.2})
    assert info.value.result.max_residual > 0.02


def test_calibration_target_domain():
    with pytest.raises(DomainError):
        fit_noise({k: 0.0 for k in REFERENCE_FIDELITIES})


# -- runs ---------------------------------------------------------------------


def test_fig4_columns_and_reproducibility():
    spec = ExperimentSpec(seed=3, sweep=Sweep("total_loss_db", 60, 100, 10))
    a, b = run_fig4(spec), run_fig4(spec, workers=3)
    assert a.columns == (
        "total_loss_db", "added_channel_loss_db", "direct_rate", "precert_rate",
        "direct_fidelity_H", "direct_fidelity_D", "precert_fidelity_H", "precert_fidelity_D",
    )
    assert a.same_data(b)
    assert math.isnan(a.column("precert_rate")[0])
    assert a.column("precert_rate")[-1] > 0


def test_fig4_zero_darks_constant_fidelity():
    base = ScenarioConfig(noise=CALIBRATED_NOISE).with_detectors(dark_rate=0.0)
    spec = ExperimentSpec(scenario=base, sweep=Sweep("total_loss_db", 80, 120, 10))
    t = run_fig4(spec)
    for col in ("direct_fidelity_H", "direct_fidelity_D", "precert_fidelity_H", "precert_fidelity_D"):
        values = t.column(col)
        np.testing.assert_allclose(values, values[0], rtol=1e-12)


def test_fig4_rates_agree_with_montecarlo():
    # a bright source keeps the sampling cheap and the rates large
    base = ScenarioConfig(
        alice_detected_singles=2e5, alice_herald_rate=5e5, budget=LossBudget(1, 20, 1, 1, 0), noise=CALIBRATED_NOISE
    )
    spec = ExperimentSpec(scenario=base, seed=5, sweep=Sweep("total_loss_db", 35, 45, 5))
    ana = run_fig4(spec)
    mc = run_fig4(spec, engine="montecarlo", duration=40.0, workers=2)
    for col in ("direct_rate", "precert_rate"):
        x, y = ana.column(col), mc.column(col)
        ok = ~np.isnan(x)
        assert ok.any()
        se = np.sqrt(x[ok] / 40.0)
        assert np.all(np.abs(y[ok] - x[ok]) < 4 * se), (col, x, y)


def test_montecarlo_runs_bit_identical():
    spec = ExperimentSpec(seed=8, sweep=Sweep("total_loss_db", 10, 30, 10))
    a = run_fig4(spec, engine="montecarlo", duration=0.01)
    b = run_fig4(spec, engine="montecarlo", duration=0.01, workers=3)
    assert a.same_data(b)


def test_fig5_table():
    spec = ExperimentSpec(sweep=Sweep("channel_loss_db", 0, 50, 1))
    t = run_fig5(spec)
    assert t.columns == ("channel_loss_db", "eta_h_current", "eta_h_1dark", "eta_h_1e-3dark", "below_threshold")
    assert 5e-4 <= t.column("eta_h_current")[0] <= 5e-3
    assert t.metadata["crossing_current_db"] == "unreachable"
    assert t.metadata["crossing_1e-3dark_db"] == pytest.approx(35, abs=3)
    marked = t.column("channel_loss_db")[t.column("below_threshold") == 1]
    assert marked.size == 1 and marked[0] == pytest.approx(t.metadata["crossing_1e-3dark_db"], abs=1)


def test_fig5_zero_darks_constant():
    base = ScenarioConfig().with_detectors(dark_rate=0.0)
    t = run_fig5(ExperimentSpec(scenario=base), variants=("current",))
    eta_signal = run_heralding(ExperimentSpec(scenario=base)).column("eta_signal")[0]
    np.testing.assert_allclose(t.column("eta_h_current"), eta_signal, rtol=1e-9)


def _proctomo(noise, seed=1):
    spec = ExperimentSpec(scenario=ScenarioConfig(noise=noise), seed=seed, tomography=TomographySpec(1e4, 100))
    return run_proctomo(spec)


def test_proctomo_zero_noise():
    t = _proctomo(NoiseParams())
    rows = {m: t.rows[i] for i, m in enumerate(PROCTOMO_MODES)}
    col = {c: i for i, c in enumerate(t.columns)}
    ff = rows[ChannelMode.POOLED_FF]
    assert ff[col["F_I"]] == pytest.approx(1.0, abs=max(3 * ff[col["F_I_std"]], 2e-3))
    a = rows[ChannelMode.HERALD_A]
    assert a[col["F_Z"]] > 0.995 and a[col["F_I"]] < 0.005
    assert len([c for c in t.columns if c.startswith("chi_")]) == 32
    assert t.metadata["modes"].startswith("0=herald-D-only")


def test_cli_exit_codes(tmp_path, capsys, monkeypatch):
    good = tmp_path / "good.toml"
    good.write_text("seed = 1\n[sweep]\nvariable = 'channel_loss_db'\nstart = 0\nstop = 2\nstep = 1\n")
    assert main(["validate-spec", "--spec", str(good)]) == 0
    assert capsys.readouterr().out.startswith("ok ")
    bad = tmp_path / "bad.toml"
    bad.write_text("seed = [\n")
    assert main(["validate-spec", "--spec", str(bad)]) == 2
    invalid = tmp_path / "invalid.toml"
    invalid.write_text("[detectors.D1]\nefficiency = 1.4\n")
    assert main(["fig4", "--spec", str(invalid)]) == 3
    assert main(["heralding", "--threshold", "0.66"]) == 5
    out = tmp_path / "fig5.csv"
    assert main(["fig5", "--spec", str(good), "--out", str(out)]) == 0
    assert ResultTable.from_csv(out).rows.shape == (3, 5)
    monkeypatch.setenv("PRECERT_OUTPUT_DIR", str(tmp_path / "env"))
    assert main(["heralding", "--spec", str(good)]) == 0
    assert (tmp_path / "env" / "heralding.csv").exists()


def test_cli_bit_identical_output(tmp_path, monkeypatch):
    monkeypatch.setenv("SOURCE_DATE_EPOCH", "1700000000")
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    spec = tmp_path / "s.toml"
    spec.write_text("seed = 2\nduration = 0.02\n[sweep]\nvariable = 'total_loss_db'\nstart = 10\nstop = 20\nstep = 10\n")
    assert main(["fig4", "--spec", str(spec), "--engine", "montecarlo", "--out", str(a)]) == 0
    assert main(["fig4", "--spec", str(spec), "--engine", "montecarlo", "--out", str(b), "--workers", "2"]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_cli_estimation_exit_code(monkeypatch):
    import precert.cli as cli
    from precert.errors import EstimationError

    def boom(*args, **kwargs):
        raise EstimationError("no convergence")

    monkeypatch.setattr(cli, "run_proctomo", boom)
    assert main(["proctomo", "--seed", "1"]) == 4
