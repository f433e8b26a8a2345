"""Calibration and the sweep/tomography runs behind the CLI subcommands."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.optimize import minimize

from .config import ExperimentSpec, ResultTable, Sweep
from .detection import (
    FLAG_LABELS,
    SIGNAL_LABELS,
    Mode,
    ScenarioConfig,
    analytic_rates,
    config_heralding_efficiency,
    db_to_transmission,
    fidelity_vs_loss,
    herald_inputs,
    record_heralding_efficiency,
    state_pattern,
    threshold_crossing,
    transmission_to_db,
)
from .errors import CalibrationError, DomainError, UnreachableThresholdError
from .montecarlo import monte_carlo_counts
from .protocol import ChannelMode, NoiseParams
from .quantum import (
    HALF_I_HALF_Z,
    IDENTITY,
    PAULI_LABELS,
    PAULI_Z,
    apply_channel,
    make_state,
    process_fidelity,
    state_fidelity,
)
from .protocol import effective_channel
from .tomography import bootstrap_uncertainty, mle_process_reconstruct, simulate_tomography

log = logging.getLogger(__name__)

# ---------------------------------------------------------------------------
# Noise calibration

# name -> (mode, target channel)
CALIBRATION_FIDELITIES = {
    "F_I_herald_D": (ChannelMode.HERALD_D, IDENTITY),
    "F_Z_herald_A": (ChannelMode.HERALD_A, PAULI_Z),
    "F_I_pooled_ff": (ChannelMode.POOLED_FF, IDENTITY),
    "F_IZ_pooled": (ChannelMode.POOLED, HALF_I_HALF_Z),
}
REFERENCE_FIDELITIES = {
    "F_I_herald_D": 0.923,
    "F_Z_herald_A": 0.932,
    "F_I_pooled_ff": 0.847,
    "F_IZ_pooled": 0.954,
}
CALIBRATION_TOLERANCE = 0.02
_START = np.array([0.1, 0.3, 0.3])


@dataclass(frozen=True)
class CalibrationResult:
    noise: NoiseParams
    fitted: dict
    residuals: dict

    @property
    def max_residual(self) -> float:
        return max(abs(r) for r in self.residuals.values())


def model_fidelities(noise: NoiseParams, names: Sequence[str] = tuple(CALIBRATION_FIDELITIES)) -> dict:
    out = {}
    for name in names:
        mode, target = CALIBRATION_FIDELITIES[name]
        out[name] = process_fidelity(effective_channel(noise, mode), target)
    return out


def _noise_from(x: np.ndarray) -> NoiseParams:
    # dephasing = x0^2 keeps the simplex off the [0, 1] boundary
    return NoiseParams(
        float(min(x[0] ** 2, 1.0)),
        float(np.clip(x[1], -math.pi, math.pi)),
        float(np.clip(x[2], -math.pi, math.pi)),
    )


def fit_noise(targets: dict, tolerance: float = CALIBRATION_TOLERANCE) -> CalibrationResult:
    """Least-squares noise parameters reproducing named ideal-channel fidelities."""
    unknown = set(targets) - set(CALIBRATION_FIDELITIES)
    if unknown:
        raise DomainError(f"unknown targets {sorted(unknown)}; known: {sorted(CALIBRATION_FIDELITIES)}")
    for name, value in targets.items():
        if not 0 < value <= 1:
            raise DomainError(f"target {name} must lie in (0, 1]")
    names = tuple(targets)
    goal = np.array([targets[n] for n in names])

    def loss(x):
        got = model_fidelities(_noise_from(x), names)
        return float(np.sum((np.array([got[n] for n in names]) - goal) ** 2))

    res = minimize(
        loss,
        _START,
        method="Nelder-Mead",
        options={"xatol": 1e-7, "fatol": 1e-14, "maxiter": 4000, "maxfev": 8000},
    )
    noise = _noise_from(res.x)
    fitted = model_fidelities(noise, names)
    result = CalibrationResult(noise, fitted, {n: fitted[n] - targets[n] for n in names})
    log.info("calibration residual %.3g", result.max_residual)
    if result.max_residual > tolerance:
        raise CalibrationError(
            f"noise model misses targets by up to {result.max_residual:.3g} (> {tolerance})", result
        )
    return result


def calibrate_noise(targets: dict = REFERENCE_FIDELITIES) -> NoiseParams:
    return fit_noise(targets).noise


# ---------------------------------------------------------------------------
# Shared helpers


def _point_seed(seed: int, *path: int) -> int:
    return int(np.random.SeedSequence([seed, *path]).generate_state(1)[0])


def _map_ordered(fn: Callable, items: Sequence, workers: int) -> list:
    """Apply ``fn`` to each item; results stay in input order."""
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def direct_scenario(config: ScenarioConfig) -> ScenarioConfig:
    """Direct transmission: no splitting stage, flag detectors with half the darks."""
    dets = tuple(
        replace(d, dark_rate=d.dark_rate / 2) if d.label in FLAG_LABELS else d
        for d in config.detectors
        if d.label not in SIGNAL_LABELS
    )
    return replace(config, mode=Mode.DIRECT, detectors=dets)


def precert_scenario(config: ScenarioConfig) -> ScenarioConfig:
    return replace(config, mode=Mode.PRECERT)


def total_loss_offset(config: ScenarioConfig) -> float:
    """Total loss (dB) at zero channel loss: singles at Alice vs true counts at Bob."""
    zero = config.with_channel_loss(0.0)
    true = analytic_rates(zero).coincidences[state_pattern(zero)].true
    return transmission_to_db(true / zero.alice_detected_singles)


def _evaluate(config: ScenarioConfig, engine: str, duration, seed) -> tuple:
    """(rate, rate standard error, record) for the mode's state pattern."""
    pattern = state_pattern(config)
    if engine == "analytic":
        record = analytic_rates(config)
        return record.coincidences[pattern].total, 0.0, record
    record = monte_carlo_counts(config, duration, seed)
    rate = record.coincidences[pattern].total
    return rate, math.sqrt(rate / duration), record


def _mc_settings(spec: ExperimentSpec, engine: Optional[str], duration: Optional[float]):
    engine = engine or spec.engine
    if engine not in ("analytic", "montecarlo"):
        raise DomainError(f"unknown engine {engine!r}")
    if engine == "montecarlo":
        spec.require_seed()
        duration = duration or spec.duration
        if duration is None:
            raise DomainError("montecarlo engine needs a duration")
    return engine, duration


# ---------------------------------------------------------------------------
# Rate and fidelity vs total loss

FIG4_COLUMNS = (
    "total_loss_db",
    "added_channel_loss_db",
    "direct_rate",
    "precert_rate",
    "direct_fidelity_H",
    "direct_fidelity_D",
    "precert_fidelity_H",
    "precert_fidelity_D",
)
DEFAULT_FIG4_SWEEP = Sweep("total_loss_db", 0.0, 100.0, 5.0)


def transmitted_fidelities(config: ScenarioConfig) -> dict:
    """Noise-free-detector fidelity of the H and D inputs after the protocol."""
    if config.mode is Mode.DIRECT:
        return {"H": 1.0, "D": 1.0}
    channel = effective_channel(config.noise, ChannelMode.POOLED_FF)
    out = {}
    for label in ("H", "D"):
        rho = make_state(label)
        out[label] = state_fidelity(apply_channel(channel, rho), rho)
    return out


def run_fig4(
    spec: ExperimentSpec,
    engine: Optional[str] = None,
    duration: Optional[float] = None,
    workers: int = 1,
) -> ResultTable:
    """Count rate and qubit fidelity for direct and precertified transmission.

    The sweep runs over total loss (probability of a photon emitted into
    Alice's fiber producing a true count).  Each mode's zero-added-loss
    offset is computed from the config; points below the precert offset get
    NaN in the precert columns.
    """
    engine, duration = _mc_settings(spec, engine, duration)
    sweep = spec.sweep or DEFAULT_FIG4_SWEEP
    if sweep.variable != "total_loss_db":
        raise DomainError("fig4 sweeps total_loss_db")
    direct = direct_scenario(spec.scenario)
    precert = precert_scenario(spec.scenario)
    offsets = {Mode.DIRECT: total_loss_offset(direct), Mode.PRECERT: total_loss_offset(precert)}
    f_true = {Mode.DIRECT: transmitted_fidelities(direct), Mode.PRECERT: transmitted_fidelities(precert)}
    points = sweep.values()

    def one(job):
        i, total = job
        row = {"total_loss_db": total}
        for k, (mode, config) in enumerate(((Mode.DIRECT, direct), (Mode.PRECERT, precert))):
            added = total - offsets[mode]
            name = mode.value
            if mode is Mode.PRECERT:
                row["added_channel_loss_db"] = added if added >= 0 else math.nan
            if added < 0:
                row[f"{name}_rate"] = math.nan
                row[f"{name}_fidelity_H"] = row[f"{name}_fidelity_D"] = math.nan
                continue
            cfg = config.with_channel_loss(added)
            seed = _point_seed(spec.seed, i, k) if engine == "montecarlo" else None
            rate, _, record = _evaluate(cfg, engine, duration, seed)
            row[f"{name}_rate"] = rate
            for label in ("H", "D"):
                try:
                    row[f"{name}_fidelity_{label}"] = fidelity_vs_loss(cfg, f_true[mode][label], record)
                except DomainError:
                    row[f"{name}_fidelity_{label}"] = math.nan
        return [row[c] for c in FIG4_COLUMNS]

    rows = _map_ordered(one, list(enumerate(points)), workers)
    return ResultTable.build(
        FIG4_COLUMNS,
        rows,
        spec,
        engine=engine,
        direct_offset_db=round(offsets[Mode.DIRECT], 6),
        precert_offset_db=round(offsets[Mode.PRECERT], 6),
    )


def loglog_slope(table: ResultTable, column: str) -> np.ndarray:
    """Local d(log rate)/d(log p) between neighbouring sweep points."""
    x = table.column("total_loss_db")
    y = 10 * np.log10(table.column(column))
    return -np.diff(y) / np.diff(x)


# ---------------------------------------------------------------------------
# Heralding efficiency vs channel loss

ETA_THRESHOLD = 0.66
DEFAULT_FIG5_SWEEP = Sweep("channel_loss_db", 0.0, 60.0, 1.0)


def improved_1dark(config: ScenarioConfig) -> ScenarioConfig:
    """Flag detectors with 1 dark/s, 10 % system efficiency, 100 ps jitter and window."""
    flag_t = db_to_transmission(config.budget.flag_coupling_db)
    dets = tuple(
        replace(d, dark_rate=1.0, efficiency=min(0.10 / flag_t, 1.0), jitter=100e-12)
        if d.label in FLAG_LABELS
        else d
        for d in config.detectors
    )
    window = replace(config.window, width=100e-12, herald_width=100e-12)
    return replace(config, mode=Mode.PRECERT, detectors=dets, window=window)


def improved_1e3dark(config: ScenarioConfig) -> ScenarioConfig:
    """1e-3 dark/s detectors (2.3 % flag, 90 % signal), 80 % couplings, 100 ps window."""
    coupling = transmission_to_db(0.8)
    budget = replace(config.budget, flag_coupling_db=coupling, signal_coupling_db=coupling)
    dets = []
    for d in config.detectors:
        if d.label in FLAG_LABELS:
            d = replace(d, efficiency=0.023, dark_rate=1e-3, background_rate=0.0, jitter=0.0)
        elif d.label in SIGNAL_LABELS:
            d = replace(d, efficiency=0.9, dark_rate=1e-3, background_rate=0.0, jitter=0.0)
        dets.append(d)
    window = replace(config.window, width=100e-12, herald_width=100e-12)
    return replace(config, mode=Mode.PRECERT, detectors=tuple(dets), budget=budget, window=window)


FIG5_VARIANTS = {
    "current": precert_scenario,
    "1dark": improved_1dark,
    "1e-3dark": improved_1e3dark,
}


def run_fig5(
    spec: ExperimentSpec,
    variants: Sequence[str] = tuple(FIG5_VARIANTS),
    engine: Optional[str] = None,
    duration: Optional[float] = None,
    workers: int = 1,
) -> ResultTable:
    """Heralding efficiency per detector variant vs added channel loss.

    ``below_threshold`` marks (with 1) the first row where the last variant
    drops to or below 0.66; the analytic crossing of each variant is in the
    metadata.
    """
    engine, duration = _mc_settings(spec, engine, duration)
    sweep = spec.sweep or DEFAULT_FIG5_SWEEP
    if sweep.variable != "channel_loss_db":
        raise DomainError("fig5 sweeps channel_loss_db")
    for v in variants:
        if v not in FIG5_VARIANTS:
            raise DomainError(f"unknown variant {v!r}; known: {sorted(FIG5_VARIANTS)}")
    configs = {v: FIG5_VARIANTS[v](spec.scenario) for v in variants}
    points = sweep.values()

    def one(job):
        i, loss = job
        row = [loss]
        for k, v in enumerate(variants):
            cfg = configs[v].with_channel_loss(loss)
            if engine == "analytic":
                row.append(config_heralding_efficiency(cfg))
            else:
                record = monte_carlo_counts(cfg, duration, _point_seed(spec.seed, i, k))
                try:
                    row.append(record_heralding_efficiency(record))
                except DomainError:
                    row.append(math.nan)
        return row

    rows = np.array(_map_ordered(one, list(enumerate(points)), workers), dtype=float)
    last = rows[:, -1]
    marker = np.zeros(len(rows))
    below = np.flatnonzero(last <= ETA_THRESHOLD)
    if len(below):
        marker[below[0]] = 1.0
    rows = np.column_stack([rows, marker])
    meta = {}
    for v in variants:
        try:
            meta[f"crossing_{v}_db"] = round(threshold_crossing(configs[v], ETA_THRESHOLD), 4)
        except UnreachableThresholdError:
            meta[f"crossing_{v}_db"] = "unreachable"
    columns = ("channel_loss_db",) + tuple(f"eta_h_{v}" for v in variants) + ("below_threshold",)
    return ResultTable.build(columns, rows, spec, engine=engine, threshold=ETA_THRESHOLD, **meta)


def run_heralding(spec: ExperimentSpec, threshold: Optional[float] = None) -> ResultTable:
    """Inputs and value of the heralding efficiency at the spec's channel loss.

    With ``threshold`` the channel loss where the efficiency falls to it is
    appended; :class:`UnreachableThresholdError` propagates.
    """
    config = precert_scenario(spec.scenario)
    eta_signal, p_dark, p_flag = herald_inputs(config)
    row = [config.budget.channel_loss_db, eta_signal, p_dark, p_flag, config_heralding_efficiency(config)]
    columns = ("channel_loss_db", "eta_signal", "p_dark", "p_flag", "eta_h")
    if threshold is not None:
        row.append(threshold_crossing(config, threshold))
        columns += ("threshold_crossing_db",)
    return ResultTable.build(columns, [row], spec)


# ---------------------------------------------------------------------------
# Process tomography

PROCTOMO_MODES = (ChannelMode.HERALD_D, ChannelMode.HERALD_A, ChannelMode.POOLED, ChannelMode.POOLED_FF)
_TARGETS = (("F_I", IDENTITY), ("F_Z", PAULI_Z), ("F_IZ", HALF_I_HALF_Z))


def _chi_columns():
    cols = []
    for part in ("re", "im"):
        cols += [f"chi_{part}_{a}{b}" for a in PAULI_LABELS for b in PAULI_LABELS]
    return tuple(cols)


PROCTOMO_COLUMNS = (
    ("mode",)
    + _chi_columns()
    + tuple(c for name, _ in _TARGETS for c in (name, f"{name}_std"))
)


def run_proctomo(spec: ExperimentSpec, workers: int = 1) -> ResultTable:
    """Simulated process tomography of each herald/feedforward mode.

    Row ``mode`` is the index into :data:`PROCTOMO_MODES`; fidelities carry
    Poisson-bootstrap standard deviations.
    """
    seed = spec.require_seed()
    tomo = spec.tomography
    if tomo is None:
        raise DomainError("proctomo needs a [tomography] section")
    rows = []
    for k, mode in enumerate(PROCTOMO_MODES):
        channel = effective_channel(spec.scenario.noise, mode)
        data = simulate_tomography(channel, tomo.counts_per_setting, _point_seed(seed, k, 0), tomo.dark_fraction)

        tp = tomo.constrain_tp if tomo.constrain_tp is not None else mode is ChannelMode.POOLED_FF
        est = mle_process_reconstruct(data, constrain_tp=tp)

        def stat(d, est=est, tp=tp):
            chi = mle_process_reconstruct(d, constrain_tp=tp, init=est)
            return [process_fidelity(chi, t) for _, t in _TARGETS]

        point = [process_fidelity(est, t) for _, t in _TARGETS]
        _, std = bootstrap_uncertainty(data, tomo.resamples, _point_seed(seed, k, 1), stat, workers)
        fids = [x for pair in zip(point, std) for x in pair]
        rows.append([k] + list(est.chi.real.ravel()) + list(est.chi.imag.ravel()) + fids)
    modes = ";".join(f"{k}={m.value}" for k, m in enumerate(PROCTOMO_MODES))
    return ResultTable.build(PROCTOMO_COLUMNS, rows, spec, modes=modes)
