"""Experiment spec files (TOML) and result tables.

Defaults, applied to any key the spec leaves out:

================================  ===========================================
key                               default
================================  ===========================================
mode                              ``"precert"``
engine                            ``"analytic"``
source.alice_detected_singles     1.2e7 /s
source.alice_herald_rate          2.5e7 /s
source.input_state                ``"D"``
window.width_ns                   2.3
window.herald_width_ns            20
loss.coupling_before_pdc_db       6
loss.pdc_efficiency_db            55
loss.flag_coupling_db             5
loss.signal_coupling_db           5
loss.channel_loss_db              0
detectors.D1 .. D5                :data:`precert.detection.DEFAULT_DETECTORS`
noise.*                           :data:`CALIBRATED_NOISE` (calibrated)
================================  ===========================================

Loss values may be written either as positive losses or as negative gains in
dB (``-55`` and ``55`` mean the same thing).  Detector ``efficiency`` is the
intrinsic detector efficiency; jitter is given in picoseconds.
"""

from __future__ import annotations

import dataclasses
import hashlib
import io
import json
import math
import os
import re
import sys
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .detection import (
    DEFAULT_DETECTORS,
    DEFAULT_DIRECT_SINGLES,
    DEFAULT_HERALD_RATE,
    CoincidenceWindow,
    DetectorSpec,
    LossBudget,
    Mode,
    ScenarioConfig,
)
from .errors import PrecertError, SpecParseError, SpecValidationError
from .protocol import NoiseParams
from .quantum import BASIS_LABELS, make_state

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

# Result of calibrating against the four quoted process fidelities
# (see precert.experiments.REFERENCE_FIDELITIES).
CALIBRATED_NOISE = NoiseParams(
    interferometer_dephasing=0.0277778,
    pockels_phase_error=0.872884,
    residual_rotation=0.432311,
)

SWEEP_VARIABLES = ("total_loss_db", "channel_loss_db")
ENGINES = ("analytic", "montecarlo")


@dataclass(frozen=True)
class Sweep:
    variable: str
    start: float
    stop: float
    step: float

    def __post_init__(self):
        if self.variable not in SWEEP_VARIABLES:
            raise SpecValidationError("sweep.variable", f"must be one of {SWEEP_VARIABLES}")
        if not self.stop >= self.start:
            raise SpecValidationError("sweep.stop", "must be >= sweep.start")
        if not self.step > 0:
            raise SpecValidationError("sweep.step", "must be > 0")

    def values(self) -> np.ndarray:
        n = int(math.floor((self.stop - self.start) / self.step + 1e-9)) + 1
        return self.start + self.step * np.arange(n)


@dataclass(frozen=True)
class TomographySpec:
    counts_per_setting: float = 1e4
    resamples: int = 100
    dark_fraction: float = 0.0
    # None: constrained only for the feedforward channel
    constrain_tp: Optional[bool] = None

    def __post_init__(self):
        if not self.counts_per_setting > 0:
            raise SpecValidationError("tomography.counts_per_setting", "must be > 0")
        if self.resamples < 100:
            raise SpecValidationError("tomography.resamples", "must be >= 100")
        if not 0 <= self.dark_fraction < 1:
            raise SpecValidationError("tomography.dark_fraction", "must lie in [0, 1)")


@dataclass(frozen=True)
class ExperimentSpec:
    scenario: ScenarioConfig = field(default_factory=lambda: ScenarioConfig(noise=CALIBRATED_NOISE))
    sweep: Optional[Sweep] = None
    tomography: Optional[TomographySpec] = None
    output: Optional[str] = None
    seed: Optional[int] = None
    engine: str = "analytic"
    duration: Optional[float] = None

    def require_seed(self) -> int:
        if self.seed is None:
            raise SpecValidationError("seed", "required for stochastic runs")
        return self.seed

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def hash(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()[:16]


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [[repr(complex(x)) for x in row] for row in obj]
    if isinstance(obj, (Mode,)):
        return obj.value
    return obj


# ---------------------------------------------------------------------------
# Parsing


_SCHEMA = {
    "": {"mode", "engine", "seed", "output", "duration", "source", "window", "loss",
         "detectors", "noise", "sweep", "tomography"},
    "source": {"alice_detected_singles", "alice_herald_rate", "input_state"},
    "window": {"width_ns", "herald_width_ns"},
    "loss": {f.name for f in dataclasses.fields(LossBudget)},
    "detector": {"efficiency", "dark_rate", "jitter_ps", "background_rate"},
    "noise": {f.name for f in dataclasses.fields(NoiseParams)},
    "sweep": {"variable", "start", "stop", "step"},
    "tomography": {f.name for f in dataclasses.fields(TomographySpec)},
}

_LOCATION = re.compile(r"line (\d+), column (\d+)")


def _check_keys(table: dict, schema: str, prefix: str) -> None:
    for key in table:
        if key not in _SCHEMA[schema]:
            raise SpecValidationError(f"{prefix}{key}", "unknown key")


def _number(table: dict, key: str, prefix: str, default=None, lo=None, hi=None, lo_open=False):
    name = f"{prefix}{key}"
    value = table.get(key, default)
    if value is None:
        return None
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise SpecValidationError(name, "must be a number")
    value = float(value)
    if not math.isfinite(value):
        raise SpecValidationError(name, "must be finite")
    if lo is not None and (value < lo or (lo_open and value == lo)):
        raise SpecValidationError(name, f"must be {'>' if lo_open else '>='} {lo}")
    if hi is not None and value > hi:
        raise SpecValidationError(name, f"must be <= {hi}")
    return value


def _table(doc: dict, key: str, prefix: str = "") -> dict:
    value = doc.get(key, {})
    if not isinstance(value, dict):
        raise SpecValidationError(f"{prefix}{key}", "must be a table")
    return value


def parse_spec(text: str) -> ExperimentSpec:
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        m = _LOCATION.search(str(exc))
        line, col = (int(m.group(1)), int(m.group(2))) if m else (None, None)
        raise SpecParseError(str(exc), line, col) from None
    return spec_from_dict(doc)


def spec_from_dict(doc: dict) -> ExperimentSpec:
    _check_keys(doc, "", "")
    mode = doc.get("mode", "precert")
    if mode not in ("precert", "direct"):
        raise SpecValidationError("mode", "must be 'precert' or 'direct'")
    engine = doc.get("engine", "analytic")
    if engine not in ENGINES:
        raise SpecValidationError("engine", f"must be one of {ENGINES}")
    seed = doc.get("seed")
    if seed is not None and (isinstance(seed, bool) or not isinstance(seed, int) or seed < 0):
        raise SpecValidationError("seed", "must be a non-negative integer")
    output = doc.get("output")
    if output is not None and not isinstance(output, str):
        raise SpecValidationError("output", "must be a path string")
    duration = _number(doc, "duration", "", lo=0, lo_open=True)

    source = _table(doc, "source")
    _check_keys(source, "source", "source.")
    singles = _number(source, "alice_detected_singles", "source.", DEFAULT_DIRECT_SINGLES, lo=0)
    herald = _number(source, "alice_herald_rate", "source.", DEFAULT_HERALD_RATE, lo=0)
    input_state = source.get("input_state", "D")
    if input_state not in BASIS_LABELS:
        raise SpecValidationError("source.input_state", f"must be one of {BASIS_LABELS}")

    win = _table(doc, "window")
    _check_keys(win, "window", "window.")
    window = CoincidenceWindow(
        _number(win, "width_ns", "window.", 2.3, lo=0, lo_open=True) * 1e-9,
        _number(win, "herald_width_ns", "window.", 20.0, lo=0, lo_open=True) * 1e-9,
    )

    loss = _table(doc, "loss")
    _check_keys(loss, "loss", "loss.")
    defaults = LossBudget()
    budget = LossBudget(
        **{k: abs(_number(loss, k, "loss.", getattr(defaults, k))) for k in _SCHEMA["loss"]}
    )

    dets = _table(doc, "detectors")
    detectors = []
    known = {d.label: d for d in DEFAULT_DETECTORS}
    for label in dets:
        if label not in known:
            raise SpecValidationError(f"detectors.{label}", f"unknown detector; use {sorted(known)}")
    for label, base in known.items():
        over = _table(dets, label, "detectors.")
        prefix = f"detectors.{label}."
        _check_keys(over, "detector", prefix)
        detectors.append(
            DetectorSpec(
                label,
                _number(over, "efficiency", prefix, base.efficiency, lo=0, hi=1),
                _number(over, "dark_rate", prefix, base.dark_rate, lo=0),
                _number(over, "jitter_ps", prefix, base.jitter * 1e12, lo=0) * 1e-12,
                _number(over, "background_rate", prefix, base.background_rate, lo=0),
            )
        )

    nz = _table(doc, "noise")
    _check_keys(nz, "noise", "noise.")
    noise = NoiseParams(
        _number(nz, "interferometer_dephasing", "noise.", CALIBRATED_NOISE.interferometer_dephasing, 0, 1),
        _number(nz, "pockels_phase_error", "noise.", CALIBRATED_NOISE.pockels_phase_error, -math.pi, math.pi),
        _number(nz, "residual_rotation", "noise.", CALIBRATED_NOISE.residual_rotation, -math.pi, math.pi),
    )

    try:
        scenario = ScenarioConfig(
            mode=Mode(mode),
            alice_detected_singles=singles,
            alice_herald_rate=herald,
            detectors=tuple(detectors),
            budget=budget,
            window=window,
            noise=noise,
            input_state=make_state(input_state),
        )
    except PrecertError as exc:
        raise SpecValidationError("source", str(exc)) from None

    sweep = None
    if "sweep" in doc:
        sw = _table(doc, "sweep")
        _check_keys(sw, "sweep", "sweep.")
        missing = [k for k in ("variable", "start", "stop", "step") if k not in sw]
        if missing:
            raise SpecValidationError(f"sweep.{missing[0]}", "required")
        sweep = Sweep(
            str(sw["variable"]),
            _number(sw, "start", "sweep."),
            _number(sw, "stop", "sweep."),
            _number(sw, "step", "sweep."),
        )

    tomo = None
    if "tomography" in doc:
        tb = _table(doc, "tomography")
        _check_keys(tb, "tomography", "tomography.")
        resamples = tb.get("resamples", 100)
        if isinstance(resamples, bool) or not isinstance(resamples, int):
            raise SpecValidationError("tomography.resamples", "must be an integer")
        constrain = tb.get("constrain_tp")
        if constrain is not None and not isinstance(constrain, bool):
            raise SpecValidationError("tomography.constrain_tp", "must be true or false")
        tomo = TomographySpec(
            _number(tb, "counts_per_setting", "tomography.", 1e4),
            resamples,
            _number(tb, "dark_fraction", "tomography.", 0.0),
            constrain,
        )

    return ExperimentSpec(scenario, sweep, tomo, output, seed, engine, duration)


def load_spec(path: Union[str, Path]) -> ExperimentSpec:
    path = Path(path)
    try:
        text = path.read_text()
    except FileNotFoundError:
        raise SpecValidationError("spec", f"file {path} does not exist") from None
    return parse_spec(text)


# ---------------------------------------------------------------------------
# Result tables


def artifact_version() -> str:
    from . import __version__

    return __version__


def _timestamp() -> str:
    # SOURCE_DATE_EPOCH pins the stamp for byte-identical reruns.
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    when = datetime.fromtimestamp(int(epoch), timezone.utc) if epoch else datetime.now(timezone.utc)
    return when.strftime("%Y-%m-%dT%H:%M:%SZ")


@dataclass
class ResultTable:
    columns: tuple
    rows: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.columns = tuple(self.columns)
        self.rows = np.asarray(self.rows, dtype=float).reshape(-1, len(self.columns))
        for key in ("spec_hash", "seed", "version", "timestamp"):
            self.metadata.setdefault(key, None)

    @classmethod
    def build(cls, columns, rows, spec: ExperimentSpec, **extra) -> "ResultTable":
        meta = {
            "spec_hash": spec.hash(),
            "seed": spec.seed,
            "version": artifact_version(),
            "timestamp": _timestamp(),
        }
        meta.update(extra)
        return cls(columns, rows, meta)

    def column(self, name: str) -> np.ndarray:
        return self.rows[:, self.columns.index(name)]

    def same_data(self, other: "ResultTable") -> bool:
        """Equal columns, rows (bitwise, NaN-aware) and metadata except the timestamp."""
        strip = lambda m: {k: v for k, v in m.items() if k != "timestamp"}  # noqa: E731
        return (
            self.columns == other.columns
            and self.rows.shape == other.rows.shape
            and np.array_equal(self.rows, other.rows, equal_nan=True)
            and strip(self.metadata) == strip(other.metadata)
        )

    def to_csv(self, target: Union[str, Path, io.TextIOBase, None] = None) -> str:
        buf = io.StringIO()
        for key, value in self.metadata.items():
            buf.write(f"# {key}={value}\n")
        buf.write(",".join(self.columns) + "\n")
        for row in self.rows:
            buf.write(",".join(repr(float(x)) for x in row) + "\n")
        text = buf.getvalue()
        if isinstance(target, (str, Path)):
            Path(target).parent.mkdir(parents=True, exist_ok=True)
            Path(target).write_text(text)
        elif target is not None:
            target.write(text)
        return text

    @classmethod
    def from_csv(cls, source: Union[str, Path]) -> "ResultTable":
        text = Path(source).read_text() if "\n" not in str(source) else str(source)
        meta, lines = {}, []
        for line in text.splitlines():
            if line.startswith("#"):
                key, _, value = line[1:].strip().partition("=")
                meta[key] = value
            elif line.strip():
                lines.append(line)
        columns = tuple(lines[0].split(","))
        rows = [[float(x) for x in line.split(",")] for line in lines[1:]]
        return cls(columns, np.array(rows).reshape(-1, len(columns)), meta)


def replace_scenario(spec: ExperimentSpec, **changes) -> ExperimentSpec:
    return replace(spec, scenario=replace(spec.scenario, **changes))
