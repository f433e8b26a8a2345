"""Photon-counting model: loss budget, detectors, coincidences, heralding.

Rate conventions
----------------
Alice's pair source emits pairs at rate ``P``.  D5 detects the herald photon
with efficiency ``eta5``; the qubit photon enters the channel with probability
``h``.  A config is specified by two observable rates:

* ``alice_herald_rate``      D5 singles, ``P * eta5 + noise5``
* ``alice_detected_singles`` herald-paired qubit rate at zero loss, ``P * eta5 * h``

so the qubit flux into the channel is ``alice_detected_singles / eta5``.

Losses are positive dB, transmission ``10**(-dB/10)``.  Detector
``efficiency`` is the intrinsic detector efficiency; the post-conversion
coupling lives in :class:`LossBudget`.

Patterns are counted as coincidence *pairs* (or triples) referenced to the
flag click: D5 within ``herald_width/2`` of the flag, signal within
``width/2`` of the flag.  For Poisson streams this makes the uniform-rate
accidental formula ``r1 * r2 * window`` exact in expectation.
"""

from __future__ import annotations

import enum
import functools
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy import integrate, special

from .errors import (
    DomainError,
    UndefinedHeraldingError,
    UnreachableThresholdError,
)
from .protocol import ZERO_NOISE, NoiseParams
from .quantum import QubitState, make_state

DETECTOR_LABELS = ("D1", "D2", "D3", "D4", "D5")
FLAG_LABELS = ("D1", "D2")
SIGNAL_LABELS = ("D3", "D4")

HERALD_FLAG = "D5&(D1|D2)"
FLAG_SIGNAL = "(D1|D2)&(D3|D4)"
TRIPLE = "D5&(D1|D2)&(D3|D4)"
PATTERNS = (HERALD_FLAG, FLAG_SIGNAL, TRIPLE)


def db_to_transmission(db: float) -> float:
    return 10.0 ** (-db / 10.0)


def transmission_to_db(t: float) -> float:
    return -10.0 * math.log10(t)


@dataclass(frozen=True)
class DetectorSpec:
    label: str
    efficiency: float
    dark_rate: float = 0.0
    jitter: float = 0.0
    # Unmodeled stray light; counted exactly like dark counts.
    background_rate: float = 0.0

    def __post_init__(self):
        if self.label not in DETECTOR_LABELS:
            raise DomainError(f"detector label must be one of {DETECTOR_LABELS}, got {self.label!r}")
        if not 0 <= self.efficiency <= 1:
            raise DomainError(f"{self.label}.efficiency must lie in [0, 1]")
        for name in ("dark_rate", "jitter", "background_rate"):
            if getattr(self, name) < 0:
                raise DomainError(f"{self.label}.{name} must be >= 0")

    @property
    def noise_rate(self) -> float:
        return self.dark_rate + self.background_rate


@dataclass(frozen=True)
class LossBudget:
    coupling_before_pdc_db: float = 6.0
    pdc_efficiency_db: float = 55.0
    flag_coupling_db: float = 5.0
    signal_coupling_db: float = 5.0
    channel_loss_db: float = 0.0

    def __post_init__(self):
        for name, value in self.__dict__.items():
            if value < 0:
                raise DomainError(f"{name} must be >= 0 dB of loss")

    @property
    def precert_loss_db(self) -> float:
        """Fixed loss of the splitting stage (everything but channel and detectors)."""
        return (
            self.coupling_before_pdc_db
            + self.pdc_efficiency_db
            + self.flag_coupling_db
            + self.signal_coupling_db
        )


@dataclass(frozen=True)
class CoincidenceWindow:
    """Full coincidence-bin widths in seconds.

    ``width`` applies between Bob's timetagged detectors.  D5 is counted on a
    separate logic unit, so D5 coincidences use ``herald_width``.
    """

    width: float = 2.3e-9
    herald_width: float = 20e-9

    def __post_init__(self):
        if self.width <= 0 or self.herald_width <= 0:
            raise DomainError("coincidence windows must be > 0")


class Mode(str, enum.Enum):
    DIRECT = "direct"
    PRECERT = "precert"


# Quoted system efficiencies 10/14/19/19 % include the 5 dB post-conversion
# coupling; the intrinsic values below reproduce them with the default budget.
_COUPLING_5DB = db_to_transmission(5.0)
DEFAULT_DETECTORS = (
    DetectorSpec("D1", 0.10 / _COUPLING_5DB, 550.0),
    DetectorSpec("D2", 0.14 / _COUPLING_5DB, 160.0),
    DetectorSpec("D3", 0.19 / _COUPLING_5DB, 1500.0),
    DetectorSpec("D4", 0.19 / _COUPLING_5DB, 1000.0),
    DetectorSpec("D5", 1.0, 0.0),
)

DEFAULT_DIRECT_SINGLES = 1.2e7
DEFAULT_HERALD_RATE = 2.5e7


@dataclass(frozen=True)
class ScenarioConfig:
    mode: Mode = Mode.PRECERT
    alice_detected_singles: float = DEFAULT_DIRECT_SINGLES
    alice_herald_rate: float = DEFAULT_HERALD_RATE
    detectors: tuple = DEFAULT_DETECTORS
    budget: LossBudget = field(default_factory=LossBudget)
    window: CoincidenceWindow = field(default_factory=CoincidenceWindow)
    noise: NoiseParams = ZERO_NOISE
    input_state: QubitState = field(default_factory=lambda: make_state("D"))

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))
        object.__setattr__(self, "detectors", tuple(self.detectors))
        labels = [d.label for d in self.detectors]
        if len(set(labels)) != len(labels):
            raise DomainError("duplicate detector labels")
        needed = ("D5",) + FLAG_LABELS + (SIGNAL_LABELS if self.mode is Mode.PRECERT else ())
        missing = [lab for lab in needed if lab not in labels]
        if missing:
            raise DomainError(f"{self.mode.value} mode needs detectors {missing}")
        if self.alice_detected_singles < 0 or self.alice_herald_rate < 0:
            raise DomainError("source rates must be >= 0")
        d5 = self.detector("D5")
        if self.alice_detected_singles > 0:
            if d5.efficiency <= 0 or self.alice_herald_rate <= d5.noise_rate:
                raise DomainError("alice_herald_rate must exceed D5 noise when photons are sent")
            if self.herald_coupling > 1 + 1e-12:
                raise DomainError("alice_detected_singles exceeds the heralded pair rate")

    def detector(self, label: str) -> DetectorSpec:
        for d in self.detectors:
            if d.label == label:
                return d
        raise KeyError(label)

    @property
    def pair_rate(self) -> float:
        d5 = self.detector("D5")
        if d5.efficiency == 0:
            return 0.0
        return max(self.alice_herald_rate - d5.noise_rate, 0.0) / d5.efficiency

    @property
    def herald_coupling(self) -> float:
        """P(qubit photon enters the channel | pair), from the two source rates."""
        d5 = self.detector("D5")
        denom = self.alice_herald_rate - d5.noise_rate
        return self.alice_detected_singles / denom if denom > 0 else 0.0

    @property
    def qubit_flux(self) -> float:
        return self.pair_rate * self.herald_coupling

    def with_channel_loss(self, db: float) -> "ScenarioConfig":
        return replace(self, budget=replace(self.budget, channel_loss_db=db))

    def with_detectors(self, **changes) -> "ScenarioConfig":
        """Replace fields on every detector, e.g. ``dark_rate=0``."""
        return replace(self, detectors=tuple(replace(d, **changes) for d in self.detectors))


@dataclass(frozen=True)
class Coincidence:
    """Rates (1/s) of one coincidence pattern.

    ``noise`` is the part of ``accidental`` whose state-carrying click (Bob's
    qubit detector: signal in precert patterns, D1/D2 in the herald pattern)
    is a dark or background count.
    """

    true: float
    accidental: float
    noise: float = 0.0

    @property
    def total(self) -> float:
        return self.true + self.accidental


@dataclass(frozen=True)
class CountRecord:
    singles: dict
    coincidences: dict
    duration: Optional[float] = None

    def rate(self, pattern: str) -> float:
        return self.coincidences[pattern].total


# ---------------------------------------------------------------------------
# Geometry of the chain


@dataclass(frozen=True)
class _Arm:
    labels: tuple
    probs: np.ndarray  # P(click on detector | photon reaches the arm)
    jitters: np.ndarray
    noise: np.ndarray


def _arms(config: ScenarioConfig):
    """(transmission to Bob's stage, flag arm, signal arm or None)."""
    b = config.budget
    t = db_to_transmission(b.channel_loss_db)

    def arm(labels, coupling):
        dets = [config.detector(lab) for lab in labels]
        return _Arm(
            tuple(labels),
            np.array([0.5 * coupling * d.efficiency for d in dets]),
            np.array([d.jitter for d in dets]),
            np.array([d.noise_rate for d in dets]),
        )

    if config.mode is Mode.DIRECT:
        return t, arm(FLAG_LABELS, 1.0), None
    t *= db_to_transmission(b.coupling_before_pdc_db + b.pdc_efficiency_db)
    return (
        t,
        arm(FLAG_LABELS, db_to_transmission(b.flag_coupling_db)),
        arm(SIGNAL_LABELS, db_to_transmission(b.signal_coupling_db)),
    )


def _window_prob(center, half: float, sigma: float):
    """P(|x - center| <= half) for x ~ N(0, sigma^2)."""
    center = np.asarray(center, dtype=float)
    if sigma == 0:
        return (np.abs(center) <= half).astype(float)
    s = sigma * math.sqrt(2)
    return 0.5 * (special.erf((half - center) / s) + special.erf((half + center) / s))


def pair_capture(width: float, sigma_a: float, sigma_b: float) -> float:
    """Fraction of true pairs whose timing difference falls inside the window."""
    return float(_window_prob(0.0, width / 2, math.hypot(sigma_a, sigma_b)))


def _window_prob_scalar(center: float, half: float, sigma: float) -> float:
    # math.erf keeps the quadrature integrand free of array overhead
    if sigma == 0:
        return 1.0 if abs(center) <= half else 0.0
    s = sigma * math.sqrt(2)
    return 0.5 * (math.erf((half - center) / s) + math.erf((half + center) / s))


@functools.lru_cache(maxsize=4096)
def triple_capture(herald_width, width, sigma5, sigma_f, sigma_s) -> float:
    """P(|t_f - t_5| <= herald_width/2 and |t_s - t_f| <= width/2)."""
    a, b = herald_width / 2, width / 2
    if sigma_f == 0:
        return _window_prob_scalar(0.0, a, sigma5) * _window_prob_scalar(0.0, b, sigma_s)
    norm = 1 / (sigma_f * math.sqrt(2 * math.pi))

    def integrand(x):
        return (
            math.exp(-0.5 * (x / sigma_f) ** 2) * norm
            * _window_prob_scalar(x, a, sigma5) * _window_prob_scalar(x, b, sigma_s)
        )

    lim = 12 * sigma_f
    return float(integrate.quad(integrand, -lim, lim, points=[-a, a, -b, b], limit=200)[0])


def _overlap_length(delta, a, b):
    return np.maximum(0.0, np.minimum(a, delta + b) - np.maximum(-a, delta - b))


def mean_overlap(herald_width, width, sigma5, sigma_s) -> float:
    """E|[t5 - a, t5 + a] intersect [ts - b, ts + b]| for jittered t5, ts."""
    a, b = herald_width / 2, width / 2
    sigma = math.hypot(sigma5, sigma_s)
    if sigma == 0:
        return 2 * min(a, b)

    def integrand(d):
        return math.exp(-0.5 * (d / sigma) ** 2) / (sigma * math.sqrt(2 * math.pi)) * _overlap_length(d, a, b)

    lim = 12 * sigma + a + b
    kinks = sorted({a - b, b - a, -a - b, a + b})
    return float(integrate.quad(integrand, -lim, lim, points=kinks, limit=200)[0])


# ---------------------------------------------------------------------------
# Analytic rates


def analytic_rates(config: ScenarioConfig) -> CountRecord:
    """Closed-form singles and coincidence rates for a scenario."""
    t, flag, signal = _arms(config)
    w = config.window.width
    w5 = config.window.herald_width
    d5 = config.detector("D5")
    r5 = config.alice_herald_rate
    heralded = config.alice_detected_singles * t  # P eta5 h T
    flux = (config.qubit_flux if d5.efficiency > 0 else 0.0) * t

    singles = {lab: config.detector(lab).noise_rate for lab in DETECTOR_LABELS if _has(config, lab)}
    singles["D5"] = r5
    for lab, p, n in zip(flag.labels, flag.probs, flag.noise):
        singles[lab] = flux * p + n
    rf = float(sum(singles[lab] for lab in flag.labels))
    nf = float(flag.noise.sum())

    c5f = heralded * sum(
        p * pair_capture(w5, d5.jitter, jf) for p, jf in zip(flag.probs, flag.jitters)
    )
    coincidences = {
        HERALD_FLAG: Coincidence(c5f, r5 * rf * w5, r5 * nf * w5),
    }
    if signal is None:
        zero = Coincidence(0.0, 0.0, 0.0)
        coincidences[FLAG_SIGNAL] = zero
        coincidences[TRIPLE] = zero
        return CountRecord(singles, coincidences)

    for lab, p, n in zip(signal.labels, signal.probs, signal.noise):
        singles[lab] = flux * p + n
    rs = float(sum(singles[lab] for lab in signal.labels))
    ns = float(signal.noise.sum())

    cfs = 0.0
    c5fs = 0.0
    for pf, jf in zip(flag.probs, flag.jitters):
        for ps, js in zip(signal.probs, signal.jitters):
            cfs += flux * pf * ps * pair_capture(w, jf, js)
            c5fs += heralded * pf * ps * triple_capture(w5, w, d5.jitter, jf, js)
    c5s_overlap = heralded * sum(
        ps * mean_overlap(w5, w, d5.jitter, js) for ps, js in zip(signal.probs, signal.jitters)
    )

    coincidences[FLAG_SIGNAL] = Coincidence(cfs, rf * rs * w, rf * ns * w)
    triple_acc = c5f * rs * w + cfs * r5 * w5 + c5s_overlap * rf + r5 * rf * rs * w5 * w
    triple_noise = c5f * ns * w + r5 * rf * ns * w5 * w
    coincidences[TRIPLE] = Coincidence(c5fs, triple_acc, triple_noise)
    return CountRecord(singles, coincidences)


def _has(config: ScenarioConfig, label: str) -> bool:
    return any(d.label == label for d in config.detectors)


# ---------------------------------------------------------------------------
# Heralding efficiency


def heralding_efficiency(eta_signal: float, p_dark: float, p_flag: float) -> float:
    """eta_signal / (1 + p_dark / p_flag)."""
    if p_flag < 0 or p_dark < 0:
        raise DomainError("probabilities must be >= 0")
    if p_flag == 0:
        if p_dark == 0:
            raise UndefinedHeraldingError("p_flag and p_dark are both zero")
        return 0.0
    return eta_signal / (1.0 + p_dark / p_flag)


def herald_inputs(config: ScenarioConfig) -> tuple[float, float, float]:
    """(eta_signal, p_dark, p_flag) per D5 trigger for a precert scenario.

    ``p_dark`` counts dark/background flag clicks in the herald window,
    ``p_flag`` genuine flag photons; ``eta_signal`` is the signal collection
    and detection probability given a captured flag photon.
    """
    if config.mode is not Mode.PRECERT:
        raise DomainError("heralding efficiency is defined for precert mode")
    t, flag, signal = _arms(config)
    d5 = config.detector("D5")
    w5 = config.window.herald_width
    w = config.window.width
    cap5 = np.array([pair_capture(w5, d5.jitter, jf) for jf in flag.jitters])
    if config.alice_herald_rate == 0:
        raise UndefinedHeraldingError("no D5 triggers")
    p_flag = config.alice_detected_singles / config.alice_herald_rate * t * float(np.dot(flag.probs, cap5))
    p_dark = float(flag.noise.sum()) * w5
    if p_flag == 0:
        return 0.0, p_dark, 0.0
    joint = sum(
        pf * ps * triple_capture(w5, w, d5.jitter, jf, js)
        for pf, jf in zip(flag.probs, flag.jitters)
        for ps, js in zip(signal.probs, signal.jitters)
    )
    eta_signal = joint / float(np.dot(flag.probs, cap5))
    return eta_signal, p_dark, p_flag


def config_heralding_efficiency(config: ScenarioConfig) -> float:
    return heralding_efficiency(*herald_inputs(config))


def record_heralding_efficiency(record: CountRecord) -> float:
    """P(signal | D5 and flag) read off a count record, ignoring flag-photon accidentals."""
    hf = record.coincidences[HERALD_FLAG]
    denom = hf.true + hf.noise
    if denom == 0:
        raise UndefinedHeraldingError("no herald-flag coincidences")
    return record.coincidences[TRIPLE].true / denom


def threshold_crossing(
    config: ScenarioConfig,
    threshold: float,
    tol_db: float = 0.01,
    max_loss_db: float = 300.0,
) -> float:
    """Channel loss (dB) where the heralding efficiency falls to ``threshold``."""

    def eta(db):
        return config_heralding_efficiency(config.with_channel_loss(db))

    lo, hi = 0.0, max_loss_db
    eta0 = eta(lo)
    if eta0 <= threshold:
        raise UnreachableThresholdError(
            f"heralding efficiency at zero channel loss ({eta0:.4g}) is not above {threshold}"
        )
    if eta(hi) > threshold:
        raise UnreachableThresholdError(
            f"heralding efficiency stays above {threshold} up to {max_loss_db} dB"
        )
    while hi - lo > tol_db:
        mid = 0.5 * (lo + hi)
        if eta(mid) > threshold:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


# ---------------------------------------------------------------------------
# Fidelity floor and timing histogram


def state_pattern(config: ScenarioConfig) -> str:
    return TRIPLE if config.mode is Mode.PRECERT else HERALD_FLAG


def fidelity_vs_loss(
    config: ScenarioConfig,
    true_state_fidelity: float,
    record: Optional[CountRecord] = None,
) -> float:
    """Measured qubit fidelity once noise clicks (unpolarized) are mixed in.

    Coincidences whose qubit-detector click is a real photon carry the
    transmitted state; those where it is a dark/background click contribute
    the maximally mixed state.
    """
    if not 0 <= true_state_fidelity <= 1:
        raise DomainError("true_state_fidelity must lie in [0, 1]")
    record = record or analytic_rates(config)
    c = record.coincidences[state_pattern(config)]
    noise = c.noise
    signal = c.total - noise
    if signal + noise <= 0:
        raise DomainError("no coincidences: fidelity undefined")
    return (signal * true_state_fidelity + 0.5 * noise) / (signal + noise)


@dataclass(frozen=True)
class Histogram:
    edges: np.ndarray  # seconds, len(rates) + 1
    rates: np.ndarray  # coincidences per second per bin

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.edges[1:] + self.edges[:-1])


def histogram_edges(width: float, span: float) -> np.ndarray:
    """Bins of ``width`` centered on zero delay, covering +/- ``span``."""
    k = int(math.ceil(span / width - 0.5))
    return (np.arange(-k, k + 2) - 0.5) * width


def snr_estimate(
    config: ScenarioConfig,
    flag_labels: Sequence[str] = FLAG_LABELS,
    span: float = 50e-9,
) -> tuple[float, Histogram]:
    """Flag-signal timing histogram and central-bin signal-to-noise ratio.

    SNR is the true coincidence rate in the central bin divided by the
    accidental rate of an equal-width off-peak bin; ``inf`` when there are
    no accidentals.
    """
    if config.mode is not Mode.PRECERT:
        raise DomainError("SNR is defined for the precert flag/signal pattern")
    rec = analytic_rates(config)
    t, flag, signal = _arms(config)
    w = config.window.width
    edges = histogram_edges(w, span)
    idx = [flag.labels.index(lab) for lab in flag_labels]
    rf = sum(rec.singles[flag.labels[i]] for i in idx)
    rs = sum(rec.singles[lab] for lab in signal.labels)
    accidental = rf * rs * w
    rates = np.full(len(edges) - 1, accidental)
    central_true = 0.0
    for i in idx:
        for ps, js in zip(signal.probs, signal.jitters):
            amp = config.qubit_flux * t * flag.probs[i] * ps
            sigma = math.hypot(flag.jitters[i], js)
            if sigma == 0:
                frac = np.zeros(len(rates))
                frac[np.searchsorted(edges, 0.0, side="right") - 1] = 1.0
            else:
                frac = np.diff(special.ndtr(edges / sigma))
            rates = rates + amp * frac
            central_true += amp * pair_capture(w, flag.jitters[i], js)
    snr = math.inf if accidental == 0 else central_true / accidental
    return snr, Histogram(edges, rates)
