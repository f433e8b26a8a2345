"""Simulation of photonic qubit precertification by single-photon down-conversion."""

from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("artifact")
except PackageNotFoundError:  # pragma: no cover
    __version__ = "0.1.0"

from .detection import (
    CoincidenceWindow,
    CountRecord,
    DetectorSpec,
    LossBudget,
    Mode,
    ScenarioConfig,
    analytic_rates,
    config_heralding_efficiency,
    fidelity_vs_loss,
    heralding_efficiency,
    snr_estimate,
    threshold_crossing,
)
from .errors import *  # noqa: F401,F403
from .montecarlo import monte_carlo_counts, monte_carlo_histogram
from .protocol import ChannelMode, FlagOutcome, NoiseParams, effective_channel, flag_measure, pdc_split
from .quantum import (
    ProcessMatrix,
    QubitState,
    TwoQubitState,
    apply_channel,
    make_state,
    process_fidelity,
    state_fidelity,
)
from .tomography import (
    TomographyDataset,
    bootstrap_uncertainty,
    mle_process_reconstruct,
    mle_state_reconstruct,
    simulate_tomography,
)
from . import errors as _errors

__all__ = [
    "CoincidenceWindow",
    "CountRecord",
    "DetectorSpec",
    "LossBudget",
    "Mode",
    "ScenarioConfig",
    "analytic_rates",
    "config_heralding_efficiency",
    "fidelity_vs_loss",
    "heralding_efficiency",
    "snr_estimate",
    "threshold_crossing",
    "monte_carlo_counts",
    "monte_carlo_histogram",
    "ChannelMode",
    "FlagOutcome",
    "NoiseParams",
    "effective_channel",
    "flag_measure",
    "pdc_split",
    "ProcessMatrix",
    "QubitState",
    "TwoQubitState",
    "apply_channel",
    "make_state",
    "process_fidelity",
    "state_fidelity",
    "TomographyDataset",
    "bootstrap_uncertainty",
    "mle_process_reconstruct",
    "mle_state_reconstruct",
    "simulate_tomography",
    *(name for name in dir(_errors) if name.endswith("Error")),
]
