"""Single-photon down-conversion splitting, flag projection and feedforward.

All states here are conditioned on a successful down-conversion event; the
conversion probability itself belongs to the counting model in
:mod:`precert.detection`.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, UndefinedConditionalStateError
from .quantum import (
    I2,
    KETS,
    Y,
    Z,
    ProcessMatrix,
    QubitState,
    TwoQubitState,
    chi_from_map,
    hermitize,
)


class FlagOutcome(str, enum.Enum):
    D = "D"
    A = "A"


class ChannelMode(str, enum.Enum):
    HERALD_D = "herald-D-only"
    HERALD_A = "herald-A-only"
    POOLED = "pooled-no-feedforward"
    POOLED_FF = "pooled-with-feedforward"


@dataclass(frozen=True)
class NoiseParams:
    """Imperfections of the splitting interferometer and correction optics.

    interferometer_dephasing
        Probability of a Z error between the H and V conversion paths.
    pockels_phase_error
        Deviation (rad) from the nominal pi phase applied on A flags.
    residual_rotation
        Signal polarization misalignment (rad) about the Y axis.
    """

    interferometer_dephasing: float = 0.0
    pockels_phase_error: float = 0.0
    residual_rotation: float = 0.0

    def __post_init__(self):
        if not 0 <= self.interferometer_dephasing <= 1:
            raise DomainError("interferometer_dephasing must lie in [0, 1]")
        for name in ("pockels_phase_error", "residual_rotation"):
            if abs(getattr(self, name)) > np.pi:
                raise DomainError(f"|{name}| must not exceed pi")


ZERO_NOISE = NoiseParams()

# |H>_i -> |HH>, |V>_i -> |VV> in flag (x) signal order.
_SPLIT = np.zeros((4, 2), dtype=complex)
_SPLIT[0, 0] = 1
_SPLIT[3, 1] = 1

_FLAG_PROJECTORS = {
    FlagOutcome.D: np.outer(KETS["D"], KETS["D"].conj()),
    FlagOutcome.A: np.outer(KETS["A"], KETS["A"].conj()),
}


def pdc_split(state: QubitState) -> TwoQubitState:
    """alpha|H> + beta|V>  ->  alpha|H>_f|H>_s + beta|V>_f|V>_s (linear in rho)."""
    return TwoQubitState(hermitize(_SPLIT @ state.matrix @ _SPLIT.conj().T))


def _project_flag(rho4: np.ndarray, outcome: FlagOutcome) -> np.ndarray:
    """Unnormalized signal state Tr_f[(P (x) I) rho (P (x) I)]."""
    proj = np.kron(_FLAG_PROJECTORS[FlagOutcome(outcome)], I2)
    projected = proj @ rho4 @ proj
    return np.einsum("iaib->ab", projected.reshape(2, 2, 2, 2))


def flag_measure(state: TwoQubitState, outcome: FlagOutcome) -> tuple[float, QubitState]:
    """Probability of the flag outcome and the conditional signal state."""
    signal = _project_flag(state.matrix, outcome)
    prob = float(np.trace(signal).real)
    if prob < 1e-15:
        raise UndefinedConditionalStateError(f"flag outcome {outcome} has probability {prob:.3g}")
    return prob, QubitState(hermitize(signal / prob))


def _rotation_y(theta: float) -> np.ndarray:
    return np.cos(theta / 2) * I2 - 1j * np.sin(theta / 2) * Y


def _pockels(noise: NoiseParams) -> np.ndarray:
    return np.diag([1, np.exp(1j * (np.pi + noise.pockels_phase_error))])


def _correction_unitary(outcome: FlagOutcome, noise: NoiseParams, feedforward: bool) -> np.ndarray:
    u = _rotation_y(noise.residual_rotation)
    if feedforward and FlagOutcome(outcome) is FlagOutcome.A:
        u = u @ _pockels(noise)
    return u


def feedforward_correct(signal: QubitState, outcome: FlagOutcome, noise: NoiseParams = ZERO_NOISE) -> QubitState:
    """Pockels phase on A flags, then the residual misalignment."""
    u = _correction_unitary(outcome, noise, feedforward=True)
    return QubitState(hermitize(u @ signal.matrix @ u.conj().T))


def _dephase(rho4: np.ndarray, p: float) -> np.ndarray:
    zf = np.kron(Z, I2)
    return (1 - p) * rho4 + p * zf @ rho4 @ zf


def _branch_map(outcome: FlagOutcome, noise: NoiseParams, feedforward: bool):
    """Unnormalized input -> signal map for one flag outcome (trace = prob)."""
    u = _correction_unitary(outcome, noise, feedforward)

    def apply(m: np.ndarray) -> np.ndarray:
        rho4 = _dephase(_SPLIT @ m @ _SPLIT.conj().T, noise.interferometer_dephasing)
        return u @ _project_flag(rho4, outcome) @ u.conj().T

    return apply


def effective_channel(noise: NoiseParams, mode: ChannelMode) -> ProcessMatrix:
    """Chi matrix of input -> heralded signal for the chosen herald/feedforward mode.

    Flag outcomes are equiprobable for every input, so the flag-conditioned
    maps are linear and trace preserving after rescaling by 2.
    """
    mode = ChannelMode(mode)
    if mode is ChannelMode.HERALD_D:
        d = _branch_map(FlagOutcome.D, noise, False)
        chi = 2 * chi_from_map(d)
    elif mode is ChannelMode.HERALD_A:
        a = _branch_map(FlagOutcome.A, noise, False)
        chi = 2 * chi_from_map(a)
    else:
        ff = mode is ChannelMode.POOLED_FF
        d = _branch_map(FlagOutcome.D, noise, ff)
        a = _branch_map(FlagOutcome.A, noise, ff)
        chi = chi_from_map(lambda m: d(m) + a(m))
    # Round-off can leave eigenvalues at -1e-17; clip them.
    w, v = np.linalg.eigh(chi)
    chi = (v * np.clip(w, 0, None)) @ v.conj().T
    return ProcessMatrix(hermitize(chi / np.trace(chi).real), label=mode.value)
