"""Density matrices, Pauli-basis chi matrices and fidelity measures.

Polarization convention: |H> = (1, 0), |V> = (0, 1), |D> = (|H> + |V>)/sqrt2,
|A> = (|H> - |V>)/sqrt2, |R> = (|H> + i|V>)/sqrt2, |L> = (|H> - i|V>)/sqrt2.
Two-qubit matrices are ordered flag (x) signal.

Chi matrices use the unnormalized Pauli operators {I, X, Y, Z}, so a trace
preserving channel has ``trace(chi) == 1`` and the identity channel is
``diag(1, 0, 0, 0)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Union

import numpy as np

from .errors import ChannelNotTPError, DomainError, NormalizationError

HERMITIAN_TOL = 1e-12
TRACE_TOL = 1e-12
PSD_TOL = 1e-10
CHI_TRACE_TOL = 1e-9
TP_TOL = 1e-6

I2 = np.eye(2, dtype=complex)
X = np.array([[0, 1], [1, 0]], dtype=complex)
Y = np.array([[0, -1j], [1j, 0]], dtype=complex)
Z = np.array([[1, 0], [0, -1]], dtype=complex)
PAULIS = (I2, X, Y, Z)
PAULI_LABELS = ("I", "X", "Y", "Z")

_S = 1 / np.sqrt(2)
KETS = {
    "H": np.array([1, 0], dtype=complex),
    "V": np.array([0, 1], dtype=complex),
    "D": np.array([_S, _S], dtype=complex),
    "A": np.array([_S, -_S], dtype=complex),
    "R": np.array([_S, 1j * _S], dtype=complex),
    "L": np.array([_S, -1j * _S], dtype=complex),
}
BASIS_LABELS = tuple(KETS)


def _frozen(matrix) -> np.ndarray:
    arr = np.array(matrix, dtype=complex, copy=True)
    arr.setflags(write=False)
    return arr


def _check_density(m: np.ndarray, dim: int, name: str) -> None:
    if m.shape != (dim, dim):
        raise DomainError(f"{name} must be {dim}x{dim}, got {m.shape}")
    if np.max(np.abs(m - m.conj().T)) > HERMITIAN_TOL:
        raise DomainError(f"{name} is not Hermitian")
    if abs(np.trace(m) - 1) > TRACE_TOL:
        raise NormalizationError(f"{name} trace is {np.trace(m).real!r}, expected 1")
    if np.linalg.eigvalsh(m).min() < -PSD_TOL:
        raise DomainError(f"{name} is not positive semidefinite")


def hermitize(m: np.ndarray) -> np.ndarray:
    """Symmetrize away rounding noise: (m + m^dagger)/2."""
    return 0.5 * (m + m.conj().T)


@dataclass(frozen=True, eq=False)
class QubitState:
    """Single polarization qubit as a 2x2 density matrix."""

    matrix: np.ndarray

    def __post_init__(self):
        m = _frozen(self.matrix)
        _check_density(m, 2, "QubitState")
        object.__setattr__(self, "matrix", m)

    @classmethod
    def from_unnormalized(cls, m: np.ndarray) -> "QubitState":
        m = hermitize(np.asarray(m, dtype=complex))
        return cls(m / np.trace(m).real)


@dataclass(frozen=True, eq=False)
class TwoQubitState:
    """Flag (x) signal density matrix, 4x4."""

    matrix: np.ndarray

    def __post_init__(self):
        m = _frozen(self.matrix)
        _check_density(m, 4, "TwoQubitState")
        object.__setattr__(self, "matrix", m)


@dataclass(frozen=True, eq=False)
class ProcessMatrix:
    """Single-qubit channel in the Pauli basis {I, X, Y, Z}.

    ``trace_preserving`` records the intent of the producer; it is checked
    only by :func:`apply_channel`, which needs it.
    """

    chi: np.ndarray
    trace_preserving: bool = True
    label: str = field(default="", compare=False)

    def __post_init__(self):
        c = _frozen(self.chi)
        if c.shape != (4, 4):
            raise DomainError(f"chi must be 4x4, got {c.shape}")
        if np.max(np.abs(c - c.conj().T)) > 1e-10:
            raise DomainError("chi is not Hermitian")
        if np.linalg.eigvalsh(c).min() < -PSD_TOL:
            raise DomainError("chi is not positive semidefinite")
        if self.trace_preserving and abs(np.trace(c) - 1) > CHI_TRACE_TOL:
            raise NormalizationError(f"chi trace is {np.trace(c).real!r}, expected 1")
        object.__setattr__(self, "chi", c)

    def tp_deviation(self) -> float:
        """Largest entry of sum_mn chi_mn E_n^dagger E_m - I."""
        acc = sum(
            self.chi[m, n] * PAULIS[n].conj().T @ PAULIS[m]
            for m in range(4)
            for n in range(4)
        )
        return float(np.max(np.abs(acc - I2)))


Amplitudes = tuple[complex, complex]


def make_state(spec: Union[str, Amplitudes, QubitState]) -> QubitState:
    """Pure polarization state from a basis label or (alpha, beta).

    >>> make_state("D").matrix.real
    array([[0.5, 0.5],
           [0.5, 0.5]])
    """
    if isinstance(spec, QubitState):
        return spec
    if isinstance(spec, str):
        try:
            ket = KETS[spec]
        except KeyError:
            raise DomainError(f"unknown basis label {spec!r}; use one of {BASIS_LABELS}") from None
    else:
        alpha, beta = spec
        ket = np.array([alpha, beta], dtype=complex)
        norm = np.vdot(ket, ket).real
        if abs(norm - 1) > 1e-9:
            raise NormalizationError(f"|alpha|^2 + |beta|^2 = {norm!r}, expected 1")
        ket = ket / np.sqrt(norm)
    return QubitState(np.outer(ket, ket.conj()))


def maximally_mixed() -> QubitState:
    return QubitState(I2 / 2)


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(hermitize(m))
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.conj().T


def jozsa_fidelity(rho: np.ndarray, sigma: np.ndarray) -> float:
    """(Tr sqrt(sqrt(rho) sigma sqrt(rho)))^2 for unit-trace PSD matrices.

    Qubits use the closed form Tr(rho sigma) + 2 sqrt(det rho det sigma);
    larger matrices use the nuclear norm of sqrt(rho) sqrt(sigma), with a
    pure-state shortcut that avoids square roots of rounding noise.
    """
    rho = hermitize(np.asarray(rho, dtype=complex))
    sigma = hermitize(np.asarray(sigma, dtype=complex))
    for name, m in (("rho", rho), ("sigma", sigma)):
        if np.linalg.eigvalsh(m).min() < -PSD_TOL:
            raise DomainError(f"{name} is not positive semidefinite")
    overlap = float(np.real(np.trace(rho @ sigma)))
    if rho.shape == (2, 2):
        dets = max(np.linalg.det(rho).real, 0.0) * max(np.linalg.det(sigma).real, 0.0)
        f = overlap + 2 * np.sqrt(dets)
    else:
        purity_r = np.real(np.trace(rho @ rho))
        purity_s = np.real(np.trace(sigma @ sigma))
        if abs(purity_r - 1) < 1e-12 or abs(purity_s - 1) < 1e-12:
            f = overlap
        else:
            sv = np.linalg.svd(_psd_sqrt(rho) @ _psd_sqrt(sigma), compute_uv=False)
            f = float(np.sum(sv)) ** 2
    return float(min(max(f, 0.0), 1.0))


def state_fidelity(rho: QubitState, sigma: QubitState) -> float:
    return jozsa_fidelity(rho.matrix, sigma.matrix)


def apply_channel(chi: ProcessMatrix, rho: QubitState) -> QubitState:
    """rho -> sum_mn chi_mn E_m rho E_n^dagger."""
    if chi.tp_deviation() > TP_TOL or abs(np.trace(chi.chi) - 1) > TP_TOL:
        raise ChannelNotTPError(
            f"chi deviates from trace preservation by {chi.tp_deviation():.3g}"
        )
    return QubitState(hermitize(_chi_action(chi.chi, rho.matrix)))


def _chi_action(chi: np.ndarray, rho: np.ndarray) -> np.ndarray:
    out = np.zeros((2, 2), dtype=complex)
    for m in range(4):
        left = PAULIS[m] @ rho
        for n in range(4):
            if chi[m, n] != 0:
                out += chi[m, n] * left @ PAULIS[n].conj().T
    return out


# Choi vectors |E_m>> = (I (x) E_m)|Omega>, |Omega> = sum_i |ii>.
_OMEGA = np.eye(2, dtype=complex).reshape(4)
_CHOI_BASIS = np.stack([np.kron(I2, p) @ _OMEGA for p in PAULIS], axis=1)


def chi_to_choi(chi: np.ndarray) -> np.ndarray:
    """Choi matrix normalized to unit trace when trace(chi) == 1."""
    return _CHOI_BASIS @ chi @ _CHOI_BASIS.conj().T / 2


def choi_to_chi(choi: np.ndarray) -> np.ndarray:
    """Inverse of :func:`chi_to_choi` (basis columns are orthogonal, norm sqrt2)."""
    return _CHOI_BASIS.conj().T @ choi @ _CHOI_BASIS / 2


def chi_from_map(channel) -> np.ndarray:
    """Chi matrix of a linear map acting on 2x2 matrices."""
    choi = np.zeros((4, 4), dtype=complex)
    for i in range(2):
        for j in range(2):
            e = np.zeros((2, 2), dtype=complex)
            e[i, j] = 1
            choi += np.kron(e, channel(e))
    return hermitize(choi_to_chi(choi / 2))


def unitary_chi(u: np.ndarray, label: str = "") -> ProcessMatrix:
    """Chi of rho -> U rho U^dagger."""
    u = np.asarray(u, dtype=complex)
    return ProcessMatrix(chi_from_map(lambda m: u @ m @ u.conj().T), label=label)


def pauli_chi(weights, label: str = "") -> ProcessMatrix:
    """Pauli channel with probabilities ``weights`` over (I, X, Y, Z)."""
    return ProcessMatrix(np.diag(np.asarray(weights, dtype=complex)), label=label)


IDENTITY = pauli_chi([1, 0, 0, 0], "I")
PAULI_Z = pauli_chi([0, 0, 0, 1], "Z")
HALF_I_HALF_Z = pauli_chi([0.5, 0, 0, 0.5], "(I+Z)/2")


def process_fidelity(chi: ProcessMatrix, target: ProcessMatrix) -> float:
    """Jozsa fidelity between the trace-normalized Choi states."""
    a = chi_to_choi(chi.chi)
    b = chi_to_choi(target.chi)
    return jozsa_fidelity(a / np.trace(a).real, b / np.trace(b).real)
