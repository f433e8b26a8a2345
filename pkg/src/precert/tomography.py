"""Simulated tomography data and maximum-likelihood reconstruction.

States and chi matrices are parameterized as ``T T^dagger / Tr(T T^dagger)``
with ``T`` lower triangular, so every iterate is PSD with unit trace.  The
Poisson likelihood is profiled over one free normalization per measurement
basis (per input, for process data): orthogonal settings of a basis share a
scale factor, which absorbs source intensity drifts and analyzer-port
efficiency asymmetries.
"""

from __future__ import annotations

import csv
import functools
import io
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

from .errors import BootstrapError, DomainError, EstimationError, RankDeficiencyError
from .quantum import (
    BASIS_LABELS,
    HALF_I_HALF_Z,
    IDENTITY,
    PAULI_Z,
    PAULIS,
    ProcessMatrix,
    QubitState,
    apply_channel,
    hermitize,
    make_state,
    process_fidelity,
)

log = logging.getLogger(__name__)

CSV_COLUMNS = ("input_label", "setting_label", "flag_outcome", "counts")
DEFAULT_GROUPS = (("H", "V"), ("D", "A"), ("R", "L"))
POOLED = "pooled"


@dataclass(frozen=True)
class MeasurementSetting:
    label: str
    projector: QubitState

    def __post_init__(self):
        if np.linalg.matrix_rank(self.projector.matrix, tol=1e-9) != 1:
            raise DomainError(f"setting {self.label} projector must be rank 1")

    @classmethod
    def from_label(cls, label: str) -> "MeasurementSetting":
        return cls(label, make_state(label))


@dataclass(frozen=True)
class TomographyEntry:
    input_label: str
    setting_label: str
    flag_outcome: str
    counts: int

    def __post_init__(self):
        if self.counts < 0:
            raise DomainError("counts must be >= 0")


@dataclass(frozen=True)
class TomographyDataset:
    entries: tuple
    integration_time: float = 1.0
    total_rate_normalization: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))

    @property
    def counts(self) -> np.ndarray:
        return np.array([e.counts for e in self.entries], dtype=float)

    @property
    def input_labels(self) -> list:
        return list(dict.fromkeys(e.input_label for e in self.entries))

    def restrict(self, input_label: str) -> "TomographyDataset":
        return replace(self, entries=tuple(e for e in self.entries if e.input_label == input_label))

    def with_counts(self, counts: Iterable[int]) -> "TomographyDataset":
        new = tuple(replace(e, counts=int(c)) for e, c in zip(self.entries, counts))
        return replace(self, entries=new)

    def relabel(self, mapping: dict) -> "TomographyDataset":
        """Rename input and setting labels (e.g. H<->V) keeping counts."""
        new = tuple(
            replace(
                e,
                input_label=mapping.get(e.input_label, e.input_label),
                setting_label=mapping.get(e.setting_label, e.setting_label),
            )
            for e in self.entries
        )
        return replace(self, entries=new)

    # -- flat text table -------------------------------------------------

    def to_csv(self, target: Union[str, Path, io.TextIOBase, None] = None) -> str:
        buf = io.StringIO()
        buf.write(f"# integration_time={self.integration_time!r}\n")
        buf.write(f"# total_rate_normalization={self.total_rate_normalization!r}\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for e in self.entries:
            writer.writerow((e.input_label, e.setting_label, e.flag_outcome, int(e.counts)))
        text = buf.getvalue()
        if isinstance(target, (str, Path)):
            Path(target).write_text(text)
        elif target is not None:
            target.write(text)
        return text

    @classmethod
    def from_csv(cls, source: Union[str, Path, io.TextIOBase]) -> "TomographyDataset":
        if isinstance(source, Path) or (isinstance(source, str) and "\n" not in source):
            text = Path(source).read_text()
        elif isinstance(source, str):
            text = source
        else:
            text = source.read()
        meta = {}
        rows = []
        for line in text.splitlines():
            if line.startswith("#"):
                key, _, value = line[1:].strip().partition("=")
                meta[key.strip()] = float(value)
            elif line.strip():
                rows.append(line)
        reader = csv.reader(rows)
        header = tuple(next(reader))
        if header != CSV_COLUMNS:
            raise DomainError(f"expected columns {CSV_COLUMNS}, got {header}")
        entries = [TomographyEntry(i, s, f, int(c)) for i, s, f, c in reader]
        return cls(
            tuple(entries),
            integration_time=meta.get("integration_time", 1.0),
            total_rate_normalization=meta.get("total_rate_normalization", 1.0),
        )


# ---------------------------------------------------------------------------
# Simulation


def _projector(label: str) -> np.ndarray:
    return make_state(label).matrix


def simulate_tomography(
    channel: ProcessMatrix,
    expected_counts_per_setting: float,
    seed: int,
    dark_fraction: float = 0.0,
    inputs: Sequence[str] = BASIS_LABELS,
    settings: Sequence[str] = BASIS_LABELS,
    flag_outcome: str = POOLED,
    noiseless: bool = False,
) -> TomographyDataset:
    """Poisson counts for every (input, setting) pair.

    Mean counts are ``N * ((1 - d) * Tr[P channel(rho)] + d / 2)``; with
    ``noiseless`` the means themselves are returned, rounded to integers.
    """
    if expected_counts_per_setting <= 0:
        raise DomainError("expected_counts_per_setting must be > 0")
    if not 0 <= dark_fraction < 1:
        raise DomainError("dark_fraction must lie in [0, 1)")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    entries = []
    for inp in inputs:
        out = apply_channel(channel, make_state(inp)).matrix
        for s in settings:
            p = float(np.real(np.trace(_projector(s) @ out)))
            mean = expected_counts_per_setting * ((1 - dark_fraction) * max(p, 0.0) + dark_fraction / 2)
            n = int(np.rint(mean)) if noiseless else int(rng.poisson(mean))
            entries.append(TomographyEntry(inp, s, flag_outcome, n))
    return TomographyDataset(tuple(entries))


# ---------------------------------------------------------------------------
# Likelihood machinery


@dataclass
class FitResult:
    matrix: np.ndarray
    loglik: float
    history: list = field(default_factory=list)
    iterations: int = 0
    converged: bool = True


@functools.lru_cache(maxsize=None)
def _tri_indices(d):
    rows, cols = np.tril_indices(d, -1)
    diag = np.arange(d)
    return diag, rows, cols


def _unpack(theta: np.ndarray, d: int) -> np.ndarray:
    diag, rows, cols = _tri_indices(d)
    t = np.zeros((d, d), dtype=complex)
    t[diag, diag] = theta[:d]
    m = len(rows)
    t[rows, cols] = theta[d : d + m] + 1j * theta[d + m :]
    return t


def _pack_grad(g: np.ndarray, d: int) -> np.ndarray:
    diag, rows, cols = _tri_indices(d)
    low = g[rows, cols]
    return np.concatenate([g[diag, diag].real, low.real, low.imag])


class _Objective:
    """Profiled Poisson log-likelihood of Tr(M Q_k) with optional TP penalty."""

    def __init__(self, ops, counts, groups, penalty_ops=None, mu=0.0):
        ops = np.asarray(ops, dtype=complex)
        self.d = d = ops.shape[1]
        # Tr(M Q) = sum_ij M_ij Q_ji
        self.ops_t = ops.transpose(0, 2, 1).reshape(len(ops), d * d)
        self.ops = ops.reshape(len(ops), d * d)
        self.counts = np.asarray(counts, dtype=float)
        self.pos = self.counts > 0
        self.gid = np.full(len(ops), len(groups), dtype=int)
        for i, g in enumerate(groups):
            self.gid[np.asarray(g, dtype=int)] = i
        self.group_totals = np.bincount(self.gid, self.counts, len(groups) + 1)[:-1]
        self.live = self.group_totals > 0
        if penalty_ops is not None and mu > 0:
            pen = np.asarray(penalty_ops, dtype=complex)
            self.pen_t = pen.transpose(0, 2, 1).reshape(len(pen), d * d)
            self.pen = pen.reshape(len(pen), d * d)
        else:
            self.pen = None
        self.mu = mu

    def matrix(self, theta):
        t = _unpack(theta, self.d)
        a = t @ t.conj().T
        return a / np.trace(a).real

    def __call__(self, theta, with_grad=True):
        d = self.d
        t = _unpack(theta, d)
        a = t @ t.conj().T
        tr = np.trace(a).real
        if tr <= 0:
            return -math.inf, None
        m = a / tr
        p = (self.ops_t @ m.ravel()).real
        pos = self.pos
        if np.any(p[pos] <= 0):
            return -math.inf, None
        f = float(self.counts[pos] @ np.log(p[pos]))
        ng = len(self.group_totals)
        sums = np.bincount(self.gid, p, ng + 1)[:ng]
        live = self.live
        f -= float(self.group_totals[live] @ np.log(sums[live]))
        weights = np.zeros_like(p)
        weights[pos] = self.counts[pos] / p[pos]
        scale = np.zeros(ng + 1)
        scale[:ng][live] = self.group_totals[live] / sums[live]
        weights -= scale[self.gid]
        grad_m = weights @ self.ops
        if self.pen is not None:
            c = (self.pen_t @ m.ravel()).real
            f -= self.mu * float(c @ c)
            grad_m = grad_m - 2 * self.mu * (c @ self.pen)
        if not with_grad:
            return f, None
        grad_m = hermitize(grad_m.reshape(d, d))
        grad_a = (grad_m - np.real(np.vdot(grad_m, m)) * np.eye(d)) / tr
        return f, _pack_grad(2 * grad_a @ t, d)


def _ascend(obj: _Objective, theta0, tol=1e-10, max_iter=10000) -> FitResult:
    """BFGS ascent with backtracking; only improving steps are accepted."""
    x = np.array(theta0, dtype=float)
    x /= np.linalg.norm(x)
    f, g = obj(x)
    if not math.isfinite(f):
        raise EstimationError("initial point has zero likelihood", {"theta": x})
    n = len(x)
    h = np.eye(n)
    history = [f]
    small = 0
    for it in range(1, max_iter + 1):
        p = h @ g
        slope = float(g @ p)
        if slope <= 0:
            h = np.eye(n)
            p = g.copy()
            slope = float(g @ g)
        if slope <= 1e-300:
            return FitResult(obj.matrix(x), f, history, it - 1)
        step = 1.0
        accepted = False
        for _ in range(80):
            x_new = x + step * p
            f_new, g_new = obj(x_new)
            if math.isfinite(f_new) and f_new >= f + 1e-4 * step * slope:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            if not np.allclose(h, np.eye(n)):
                h = np.eye(n)
                continue
            # no ascent direction left at working precision
            return FitResult(obj.matrix(x), f, history, it - 1)
        # the likelihood is invariant under theta -> c theta; pin the scale
        c = float(np.linalg.norm(x_new))
        x_new, g_new = x_new / c, g_new * c
        s = x_new - x
        y = g - g_new  # gradient of the minimization objective -f changes by -(g_new - g)
        sy = float(s @ y)
        if sy > 1e-300:
            rho = 1.0 / sy
            v = np.eye(n) - rho * np.outer(s, y)
            h = v @ h @ v.T + rho * np.outer(s, s)
        scale = max(abs(f_new), 1e-300)
        rel = (f_new - f) / scale
        x, f, g = x_new, f_new, g_new
        history.append(f)
        # slow progress alone is not convergence near rank-deficient optima
        decrement = float(g @ h @ g) / scale
        small = small + 1 if rel < tol and decrement < tol else 0
        if small >= 2:
            return FitResult(obj.matrix(x), f, history, it)
    raise EstimationError(
        f"likelihood ascent did not converge in {max_iter} iterations",
        {"theta": x, "loglik": f, "iterations": max_iter, "history": history},
    )


def _initial_theta(d: int) -> np.ndarray:
    theta = np.zeros(d * d)
    theta[:d] = 1 / math.sqrt(d)
    return theta


def _groups_for(settings: Sequence[str], offset: int, basis_groups) -> list:
    groups = []
    used = set()
    for grp in basis_groups:
        idx = [offset + i for i, s in enumerate(settings) if s in grp]
        if len(idx) == len(grp):
            groups.append(idx)
            used.update(idx)
    rest = [offset + i for i in range(len(settings)) if offset + i not in used]
    if rest:
        groups.append(rest)
    return groups


def _hermitian_rank(ops: Sequence[np.ndarray]) -> int:
    if not len(ops):
        return 0
    vecs = np.array([np.concatenate([o.real.ravel(), o.imag.ravel()]) for o in ops])
    return int(np.linalg.matrix_rank(vecs, tol=1e-9))


def _informative(counts, groups):
    return [g for g in groups if counts[g].sum() > 0]


# ---------------------------------------------------------------------------
# State reconstruction


def fit_state(
    data: TomographyDataset,
    basis_groups=DEFAULT_GROUPS,
    tol: float = 1e-10,
    max_iter: int = 10000,
) -> FitResult:
    if len(data.input_labels) > 1:
        raise DomainError("state reconstruction needs data restricted to one input")
    settings = [e.setting_label for e in data.entries]
    ops = np.array([_projector(s) for s in settings])
    counts = data.counts
    groups = _groups_for(settings, 0, basis_groups)
    live = _informative(counts, groups)
    if _hermitian_rank([ops[k] for g in live for k in g]) < 4:
        raise RankDeficiencyError("settings with counts do not span the qubit operator space")
    obj = _Objective(ops, counts, live)
    return _ascend(obj, _initial_theta(2), tol, max_iter)


def mle_state_reconstruct(data: TomographyDataset, **kwargs) -> QubitState:
    """Maximum-likelihood density matrix for single-input tomography data."""
    return QubitState(hermitize(fit_state(data, **kwargs).matrix))


# ---------------------------------------------------------------------------
# Process reconstruction


@functools.lru_cache(maxsize=None)
def _process_ops(input_label: str, setting_label: str) -> np.ndarray:
    """Q[n, m] = Tr(E_n P E_m rho) so that p = Tr(chi Q)."""
    rho_in, proj = _projector(input_label), _projector(setting_label)
    return np.array([[np.trace(PAULIS[n] @ proj @ PAULIS[m] @ rho_in) for m in range(4)] for n in range(4)])


def _tp_ops() -> np.ndarray:
    """W_j[n, m] = Tr(E_n E_m sigma_j)/2; TP <=> Tr(chi W_j) = 0 for j = X, Y, Z."""
    return np.array(
        [
            [[np.trace(PAULIS[n] @ PAULIS[m] @ PAULIS[j]) / 2 for m in range(4)] for n in range(4)]
            for j in (1, 2, 3)
        ]
    )


_TP_OPS = _tp_ops()
# Penalty weights per unit of total counts, applied in turn with warm starts.
_TP_SCHEDULE = (1.0, 1e2, 1e4, 1e6)


def fit_process(
    data: TomographyDataset,
    constrain_tp: bool = False,
    basis_groups=DEFAULT_GROUPS,
    tol: float = 1e-10,
    max_iter: int = 10000,
    init: Optional[ProcessMatrix] = None,
) -> FitResult:
    """Process fit; ``init`` warm-starts the ascent (and skips the early
    penalty stages), which pays off for bootstrap resamples."""
    inputs = data.input_labels
    rho_in = {lab: make_state(lab).matrix for lab in inputs}
    if _hermitian_rank(list(rho_in.values())) < 4:
        raise RankDeficiencyError("input states do not span the qubit operator space")
    ops, groups, offset = [], [], 0
    counts = []
    for lab in inputs:
        sub = data.restrict(lab)
        settings = [e.setting_label for e in sub.entries]
        c = sub.counts
        sub_groups = _groups_for(settings, 0, basis_groups)
        live = _informative(c, sub_groups)
        if _hermitian_rank([_projector(settings[k]) for g in live for k in g]) < 4:
            raise RankDeficiencyError(f"settings for input {lab} do not span the operator space")
        ops.extend(_process_ops(lab, s) for s in settings)
        groups.extend([[offset + k for k in g] for g in live])
        counts.extend(c)
        offset += len(settings)
    counts = np.array(counts)
    theta = _initial_theta(4) if init is None else _theta_from_matrix(init.chi)
    if not constrain_tp:
        return _ascend(_Objective(ops, counts, groups), theta, tol, max_iter)
    total = counts.sum()
    history = []
    iterations = 0
    for weight in _TP_SCHEDULE if init is None else _TP_SCHEDULE[-1:]:
        obj = _Objective(ops, counts, groups, _TP_OPS, weight * total)
        fit = _ascend(obj, theta, tol, max_iter)
        history.extend(fit.history)
        iterations += fit.iterations
        theta = _theta_from_matrix(fit.matrix)
    return FitResult(fit.matrix, fit.loglik, history, iterations)


def _theta_from_matrix(m: np.ndarray) -> np.ndarray:
    """Triangular parameters of a PSD matrix (regularized Cholesky)."""
    d = m.shape[0]
    t = np.linalg.cholesky(hermitize(m) + 1e-12 * np.eye(d))
    return _pack_grad(t, d)


def mle_process_reconstruct(data: TomographyDataset, constrain_tp: bool = False, **kwargs) -> ProcessMatrix:
    """Maximum-likelihood chi matrix from six-input process tomography data."""
    fit = fit_process(data, constrain_tp=constrain_tp, **kwargs)
    return ProcessMatrix(hermitize(fit.matrix), trace_preserving=True)


# ---------------------------------------------------------------------------
# Bootstrap


def process_statistic(target: ProcessMatrix, constrain_tp: bool = False) -> Callable:
    def stat(data: TomographyDataset) -> float:
        return process_fidelity(mle_process_reconstruct(data, constrain_tp=constrain_tp), target)

    stat.__name__ = f"process_fidelity_{target.label}"
    return stat


STATISTICS = {
    "process_fidelity_I": process_statistic(IDENTITY),
    "process_fidelity_Z": process_statistic(PAULI_Z),
    "process_fidelity_IZ": process_statistic(HALF_I_HALF_Z),
    "process_fidelity_I_tp": process_statistic(IDENTITY, constrain_tp=True),
}


def bootstrap_uncertainty(
    data: TomographyDataset,
    n_resamples: int,
    seed: int,
    statistic: Union[str, Callable[[TomographyDataset], float]],
    workers: int = 1,
    max_failure_fraction: float = 0.05,
):
    """Mean and standard deviation of ``statistic`` over Poisson resamples.

    ``statistic`` may return a scalar or a 1-D array; the mean and std then
    have the same shape.

    Each count is redrawn from Poisson(observed count); resample ``k`` uses
    child ``k`` of ``SeedSequence(seed)``, so the result does not depend on
    ``workers``.
    """
    if n_resamples < 100:
        raise DomainError("n_resamples must be >= 100")
    if isinstance(statistic, str):
        try:
            statistic = STATISTICS[statistic]
        except KeyError:
            raise DomainError(f"unknown statistic {statistic!r}; known: {sorted(STATISTICS)}") from None
    counts = data.counts
    if counts.sum() == 0:
        raise BootstrapError("data set has no counts")
    children = np.random.SeedSequence(seed).spawn(n_resamples)

    def one(child):
        rng = np.random.default_rng(child)
        try:
            return np.asarray(statistic(data.with_counts(rng.poisson(counts))), dtype=float)
        except EstimationError:
            return None

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            values = list(pool.map(one, children))
    else:
        values = [one(c) for c in children]
    good = np.array([v for v in values if v is not None])
    failed = n_resamples - len(good)
    if failed > max_failure_fraction * n_resamples:
        raise BootstrapError(f"{failed} of {n_resamples} resamples failed", {"failed": failed})
    if failed:
        log.warning("%d of %d bootstrap resamples failed", failed, n_resamples)
    mean, std = good.mean(axis=0), good.std(axis=0, ddof=1)
    if mean.ndim == 0:
        return float(mean), float(std)
    return mean, std
