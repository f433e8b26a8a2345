import numpy as np
from hypothesis import strategies as st

from precert.quantum import unitary_chi, ProcessMatrix, hermitize


def random_unitary(rng):
    z = rng.normal(size=(2, 2)) + 1j * rng.normal(size=(2, 2))
    q, r = np.linalg.qr(z)
    return q * (np.diag(r) / np.abs(np.diag(r)))


def random_density(rng, dim=2, rank=None):
    rank = rank or dim
    g = rng.normal(size=(dim, rank)) + 1j * rng.normal(size=(dim, rank))
    m = g @ g.conj().T
    return hermitize(m / np.trace(m).real)


def random_chi(rng):
    """Random TP channel as a mixture of random unitaries."""
    w = rng.dirichlet(np.ones(3))
    chi = sum(wi * unitary_chi(random_unitary(rng)).chi for wi in w)
    return ProcessMatrix(hermitize(chi))


seeds = st.integers(min_value=0, max_value=2**32 - 1)


def random_scenario(rng, mode="precert", low_loss=False):
    """Random valid scenario; ``low_loss`` keeps coincidences plentiful for sampling."""
    from precert.detection import CoincidenceWindow, DetectorSpec, LossBudget, ScenarioConfig

    labels = ("D1", "D2", "D3", "D4", "D5") if mode == "precert" else ("D1", "D2", "D5")
    dets = []
    for lab in labels:
        eff = rng.uniform(0.2, 1.0) if low_loss else rng.uniform(0.01, 1.0)
        dark = rng.uniform(0, 500) if lab != "D5" else rng.uniform(0, 200)
        jitter = rng.choice([0.0, rng.uniform(0, 500e-12)])
        dets.append(DetectorSpec(lab, eff, dark, jitter, rng.uniform(0, 50)))
    d5 = dets[-1]
    herald = rng.uniform(5e3, 1e5) if low_loss else 10 ** rng.uniform(3, 7.5)
    herald = max(herald, 2 * d5.noise_rate + 1)
    singles = rng.uniform(0.05, 0.95) * (herald - d5.noise_rate) * d5.efficiency
    hi = 3.0 if low_loss else 60.0
    budget = LossBudget(*(rng.uniform(0, hi) for _ in range(5)))
    width = rng.uniform(0.5e-9, 5e-9)
    window = CoincidenceWindow(width, width * rng.uniform(1, 10))
    return ScenarioConfig(mode, singles, herald, tuple(dets), budget, window)
