"""Event-level Monte Carlo twin of :func:`precert.detection.analytic_rates`.

Only pairs that produce at least one click at Bob are simulated explicitly.
Everything else (D5 clicks of other pairs, D5/signal dark counts) is an
independent Poisson process, and those are sampled only on the union of the
coincidence windows around flag clicks: a Poisson process restricted to a set
is Poisson on that set, so this is exact, and it keeps the default 2.5e7/s D5
stream affordable.

The run is split into fixed-length chunks, each seeded from ``(seed, chunk
index)``; chunk lengths never depend on the worker count, so results are
bit-identical for any parallelism.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .detection import (
    FLAG_SIGNAL,
    HERALD_FLAG,
    TRIPLE,
    Coincidence,
    CountRecord,
    Histogram,
    Mode,
    ScenarioConfig,
    _arms,
    histogram_edges,
)
from .errors import DomainError

# Target number of explicit events (flag clicks + Bob pairs) per chunk.
_EVENTS_PER_CHUNK = 400_000
_NOISE = -1


@dataclass
class _Tally:
    singles: np.ndarray  # D1..D5 click counts
    coinc: np.ndarray  # rows: pattern; cols: total, true, noise

    @classmethod
    def empty(cls):
        return cls(np.zeros(5, dtype=np.int64), np.zeros((3, 3), dtype=np.int64))

    def __iadd__(self, other):
        self.singles += other.singles
        self.coinc += other.coinc
        return self


def _restricted_poisson(rng, centers, half, rate, t0, t1):
    """Poisson(rate) event times on the union of [c-half, c+half].

    Also returns the number of events in the rest of [t0, t1), so singles
    counts stay consistent with the sampled window contents.
    """
    if rate == 0:
        return np.empty(0), 0
    if len(centers):
        lo = np.sort(centers) - half
        hi = lo + 2 * half
        # merge overlapping intervals
        new = np.empty(len(lo), dtype=bool)
        new[0] = True
        new[1:] = lo[1:] > np.maximum.accumulate(hi)[:-1]
        starts = lo[new]
        ends = np.maximum.reduceat(hi, np.flatnonzero(new))
        lengths = ends - starts
        n = rng.poisson(rate * lengths.sum())
        which = rng.choice(len(starts), size=n, p=lengths / lengths.sum())
        times = np.sort(starts[which] + rng.random(n) * lengths[which])
        inside = np.clip(np.minimum(ends, t1) - np.maximum(starts, t0), 0, None).sum()
    else:
        times = np.empty(0)
        inside = 0.0
    outside = rng.poisson(rate * max(t1 - t0 - inside, 0.0))
    in_chunk = int(np.count_nonzero((times >= t0) & (times < t1)))
    return times, in_chunk + outside


def _in_window(sorted_times, centers, half):
    return np.searchsorted(sorted_times, centers + half, side="right") - np.searchsorted(
        sorted_times, centers - half, side="left"
    )


class _Plan:
    """Per-config constants shared by all chunks."""

    def __init__(self, config: ScenarioConfig):
        self.config = config
        t, flag, signal = _arms(config)
        d5 = config.detector("D5")
        self.d5 = d5
        self.flag = flag
        self.signal = signal
        self.pair_rate = config.pair_rate
        # P(qubit converted/arrives at Bob's arms | pair)
        self.reach = config.herald_coupling * t
        self.phi = float(flag.probs.sum())
        self.psi = float(signal.probs.sum()) if signal is not None else 0.0
        self.p_any = self.reach * (1 - (1 - self.phi) * (1 - self.psi))
        self.bob_rate = self.pair_rate * self.p_any
        self.d5_background = self.pair_rate * d5.efficiency * (1 - self.p_any) + d5.noise_rate
        self.a = config.window.herald_width / 2
        self.b = config.window.width / 2
        expected = self.bob_rate + float(flag.noise.sum())
        self.chunk = _EVENTS_PER_CHUNK / expected if expected > 0 else math.inf


def _simulate_chunk(plan: _Plan, seed: int, index: int, t0: float, t1: float) -> _Tally:
    rng = np.random.default_rng(np.random.SeedSequence([seed, index]))
    flag, signal = plan.flag, plan.signal
    tally = _Tally.empty()
    dur = t1 - t0

    # Pairs with at least one click at Bob.
    n = rng.poisson(plan.bob_rate * dur)
    t_emit = t0 + rng.random(n) * dur
    phi, psi = plan.phi, plan.psi
    weights = np.array([phi * (1 - psi), (1 - phi) * psi, phi * psi])
    cat = rng.choice(3, size=n, p=weights / weights.sum()) if n else np.empty(0, dtype=int)
    has_flag = cat != 1
    has_sig = cat != 0
    flag_det = rng.choice(len(flag.probs), size=n, p=flag.probs / phi) if phi > 0 else np.zeros(n, int)
    has_d5 = rng.random(n) < plan.d5.efficiency
    t5_own = t_emit + rng.normal(0, 1, n) * plan.d5.jitter
    tf_own = t_emit + rng.normal(0, 1, n) * flag.jitters[flag_det]
    if signal is not None:
        sig_det = rng.choice(len(signal.probs), size=n, p=signal.probs / psi) if psi > 0 else np.zeros(n, int)
        ts_own = t_emit + rng.normal(0, 1, n) * signal.jitters[sig_det]
    pair_id = np.arange(n)

    # Flag clicks: photons plus per-detector noise.
    f_times = [tf_own[has_flag]]
    f_ids = [pair_id[has_flag]]
    for i, rate in enumerate(flag.noise):
        k = rng.poisson(rate * dur)
        f_times.append(t0 + rng.random(k) * dur)
        f_ids.append(np.full(k, _NOISE))
        tally.singles[i] += k
    for i in range(len(flag.probs)):
        tally.singles[i] += int(np.count_nonzero(has_flag & (flag_det == i)))
    tf = np.concatenate(f_times)
    fid = np.concatenate(f_ids)

    # D5: own heralds of explicit pairs plus restricted background.
    own5 = has_d5
    bg5, bg5_count = _restricted_poisson(rng, tf, plan.a, plan.d5_background, t0, t1)
    tally.singles[4] += int(own5.sum()) + bg5_count
    t5 = np.sort(np.concatenate([t5_own[own5], bg5]))

    n5 = _in_window(t5, tf, plan.a)
    photon_flag = fid != _NOISE
    own = fid[photon_flag]
    own_5_hit = np.zeros(len(tf), dtype=bool)
    own_5_hit[photon_flag] = has_d5[own] & (np.abs(tf[photon_flag] - t5_own[own]) <= plan.a)
    tally.coinc[0] = (n5.sum(), own_5_hit.sum(), n5[~photon_flag].sum())

    if signal is None:
        return tally

    s_times = [ts_own[has_sig]]
    s_noise_flags = [np.zeros(int(has_sig.sum()), dtype=bool)]
    for j in range(len(signal.probs)):
        tally.singles[2 + j] += int(np.count_nonzero(has_sig & (sig_det == j)))
    for j, rate in enumerate(signal.noise):
        times, count = _restricted_poisson(rng, tf, plan.b, rate, t0, t1)
        s_times.append(times)
        s_noise_flags.append(np.ones(len(times), dtype=bool))
        tally.singles[2 + j] += count
    ts_all = np.concatenate(s_times)
    order = np.argsort(ts_all, kind="stable")
    ts = ts_all[order]
    s_noise = np.concatenate(s_noise_flags)[order]
    ts_noise = ts[s_noise]

    ns = _in_window(ts, tf, plan.b)
    ns_noise = _in_window(ts_noise, tf, plan.b)
    own_s_hit = np.zeros(len(tf), dtype=bool)
    own_s_hit[photon_flag] = has_sig[own] & (np.abs(ts_own[own] - tf[photon_flag]) <= plan.b)
    tally.coinc[1] = (ns.sum(), own_s_hit.sum(), ns_noise.sum())
    tally.coinc[2] = ((n5 * ns).sum(), (own_5_hit & own_s_hit).sum(), (n5 * ns_noise).sum())
    return tally


def monte_carlo_counts(
    config: ScenarioConfig,
    duration: float,
    seed: int,
    workers: int = 1,
) -> CountRecord:
    """Sampled count record over ``duration`` seconds (rates in 1/s)."""
    if duration <= 0:
        raise DomainError("duration must be > 0")
    plan = _Plan(config)
    n_chunks = max(1, math.ceil(duration / plan.chunk))
    bounds = np.linspace(0.0, duration, n_chunks + 1)
    jobs = [(k, bounds[k], bounds[k + 1]) for k in range(n_chunks)]

    def run(job):
        k, t0, t1 = job
        return _simulate_chunk(plan, seed, k, t0, t1)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, jobs))
    else:
        parts = [run(j) for j in jobs]
    total = _Tally.empty()
    for part in parts:
        total += part

    labels = ("D1", "D2", "D3", "D4", "D5")
    singles = {lab: total.singles[i] / duration for i, lab in enumerate(labels)}
    coincidences = {}
    for row, pattern in enumerate((HERALD_FLAG, FLAG_SIGNAL, TRIPLE)):
        tot, true, noise = total.coinc[row]
        coincidences[pattern] = Coincidence(true / duration, (tot - true) / duration, noise / duration)
    return CountRecord(singles, coincidences, duration=duration)


def monte_carlo_histogram(
    config: ScenarioConfig,
    duration: float,
    seed: int,
    flag_labels=("D1", "D2"),
    span: float = 50e-9,
) -> Histogram:
    """Sampled flag-signal delay histogram (rates per bin).

    Signal clicks are sampled only within ``span`` of each selected flag
    click, the same restriction trick as :func:`monte_carlo_counts`.
    """
    if config.mode is not Mode.PRECERT:
        raise DomainError("histogram needs precert mode")
    t, flag, signal = _arms(config)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5A5]))
    edges = histogram_edges(config.window.width, span)
    half = edges[-1]
    counts = np.zeros(len(edges) - 1, dtype=np.int64)
    idx = [flag.labels.index(lab) for lab in flag_labels]
    flux = config.qubit_flux * t
    for i in idx:
        # photon flag clicks on detector i, each with an independent signal fate
        n_flag_photons = rng.poisson(flux * flag.probs[i] * duration)
        n_noise = rng.poisson(flag.noise[i] * duration)
        n_clicks = n_flag_photons + n_noise
        for j in range(len(signal.probs)):
            partner = rng.random(n_flag_photons) < signal.probs[j] / (1 - sum(signal.probs[:j]))
            # sequential thinning keeps at most one signal detector per pair
            n_pairs = int(partner.sum())
            n_flag_photons -= n_pairs
            dt = rng.normal(0, 1, n_pairs) * math.hypot(flag.jitters[i], signal.jitters[j])
            counts += np.histogram(dt, edges)[0]
        rs_total = sum(flux * p + n for p, n in zip(signal.probs, signal.noise))
        # uniform accidentals around every flag click (windows rarely overlap)
        k = rng.poisson(n_clicks * rs_total * 2 * half)
        counts += np.histogram(rng.uniform(-half, half, k), edges)[0]
    return Histogram(edges, counts / duration)


def histogram_snr(hist: Histogram) -> float:
    """Central bin excess over the mean off-peak bin, divided by that mean."""
    mid = len(hist.rates) // 2
    off = np.delete(hist.rates, mid)
    background = off.mean()
    if background == 0:
        return math.inf
    return (hist.rates[mid] - background) / background
