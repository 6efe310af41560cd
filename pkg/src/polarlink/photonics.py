"""Optical-layer simulation: weak-coherent-pulse source, lossy channel with
optional fading, and a four-channel threshold-detector receiver.

Three evaluation paths share one probabilistic model:

* ``expected_counts`` - closed-form expectations (fast path for SKR curves),
* ``sample_counts`` / ``sample_block_counts`` - tally-level Monte Carlo,
* ``simulate_slots`` - per-slot time-tag Monte Carlo for synchronization
  studies.

A coherent pulse of mean photon number k split by the receiver beamsplitter
produces independent Poissonian fields on each detector, so per-slot detector
clicks are independent Bernoulli events with p = 1-(1-p_dark)exp(-eta*mean).
Dead time is modeled per detector: the expected-value path applies the
non-paralyzable renewal factor 1/(1+rate*dead_time), the tag path prunes the
emitted stream sequentially.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .errors import SaturationWarning
from .protocol import (
    Basis,
    Channel,
    Intensity,
    ObservedCounts,
    ProtocolParams,
    SymbolSequence,
)

__all__ = [
    "SourceModel",
    "ChannelModel",
    "DetectorModel",
    "ConstantFading",
    "LognormalFading",
    "TabulatedFading",
    "TimeTag",
    "TagStream",
    "GroundTruth",
    "SimulationResult",
    "click_probability",
    "apply_fading",
    "expected_rates",
    "expected_counts",
    "sample_counts",
    "sample_block_counts",
    "simulate_slots",
    "ensemble_class_weights",
    "class_weights_from_sequence",
]

_GAUSS_FWHM = 2.0 * math.sqrt(2.0 * math.log(2.0))


@dataclass(frozen=True)
class SourceModel:
    """Transmitter imperfections on top of the protocol parameters.

    ``misalignment_angle`` is the intrinsic polarization error of the key
    basis: sin^2(angle) of each pulse leaks to the orthogonal detector. The
    check basis may carry its own angle (``misalignment_angle_x``); it
    defaults to the key-basis value. ``qber_drift_rate`` ramps the leaked
    fraction linearly in time (fraction per second).
    """

    params: ProtocolParams
    misalignment_angle: float = 0.0
    misalignment_angle_x: float | None = None
    extinction_ratio: float = 0.0
    pulse_width_fwhm_ps: float = 0.0
    qber_drift_rate: float = 0.0

    def __post_init__(self) -> None:
        if not 0 <= self.misalignment_angle < math.pi / 4:
            raise ValueError("misalignment_angle must lie in [0, pi/4)")
        if self.misalignment_angle_x is not None and not 0 <= self.misalignment_angle_x < math.pi / 4:
            raise ValueError("misalignment_angle_x must lie in [0, pi/4)")
        if self.extinction_ratio < 0:
            raise ValueError("extinction_ratio must be >= 0")
        if self.pulse_width_fwhm_ps < 0:
            raise ValueError("pulse_width_fwhm_ps must be >= 0")

    def error_fractions(self, t_s=0.0):
        """(key-basis, check-basis) orthogonal-leak fractions at time t."""
        e_y = math.sin(self.misalignment_angle) ** 2 + self.extinction_ratio
        ax = self.misalignment_angle_x
        e_x = (math.sin(ax) ** 2 if ax is not None else math.sin(self.misalignment_angle) ** 2)
        e_x += self.extinction_ratio
        drift = self.qber_drift_rate * np.asarray(t_s, dtype=float)
        return np.clip(e_y + drift, 0.0, 0.5), np.clip(e_x + drift, 0.0, 0.5)


class FadingModel:
    """Per-slot channel-efficiency multiplier series, sampled at a coherence
    timescale far slower than the slot clock."""

    def mean_multiplier(self) -> float:
        raise NotImplementedError

    def multipliers(self, times_s: np.ndarray) -> np.ndarray:
        raise NotImplementedError


@dataclass
class ConstantFading(FadingModel):
    multiplier: float = 1.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.multiplier <= 1.0:
            raise ValueError("fading multiplier must lie in [0, 1]")

    def mean_multiplier(self) -> float:
        return self.multiplier

    def multipliers(self, times_s):
        return np.full(np.asarray(times_s, dtype=float).shape, self.multiplier)


@dataclass
class LognormalFading(FadingModel):
    """Lognormal turbulence fading held constant within coherence intervals.

    The series is deterministic for a fixed seed: interval i always receives
    the i-th draw, independent of how the run is sharded.
    """

    mean_efficiency: float = 1.0
    sigma_db: float = 1.0
    coherence_time_s: float = 1e-3
    seed: int = 0
    _cache: np.ndarray = field(default_factory=lambda: np.empty(0), repr=False, compare=False)

    def __post_init__(self) -> None:
        if not 0 < self.mean_efficiency <= 1.0:
            raise ValueError("mean_efficiency must lie in (0, 1]")
        if self.coherence_time_s <= 0:
            raise ValueError("coherence_time_s must be positive")

    def mean_multiplier(self) -> float:
        return self.mean_efficiency

    def _draws(self, n: int) -> np.ndarray:
        if self._cache.size < n:
            rng = np.random.Generator(np.random.Philox(np.random.SeedSequence((self.seed, 0xFAD))))
            sigma_ln = self.sigma_db * math.log(10.0) / 10.0
            z = rng.standard_normal(max(n, 1024))
            vals = self.mean_efficiency * np.exp(sigma_ln * z - 0.5 * sigma_ln**2)
            object.__setattr__(self, "_cache", np.clip(vals, 0.0, 1.0))
        return self._cache[:n]

    def multipliers(self, times_s):
        times_s = np.asarray(times_s, dtype=float)
        idx = np.floor_divide(times_s, self.coherence_time_s).astype(np.int64)
        if np.any(idx < 0):
            raise ValueError("fading times must be >= 0")
        draws = self._draws(int(idx.max()) + 1 if idx.size else 0)
        return draws[idx]


@dataclass
class TabulatedFading(FadingModel):
    """Step-hold multiplier series loaded from (time_s, multiplier) samples."""

    times_s: np.ndarray
    values: np.ndarray

    def __post_init__(self) -> None:
        self.times_s = np.asarray(self.times_s, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.times_s.ndim != 1 or self.times_s.shape != self.values.shape or not self.times_s.size:
            raise ValueError("need matching non-empty time/value arrays")
        if np.any(np.diff(self.times_s) <= 0):
            raise ValueError("fading sample times must be strictly increasing")
        if np.any((self.values < 0) | (self.values > 1)):
            raise ValueError("fading multiplier outside [0, 1]")

    @classmethod
    def from_csv(cls, path) -> "TabulatedFading":
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        return cls(data[:, 0], data[:, 1])

    def mean_multiplier(self) -> float:
        return float(self.values.mean())

    def multipliers(self, times_s):
        times_s = np.asarray(times_s, dtype=float)
        idx = np.clip(np.searchsorted(self.times_s, times_s, side="right") - 1, 0, self.values.size - 1)
        return self.values[idx]


def apply_fading(slot_efficiencies: np.ndarray, fading: FadingModel, times_s: np.ndarray) -> np.ndarray:
    """Multiply per-slot efficiencies by the fading series at the slot times."""
    slot_efficiencies = np.asarray(slot_efficiencies, dtype=float)
    mult = np.asarray(fading.multipliers(times_s), dtype=float)
    if mult.shape != slot_efficiencies.shape:
        raise ValueError("fading series does not cover the slots")
    if np.any((mult < 0) | (mult > 1)):
        raise ValueError("fading multiplier outside [0, 1]")
    return slot_efficiencies * mult


@dataclass(frozen=True)
class ChannelModel:
    fixed_loss_db: float = 0.0
    fading: FadingModel | None = None
    background_rate_hz: float = 0.0  # daylight counts/s reaching each detector

    def __post_init__(self) -> None:
        if self.fixed_loss_db < 0:
            raise ValueError("fixed_loss_db must be >= 0")
        if self.background_rate_hz < 0:
            raise ValueError("background_rate_hz must be >= 0")

    @property
    def transmission(self) -> float:
        return 10.0 ** (-self.fixed_loss_db / 10.0)


@dataclass(frozen=True)
class DetectorModel:
    efficiency: float = 0.85
    dark_rate_hz: float = 10.0  # per detector
    dead_time_ns: float = 70.0
    jitter_sigma_ps: float = 30.0
    num_channels: int = 4

    def __post_init__(self) -> None:
        if not 0 < self.efficiency <= 1:
            raise ValueError("efficiency must lie in (0, 1]")
        if self.dark_rate_hz < 0 or self.dead_time_ns < 0 or self.jitter_sigma_ps < 0:
            raise ValueError("detector noise parameters must be >= 0")
        if self.num_channels != 4:
            raise ValueError("receiver has exactly four detector channels")


@dataclass(frozen=True)
class TimeTag:
    channel: Channel
    time_ps: int


class TagStream:
    """Detection record stream: int64 picosecond timestamps plus channel ids,
    sorted by time within each channel."""

    def __init__(self, times_ps: np.ndarray, channels: np.ndarray):
        self.times_ps = np.asarray(times_ps, dtype=np.int64)
        self.channels = np.asarray(channels, dtype=np.uint8)
        if self.times_ps.shape != self.channels.shape or self.times_ps.ndim != 1:
            raise ValueError("times and channels must be matching 1-D arrays")

    def __len__(self) -> int:
        return int(self.times_ps.size)

    def __iter__(self):
        for t, c in zip(self.times_ps, self.channels):
            yield TimeTag(Channel(int(c)), int(t))

    def per_channel(self, channel: Channel) -> np.ndarray:
        return self.times_ps[self.channels == channel]

    def min_gap_ps(self, channel: Channel) -> int:
        t = self.per_channel(channel)
        return int(np.diff(t).min()) if t.size > 1 else np.iinfo(np.int64).max

    _DTYPE = np.dtype([("time_ps", "<u8"), ("channel", "u1")])

    def to_binary(self) -> bytes:
        rec = np.empty(len(self), dtype=self._DTYPE)
        rec["time_ps"] = self.times_ps.astype(np.uint64)
        rec["channel"] = self.channels
        return rec.tobytes()

    @classmethod
    def from_binary(cls, blob: bytes) -> "TagStream":
        rec = np.frombuffer(blob, dtype=cls._DTYPE)
        return cls(rec["time_ps"].astype(np.int64), rec["channel"].astype(np.uint8))

    def to_csv(self) -> str:
        lines = ["time_ps,channel"]
        lines += [f"{int(t)},{Channel(int(c)).name}" for t, c in zip(self.times_ps, self.channels)]
        return "\n".join(lines) + "\n"


@dataclass
class GroundTruth:
    """Per-tag truth emitted alongside a simulated stream."""

    slot_index: np.ndarray  # int64, aligned with the tag stream
    slot_period_ps: float
    time_origin_ps: float


@dataclass
class SimulationResult:
    tags: TagStream
    truth: GroundTruth


def click_probability(mean_photon: float, total_efficiency: float, dark_prob: float = 0.0):
    """Threshold-detector click probability for a WCP of the given mean photon
    number: 1 - (1-dark) * exp(-mean * efficiency)."""
    mean_photon = np.asarray(mean_photon, dtype=float)
    if np.any(mean_photon < 0):
        raise ValueError("mean_photon must be >= 0")
    if np.any((np.asarray(total_efficiency) < 0) | (np.asarray(total_efficiency) > 1)):
        raise ValueError("total_efficiency must lie in [0, 1]")
    if np.any((np.asarray(dark_prob) < 0) | (np.asarray(dark_prob) > 1)):
        raise ValueError("dark_prob must lie in [0, 1]")
    p = dark_prob + (1.0 - dark_prob) * (-np.expm1(-mean_photon * total_efficiency))
    return float(p) if p.ndim == 0 else p


# --- per-class slot statistics ----------------------------------------------

#: transmitter slot classes: (basis, bit, intensity)
CLASSES = [
    (Basis.Y, 0, Intensity.SIGNAL),
    (Basis.Y, 1, Intensity.SIGNAL),
    (Basis.X, 0, Intensity.SIGNAL),
    (Basis.Y, 0, Intensity.DECOY),
    (Basis.Y, 1, Intensity.DECOY),
    (Basis.X, 0, Intensity.DECOY),
]


def ensemble_class_weights(params: ProtocolParams) -> dict:
    """Long-run class frequencies implied by the protocol parameters."""
    out = {}
    for basis, bit, k in CLASSES:
        p_basis = params.p_z_tx if basis == Basis.Y else 1.0 - params.p_z_tx
        p_bit = 0.5 if basis == Basis.Y else 1.0
        out[(basis, bit, k)] = p_basis * p_bit * params.intensity_prob(k)
    return out


def class_weights_from_sequence(seq: SymbolSequence) -> dict:
    """Empirical class frequencies of a concrete transmitted sequence."""
    n = len(seq)
    out = {}
    for basis, bit, k in CLASSES:
        sel = (seq.basis == basis) & (seq.bit == bit) & (seq.intensity == k)
        out[(basis, bit, k)] = float(np.count_nonzero(sel)) / n
    return out


def _detector_means(params, e_y, e_x, k_eff):
    """Mean photon number arriving at each detector for the six classes.

    Returns {class: {channel: mean}}; ``k_eff`` is the per-intensity mean
    photon number at the receiver input (channel loss already applied).
    """
    q = params.p_z_rx
    out = {}
    for basis, bit, k in CLASSES:
        kv = k_eff[k]
        if basis == Basis.Y:
            correct, wrong = (Channel.L, Channel.R) if bit == 0 else (Channel.R, Channel.L)
            means = {
                correct: q * kv * (1.0 - e_y),
                wrong: q * kv * e_y,
                Channel.D: (1.0 - q) * kv * 0.5,
                Channel.A: (1.0 - q) * kv * 0.5,
            }
        else:
            means = {
                Channel.D: (1.0 - q) * kv * (1.0 - e_x),
                Channel.A: (1.0 - q) * kv * e_x,
                Channel.L: q * kv * 0.5,
                Channel.R: q * kv * 0.5,
            }
        out[(basis, bit, k)] = means
    return out


def _outcome_probs(p, basis, bit):
    """Sifted detection and error probabilities for one slot class.

    ``p`` maps channel -> click probability. A slot with clicks in both arms
    is assigned a basis by fair coin; a double click within the chosen basis
    yields a random bit.
    """
    p_y_arm = 1.0 - (1.0 - p[Channel.L]) * (1.0 - p[Channel.R])
    p_x_arm = 1.0 - (1.0 - p[Channel.D]) * (1.0 - p[Channel.A])
    if basis == Basis.Y:
        pick = 1.0 - 0.5 * p_x_arm
        n_prob = p_y_arm * pick
        correct, wrong = (Channel.L, Channel.R) if bit == 0 else (Channel.R, Channel.L)
        m_prob = (p[wrong] * (1.0 - p[correct]) + 0.5 * p[wrong] * p[correct]) * pick
    else:
        pick = 1.0 - 0.5 * p_y_arm
        n_prob = p_x_arm * pick
        m_prob = (p[Channel.A] * (1.0 - p[Channel.D]) + 0.5 * p[Channel.A] * p[Channel.D]) * pick
    return n_prob, m_prob


@dataclass
class ExpectedRates:
    """Stationary per-slot statistics of one operating point."""

    per_second: ObservedCounts  # expectations over one second
    class_weights: dict
    sift_probs: dict  # class -> (n_prob, m_prob), dead time applied
    detector_rates_hz: dict  # incident per-detector rates, before dead time
    dead_time_factors: dict
    saturated: bool


def expected_rates(
    params: ProtocolParams,
    source: SourceModel,
    channel: ChannelModel,
    detector: DetectorModel,
    *,
    t_s: float = 0.0,
    fading_multiplier: float | None = None,
    class_weights: dict | None = None,
    warn_on_saturation: bool = True,
) -> ExpectedRates:
    """Closed-form per-slot statistics at one instant of the run."""
    weights = class_weights or ensemble_class_weights(params)
    e_y, e_x = source.error_fractions(t_s)
    fade = (
        fading_multiplier
        if fading_multiplier is not None
        else (channel.fading.mean_multiplier() if channel.fading else 1.0)
    )
    lin = channel.transmission * fade
    k_eff = {k: params.intensity_value(k) * lin for k in (Intensity.SIGNAL, Intensity.DECOY)}
    dark_prob = (detector.dark_rate_hz + channel.background_rate_hz) / params.rep_rate_hz

    means = _detector_means(params, float(e_y), float(e_x), k_eff)
    p_click = {
        cls: {ch: click_probability(m, detector.efficiency, dark_prob) for ch, m in chans.items()}
        for cls, chans in means.items()
    }

    detector_rates = {
        ch: params.rep_rate_hz * sum(weights[cls] * p_click[cls][ch] for cls in CLASSES)
        for ch in Channel
    }
    tau = detector.dead_time_ns * 1e-9
    factors = {ch: 1.0 / (1.0 + r * tau) for ch, r in detector_rates.items()}
    saturated = any(r * tau >= 1.0 for r in detector_rates.values())
    if saturated and warn_on_saturation:
        worst = max(detector_rates.values()) * tau
        warnings.warn(
            f"detector click rate x dead time = {worst:.2f} >= 1: saturation regime",
            SaturationWarning,
            stacklevel=2,
        )

    sift_probs = {}
    per_second = ObservedCounts.zero()
    per_second.acquisition_time_s = 1.0
    for cls in CLASSES:
        basis, bit, k = cls
        p_eff = {ch: p_click[cls][ch] * factors[ch] for ch in Channel}
        n_prob, m_prob = _outcome_probs(p_eff, basis, bit)
        sift_probs[cls] = (n_prob, m_prob)
        slots_per_s = params.rep_rate_hz * weights[cls]
        per_second.n[(basis, k)] += slots_per_s * n_prob
        per_second.m[(basis, k)] += slots_per_s * m_prob
        per_second.slots_sent[k] += slots_per_s

    return ExpectedRates(
        per_second=per_second,
        class_weights=weights,
        sift_probs=sift_probs,
        detector_rates_hz=detector_rates,
        dead_time_factors=factors,
        saturated=saturated,
    )


def _time_bins(source, channel, duration_s, n_time_bins):
    if n_time_bins is None:
        n_time_bins = 128 if (source.qber_drift_rate != 0.0 or channel.fading is not None) else 1
    edges = np.linspace(0.0, duration_s, n_time_bins + 1)
    return 0.5 * (edges[:-1] + edges[1:]), np.diff(edges)


def expected_counts(
    params: ProtocolParams,
    source: SourceModel,
    channel: ChannelModel,
    detector: DetectorModel,
    duration_s: float,
    *,
    t_start_s: float = 0.0,
    n_time_bins: int | None = None,
    class_weights: dict | None = None,
) -> ObservedCounts:
    """Analytic expectation of the sifted tallies over an acquisition window.

    Drift and fading are integrated with piecewise-constant time bins; the
    Monte Carlo paths converge to these values as the duration grows.
    """
    if duration_s <= 0:
        raise ValueError("duration_s must be positive")
    mids, widths = _time_bins(source, channel, duration_s, n_time_bins)
    out = ObservedCounts.zero()
    for mid, width in zip(mids, widths):
        t = t_start_s + mid
        fade = float(channel.fading.multipliers(np.array([t]))[0]) if channel.fading else 1.0
        rates = expected_rates(
            params,
            source,
            channel,
            detector,
            t_s=t,
            fading_multiplier=fade,
            class_weights=class_weights,
        )
        out = out + rates.per_second.scaled(width)
    return out


def sample_counts(
    params: ProtocolParams,
    source: SourceModel,
    channel: ChannelModel,
    detector: DetectorModel,
    duration_s: float,
    rng: np.random.Generator,
    *,
    t_start_s: float = 0.0,
    n_time_bins: int | None = None,
    class_weights: dict | None = None,
) -> ObservedCounts:
    """Tally-level Monte Carlo draw of the sifted counts for one window."""
    if duration_s <= 0:
        raise ValueError("duration_s must be positive")
    mids, widths = _time_bins(source, channel, duration_s, n_time_bins)
    weights = class_weights or ensemble_class_weights(params)
    w = np.array([weights[c] for c in CLASSES])
    out = ObservedCounts.zero()
    out.acquisition_time_s = duration_s
    for mid, width in zip(mids, widths):
        t = t_start_s + mid
        fade = float(channel.fading.multipliers(np.array([t]))[0]) if channel.fading else 1.0
        rates = expected_rates(
            params, source, channel, detector,
            t_s=t, fading_multiplier=fade, class_weights=weights,
        )
        slots = rng.poisson(params.rep_rate_hz * width)
        per_class = rng.multinomial(slots, w / w.sum())
        for cls, s_c in zip(CLASSES, per_class):
            basis, bit, k = cls
            n_prob, m_prob = rates.sift_probs[cls]
            n_c = rng.binomial(s_c, n_prob)
            m_c = rng.binomial(n_c, m_prob / n_prob) if n_c and n_prob > 0 else 0
            out.n[(basis, k)] += float(n_c)
            out.m[(basis, k)] += float(m_c)
            out.slots_sent[k] += float(s_c)
    out.validate()
    return out


def sample_block_counts(
    rates: ExpectedRates,
    params: ProtocolParams,
    n_z_target: int,
    rng: np.random.Generator,
) -> ObservedCounts:
    """Monte Carlo draw of one key block: slots run until the key basis has
    accumulated exactly ``n_z_target`` sifted detections.

    The number of slots needed is negative-binomial; check-basis counts follow
    from the realized acquisition window.
    """
    weights, probs = rates.class_weights, rates.sift_probs
    y_classes = [c for c in CLASSES if c[0] == Basis.Y]
    x_classes = [c for c in CLASSES if c[0] == Basis.X]
    p_z = sum(weights[c] * probs[c][0] for c in y_classes)
    if p_z <= 0:
        raise ValueError("key-basis detection probability is zero")
    slots = n_z_target + rng.negative_binomial(n_z_target, p_z)

    out = ObservedCounts.zero()
    out.acquisition_time_s = slots / params.rep_rate_hz

    # Split the Z successes over (class, error?) cells.
    cells = []
    cell_p = []
    for c in y_classes:
        n_p, m_p = probs[c]
        cells.append((c, True))
        cell_p.append(weights[c] * m_p)
        cells.append((c, False))
        cell_p.append(weights[c] * (n_p - m_p))
    cell_p = np.array(cell_p)
    draw = rng.multinomial(n_z_target, cell_p / cell_p.sum())
    for (cls, is_err), cnt in zip(cells, draw):
        _, _, k = cls
        out.n[(Basis.Y, k)] += float(cnt)
        if is_err:
            out.m[(Basis.Y, k)] += float(cnt)

    for c in x_classes:
        n_p, m_p = probs[c]
        n_c = rng.binomial(slots, weights[c] * n_p)
        m_c = rng.binomial(n_c, m_p / n_p) if n_c and n_p > 0 else 0
        _, _, k = c
        out.n[(Basis.X, k)] += float(n_c)
        out.m[(Basis.X, k)] += float(m_c)

    sig_frac = sum(weights[c] for c in CLASSES if c[2] == Intensity.SIGNAL)
    sent_mu = rng.binomial(slots, sig_frac)
    out.slots_sent[Intensity.SIGNAL] = float(sent_mu)
    out.slots_sent[Intensity.DECOY] = float(slots - sent_mu)
    out.validate()
    return out


# --- time-tag simulation -----------------------------------------------------

def _prune_dead_time(times: np.ndarray, dead_ps: float) -> np.ndarray:
    """Indices of tags surviving non-paralyzable dead time (times sorted)."""
    keep = np.zeros(times.size, dtype=bool)
    last = -np.inf
    for i, t in enumerate(times):
        if t - last >= dead_ps:
            keep[i] = True
            last = t
    return keep


#: Slots per RNG shard. Shards are aligned to absolute slot indices, so a
#: window simulated as [0, 2Q) equals the union of [0, Q) and [Q, 2Q).
_SHARD_SLOTS = 1 << 20


def simulate_slots(
    sequence: SymbolSequence,
    source: SourceModel,
    channel: ChannelModel,
    detector: DetectorModel,
    rng_seed: int,
    *,
    n_slots: int | None = None,
    start_slot: int = 0,
    time_origin_ps: float = 0.0,
) -> SimulationResult:
    """Per-slot Monte Carlo producing a time-tag stream plus ground truth.

    The transmitted sequence repeats cyclically over ``n_slots`` slots.
    Timestamps are slot centers plus Gaussian jitter (detector jitter and
    pulse width added in quadrature); darks and background fold into the
    per-slot click probability. Slots are processed in fixed shards aligned
    to absolute slot indices, each with its own counter-based RNG stream
    derived from (seed, shard index): the output is deterministic for a fixed
    seed regardless of processing order, and simulating a sub-window
    reproduces the corresponding piece of the full stream.
    """
    if n_slots is None:
        n_slots = len(sequence)
    if n_slots < 1:
        raise ValueError("n_slots must be >= 1")
    params = source.params
    period_ps = params.slot_period_ps
    lin = channel.transmission
    dark_prob = (detector.dark_rate_hz + channel.background_rate_hz) / params.rep_rate_hz
    sigma_ps = math.hypot(detector.jitter_sigma_ps, source.pulse_width_fwhm_ps / _GAUSS_FWHM)
    q = params.p_z_rx

    # Emit a saturation warning off the stationary expectation.
    expected_rates(params, source, channel, detector, class_weights=class_weights_from_sequence(sequence))

    all_times = {ch: [] for ch in Channel}
    all_slots = {ch: [] for ch in Channel}
    end_slot = start_slot + n_slots
    first_shard = start_slot // _SHARD_SLOTS
    last_shard = (end_slot - 1) // _SHARD_SLOTS
    for shard_idx in range(first_shard, last_shard + 1):
        # Draw for the full shard so sub-windows reproduce the same stream.
        shard_start = shard_idx * _SHARD_SLOTS
        shard_n = _SHARD_SLOTS
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence((rng_seed, shard_idx))))
        idx = np.arange(shard_start, shard_start + shard_n, dtype=np.int64)
        basis, bit, intensity = sequence.columns_at(idx, cyclic=True)
        t_slot_s = (idx + 0.5) * period_ps * 1e-12
        e_y, e_x = source.error_fractions(t_slot_s)

        k_val = np.where(intensity == Intensity.SIGNAL, params.mu, params.nu) * lin
        if channel.fading is not None:
            k_val = apply_fading(k_val, channel.fading, t_slot_s)

        is_y0 = (basis == Basis.Y) & (bit == 0)
        is_y1 = (basis == Basis.Y) & (bit == 1)
        is_x = basis == Basis.X
        mean = {
            Channel.L: q * k_val * ((1 - e_y) * is_y0 + e_y * is_y1 + 0.5 * is_x),
            Channel.R: q * k_val * (e_y * is_y0 + (1 - e_y) * is_y1 + 0.5 * is_x),
            Channel.D: (1 - q) * k_val * (0.5 * (is_y0 | is_y1) + (1 - e_x) * is_x),
            Channel.A: (1 - q) * k_val * (0.5 * (is_y0 | is_y1) + e_x * is_x),
        }
        for ch in Channel:
            p = dark_prob + (1.0 - dark_prob) * (-np.expm1(-detector.efficiency * mean[ch]))
            hit = np.flatnonzero(rng.random(shard_n) < p)
            jitter = rng.normal(0.0, sigma_ps, size=shard_n)
            hit = hit[(idx[hit] >= start_slot) & (idx[hit] < end_slot)]
            if hit.size == 0:
                continue
            slots_hit = idx[hit]
            times = (slots_hit + 0.5) * period_ps + time_origin_ps + jitter[hit]
            all_times[ch].append(times)
            all_slots[ch].append(slots_hit)

    dead_ps = detector.dead_time_ns * 1e3
    out_times, out_channels, out_slots = [], [], []
    for ch in Channel:
        if not all_times[ch]:
            continue
        times = np.concatenate(all_times[ch])
        slots = np.concatenate(all_slots[ch])
        order = np.argsort(times, kind="stable")
        times, slots = times[order], slots[order]
        if dead_ps > 0:
            keep = _prune_dead_time(times, dead_ps)
            times, slots = times[keep], slots[keep]
        out_times.append(np.round(times).astype(np.int64))
        out_channels.append(np.full(times.size, ch, dtype=np.uint8))
        out_slots.append(slots)

    if out_times:
        times = np.concatenate(out_times)
        channels = np.concatenate(out_channels)
        slots = np.concatenate(out_slots)
        order = np.argsort(times, kind="stable")
        times, channels, slots = times[order], channels[order], slots[order]
    else:
        times = np.empty(0, np.int64)
        channels = np.empty(0, np.uint8)
        slots = np.empty(0, np.int64)

    return SimulationResult(
        tags=TagStream(times, channels),
        truth=GroundTruth(slot_index=slots, slot_period_ps=period_ps, time_origin_ps=time_origin_ps),
    )
