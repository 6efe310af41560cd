"""Receiver-side clock recovery from the quantum-signal detections alone.

The transmitter clock is recovered in three stages:

1. frequency: a coarse periodogram search within +-50 ppm of the nominal
   period (the candidate maximizing the vector strength of tag phases folded
   modulo the period, i.e. minimizing their circular variance), refined by a
   zoomed grid and iterated least squares of timestamp against provisional
   slot index;
2. offset: cross-correlation of the detection pattern, folded into slots,
   against the expected click pattern of a public symbol prefix, yielding the
   integer slot lag;
3. assignment: each tag mapped to its nearest slot center, with residual
   statistics for jitter reporting.

No dedicated synchronization channel is used; the quantum detections carry
all timing information.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DegradedLockWarning, NoLockError
from .protocol import Intensity, ProtocolParams, SymbolSequence

__all__ = [
    "ClockEstimate",
    "SyncConfig",
    "SlotAssignment",
    "estimate_period",
    "estimate_offset",
    "assign_slots",
    "recover_clock",
    "jitter_histogram",
]

_GAUSS_FWHM = 2.0 * math.sqrt(2.0 * math.log(2.0))


@dataclass(frozen=True)
class ClockEstimate:
    period_ps: float
    offset_ps: float  # receiver time of the slot-0 center
    residual_sigma_ps: float
    confidence: float  # peak-to-floor ratio of the weakest lock stage

    def slot_of(self, times_ps: np.ndarray) -> np.ndarray:
        """Map timestamps to slot indices; boundary ties go to the earlier slot."""
        x = (np.asarray(times_ps, dtype=float) - self.offset_ps) / self.period_ps
        return np.ceil(x - 0.5).astype(np.int64)


@dataclass(frozen=True)
class SyncConfig:
    nominal_period_ps: float
    prefix: SymbolSequence  # public non-secret symbol prefix
    window_tags: int = 100_000
    lock_threshold: float = 6.0
    search_ppm: float = 50.0
    circular: bool = True  # prefix repeats back to back (folded correlation)
    max_linear_slots: int = 1 << 26

    def __post_init__(self) -> None:
        if self.nominal_period_ps <= 0:
            raise ValueError("nominal_period_ps must be positive")
        if self.window_tags < 100:
            raise ValueError("window_tags too small for a frequency lock")


@dataclass
class SlotAssignment:
    slots: np.ndarray
    residuals_ps: np.ndarray
    sigma_ps: float
    fwhm_ps: float
    degraded: bool


def _fold_score(times: np.ndarray, periods: np.ndarray, chunk: int = 64) -> np.ndarray:
    """|mean(exp(2*pi*i*t/T))| for each candidate period (vector strength)."""
    out = np.empty(periods.size)
    for i in range(0, periods.size, chunk):
        ph = times[:, None] * (2.0 * np.pi / periods[None, i : i + chunk])
        out[i : i + chunk] = np.abs(np.exp(1j * ph).mean(axis=0))
    return out


def _regression_refine(times: np.ndarray, period: float, iterations: int = 3):
    """Least-squares fit of timestamps against provisional slot indices."""
    anchor = times[0]
    for _ in range(iterations):
        k = np.round((times - anchor) / period)
        km, tm = k.mean(), times.mean()
        dk = k - km
        denom = float(np.dot(dk, dk))
        if denom == 0:
            break
        period = float(np.dot(dk, times - tm) / denom)
        anchor = tm - period * km
    k = np.round((times - anchor) / period)
    residuals = times - (anchor + k * period)
    return period, anchor, float(residuals.std())


def _estimate_period_full(
    times_ps,
    nominal_period_ps,
    window_tags=None,
    *,
    search_ppm=50.0,
    lock_threshold=6.0,
):
    times = np.sort(np.asarray(times_ps, dtype=float))
    if window_tags is not None:
        times = times[: int(window_tags)]
    if times.size < 100:
        raise NoLockError(f"need at least 100 tags for a frequency lock, got {times.size}")
    t0 = times[0]
    times = times - t0

    # Coarse stage on a subset; the grid step keeps the worst-case phase
    # drift across the subset span below an eighth of a period.
    subset = times[: min(times.size, 20_000)]
    span = max(float(subset[-1]), nominal_period_ps)
    half = search_ppm * 1e-6 * nominal_period_ps
    step = nominal_period_ps**2 / (8.0 * span)
    n_pts = max(int(math.ceil(2.0 * half / step)) + 1, 25)
    grid = np.linspace(nominal_period_ps - half, nominal_period_ps + half, n_pts)
    scores = _fold_score(subset, grid)
    peak_idx = int(np.argmax(scores))
    # Floor = expected vector strength of uniformly random phases, sqrt(pi/4n);
    # an empirical floor would be biased by periodogram aliases of dense streams.
    floor = math.sqrt(math.pi / (4.0 * subset.size))
    confidence = scores[peak_idx] / floor
    if confidence < lock_threshold:
        raise NoLockError(
            f"no significant periodicity: peak/floor {confidence:.2f} < {lock_threshold}"
        )
    period = float(grid[peak_idx])

    # Zoom around the coarse peak on a longer subset, then polish on the full
    # window by regression on provisional slot indices. The zoom leaves the
    # residual period error small enough that the regression's index rounding
    # is unambiguous across the full span.
    zoom = times[: min(times.size, 200_000)]
    span_zoom = max(float(zoom[-1]), nominal_period_ps)
    step_zoom = nominal_period_ps**2 / (8.0 * span_zoom)
    n_zoom = min(max(int(math.ceil(4.0 * step / step_zoom)) + 1, 5), 4096)
    grid2 = np.linspace(period - 2.0 * step, period + 2.0 * step, n_zoom)
    scores2 = _fold_score(zoom, grid2)
    period = float(grid2[int(np.argmax(scores2))])

    period, anchor, resid = _regression_refine(times, period)
    return period, anchor + t0, resid, float(confidence)


def estimate_period(
    times_ps: np.ndarray,
    nominal_period_ps: float,
    window_tags: int | None = None,
    *,
    search_ppm: float = 50.0,
    lock_threshold: float = 6.0,
) -> float:
    """Recover the slot period from tag arrival times.

    Raises :class:`NoLockError` when no candidate within the +-``search_ppm``
    span stands above the periodogram noise floor by ``lock_threshold``.
    """
    period, _, _, _ = _estimate_period_full(
        times_ps,
        nominal_period_ps,
        window_tags,
        search_ppm=search_ppm,
        lock_threshold=lock_threshold,
    )
    return period


def _pattern_weights(prefix: SymbolSequence, params: ProtocolParams | None) -> np.ndarray:
    """Normalized expected per-slot click weight of the prefix.

    Click probability is proportional to the slot's mean photon number in the
    low-transmission regime, so the decoy intensity modulation itself is the
    correlation template.
    """
    mu, nu = (params.mu, params.nu) if params is not None else (1.0, 0.5)
    w = np.where(prefix.intensity == Intensity.SIGNAL, mu, nu).astype(float)
    w -= w.mean()
    std = w.std()
    if std == 0:
        raise NoLockError("public prefix has no intensity contrast to correlate against")
    return w / std


def _xcorr_scores(h: np.ndarray, w: np.ndarray, circular: bool) -> np.ndarray:
    """scores[lag] = sum_j h[j] * w[j + lag] for lag in [0, len(w))."""
    L = w.size
    if circular:
        return np.fft.irfft(np.conj(np.fft.rfft(h)) * np.fft.rfft(w), n=L)
    n = max(h.size + L, 2 * L)
    c = np.fft.irfft(np.conj(np.fft.rfft(h, n)) * np.fft.rfft(w, n), n)
    return c[:L]


def estimate_offset(
    times_ps: np.ndarray,
    period_ps: float,
    prefix: SymbolSequence,
    *,
    params: ProtocolParams | None = None,
    anchor_ps: float | None = None,
    circular: bool = True,
    lock_threshold: float = 6.0,
    max_linear_slots: int = 1 << 26,
) -> tuple[int, float]:
    """Integer slot lag aligning receiver slot indices with the transmitter.

    Returns ``(lag_slots, confidence)``: the true transmitted slot of a tag
    with provisional index k is ``k + lag``. With ``circular=True`` the prefix
    repeats back to back and the lag is resolved modulo its length; otherwise
    the prefix sits once at the head of the stream and lags are searched over
    ``[0, len(prefix))``.

    Raises :class:`NoLockError` on a weak correlation peak or an ambiguous one
    (second peak within 3 dB).
    """
    times = np.asarray(times_ps, dtype=float)
    if times.size == 0:
        raise NoLockError("no tags to correlate")
    if anchor_ps is None:
        anchor_ps = float(times.min())
    k = np.round((times - anchor_ps) / period_ps).astype(np.int64)
    k = k[k >= 0]
    w = _pattern_weights(prefix, params)
    L = len(prefix)

    if circular:
        h = np.bincount(k % L, minlength=L).astype(float)
    else:
        n_slots = int(k.max()) + 1
        if n_slots > max_linear_slots:
            raise NoLockError("stream too long for linear prefix correlation")
        h = np.bincount(k, minlength=n_slots).astype(float)
    scores = _xcorr_scores(h, w, circular)

    mean, std = float(scores.mean()), float(scores.std())
    if std == 0:
        raise NoLockError("flat offset correlation")
    z = (scores - mean) / std
    peak = int(np.argmax(z))
    conf = float(z[peak])
    if conf < lock_threshold:
        raise NoLockError(f"offset correlation peak {conf:.2f} below threshold {lock_threshold}")
    guard = np.ones(z.size, dtype=bool)
    guard[max(peak - 2, 0) : peak + 3] = False
    if guard.any():
        second = float(z[guard].max())
        if second >= conf / math.sqrt(2.0):  # two peaks within 3 dB
            raise NoLockError(
                f"ambiguous offset: second peak {second:.2f} within 3 dB of {conf:.2f}"
            )
    return peak, conf


def recover_clock(
    times_ps: np.ndarray,
    config: SyncConfig,
    *,
    params: ProtocolParams | None = None,
) -> ClockEstimate:
    """Full lock on one tag window: frequency stage, then offset stage."""
    period, anchor, resid, conf_p = _estimate_period_full(
        times_ps,
        config.nominal_period_ps,
        config.window_tags,
        search_ppm=config.search_ppm,
        lock_threshold=config.lock_threshold,
    )
    lag, conf_o = estimate_offset(
        times_ps,
        period,
        config.prefix,
        params=params,
        anchor_ps=anchor,
        circular=config.circular,
        lock_threshold=config.lock_threshold,
        max_linear_slots=config.max_linear_slots,
    )
    # The anchor is the center of provisional slot 0, whose true index is
    # lag; slot 0 therefore sits lag periods earlier.
    return ClockEstimate(
        period_ps=period,
        offset_ps=anchor - lag * period,
        residual_sigma_ps=resid,
        confidence=min(conf_p, conf_o),
    )


def assign_slots(times_ps: np.ndarray, clock: ClockEstimate) -> SlotAssignment:
    """Map tags to nearest slot centers and report residual statistics."""
    times = np.asarray(times_ps, dtype=float)
    slots = clock.slot_of(times)
    residuals = times - (clock.offset_ps + slots * clock.period_ps)
    sigma = float(residuals.std()) if residuals.size else 0.0
    degraded = sigma > clock.period_ps / 4.0
    if degraded:
        warnings.warn(
            f"slot-assignment residual sigma {sigma:.1f} ps exceeds period/4",
            DegradedLockWarning,
            stacklevel=2,
        )
    return SlotAssignment(
        slots=slots,
        residuals_ps=residuals,
        sigma_ps=sigma,
        fwhm_ps=sigma * _GAUSS_FWHM,
        degraded=degraded,
    )


def jitter_histogram(residuals_ps: np.ndarray, bins: int = 81) -> str:
    """CSV histogram (bin_center_ps, count) of assignment residuals."""
    residuals = np.asarray(residuals_ps, dtype=float)
    counts, edges = np.histogram(residuals, bins=bins)
    centers = 0.5 * (edges[:-1] + edges[1:])
    lines = ["bin_center_ps,count"]
    lines += [f"{c:.3f},{int(n)}" for c, n in zip(centers, counts)]
    return "\n".join(lines) + "\n"
