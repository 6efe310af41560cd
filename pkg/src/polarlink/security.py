"""Finite-key security analysis for the three-state one-decoy BB84 protocol.

The secret-key length follows the one-decoy finite-key recipe: lower bounds on
vacuum (s_Z0) and single-photon (s_Z1) detection events from two-intensity
statistics, an upper bound on the single-photon phase-error rate (phi_Z) from
check-basis errors, and

    l = s_Z0 + s_Z1 * (1 - h(phi_Z)) - lambda_EC
        - 6*log2(19/eps_sec) - log2(2/eps_cor)

with lambda_EC = f_EC * n_Z * h(QBER_Z). Statistical fluctuations are absorbed
either with Hoeffding deviations on the per-basis totals or with exact
tail-inverted (Chernoff-style) binomial intervals conditioned on the same
totals; the latter are never wider, so the Chernoff key length dominates the
Hoeffding one pointwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from enum import Enum
from typing import Callable

import numpy as np
from scipy import special

from .errors import ConvergenceError
from .protocol import Basis, Intensity, ObservedCounts, ProtocolParams

__all__ = [
    "Bound",
    "SecurityParams",
    "SecurityBounds",
    "KeyResult",
    "binary_entropy",
    "hoeffding_interval",
    "chernoff_interval",
    "decoy_bounds",
    "key_length",
    "analyze_block",
    "asymptotic_key_rate",
    "skr_vs_loss_curve",
]

#: Number of epsilon-budget slices in the one-decoy accounting; appears in the
#: secrecy term 6*log2(19/eps_sec) and in the phase-error sampling penalty.
SECRECY_TERMS = 19


class Bound(Enum):
    HOEFFDING = "hoeffding"
    CHERNOFF = "chernoff"


@dataclass(frozen=True)
class SecurityParams:
    """Security knobs for one analysis block."""

    eps_sec: float = 1e-10
    eps_cor: float = 1e-15
    f_ec: float = 1.16
    block_n_z: int = 10**7
    bound: Bound = Bound.CHERNOFF

    def __post_init__(self) -> None:
        if not 0 < self.eps_sec < 1 or not 0 < self.eps_cor < 1:
            raise ValueError("eps_sec and eps_cor must lie in (0, 1)")
        if self.f_ec < 1:
            raise ValueError("f_ec must be >= 1")
        if self.block_n_z < 1:
            raise ValueError("block_n_z must be >= 1")


@dataclass(frozen=True)
class SecurityBounds:
    """Fluctuation-adjusted event bounds feeding the key-length formula."""

    s_z0_lower: float
    s_z1_lower: float
    phi_z_upper: float
    lambda_ec: float
    s_x1_lower: float = 0.0
    v_x1_upper: float = 0.0

    @property
    def degenerate(self) -> bool:
        return self.s_z1_lower <= 0 or self.phi_z_upper >= 0.5


@dataclass(frozen=True)
class KeyResult:
    key_length_bits: int
    skr_bps: float
    t_key_s: float


def binary_entropy(x):
    """Binary entropy h(x) in bits; h(0) = h(1) = 0."""
    arr = np.asarray(x, dtype=float)
    if np.any(arr < 0) or np.any(arr > 1):
        raise ValueError("binary_entropy argument must lie in [0, 1]")
    inner = (0 < arr) & (arr < 1)
    out = np.zeros_like(arr)
    a = arr[inner]
    out[inner] = -a * np.log2(a) - (1 - a) * np.log2(1 - a)
    return float(out) if np.isscalar(x) or arr.ndim == 0 else out


def hoeffding_interval(count: float, eps: float) -> tuple[float, float]:
    """Hoeffding interval centered on ``count``.

    Half-width sqrt((count/2) * ln(1/eps)); the lower edge is clamped at 0.
    """
    if count < 0:
        raise ValueError("count must be >= 0")
    if not 0 < eps < 1:
        raise ValueError("eps must lie in (0, 1)")
    delta = math.sqrt(0.5 * count * math.log(1.0 / eps))
    return max(count - delta, 0.0), count + delta


def _poisson_upper(count: float, eps: float) -> float:
    # Smallest mean whose lower tail P[X <= count] equals eps.
    beta_ = math.log(1.0 / eps)
    lo = float(count)
    hi = count + beta_ + 3.0 * math.sqrt(beta_ * (count + 1.0)) + 10.0
    f = lambda m: special.gammaincc(count + 1.0, m) - eps
    for _ in range(200):
        if f(hi) < 0:
            break
        hi *= 2.0
    else:
        raise ConvergenceError("Poisson upper-bound bracket expansion failed")
    from scipy.optimize import brentq

    try:
        return float(brentq(f, lo, hi, xtol=1e-9, rtol=1e-13, maxiter=200))
    except Exception as exc:  # pragma: no cover - brentq is robust on this bracket
        raise ConvergenceError(f"Poisson upper-bound inversion failed: {exc}") from exc


def _poisson_lower(count: float, eps: float) -> float:
    # Largest mean whose upper tail P[X >= count] equals eps; 0 when count = 0.
    if count <= 0:
        return 0.0
    f = lambda m: special.gammainc(count, m) - eps
    if f(count) < 0:  # pragma: no cover - P[X >= k] at mean k exceeds any eps < 0.5
        return float(count)
    from scipy.optimize import brentq

    try:
        return float(brentq(f, 1e-12, float(count), xtol=1e-9, rtol=1e-13, maxiter=200))
    except Exception as exc:  # pragma: no cover
        raise ConvergenceError(f"Poisson lower-bound inversion failed: {exc}") from exc


def _binomial_interval(count: float, trials: float, eps: float) -> tuple[float, float]:
    # Exact (Clopper-Pearson style) tail inversion for the binomial mean,
    # continuous in both arguments so analytic expectations work too.
    if count > trials:
        raise ValueError("count cannot exceed trials")
    if trials <= 0:
        return 0.0, 0.0
    if count <= 0:
        lower = 0.0
    else:
        lower = trials * float(special.betaincinv(count, trials - count + 1.0, eps))
    if count >= trials:
        upper = float(trials)
    else:
        upper = trials * float(special.betaincinv(count + 1.0, trials - count, 1.0 - eps))
    return min(lower, count), max(upper, count)


def chernoff_interval(
    count: float, eps: float, trials: float | None = None
) -> tuple[float, float]:
    """Numerically inverted exact-tail (Chernoff-style) confidence interval.

    Without ``trials`` the count is treated as Poisson distributed: the upper
    edge is the smallest mean whose lower tail at ``count`` is ``eps`` and the
    lower edge the largest mean whose upper tail is ``eps``. With ``trials``
    the count is a binomial over that many trials and the exact binomial tails
    are inverted instead, which is strictly tighter than the Hoeffding
    interval built from the same number of trials.
    """
    if count < 0:
        raise ValueError("count must be >= 0")
    if not 0 < eps < 1:
        raise ValueError("eps must lie in (0, 1)")
    if trials is not None:
        return _binomial_interval(count, trials, eps)
    return _poisson_lower(count, eps), _poisson_upper(count, eps)


def _vacuum_upper_exact(m_total: float, n_total: float, eps: float) -> float:
    # Largest s with P[Binomial(s, 1/2) <= m_total] >= eps: vacuum events give a
    # random bit, so the errors they caused are a fair-coin sample of them.
    if n_total <= 0:
        return 0.0
    s0 = max(2.0 * m_total, 1.0)
    if s0 >= n_total:
        return float(n_total)
    tail = lambda s: float(special.betainc(s - m_total, m_total + 1.0, 0.5))
    if tail(n_total) >= eps:
        return float(n_total)
    from scipy.optimize import brentq

    try:
        s = brentq(lambda s: tail(s) - eps, s0, float(n_total), xtol=1e-9, rtol=1e-13, maxiter=200)
    except Exception as exc:  # pragma: no cover
        raise ConvergenceError(f"vacuum upper-bound inversion failed: {exc}") from exc
    return float(s)


# --- bound strategies -------------------------------------------------------
#
# A strategy provides (lower, upper) for a per-intensity count conditioned on
# the per-basis total, plus an upper bound on vacuum events from total errors.
# Additional (e.g. sharper) variants can be registered here.

def _hoeffding_strategy(count, total, eps):
    delta = math.sqrt(0.5 * total * math.log(1.0 / eps))
    return max(count - delta, 0.0), count + delta


def _hoeffding_vacuum_upper(m_total, n_total, eps):
    return 2.0 * (m_total + math.sqrt(0.5 * n_total * math.log(1.0 / eps)))


def _chernoff_strategy(count, total, eps):
    return _binomial_interval(count, total, eps)


def _exact_strategy(count, total, eps):
    return count, count


BOUND_STRATEGIES: dict[Bound, dict[str, Callable]] = {
    Bound.HOEFFDING: {"interval": _hoeffding_strategy, "vacuum_upper": _hoeffding_vacuum_upper},
    Bound.CHERNOFF: {"interval": _chernoff_strategy, "vacuum_upper": _vacuum_upper_exact},
}


def _tau(params: ProtocolParams, n: int) -> float:
    """Probability that a slot carries exactly n photons (Poisson mixture)."""
    out = 0.0
    for k in (Intensity.SIGNAL, Intensity.DECOY):
        v = params.intensity_value(k)
        out += params.intensity_prob(k) * math.exp(-v) * v**n / math.factorial(n)
    return out


def _gamma_penalty(a: float, b: float, c: float, d: float) -> float:
    """Random-sampling correction when inferring the key-basis phase-error
    rate from ``c`` check-basis single-photon events applied to ``d`` key-basis
    ones, at observed error rate ``b`` and failure budget ``a``."""
    if b <= 0 or c <= 0 or d <= 0:
        return 0.0
    b = min(b, 0.5)
    front = (c + d) * (1.0 - b) * b / (c * d * math.log(2.0))
    log_arg = (c + d) / (c * d * (1.0 - b) * b) * (SECRECY_TERMS / a) ** 2
    if log_arg <= 1.0:
        return 0.0
    return math.sqrt(front * math.log2(log_arg))


_DEGENERATE_PHI = 0.5


def _basis_event_bounds(counts, params, basis, eps, interval, vacuum_upper):
    """One-decoy vacuum/single-photon bounds for one basis."""
    mu1, mu2 = params.mu, params.nu
    n1 = counts.n[(basis, Intensity.SIGNAL)]
    n2 = counts.n[(basis, Intensity.DECOY)]
    n_tot = n1 + n2
    m_tot = counts.m_basis(basis)
    if n_tot <= 0:
        return 0.0, 0.0

    lo1, hi1 = interval(n1, n_tot, eps)
    lo2, hi2 = interval(n2, n_tot, eps)
    p1 = params.intensity_prob(Intensity.SIGNAL)
    p2 = params.intensity_prob(Intensity.DECOY)
    n1_minus = math.exp(mu1) / p1 * max(lo1, 0.0)
    n1_plus = math.exp(mu1) / p1 * hi1
    n2_minus = math.exp(mu2) / p2 * max(lo2, 0.0)
    n2_plus = math.exp(mu2) / p2 * hi2

    tau0, tau1 = _tau(params, 0), _tau(params, 1)
    s0_low = tau0 * (mu1 * n2_minus - mu2 * n1_plus) / (mu1 - mu2)
    s0_low = min(max(s0_low, 0.0), n_tot)

    s0_up = vacuum_upper(m_tot, n_tot, eps)
    s0_up = min(max(s0_up, s0_low), n_tot)

    s1_low = (
        tau1
        * mu1
        / (mu2 * (mu1 - mu2))
        * (
            n2_minus
            - (mu2**2 / mu1**2) * n1_plus
            - ((mu1**2 - mu2**2) / mu1**2) * (s0_up / tau0)
        )
    )
    s1_low = min(max(s1_low, 0.0), n_tot)
    return s0_low, s1_low


def decoy_bounds(
    counts: ObservedCounts, params: ProtocolParams, sec: SecurityParams
) -> SecurityBounds:
    """Fluctuation-adjusted one-decoy bounds from observed tallies.

    Degenerate statistics (e.g. a block too small for the fluctuation terms)
    produce a zero-key signalling result with phi = 0.5 rather than raising.
    """
    if counts.n[(Basis.Y, Intensity.SIGNAL)] <= 0 or counts.n[(Basis.Y, Intensity.DECOY)] <= 0:
        raise ValueError("decoy analysis needs key-basis detections at both intensities")
    strategy = BOUND_STRATEGIES[sec.bound]
    interval, vacuum_upper = strategy["interval"], strategy["vacuum_upper"]
    eps = sec.eps_sec / SECRECY_TERMS

    n_z = counts.n_basis(Basis.Y)
    lambda_ec = sec.f_ec * n_z * binary_entropy(counts.m_basis(Basis.Y) / n_z)

    s_z0, s_z1 = _basis_event_bounds(counts, params, Basis.Y, eps, interval, vacuum_upper)
    s_x0, s_x1 = _basis_event_bounds(counts, params, Basis.X, eps, interval, vacuum_upper)

    # Single-photon errors in the check basis.
    mu1, mu2 = params.mu, params.nu
    p1 = params.intensity_prob(Intensity.SIGNAL)
    p2 = params.intensity_prob(Intensity.DECOY)
    mx1 = counts.m[(Basis.X, Intensity.SIGNAL)]
    mx2 = counts.m[(Basis.X, Intensity.DECOY)]
    mx_tot = mx1 + mx2
    lo1, hi1 = interval(mx1, mx_tot, eps) if mx_tot > 0 else (0.0, 0.0)
    lo2, _ = interval(mx2, mx_tot, eps) if mx_tot > 0 else (0.0, 0.0)
    m1_plus = math.exp(mu1) / p1 * hi1
    m2_minus = math.exp(mu2) / p2 * max(lo2, 0.0)
    tau1 = _tau(params, 1)
    v_x1 = max(tau1 * (m1_plus - m2_minus) / (mu1 - mu2), 0.0)

    if s_x1 <= 0 or s_z1 <= 0:
        phi_z = _DEGENERATE_PHI
    else:
        ratio = min(v_x1 / s_x1, _DEGENERATE_PHI)
        phi_z = ratio + _gamma_penalty(sec.eps_sec, ratio, s_x1, s_z1)
        phi_z = min(phi_z, _DEGENERATE_PHI)

    return SecurityBounds(
        s_z0_lower=s_z0,
        s_z1_lower=s_z1,
        phi_z_upper=phi_z,
        lambda_ec=lambda_ec,
        s_x1_lower=s_x1,
        v_x1_upper=v_x1,
    )


def key_length(
    bounds: SecurityBounds, counts: ObservedCounts, sec: SecurityParams
) -> KeyResult:
    """Secret-key length for one block, clamped at zero."""
    if counts.acquisition_time_s <= 0:
        raise ValueError("acquisition_time_s must be positive")
    l_real = (
        bounds.s_z0_lower
        + bounds.s_z1_lower * (1.0 - binary_entropy(bounds.phi_z_upper))
        - bounds.lambda_ec
        - 6.0 * math.log2(SECRECY_TERMS / sec.eps_sec)
        - math.log2(2.0 / sec.eps_cor)
    )
    bits = max(0, math.floor(l_real))
    return KeyResult(
        key_length_bits=bits,
        skr_bps=bits / counts.acquisition_time_s,
        t_key_s=counts.acquisition_time_s,
    )


def analyze_block(
    counts: ObservedCounts, params: ProtocolParams, sec: SecurityParams
) -> tuple[SecurityBounds, KeyResult]:
    bounds = decoy_bounds(counts, params, sec)
    return bounds, key_length(bounds, counts, sec)


def asymptotic_key_rate(
    counts: ObservedCounts, params: ProtocolParams, f_ec: float = 1.16
) -> float:
    """Infinite-block secret-key rate (bits/s) of the same one-decoy analysis.

    Fluctuation terms, the sampling penalty, and the fixed secrecy costs all
    vanish in this limit; the result depends only on the expected tallies.
    """
    if counts.acquisition_time_s <= 0:
        raise ValueError("acquisition_time_s must be positive")
    interval = _exact_strategy
    vacuum_upper = lambda m_tot, n_tot, eps: min(2.0 * m_tot, n_tot)
    s_z0, s_z1 = _basis_event_bounds(counts, params, Basis.Y, 0.0, interval, vacuum_upper)
    s_x0, s_x1 = _basis_event_bounds(counts, params, Basis.X, 0.0, interval, vacuum_upper)

    mu1, mu2 = params.mu, params.nu
    p1 = params.intensity_prob(Intensity.SIGNAL)
    p2 = params.intensity_prob(Intensity.DECOY)
    m1 = math.exp(mu1) / p1 * counts.m[(Basis.X, Intensity.SIGNAL)]
    m2 = math.exp(mu2) / p2 * counts.m[(Basis.X, Intensity.DECOY)]
    v_x1 = max(_tau(params, 1) * (m1 - m2) / (mu1 - mu2), 0.0)
    if s_x1 <= 0 or s_z1 <= 0:
        return 0.0
    phi = min(v_x1 / s_x1, _DEGENERATE_PHI)

    n_z = counts.n_basis(Basis.Y)
    lambda_ec = f_ec * n_z * binary_entropy(counts.m_basis(Basis.Y) / n_z) if n_z > 0 else 0.0
    l_real = s_z0 + s_z1 * (1.0 - binary_entropy(phi)) - lambda_ec
    return max(l_real, 0.0) / counts.acquisition_time_s


def skr_vs_loss_curve(
    params: ProtocolParams,
    source,
    detector,
    sec: SecurityParams,
    loss_grid_db,
    *,
    background_rate_hz: float = 0.0,
) -> list[dict]:
    """Expected-value SKR curve over a sorted ascending channel-loss grid.

    Each grid point fills one block of ``sec.block_n_z`` key-basis detections
    and reports the asymptotic, Hoeffding, and Chernoff rates plus the QBERs.
    """
    from .photonics import ChannelModel, expected_counts

    loss_grid_db = list(loss_grid_db)
    if any(b < a for a, b in zip(loss_grid_db, loss_grid_db[1:])):
        raise ValueError("loss grid must be sorted ascending")

    rows = []
    for loss_db in loss_grid_db:
        channel = ChannelModel(fixed_loss_db=loss_db, background_rate_hz=background_rate_hz)
        per_second = expected_counts(params, source, channel, detector, duration_s=1.0)
        rate_n_z = per_second.n_basis(Basis.Y)
        if rate_n_z <= 0:
            rows.append(
                {
                    "loss_db": loss_db,
                    "skr_asymptotic": 0.0,
                    "skr_hoeffding": 0.0,
                    "skr_chernoff": 0.0,
                    "qber_y": float("nan"),
                    "qber_x": float("nan"),
                }
            )
            continue
        t_block = sec.block_n_z / rate_n_z
        block = per_second.scaled(t_block)
        skr = {}
        for bound in (Bound.HOEFFDING, Bound.CHERNOFF):
            _, result = analyze_block(block, params, replace(sec, bound=bound))
            skr[bound] = result.skr_bps
        rows.append(
            {
                "loss_db": float(loss_db),
                "skr_asymptotic": float(asymptotic_key_rate(block, params, sec.f_ec)),
                "skr_hoeffding": float(skr[Bound.HOEFFDING]),
                "skr_chernoff": float(skr[Bound.CHERNOFF]),
                "qber_y": float(block.qber_basis(Basis.Y)),
                "qber_x": float(block.qber_basis(Basis.X)),
            }
        )
    return rows
