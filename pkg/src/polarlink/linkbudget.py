"""Free-space link budget helpers: dB composition of channel segments,
single-mode-fiber coupling versus residual angle-of-arrival jitter, and the
receiver-optics focal-length sizing rule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable

__all__ = [
    "LinkSegments",
    "CouplingModel",
    "db_to_linear",
    "linear_to_db",
    "compose_efficiency",
    "smf_coupling",
    "fsm_improvement_db",
    "effective_focal_length_mm",
]


def db_to_linear(loss_db: float) -> float:
    """Transmission fraction of a loss expressed in dB (>= 0 dB)."""
    return 10.0 ** (-loss_db / 10.0)


def linear_to_db(transmission: float) -> float:
    """Loss in dB of a transmission fraction in (0, 1]."""
    if not 0 < transmission <= 1:
        raise ValueError("transmission must lie in (0, 1]")
    return -10.0 * math.log10(transmission)


@dataclass
class LinkSegments:
    """Named loss segments of an end-to-end link, each in dB."""

    segments: list = field(default_factory=list)  # (label, loss_db) pairs

    def __post_init__(self) -> None:
        for label, loss_db in self.segments:
            if loss_db < 0:
                raise ValueError(f"segment {label!r} has negative loss")

    def add(self, label: str, loss_db: float) -> "LinkSegments":
        if loss_db < 0:
            raise ValueError(f"segment {label!r} has negative loss")
        self.segments.append((label, loss_db))
        return self

    @property
    def total_db(self) -> float:
        return sum(loss for _, loss in self.segments)

    @property
    def total_transmission(self) -> float:
        return db_to_linear(self.total_db)

    def report(self) -> str:
        width = max((len(label) for label, _ in self.segments), default=5)
        lines = [f"{'segment'.ljust(width)}  loss_dB"]
        for label, loss in self.segments:
            lines.append(f"{label.ljust(width)}  {loss:7.2f}")
        lines.append(f"{'total'.ljust(width)}  {self.total_db:7.2f}")
        return "\n".join(lines)


def compose_efficiency(*segment_losses_db: float) -> float:
    """Total channel loss in dB: segments multiply in linear scale, so their
    dB values add."""
    for loss in segment_losses_db:
        if loss < 0:
            raise ValueError("segment losses must be >= 0 dB")
    return float(sum(segment_losses_db))


@dataclass(frozen=True)
class CouplingModel:
    """SMF coupling efficiency versus residual angle-of-arrival jitter.

    eta(sigma) = eta_peak / (1 + (sigma/sigma_ref)^2), a two-parameter
    monotone rolloff. The model form sits behind this interface so a
    Gaussian-overlap alternative can replace it without touching callers.
    """

    eta_peak: float
    sigma_ref_urad: float
    beam_waist_mm: float = 25.0
    wavelength_nm: float = 1550.0

    def __post_init__(self) -> None:
        if not 0 < self.eta_peak <= 1:
            raise ValueError("eta_peak must lie in (0, 1]")
        if self.sigma_ref_urad <= 0:
            raise ValueError("sigma_ref_urad must be positive")

    @classmethod
    def calibrate(
        cls,
        anchor_a: tuple[float, float] = (9.0, 0.2275),
        anchor_b: tuple[float, float] = (0.2, 0.3542),
        **kwargs,
    ) -> "CouplingModel":
        """Solve the two-parameter model exactly through two measured
        (sigma_urad, efficiency) operating points."""
        (s_a, eta_a), (s_b, eta_b) = anchor_a, anchor_b
        if eta_a <= 0 or eta_b <= 0 or eta_a == eta_b:
            raise ValueError("anchors must have distinct positive efficiencies")
        # eta_b/eta_a = (1 + (s_a/ref)^2) / (1 + (s_b/ref)^2)
        r = eta_b / eta_a
        denom = s_a**2 - r * s_b**2
        if denom <= 0:
            raise ValueError("anchors inconsistent with a monotone rolloff")
        inv_ref_sq = (r - 1.0) / denom
        if inv_ref_sq <= 0:
            raise ValueError("anchors inconsistent with a monotone rolloff")
        sigma_ref = 1.0 / math.sqrt(inv_ref_sq)
        eta_peak = eta_a * (1.0 + (s_a / sigma_ref) ** 2)
        return cls(eta_peak=eta_peak, sigma_ref_urad=sigma_ref, **kwargs)

    def efficiency(self, sigma_aoa_urad: float) -> float:
        if sigma_aoa_urad < 0:
            raise ValueError("sigma must be >= 0")
        return self.eta_peak / (1.0 + (sigma_aoa_urad / self.sigma_ref_urad) ** 2)


def smf_coupling(sigma_aoa_urad: float, model: CouplingModel) -> float:
    """Coupled power fraction at the given angle-of-arrival jitter."""
    return model.efficiency(sigma_aoa_urad)


def fsm_improvement_db(
    model: CouplingModel,
    sigma_off_urad: float = 9.0,
    sigma_on_urad: float = 0.2,
) -> float:
    """Coupling gain (dB) from closing the fast-steering-mirror loop,
    comparing the residual jitter with the loop on versus off."""
    return 10.0 * math.log10(
        model.efficiency(sigma_on_urad) / model.efficiency(sigma_off_urad)
    )


def effective_focal_length_mm(
    pupil_diameter_mm: float,
    mfd_um: float,
    wavelength_nm: float,
    beta: float,
) -> float:
    """Effective focal length (mm) matching a collimated beam of the given
    pupil diameter to a fiber mode-field diameter: pi * D * MFD / (4 lambda beta)."""
    if min(pupil_diameter_mm, mfd_um, wavelength_nm, beta) <= 0:
        raise ValueError("all inputs must be positive")
    return (
        math.pi
        * (pupil_diameter_mm * 1e-3)
        * (mfd_um * 1e-6)
        / (4.0 * wavelength_nm * 1e-9 * beta)
    ) * 1e3
