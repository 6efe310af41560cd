"""Transmitter sequence generation, receiver sifting, and count accumulation
for the efficient three-state one-decoy BB84 protocol.

Conventions used throughout the package:

* Key basis ``Y`` carries the circular states (bit 0 -> detector L, bit 1 ->
  detector R). Check basis ``X`` carries only the diagonal state (bit 0 ->
  detector D); detector A fires only on errors or noise.
* Two intensity levels: ``SIGNAL`` (mu) and ``DECOY`` (nu), nu < mu.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import DataIntegrityError, UndefinedStatisticError

__all__ = [
    "Basis",
    "Intensity",
    "Channel",
    "ProtocolParams",
    "SymbolRecord",
    "SymbolSequence",
    "ReceiverOutcomes",
    "SiftedBlock",
    "ObservedCounts",
    "generate_sequence",
    "outcomes_from_detections",
    "sift",
    "accumulate_counts",
    "qber",
]


class Basis(IntEnum):
    Y = 0  # key basis (L/R circular)
    X = 1  # check basis (D/A diagonal)


class Intensity(IntEnum):
    SIGNAL = 0  # mu
    DECOY = 1  # nu


class Channel(IntEnum):
    """Receiver detector channels, one per output polarization state."""

    L = 0
    R = 1
    D = 2
    A = 3


#: Detector channel -> (measurement basis, bit value)
CHANNEL_BASIS = {Channel.L: Basis.Y, Channel.R: Basis.Y, Channel.D: Basis.X, Channel.A: Basis.X}
CHANNEL_BIT = {Channel.L: 0, Channel.R: 1, Channel.D: 0, Channel.A: 1}


@dataclass(frozen=True)
class ProtocolParams:
    """Source-side protocol parameters.

    Args:
        rep_rate_hz: pulse repetition rate.
        mu: signal mean photon number.
        nu: decoy mean photon number (0 < nu < mu).
        p_mu: probability of choosing the signal intensity.
        p_z_tx: transmitter key-basis probability.
        p_z_rx: receiver key-basis probability (beamsplitter split ratio).
    """

    rep_rate_hz: float
    mu: float
    nu: float
    p_mu: float = 0.5
    p_z_tx: float = 0.9
    p_z_rx: float = 0.5

    def __post_init__(self) -> None:
        if self.rep_rate_hz <= 0:
            raise ValueError("rep_rate_hz must be positive")
        if not 0 < self.nu < self.mu:
            raise ValueError(f"need 0 < nu < mu, got nu={self.nu}, mu={self.mu}")
        for name in ("p_mu", "p_z_tx", "p_z_rx"):
            v = getattr(self, name)
            if not 0 < v < 1:
                raise ValueError(f"{name} must lie strictly in (0, 1), got {v}")

    @property
    def slot_period_ps(self) -> float:
        return 1e12 / self.rep_rate_hz

    def intensity_value(self, k: Intensity) -> float:
        return self.mu if k == Intensity.SIGNAL else self.nu

    def intensity_prob(self, k: Intensity) -> float:
        return self.p_mu if k == Intensity.SIGNAL else 1.0 - self.p_mu


@dataclass(frozen=True)
class SymbolRecord:
    """Per-slot transmitter truth."""

    slot_index: int
    basis: Basis
    bit: int
    intensity: Intensity

    def __post_init__(self) -> None:
        if self.slot_index < 0:
            raise ValueError("slot_index must be >= 0")
        if self.bit not in (0, 1):
            raise ValueError("bit must be 0 or 1")
        if self.basis == Basis.X and self.bit != 0:
            raise ValueError("three-state protocol: X-basis symbols always carry bit 0")


class SymbolSequence:
    """Array-backed sequence of :class:`SymbolRecord`.

    Columns are stored as ``uint8`` arrays so that million-symbol sequences
    stay cheap; indexing materializes individual records on demand.
    """

    def __init__(self, basis: np.ndarray, bit: np.ndarray, intensity: np.ndarray):
        basis = np.asarray(basis, dtype=np.uint8)
        bit = np.asarray(bit, dtype=np.uint8)
        intensity = np.asarray(intensity, dtype=np.uint8)
        if not (basis.shape == bit.shape == intensity.shape) or basis.ndim != 1:
            raise ValueError("basis/bit/intensity must be 1-D arrays of equal length")
        if np.any(bit[basis == Basis.X] != 0):
            raise ValueError("X-basis symbols must carry bit 0")
        self.basis = basis
        self.bit = bit
        self.intensity = intensity

    @classmethod
    def from_records(cls, records: Iterable[SymbolRecord]) -> "SymbolSequence":
        recs = list(records)
        return cls(
            np.array([r.basis for r in recs], dtype=np.uint8),
            np.array([r.bit for r in recs], dtype=np.uint8),
            np.array([r.intensity for r in recs], dtype=np.uint8),
        )

    def __len__(self) -> int:
        return int(self.basis.shape[0])

    def __getitem__(self, i: int) -> SymbolRecord:
        i = int(i)
        return SymbolRecord(
            slot_index=i if i >= 0 else len(self) + i,
            basis=Basis(int(self.basis[i])),
            bit=int(self.bit[i]),
            intensity=Intensity(int(self.intensity[i])),
        )

    def __iter__(self) -> Iterator[SymbolRecord]:
        for i in range(len(self)):
            yield self[i]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SymbolSequence):
            return NotImplemented
        return (
            np.array_equal(self.basis, other.basis)
            and np.array_equal(self.bit, other.bit)
            and np.array_equal(self.intensity, other.intensity)
        )

    def columns_at(self, slots: np.ndarray, cyclic: bool = False):
        """Return (basis, bit, intensity) arrays for the given slot indices.

        With ``cyclic=True`` slot ``i`` maps to symbol ``i mod len(self)``,
        matching a transmitter that repeats the sequence back to back.
        """
        slots = np.asarray(slots, dtype=np.int64)
        if np.any(slots < 0):
            raise DataIntegrityError("negative slot index")
        if cyclic:
            idx = slots % len(self)
        else:
            if np.any(slots >= len(self)):
                raise DataIntegrityError("slot index beyond transmitted sequence")
            idx = slots
        return self.basis[idx], self.bit[idx], self.intensity[idx]


def generate_sequence(seed: int, length: int, params: ProtocolParams) -> SymbolSequence:
    """Generate the seeded pseudo-random symbol sequence.

    Deterministic for a fixed seed. Basis is key (Y) with probability
    ``p_z_tx``; intensity is signal with probability ``p_mu``; Y-basis bits
    are balanced; X-basis slots always carry bit 0.
    """
    if length < 1:
        raise ValueError("length must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    basis = np.where(rng.random(length) < params.p_z_tx, Basis.Y, Basis.X).astype(np.uint8)
    bit = rng.integers(0, 2, size=length, dtype=np.uint8)
    bit[basis == Basis.X] = 0
    intensity = np.where(rng.random(length) < params.p_mu, Intensity.SIGNAL, Intensity.DECOY)
    return SymbolSequence(basis, bit, intensity.astype(np.uint8))


@dataclass
class ReceiverOutcomes:
    """Per-slot receiver measurement results (one outcome per slot)."""

    slot_index: np.ndarray  # int64, strictly increasing
    basis: np.ndarray  # uint8
    bit: np.ndarray  # uint8

    def __post_init__(self) -> None:
        self.slot_index = np.asarray(self.slot_index, dtype=np.int64)
        self.basis = np.asarray(self.basis, dtype=np.uint8)
        self.bit = np.asarray(self.bit, dtype=np.uint8)
        if not (self.slot_index.shape == self.basis.shape == self.bit.shape):
            raise ValueError("outcome columns must have equal length")
        if self.slot_index.size and np.any(np.diff(self.slot_index) <= 0):
            raise DataIntegrityError("at most one outcome per slot, sorted by slot")

    @classmethod
    def from_tuples(cls, tuples: Iterable[tuple]) -> "ReceiverOutcomes":
        rows = sorted(tuples)
        return cls(
            np.array([r[0] for r in rows], dtype=np.int64),
            np.array([int(r[1]) for r in rows], dtype=np.uint8),
            np.array([int(r[2]) for r in rows], dtype=np.uint8),
        )

    def __len__(self) -> int:
        return int(self.slot_index.size)


def outcomes_from_detections(
    slots: np.ndarray, channels: np.ndarray, *, seed: int = 0
) -> ReceiverOutcomes:
    """Collapse raw per-detector detections into one outcome per slot.

    Double clicks follow the squashing policy: if both arms fired, the basis
    is chosen by fair coin; if both detectors of the chosen basis fired, the
    bit is chosen by fair coin. Deterministic for a fixed seed.
    """
    slots = np.asarray(slots, dtype=np.int64)
    channels = np.asarray(channels, dtype=np.uint8)
    if slots.size == 0:
        return ReceiverOutcomes(
            np.empty(0, np.int64), np.empty(0, np.uint8), np.empty(0, np.uint8)
        )
    order = np.argsort(slots, kind="stable")
    slots = slots[order]
    channels = channels[order]

    # Per-slot bitmask of clicked channels (bit i set <=> channel i clicked).
    uniq, inverse = np.unique(slots, return_inverse=True)
    mask = np.zeros(uniq.size, dtype=np.uint8)
    np.bitwise_or.at(mask, inverse, np.left_shift(np.uint8(1), channels))

    y_click = (mask & 0b0011) != 0
    x_click = (mask & 0b1100) != 0
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x51F7)))
    pick_y = np.where(
        y_click & x_click, rng.random(uniq.size) < 0.5, y_click
    )

    basis = np.where(pick_y, Basis.Y, Basis.X).astype(np.uint8)
    lo = np.where(pick_y, mask & 0b0001, (mask >> 2) & 0b0001)  # bit-0 detector clicked
    hi = np.where(pick_y, (mask >> 1) & 0b0001, (mask >> 3) & 0b0001)  # bit-1 detector
    coin = (rng.random(uniq.size) < 0.5).astype(np.uint8)
    bit = np.where(lo.astype(bool) & hi.astype(bool), coin, hi).astype(np.uint8)
    return ReceiverOutcomes(uniq, basis, bit)


@dataclass
class SiftedBlock:
    """Basis-matched detections with transmitter truth attached."""

    slot_index: np.ndarray  # int64, strictly increasing
    basis: np.ndarray  # uint8
    tx_bit: np.ndarray  # uint8
    rx_bit: np.ndarray  # uint8
    intensity: np.ndarray  # uint8
    block_id: int = 0

    def __post_init__(self) -> None:
        self.slot_index = np.asarray(self.slot_index, dtype=np.int64)
        if self.slot_index.size and np.any(np.diff(self.slot_index) <= 0):
            raise DataIntegrityError("sifted entries must be strictly increasing in slot")

    def __len__(self) -> int:
        return int(self.slot_index.size)

    def entries(self) -> Iterator[tuple]:
        for i in range(len(self)):
            yield (
                int(self.slot_index[i]),
                Basis(int(self.basis[i])),
                int(self.tx_bit[i]),
                int(self.rx_bit[i]),
                Intensity(int(self.intensity[i])),
            )

    def slot_range(self) -> tuple[int, int]:
        """(min, max) slot index; (-1, -1) when empty."""
        if len(self) == 0:
            return (-1, -1)
        return int(self.slot_index[0]), int(self.slot_index[-1])


def sift(
    tx: SymbolSequence,
    rx: ReceiverOutcomes | Iterable[tuple],
    *,
    cyclic: bool = False,
    block_id: int = 0,
) -> SiftedBlock:
    """Keep exactly the detections whose receiver basis matches the sent basis.

    Raises :class:`DataIntegrityError` if an outcome references a slot the
    transmitter never sent (unless ``cyclic`` maps slots modulo ``len(tx)``).
    """
    if not isinstance(rx, ReceiverOutcomes):
        rx = ReceiverOutcomes.from_tuples(rx)
    tx_basis, tx_bit, tx_intensity = tx.columns_at(rx.slot_index, cyclic=cyclic)
    keep = tx_basis == rx.basis
    return SiftedBlock(
        slot_index=rx.slot_index[keep],
        basis=rx.basis[keep],
        tx_bit=tx_bit[keep],
        rx_bit=rx.bit[keep],
        intensity=tx_intensity[keep],
        block_id=block_id,
    )


_BASES = (Basis.Y, Basis.X)
_INTENSITIES = (Intensity.SIGNAL, Intensity.DECOY)


@dataclass
class ObservedCounts:
    """Sifted detection (n) and error (m) tallies per (basis, intensity).

    Values are floats so that both integer tallies and analytic expectations
    fit the same container.
    """

    n: dict = field(default_factory=dict)
    m: dict = field(default_factory=dict)
    slots_sent: dict = field(default_factory=dict)
    acquisition_time_s: float = 0.0

    @classmethod
    def zero(cls) -> "ObservedCounts":
        return cls(
            n={(b, k): 0.0 for b in _BASES for k in _INTENSITIES},
            m={(b, k): 0.0 for b in _BASES for k in _INTENSITIES},
            slots_sent={k: 0.0 for k in _INTENSITIES},
            acquisition_time_s=0.0,
        )

    def validate(self) -> None:
        for b in _BASES:
            for k in _INTENSITIES:
                n, m = self.n[(b, k)], self.m[(b, k)]
                if not 0 <= m <= n:
                    raise DataIntegrityError(f"need 0 <= m <= n for ({b.name},{k.name})")
        for k in _INTENSITIES:
            tot = sum(self.n[(b, k)] for b in _BASES)
            if tot > self.slots_sent[k] + 1e-9 * max(1.0, self.slots_sent[k]):
                raise DataIntegrityError("detections exceed pulses sent")

    def n_basis(self, basis: Basis) -> float:
        return sum(self.n[(basis, k)] for k in _INTENSITIES)

    def m_basis(self, basis: Basis) -> float:
        return sum(self.m[(basis, k)] for k in _INTENSITIES)

    def qber_basis(self, basis: Basis) -> float:
        n = self.n_basis(basis)
        if n <= 0:
            raise UndefinedStatisticError(f"no detections in basis {basis.name}")
        return self.m_basis(basis) / n

    def __add__(self, other: "ObservedCounts") -> "ObservedCounts":
        out = ObservedCounts.zero()
        for key in out.n:
            out.n[key] = self.n[key] + other.n[key]
            out.m[key] = self.m[key] + other.m[key]
        for k in _INTENSITIES:
            out.slots_sent[k] = self.slots_sent[k] + other.slots_sent[k]
        out.acquisition_time_s = self.acquisition_time_s + other.acquisition_time_s
        return out

    def scaled(self, factor: float) -> "ObservedCounts":
        """All tallies and the acquisition time scaled by ``factor``."""
        out = ObservedCounts.zero()
        for key in out.n:
            out.n[key] = self.n[key] * factor
            out.m[key] = self.m[key] * factor
        for k in _INTENSITIES:
            out.slots_sent[k] = self.slots_sent[k] * factor
        out.acquisition_time_s = self.acquisition_time_s * factor
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("basis,intensity,n,m,slots_sent,acquisition_time_s\n")
        for b in _BASES:
            for k in _INTENSITIES:
                buf.write(
                    f"{b.name},{k.name},{self.n[(b, k)]!r},{self.m[(b, k)]!r},"
                    f"{self.slots_sent[k]!r},{self.acquisition_time_s!r}\n"
                )
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "ObservedCounts":
        out = cls.zero()
        lines = [ln for ln in text.strip().splitlines() if ln]
        for ln in lines[1:]:
            bname, kname, n, m, sent, acq = ln.split(",")
            b, k = Basis[bname], Intensity[kname]
            out.n[(b, k)] = float(n)
            out.m[(b, k)] = float(m)
            out.slots_sent[k] = float(sent)
            out.acquisition_time_s = float(acq)
        return out


def accumulate_counts(
    blocks: Sequence[SiftedBlock],
    tx: SymbolSequence,
    *,
    cyclic: bool = False,
    total_slots: int | None = None,
    acquisition_time_s: float | None = None,
) -> ObservedCounts:
    """Tally sifted detections and errors by (basis, intensity).

    Blocks must cover disjoint slot ranges. ``slots_sent`` is tallied from the
    transmitter sequence over ``[0, total_slots)``; the default covers up to
    the last sifted slot.
    """
    spans = sorted(b.slot_range() for b in blocks if len(b))
    for (lo1, hi1), (lo2, _) in zip(spans, spans[1:]):
        if lo2 <= hi1:
            raise DataIntegrityError("sifted blocks overlap in slot ranges")

    out = ObservedCounts.zero()
    last_slot = max((hi for _, hi in spans), default=-1)
    if total_slots is None:
        total_slots = last_slot + 1
    elif last_slot >= total_slots:
        raise DataIntegrityError("sifted slot beyond declared total_slots")

    if total_slots > 0:
        L = len(tx)
        if cyclic:
            reps, rem = divmod(total_slots, L)
            for k in _INTENSITIES:
                full = float(np.count_nonzero(tx.intensity == k))
                head = float(np.count_nonzero(tx.intensity[:rem] == k))
                out.slots_sent[k] = reps * full + head
        else:
            if total_slots > L:
                raise DataIntegrityError("total_slots exceeds transmitted sequence")
            for k in _INTENSITIES:
                out.slots_sent[k] = float(np.count_nonzero(tx.intensity[:total_slots] == k))

    for blk in blocks:
        err = blk.tx_bit != blk.rx_bit
        for b in _BASES:
            in_b = blk.basis == b
            for k in _INTENSITIES:
                sel = in_b & (blk.intensity == k)
                out.n[(b, k)] += float(np.count_nonzero(sel))
                out.m[(b, k)] += float(np.count_nonzero(sel & err))

    if acquisition_time_s is not None:
        out.acquisition_time_s = acquisition_time_s
    out.validate()
    return out


def qber(counts: ObservedCounts, basis: Basis, intensity: Intensity) -> float:
    """Error fraction m/n for one (basis, intensity) cell."""
    n = counts.n[(basis, intensity)]
    if n <= 0:
        raise UndefinedStatisticError(
            f"QBER undefined: no detections for ({basis.name}, {intensity.name})"
        )
    return counts.m[(basis, intensity)] / n
