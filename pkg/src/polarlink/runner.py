"""Scenario runner: wires source, channel, detectors, clock recovery, sifting
and finite-key analysis into reproducible experiment reports."""

from __future__ import annotations

import io
import json
import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import UnsupportedFigureError
from .photonics import (
    DetectorModel,
    expected_rates,
    sample_block_counts,
    sample_counts,
    simulate_slots,
)
from .protocol import (
    Basis,
    Intensity,
    ObservedCounts,
    SymbolSequence,
    accumulate_counts,
    generate_sequence,
    outcomes_from_detections,
    sift,
)
from .scenario import Estimation, RunMode, ScenarioConfig, config_hash, config_to_dict
from .security import (
    SecurityBounds,
    analyze_block,
    binary_entropy,
    decoy_bounds,
    key_length,
    skr_vs_loss_curve,
)
from .sync import SyncConfig, assign_slots, recover_clock

__all__ = ["BlockRecord", "SyncReport", "RunReport", "run_scenario", "run_curve", "emit_figure_data"]

_CELLS = [(Basis.Y, Intensity.SIGNAL), (Basis.Y, Intensity.DECOY),
          (Basis.X, Intensity.SIGNAL), (Basis.X, Intensity.DECOY)]


@dataclass
class BlockRecord:
    block_id: int
    t_start_s: float
    t_key_s: float
    n_z: float
    qber_y: float
    qber_x: float
    key_bits: int
    skr_bps: float
    qber_cells: dict = field(default_factory=dict)  # (basis, intensity) -> qber or nan


@dataclass
class SyncReport:
    n_tags: int
    period_ps: float
    period_rel_err: float
    offset_ps: float
    confidence: float
    assignment_accuracy: float
    sigma_fit_ps: float
    fwhm_ps: float
    qber_y_truth: float
    qber_y_sync: float
    qber_delta_pp: float
    alt_sigma_fit_ps: float | None
    hist_bin_centers: list = field(default_factory=list)
    hist_counts: list = field(default_factory=list)
    alt_hist_counts: list = field(default_factory=list)


@dataclass
class RunReport:
    name: str
    config: dict
    config_hash: str
    seed: int | None
    mode: str
    estimation: str
    blocks: list = field(default_factory=list)
    alt_blocks: list = field(default_factory=list)
    totals: ObservedCounts = field(default_factory=ObservedCounts.zero)
    diagnostics: list = field(default_factory=list)
    sync: SyncReport | None = None
    curve_rows: list | None = None

    # -- summary helpers ------------------------------------------------------
    def mean_skr_bps(self) -> float:
        if not self.blocks:
            return 0.0
        return float(np.mean([b.skr_bps for b in self.blocks]))

    def mean_t_key_s(self) -> float:
        if not self.blocks:
            return 0.0
        return float(np.mean([b.t_key_s for b in self.blocks]))

    def all_blocks_positive(self) -> bool:
        return bool(self.blocks) and all(b.key_bits > 0 for b in self.blocks)

    def cumulative_bits(self):
        """(t_s, sifted_bits, key_bits, key_bits_alt) step series at block ends."""
        t = np.cumsum([b.t_key_s for b in self.blocks])
        sifted = np.cumsum([b.n_z for b in self.blocks])
        key = np.cumsum([b.key_bits for b in self.blocks])
        alt = np.zeros_like(t)
        if self.alt_blocks:
            alt_t = np.cumsum([b.t_key_s for b in self.alt_blocks])
            alt_key = np.cumsum([b.key_bits for b in self.alt_blocks])
            idx = np.searchsorted(alt_t, t, side="right") - 1
            alt = np.where(idx >= 0, alt_key[np.clip(idx, 0, None)], 0.0)
        return t, sifted, key, alt

    # -- serialization --------------------------------------------------------
    def to_json(self) -> str:
        def counts_dict(c: ObservedCounts):
            return {
                "n": {f"{b.name}:{k.name}": c.n[(b, k)] for b, k in _CELLS},
                "m": {f"{b.name}:{k.name}": c.m[(b, k)] for b, k in _CELLS},
                "slots_sent": {k.name: c.slots_sent[k] for k in (Intensity.SIGNAL, Intensity.DECOY)},
                "acquisition_time_s": c.acquisition_time_s,
            }

        def block_dict(b: BlockRecord):
            d = {
                "block_id": b.block_id, "t_start_s": b.t_start_s, "t_key_s": b.t_key_s,
                "n_z": b.n_z, "qber_y": b.qber_y, "qber_x": b.qber_x,
                "key_bits": b.key_bits, "skr_bps": b.skr_bps,
                "qber_cells": {f"{bb.name}:{kk.name}": v for (bb, kk), v in b.qber_cells.items()},
            }
            return d

        doc = {
            "name": self.name,
            "config": self.config,
            "config_hash": self.config_hash,
            "seed": self.seed,
            "mode": self.mode,
            "estimation": self.estimation,
            "blocks": [block_dict(b) for b in self.blocks],
            "alt_blocks": [block_dict(b) for b in self.alt_blocks],
            "totals": counts_dict(self.totals),
            "diagnostics": self.diagnostics,
            "sync": (self.sync.__dict__ if self.sync else None),
            "curve_rows": self.curve_rows,
        }
        return json.dumps(doc, indent=1, allow_nan=True)

    @classmethod
    def from_json(cls, text: str) -> "RunReport":
        doc = json.loads(text)

        def counts_from(d):
            c = ObservedCounts.zero()
            for key, v in d["n"].items():
                bn, kn = key.split(":")
                c.n[(Basis[bn], Intensity[kn])] = v
            for key, v in d["m"].items():
                bn, kn = key.split(":")
                c.m[(Basis[bn], Intensity[kn])] = v
            for kn, v in d["slots_sent"].items():
                c.slots_sent[Intensity[kn]] = v
            c.acquisition_time_s = d["acquisition_time_s"]
            return c

        def block_from(d):
            cells = {}
            for key, v in d.get("qber_cells", {}).items():
                bn, kn = key.split(":")
                cells[(Basis[bn], Intensity[kn])] = v
            return BlockRecord(
                block_id=d["block_id"], t_start_s=d["t_start_s"], t_key_s=d["t_key_s"],
                n_z=d["n_z"], qber_y=d["qber_y"], qber_x=d["qber_x"],
                key_bits=d["key_bits"], skr_bps=d["skr_bps"], qber_cells=cells,
            )

        sync = SyncReport(**doc["sync"]) if doc.get("sync") else None
        return cls(
            name=doc["name"], config=doc["config"], config_hash=doc["config_hash"],
            seed=doc.get("seed"), mode=doc["mode"], estimation=doc["estimation"],
            blocks=[block_from(b) for b in doc["blocks"]],
            alt_blocks=[block_from(b) for b in doc.get("alt_blocks", [])],
            totals=counts_from(doc["totals"]),
            diagnostics=list(doc.get("diagnostics", [])),
            sync=sync,
            curve_rows=doc.get("curve_rows"),
        )


def _cell_qbers(counts: ObservedCounts) -> dict:
    out = {}
    for b, k in _CELLS:
        n = counts.n[(b, k)]
        out[(b, k)] = counts.m[(b, k)] / n if n > 0 else float("nan")
    return out


def _qber_or_nan(counts: ObservedCounts, basis: Basis) -> float:
    n = counts.n_basis(basis)
    return counts.m_basis(basis) / n if n > 0 else float("nan")


def _records_from_counts(block_counts, cfg, t_starts) -> list:
    """Finite-key analysis over a list of per-block tallies."""
    params, sec = cfg.protocol, cfg.security
    records: list[BlockRecord] = []
    if not block_counts:
        return records

    if cfg.estimation == Estimation.POOLED:
        agg = block_counts[0]
        for c in block_counts[1:]:
            agg = agg + c
        bounds_agg = decoy_bounds(agg, params, sec)
        n_z_agg = agg.n_basis(Basis.Y)
        for i, counts in enumerate(block_counts):
            n_z = counts.n_basis(Basis.Y)
            w = n_z / n_z_agg
            lam = sec.f_ec * n_z * binary_entropy(counts.m_basis(Basis.Y) / n_z) if n_z else 0.0
            bounds = SecurityBounds(
                s_z0_lower=bounds_agg.s_z0_lower * w,
                s_z1_lower=bounds_agg.s_z1_lower * w,
                phi_z_upper=bounds_agg.phi_z_upper,
                lambda_ec=lam,
            )
            result = key_length(bounds, counts, sec)
            records.append(_make_record(i, t_starts[i], counts, result))
        return records

    prev = None
    for i, counts in enumerate(block_counts):
        if prev is not None and _same_counts(prev[0], counts):
            result = prev[1]  # expected-value blocks repeat identically
        else:
            _, result = analyze_block(counts, params, sec)
            prev = (counts, result)
        records.append(_make_record(i, t_starts[i], counts, result))
    return records


def _same_counts(a: ObservedCounts, b: ObservedCounts) -> bool:
    return a.acquisition_time_s == b.acquisition_time_s and all(
        a.n[c] == b.n[c] and a.m[c] == b.m[c] for c in a.n
    )


def _make_record(i, t_start, counts, result) -> BlockRecord:
    return BlockRecord(
        block_id=i,
        t_start_s=t_start,
        t_key_s=counts.acquisition_time_s,
        n_z=counts.n_basis(Basis.Y),
        qber_y=_qber_or_nan(counts, Basis.Y),
        qber_x=_qber_or_nan(counts, Basis.X),
        key_bits=result.key_length_bits,
        skr_bps=result.skr_bps,
        qber_cells=_cell_qbers(counts),
    )


def _block_partition(cfg: ScenarioConfig, block_n_z: int, diagnostics: list):
    """Per-block tallies for the whole acquisition (counts only, no analysis)."""
    params, src, ch, det = cfg.protocol, cfg.source, cfg.channel, cfg.detector
    stationary = src.qber_drift_rate == 0.0 and ch.fading is None

    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        rates = expected_rates(params, src, ch, det)
    for w in caught:
        diagnostics.append(str(w.message))

    blocks: list[ObservedCounts] = []
    t_starts: list[float] = []
    rate_z = rates.per_second.n_basis(Basis.Y)
    if rate_z <= 0:
        return blocks, t_starts, ObservedCounts.zero()

    if cfg.mode == RunMode.EXPECTED_VALUE:
        if stationary:
            t_block = block_n_z / rate_z
            n_blocks = int(cfg.duration_s / t_block)
            template = rates.per_second.scaled(t_block)
            for i in range(n_blocks):
                blocks.append(template)
                t_starts.append(i * t_block)
            totals = rates.per_second.scaled(cfg.duration_s)
            return blocks, t_starts, totals
        return _binned_partition(cfg, block_n_z, rng=None)

    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0xB10C)))
    if stationary:
        totals = ObservedCounts.zero()
        t_cursor = 0.0
        while True:
            counts = sample_block_counts(rates, params, block_n_z, rng)
            if t_cursor + counts.acquisition_time_s > cfg.duration_s:
                break
            blocks.append(counts)
            t_starts.append(t_cursor)
            t_cursor += counts.acquisition_time_s
            totals = totals + counts
        return blocks, t_starts, totals
    return _binned_partition(cfg, block_n_z, rng=rng)


def _binned_partition(cfg: ScenarioConfig, block_n_z: int, rng):
    """Time-binned walk for drifting or fading channels."""
    params, src, ch, det = cfg.protocol, cfg.source, cfg.channel, cfg.detector
    n_bins = min(max(256, int(cfg.duration_s)), 4096)
    edges = np.linspace(0.0, cfg.duration_s, n_bins + 1)
    blocks, t_starts = [], []
    totals = ObservedCounts.zero()
    current = ObservedCounts.zero()
    current_start = 0.0
    from .photonics import expected_counts as _ev_counts

    for lo, hi in zip(edges[:-1], edges[1:]):
        width = hi - lo
        if rng is None:
            c = _ev_counts(params, src, ch, det, width, t_start_s=lo, n_time_bins=1)
        else:
            c = sample_counts(params, src, ch, det, width, rng, t_start_s=lo, n_time_bins=1)
        current = current + c
        totals = totals + c
        if current.n_basis(Basis.Y) >= block_n_z:
            blocks.append(current)
            t_starts.append(current_start)
            current = ObservedCounts.zero()
            current_start = hi
    return blocks, t_starts, totals


def _run_sync(cfg: ScenarioConfig, seq: SymbolSequence, diagnostics: list) -> tuple:
    params, src, ch, det = cfg.protocol, cfg.source, cfg.channel, cfg.detector
    seed = cfg.seed if cfg.seed is not None else 0
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        sim = simulate_slots(
            seq, src, ch, det, rng_seed=seed,
            n_slots=cfg.sync.n_slots, time_origin_ps=cfg.sync.time_origin_ps,
        )
    for w in caught:
        diagnostics.append(str(w.message))

    total_slots = cfg.sync.n_slots
    acq = total_slots / params.rep_rate_hz

    # Ground-truth-clock pipeline.
    truth_out = outcomes_from_detections(sim.truth.slot_index, sim.tags.channels, seed=seed)
    truth_counts = accumulate_counts(
        [sift(seq, truth_out, cyclic=True)], seq,
        cyclic=True, total_slots=total_slots, acquisition_time_s=acq,
    )

    # Recovered-clock pipeline.
    T_nominal = params.slot_period_ps * (1.0 + cfg.sync.nominal_offset_ppm * 1e-6)
    sync_cfg = SyncConfig(
        nominal_period_ps=T_nominal,
        prefix=seq,
        window_tags=cfg.sync.window_tags,
        lock_threshold=cfg.sync.lock_threshold,
        search_ppm=cfg.sync.search_ppm,
    )
    clock = recover_clock(sim.tags.times_ps, sync_cfg, params=params)
    asg = assign_slots(sim.tags.times_ps, clock)
    L = len(seq)
    accuracy = float(np.mean((asg.slots % L) == (sim.truth.slot_index % L)))

    valid = asg.slots >= 0
    sync_out = outcomes_from_detections(asg.slots[valid], sim.tags.channels[valid], seed=seed)
    sync_counts = accumulate_counts(
        [sift(seq, sync_out, cyclic=True)], seq,
        cyclic=True,
        total_slots=max(total_slots, int(asg.slots.max()) + 1 if len(asg.slots) else 0),
        acquisition_time_s=acq,
    )

    q_truth = _qber_or_nan(truth_counts, Basis.Y)
    q_sync = _qber_or_nan(sync_counts, Basis.Y)

    hist_counts, edges = np.histogram(asg.residuals_ps, bins=81,
                                      range=(-4 * det.jitter_sigma_ps - 20, 4 * det.jitter_sigma_ps + 20))
    centers = 0.5 * (edges[:-1] + edges[1:])

    alt_sigma = None
    alt_hist: list = []
    if cfg.sync.alt_jitter_sigma_ps is not None:
        det_alt = replace(det, jitter_sigma_ps=cfg.sync.alt_jitter_sigma_ps)
        sim_alt = simulate_slots(
            seq, src, ch, det_alt, rng_seed=seed + 1,
            n_slots=cfg.sync.n_slots, time_origin_ps=cfg.sync.time_origin_ps,
        )
        clock_alt = recover_clock(sim_alt.tags.times_ps, sync_cfg, params=params)
        asg_alt = assign_slots(sim_alt.tags.times_ps, clock_alt)
        alt_sigma = asg_alt.sigma_ps
        alt_hist = list(
            np.histogram(asg_alt.residuals_ps, bins=81, range=(edges[0], edges[-1]))[0].astype(int)
        )

    report = SyncReport(
        n_tags=len(sim.tags),
        period_ps=clock.period_ps,
        period_rel_err=abs(clock.period_ps - params.slot_period_ps) / params.slot_period_ps,
        offset_ps=clock.offset_ps,
        confidence=clock.confidence,
        assignment_accuracy=accuracy,
        sigma_fit_ps=asg.sigma_ps,
        fwhm_ps=asg.fwhm_ps,
        qber_y_truth=q_truth,
        qber_y_sync=q_sync,
        qber_delta_pp=abs(q_sync - q_truth) * 100.0,
        alt_sigma_fit_ps=alt_sigma,
        hist_bin_centers=[float(c) for c in centers],
        hist_counts=[int(c) for c in hist_counts],
        alt_hist_counts=alt_hist,
    )
    return report, sync_counts


def run_scenario(cfg: ScenarioConfig) -> RunReport:
    """Execute one scenario end to end; deterministic for a fixed seed."""
    seq = generate_sequence(cfg.sequence_seed, cfg.sequence_length, cfg.protocol)
    diagnostics: list[str] = []
    report = RunReport(
        name=cfg.name,
        config=config_to_dict(cfg),
        config_hash=config_hash(cfg),
        seed=cfg.seed,
        mode=cfg.mode.value,
        estimation=cfg.estimation.value,
    )

    if cfg.sync.enabled:
        report.sync, report.totals = _run_sync(cfg, seq, diagnostics)
        report.diagnostics = diagnostics
        return report

    block_counts, t_starts, totals = _block_partition(cfg, cfg.security.block_n_z, diagnostics)
    report.blocks = _records_from_counts(block_counts, cfg, t_starts)
    report.totals = totals

    if cfg.alt_block_n_z and block_counts:
        group = max(1, round(cfg.alt_block_n_z / cfg.security.block_n_z))
        alt_counts, alt_starts = [], []
        for i in range(0, len(block_counts) - group + 1, group):
            agg = block_counts[i]
            for c in block_counts[i + 1 : i + group]:
                agg = agg + c
            alt_counts.append(agg)
            alt_starts.append(t_starts[i])
        alt_cfg = replace(
            cfg,
            security=replace(cfg.security, block_n_z=cfg.alt_block_n_z),
            estimation=Estimation.PER_BLOCK,
        )
        report.alt_blocks = _records_from_counts(alt_counts, alt_cfg, alt_starts)

    report.diagnostics = diagnostics
    return report


def run_curve(cfg: ScenarioConfig, loss_grid_db) -> RunReport:
    """SKR-versus-loss sweep using the scenario's source and detector."""
    rows = skr_vs_loss_curve(
        cfg.protocol,
        cfg.source,
        cfg.detector,
        cfg.security,
        loss_grid_db,
        background_rate_hz=cfg.channel.background_rate_hz,
    )
    return RunReport(
        name=f"{cfg.name}-curve",
        config=config_to_dict(cfg),
        config_hash=config_hash(cfg),
        seed=cfg.seed,
        mode=cfg.mode.value,
        estimation=cfg.estimation.value,
        curve_rows=rows,
    )


# --- figure-ready CSV tables --------------------------------------------------

def _fmt(x) -> str:
    if isinstance(x, float) and math.isnan(x):
        return "nan"
    return repr(float(x)) if isinstance(x, float) else str(x)


def blocks_csv(report: RunReport) -> str:
    buf = io.StringIO()
    buf.write("block_id,n_z,qber_y,qber_x,key_bits,t_key_s\n")
    for b in report.blocks:
        buf.write(
            f"{b.block_id},{_fmt(b.n_z)},{_fmt(b.qber_y)},{_fmt(b.qber_x)},"
            f"{b.key_bits},{_fmt(b.t_key_s)}\n"
        )
    return buf.getvalue()


def emit_figure_data(report: RunReport, figure_id: str) -> str:
    """CSV table for one figure; raises UnsupportedFigureError when the
    report lacks the required series. Re-running is idempotent."""
    if figure_id == "qber_timeseries":
        if not report.blocks:
            raise UnsupportedFigureError("report has no block series")
        buf = io.StringIO()
        buf.write("t_s,qber_y_signal,qber_y_decoy,qber_x_signal,qber_x_decoy\n")
        for b in report.blocks:
            mid = b.t_start_s + 0.5 * b.t_key_s
            cells = [b.qber_cells.get(c, float("nan")) for c in _CELLS]
            buf.write(f"{_fmt(mid)},{','.join(_fmt(v) for v in cells)}\n")
        return buf.getvalue()

    if figure_id == "skr_timeseries":
        if not report.blocks:
            raise UnsupportedFigureError("report has no block series")
        buf = io.StringIO()
        buf.write("t_s,skr_bps,qber_y,qber_x\n")
        for b in report.blocks:
            mid = b.t_start_s + 0.5 * b.t_key_s
            buf.write(f"{_fmt(mid)},{_fmt(b.skr_bps)},{_fmt(b.qber_y)},{_fmt(b.qber_x)}\n")
        return buf.getvalue()

    if figure_id == "cumulative_bits":
        if not report.blocks:
            raise UnsupportedFigureError("report has no block series")
        t, sifted, key, alt = report.cumulative_bits()
        buf = io.StringIO()
        buf.write("t_s,sifted_bits,key_bits,key_bits_alt\n")
        for row in zip(t, sifted, key, alt):
            buf.write(",".join(_fmt(float(v)) for v in row) + "\n")
        return buf.getvalue()

    if figure_id == "jitter_histogram":
        if report.sync is None:
            raise UnsupportedFigureError("report has no synchronization data")
        s = report.sync
        buf = io.StringIO()
        buf.write("bin_center_ps,count_sync,count_shared_clock\n")
        alt = s.alt_hist_counts or [0] * len(s.hist_counts)
        for c, a, b in zip(s.hist_bin_centers, s.hist_counts, alt):
            buf.write(f"{_fmt(c)},{a},{b}\n")
        return buf.getvalue()

    if figure_id == "skr_vs_loss":
        if not report.curve_rows:
            raise UnsupportedFigureError("report has no loss-curve rows")
        cols = ["loss_db", "skr_asymptotic", "skr_hoeffding", "skr_chernoff", "qber_y", "qber_x"]
        buf = io.StringIO()
        buf.write(",".join(cols) + "\n")
        for row in report.curve_rows:
            buf.write(",".join(_fmt(row[c]) for c in cols) + "\n")
        return buf.getvalue()

    raise UnsupportedFigureError(f"unknown figure id {figure_id!r}")
