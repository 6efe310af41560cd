"""Scenario configuration: a strict, versioned key/value schema plus the
canonical presets reproducing the reference experiments.

Configs are plain nested dicts (YAML on disk). Unknown keys are rejected so
typos fail fast; ``schema_version`` gates future format changes.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any

import yaml

from .errors import ConfigError
from .linkbudget import LinkSegments
from .photonics import (
    ChannelModel,
    ConstantFading,
    DetectorModel,
    LognormalFading,
    SourceModel,
    TabulatedFading,
)
from .protocol import ProtocolParams
from .security import Bound, SecurityParams

__all__ = [
    "SCHEMA_VERSION",
    "RunMode",
    "Estimation",
    "SyncSettings",
    "ScenarioConfig",
    "misalignment_angle_for_error",
    "preset",
    "preset_names",
]

SCHEMA_VERSION = 1


class RunMode(Enum):
    EXPECTED_VALUE = "expected_value"
    MONTE_CARLO = "monte_carlo"


class Estimation(Enum):
    #: decoy/phase bounds evaluated on each block's own statistics
    PER_BLOCK = "per_block"
    #: bounds evaluated once on the run aggregate, keys extracted per block
    POOLED = "pooled"


def misalignment_angle_for_error(error_fraction: float) -> float:
    """Polarization angle whose sin^2 equals the target intrinsic error."""
    if not 0 <= error_fraction < 0.5:
        raise ConfigError("error fraction must lie in [0, 0.5)")
    return math.asin(math.sqrt(error_fraction))


@dataclass(frozen=True)
class SyncSettings:
    enabled: bool = False
    n_slots: int = 4_000_000
    window_tags: int = 100_000
    lock_threshold: float = 6.0
    search_ppm: float = 50.0
    nominal_offset_ppm: float = 0.0  # receiver's clock error versus truth
    time_origin_ps: float = 0.0
    alt_jitter_sigma_ps: float | None = None  # shared-clock (PLL) comparison run


@dataclass
class ScenarioConfig:
    name: str
    protocol: ProtocolParams
    source: SourceModel
    channel: ChannelModel
    detector: DetectorModel
    security: SecurityParams
    mode: RunMode = RunMode.EXPECTED_VALUE
    estimation: Estimation = Estimation.PER_BLOCK
    duration_s: float = 60.0
    seed: int | None = None
    sequence_seed: int = 7
    sequence_length: int = 1024
    alt_block_n_z: int | None = None
    sync: SyncSettings = field(default_factory=SyncSettings)
    link_budget: LinkSegments | None = None

    def __post_init__(self) -> None:
        if self.duration_s <= 0:
            raise ConfigError("duration_s must be positive")
        if self.mode == RunMode.MONTE_CARLO and self.seed is None:
            raise ConfigError("seed is mandatory in monte_carlo mode")
        if self.sequence_length < 2:
            raise ConfigError("sequence_length must be >= 2")
        if self.link_budget is not None:
            total = self.link_budget.total_db
            if abs(total - self.channel.fixed_loss_db) > 0.5:
                raise ConfigError(
                    f"link budget total {total:.2f} dB does not match channel loss "
                    f"{self.channel.fixed_loss_db:.2f} dB within 0.5 dB"
                )


# --- dict <-> config --------------------------------------------------------

def _take(section: dict, path: str, allowed: set[str]) -> None:
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) in {path}: {sorted(unknown)}")


def _build_fading(node, path):
    if node is None:
        return None
    if not isinstance(node, dict) or "kind" not in node:
        raise ConfigError(f"{path} must be a mapping with a 'kind'")
    kind = node["kind"]
    body = {k: v for k, v in node.items() if k != "kind"}
    try:
        if kind == "constant":
            _take(body, path, {"multiplier"})
            return ConstantFading(**body)
        if kind == "lognormal":
            _take(body, path, {"mean_efficiency", "sigma_db", "coherence_time_s", "seed"})
            return LognormalFading(**body)
        if kind == "csv":
            _take(body, path, {"path"})
            return TabulatedFading.from_csv(body["path"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {path}: {exc}") from exc
    raise ConfigError(f"unknown fading kind {kind!r}")


def config_from_dict(doc: dict) -> ScenarioConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config document must be a mapping")
    _take(
        doc,
        "config",
        {
            "schema_version", "name", "mode", "estimation", "duration_s", "seed",
            "sequence_seed", "sequence_length", "alt_block_n_z",
            "protocol", "source", "channel", "detector", "security", "sync",
            "link_budget",
        },
    )
    version = doc.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {version!r} (expected {SCHEMA_VERSION})")
    for required in ("name", "protocol", "channel"):
        if required not in doc:
            raise ConfigError(f"missing required section {required!r}")

    try:
        proto_doc = dict(doc["protocol"])
        _take(proto_doc, "protocol", {"rep_rate_hz", "mu", "nu", "p_mu", "p_z_tx", "p_z_rx"})
        protocol = ProtocolParams(**{k: float(v) for k, v in proto_doc.items()})

        source_doc = dict(doc.get("source", {}))
        _take(
            source_doc,
            "source",
            {"misalignment_angle_rad", "misalignment_angle_x_rad", "extinction_ratio",
             "pulse_width_fwhm_ps", "qber_drift_rate"},
        )
        source = SourceModel(
            params=protocol,
            misalignment_angle=float(source_doc.get("misalignment_angle_rad", 0.0)),
            misalignment_angle_x=(
                float(source_doc["misalignment_angle_x_rad"])
                if "misalignment_angle_x_rad" in source_doc
                else None
            ),
            extinction_ratio=float(source_doc.get("extinction_ratio", 0.0)),
            pulse_width_fwhm_ps=float(source_doc.get("pulse_width_fwhm_ps", 0.0)),
            qber_drift_rate=float(source_doc.get("qber_drift_rate", 0.0)),
        )

        chan_doc = dict(doc["channel"])
        _take(chan_doc, "channel", {"fixed_loss_db", "background_rate_hz", "fading"})
        channel = ChannelModel(
            fixed_loss_db=float(chan_doc.get("fixed_loss_db", 0.0)),
            background_rate_hz=float(chan_doc.get("background_rate_hz", 0.0)),
            fading=_build_fading(chan_doc.get("fading"), "channel.fading"),
        )

        det_doc = dict(doc.get("detector", {}))
        _take(det_doc, "detector",
              {"efficiency", "dark_rate_hz", "dead_time_ns", "jitter_sigma_ps"})
        detector = DetectorModel(**{k: float(v) for k, v in det_doc.items()})

        sec_doc = dict(doc.get("security", {}))
        _take(sec_doc, "security", {"eps_sec", "eps_cor", "f_ec", "block_n_z", "bound"})
        bound = Bound(sec_doc.pop("bound", "chernoff"))
        security = SecurityParams(
            bound=bound,
            block_n_z=int(sec_doc.pop("block_n_z", 10**7)),
            **{k: float(v) for k, v in sec_doc.items()},
        )

        sync_doc = dict(doc.get("sync", {}) or {})
        _take(
            sync_doc, "sync",
            {"enabled", "n_slots", "window_tags", "lock_threshold", "search_ppm",
             "nominal_offset_ppm", "time_origin_ps", "alt_jitter_sigma_ps"},
        )
        sync = SyncSettings(
            enabled=bool(sync_doc.get("enabled", False)),
            n_slots=int(sync_doc.get("n_slots", 4_000_000)),
            window_tags=int(sync_doc.get("window_tags", 100_000)),
            lock_threshold=float(sync_doc.get("lock_threshold", 6.0)),
            search_ppm=float(sync_doc.get("search_ppm", 50.0)),
            nominal_offset_ppm=float(sync_doc.get("nominal_offset_ppm", 0.0)),
            time_origin_ps=float(sync_doc.get("time_origin_ps", 0.0)),
            alt_jitter_sigma_ps=(
                float(sync_doc["alt_jitter_sigma_ps"])
                if sync_doc.get("alt_jitter_sigma_ps") is not None
                else None
            ),
        )

        budget = None
        if doc.get("link_budget") is not None:
            segs = [(str(item["label"]), float(item["loss_db"])) for item in doc["link_budget"]]
            budget = LinkSegments(segs)

        return ScenarioConfig(
            name=str(doc["name"]),
            protocol=protocol,
            source=source,
            channel=channel,
            detector=detector,
            security=security,
            mode=RunMode(doc.get("mode", "expected_value")),
            estimation=Estimation(doc.get("estimation", "per_block")),
            duration_s=float(doc.get("duration_s", 60.0)),
            seed=(int(doc["seed"]) if doc.get("seed") is not None else None),
            sequence_seed=int(doc.get("sequence_seed", 7)),
            sequence_length=int(doc.get("sequence_length", 1024)),
            alt_block_n_z=(int(doc["alt_block_n_z"]) if doc.get("alt_block_n_z") else None),
            sync=sync,
            link_budget=budget,
        )
    except ConfigError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def config_to_dict(cfg: ScenarioConfig) -> dict:
    doc: dict[str, Any] = {
        "schema_version": SCHEMA_VERSION,
        "name": cfg.name,
        "mode": cfg.mode.value,
        "estimation": cfg.estimation.value,
        "duration_s": cfg.duration_s,
        "seed": cfg.seed,
        "sequence_seed": cfg.sequence_seed,
        "sequence_length": cfg.sequence_length,
        "protocol": {
            "rep_rate_hz": cfg.protocol.rep_rate_hz,
            "mu": cfg.protocol.mu,
            "nu": cfg.protocol.nu,
            "p_mu": cfg.protocol.p_mu,
            "p_z_tx": cfg.protocol.p_z_tx,
            "p_z_rx": cfg.protocol.p_z_rx,
        },
        "source": {
            "misalignment_angle_rad": cfg.source.misalignment_angle,
            "extinction_ratio": cfg.source.extinction_ratio,
            "pulse_width_fwhm_ps": cfg.source.pulse_width_fwhm_ps,
            "qber_drift_rate": cfg.source.qber_drift_rate,
        },
        "channel": {
            "fixed_loss_db": cfg.channel.fixed_loss_db,
            "background_rate_hz": cfg.channel.background_rate_hz,
            "fading": _fading_to_dict(cfg.channel.fading),
        },
        "detector": {
            "efficiency": cfg.detector.efficiency,
            "dark_rate_hz": cfg.detector.dark_rate_hz,
            "dead_time_ns": cfg.detector.dead_time_ns,
            "jitter_sigma_ps": cfg.detector.jitter_sigma_ps,
        },
        "security": {
            "eps_sec": cfg.security.eps_sec,
            "eps_cor": cfg.security.eps_cor,
            "f_ec": cfg.security.f_ec,
            "block_n_z": cfg.security.block_n_z,
            "bound": cfg.security.bound.value,
        },
        "sync": {
            "enabled": cfg.sync.enabled,
            "n_slots": cfg.sync.n_slots,
            "window_tags": cfg.sync.window_tags,
            "lock_threshold": cfg.sync.lock_threshold,
            "search_ppm": cfg.sync.search_ppm,
            "nominal_offset_ppm": cfg.sync.nominal_offset_ppm,
            "time_origin_ps": cfg.sync.time_origin_ps,
            "alt_jitter_sigma_ps": cfg.sync.alt_jitter_sigma_ps,
        },
    }
    if cfg.source.misalignment_angle_x is not None:
        doc["source"]["misalignment_angle_x_rad"] = cfg.source.misalignment_angle_x
    if cfg.alt_block_n_z:
        doc["alt_block_n_z"] = cfg.alt_block_n_z
    if cfg.link_budget is not None:
        doc["link_budget"] = [
            {"label": label, "loss_db": loss} for label, loss in cfg.link_budget.segments
        ]
    return doc


def _fading_to_dict(fading):
    if fading is None:
        return None
    if isinstance(fading, ConstantFading):
        return {"kind": "constant", "multiplier": fading.multiplier}
    if isinstance(fading, LognormalFading):
        return {
            "kind": "lognormal",
            "mean_efficiency": fading.mean_efficiency,
            "sigma_db": fading.sigma_db,
            "coherence_time_s": fading.coherence_time_s,
            "seed": fading.seed,
        }
    raise ConfigError("tabulated fading cannot be round-tripped without its CSV path")


def load_config(path) -> ScenarioConfig:
    with open(path, "r", encoding="utf-8") as fh:
        doc = yaml.safe_load(fh)
    return config_from_dict(doc)


def dump_config(cfg: ScenarioConfig) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=False)


def config_hash(cfg: ScenarioConfig) -> str:
    canonical = json.dumps(config_to_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()[:16]


# --- presets ----------------------------------------------------------------
#
# Detector values are calibration placeholders chosen to reproduce the
# reference operating points; they are not asserted hardware data.

_LAB_PROTOCOL = {"rep_rate_hz": 1.5e9, "mu": 0.28, "nu": 0.1232, "p_mu": 0.5, "p_z_tx": 0.9, "p_z_rx": 0.5}
_FS_PROTOCOL = {"rep_rate_hz": 1.5e9, "mu": 0.5, "nu": 0.13, "p_mu": 0.7, "p_z_tx": 0.9, "p_z_rx": 0.5}
_DETECTOR = {"efficiency": 0.85, "dark_rate_hz": 10.0, "dead_time_ns": 75.0, "jitter_sigma_ps": 30.0}

_INTERMODAL_BUDGET = [
    {"label": "fiber_tx", "loss_db": 3.75},
    {"label": "tx_terminal", "loss_db": 1.2},
    {"label": "eta_f", "loss_db": 2.0},
    {"label": "rx_optics", "loss_db": 1.9},
    {"label": "eta_smf_fsm_on", "loss_db": 4.5},
    {"label": "fiber_rx", "loss_db": 4.24},
]


def _preset_docs() -> dict[str, dict]:
    ang = misalignment_angle_for_error
    return {
        # 1.5 GHz laboratory point: 5 dB channel, N=1e7 blocks.
        "lab-1p5ghz": {
            "schema_version": SCHEMA_VERSION,
            "name": "lab-1p5ghz",
            "mode": "expected_value",
            "duration_s": 600.0,
            "protocol": dict(_LAB_PROTOCOL),
            "source": {
                "misalignment_angle_rad": ang(0.0038),
                "misalignment_angle_x_rad": ang(0.0027),
            },
            "channel": {"fixed_loss_db": 5.0},
            "detector": dict(_DETECTOR),
            "security": {"block_n_z": 10**7, "bound": "chernoff"},
        },
        # Two-hour source-stability run at 1 GHz and 26 dB.
        "fiber-stability": {
            "schema_version": SCHEMA_VERSION,
            "name": "fiber-stability",
            "mode": "monte_carlo",
            "seed": 11,
            "duration_s": 7200.0,
            "protocol": dict(_LAB_PROTOCOL, rep_rate_hz=1.0e9),
            "source": {
                "misalignment_angle_rad": ang(0.0038),
                "misalignment_angle_x_rad": ang(0.0027),
            },
            "channel": {"fixed_loss_db": 26.0},
            "detector": dict(_DETECTOR),
            "security": {"block_n_z": 10**7, "bound": "chernoff"},
        },
        # Base scenario for the SKR-versus-attenuation curve (grid via CLI).
        "skr-vs-loss": {
            "schema_version": SCHEMA_VERSION,
            "name": "skr-vs-loss",
            "mode": "expected_value",
            "duration_s": 600.0,
            "protocol": dict(_LAB_PROTOCOL),
            "source": {
                "misalignment_angle_rad": ang(0.0038),
                "misalignment_angle_x_rad": ang(0.0027),
            },
            "channel": {"fixed_loss_db": 0.0},
            "detector": dict(_DETECTOR),
            "security": {"block_n_z": 10**7, "bound": "chernoff"},
        },
        # Daylight intermodal link at its nominal 17.5 dB working point.
        "freespace-nominal": {
            "schema_version": SCHEMA_VERSION,
            "name": "freespace-nominal",
            "mode": "expected_value",
            "duration_s": 3600.0,
            "protocol": dict(_FS_PROTOCOL),
            "source": {
                "misalignment_angle_rad": ang(0.0152),
                "misalignment_angle_x_rad": ang(0.0045),
            },
            "channel": {"fixed_loss_db": 17.5, "background_rate_hz": 1000.0},
            "detector": dict(_DETECTOR),
            "security": {"block_n_z": 10**7, "bound": "chernoff"},
            "link_budget": [dict(x) for x in _INTERMODAL_BUDGET],
        },
        # High-loss emulation: +21 dB at the receiver, short blocks, pooled
        # parameter estimation so every 1e4-detection block yields key.
        "satellite-emulation": {
            "schema_version": SCHEMA_VERSION,
            "name": "satellite-emulation",
            "mode": "monte_carlo",
            "estimation": "pooled",
            "seed": 23,
            "duration_s": 900.0,
            "protocol": dict(_FS_PROTOCOL),
            "source": {
                "misalignment_angle_rad": ang(0.0122),
                "misalignment_angle_x_rad": ang(0.0150),
            },
            "channel": {"fixed_loss_db": 38.5, "background_rate_hz": 79.0},
            "detector": dict(_DETECTOR),
            "security": {"block_n_z": 10**4, "bound": "chernoff"},
            "alt_block_n_z": 10**7,
        },
        # Clock-recovery benchmark on the intermodal link, including the
        # shared-clock (PLL) jitter comparison.
        "sync-bench": {
            "schema_version": SCHEMA_VERSION,
            "name": "sync-bench",
            "mode": "monte_carlo",
            "seed": 42,
            "duration_s": 0.01,
            "protocol": dict(_FS_PROTOCOL),
            "source": {
                "misalignment_angle_rad": ang(0.0152),
                "misalignment_angle_x_rad": ang(0.0045),
            },
            "channel": {"fixed_loss_db": 17.5, "background_rate_hz": 1000.0},
            "detector": dict(_DETECTOR),
            "security": {"block_n_z": 10**7, "bound": "chernoff"},
            "sync": {
                "enabled": True,
                "n_slots": 6_000_000,
                "window_tags": 100_000,
                "nominal_offset_ppm": -8.0,
                "time_origin_ps": 987_654.0,
                "alt_jitter_sigma_ps": 60.0,
            },
        },
    }


def preset_names() -> list[str]:
    return sorted(_preset_docs())


def preset(name: str) -> ScenarioConfig:
    docs = _preset_docs()
    if name not in docs:
        raise ConfigError(f"unknown preset {name!r}; available: {', '.join(sorted(docs))}")
    return config_from_dict(docs[name])
