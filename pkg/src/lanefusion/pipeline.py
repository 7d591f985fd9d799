"""End-to-end orchestration: sensing emulation, fields, candidates, fusion.

The CLI and the verification suites both drive the pipeline through
``run_reconstruction`` so a command-line run and an in-process run are
the same code path.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields as dataclass_fields
from typing import Any, Mapping

from lanefusion.core import SegmentGeometry
from lanefusion.evaluation import baseline_macro, baseline_micro
from lanefusion.fusion import FusionConfig, ReconstructionResult, reconstruct
from lanefusion.ingest import (
    DetectionLog,
    Region,
    TrajectorySet,
    extract_detections,
    partition_regions,
    sample_probes,
)
from lanefusion.macro_state import (
    AsmParams,
    VelocityField,
    build_velocity_field,
    collect_samples,
)
from lanefusion.micro_candidates import CandidateSet, NewellConfig, generate_candidates

logger = logging.getLogger(__name__)


class ConfigError(ValueError):
    """A run configuration failed validation."""


@dataclass(frozen=True)
class GridSpec:
    dx: float = 10.0
    dt: float = 2.0

    def __post_init__(self) -> None:
        if min(self.dx, self.dt) <= 0:
            raise ConfigError("grid steps must be positive")


@dataclass(frozen=True)
class RunConfig:
    """Full parameter set of a reconstruction run."""

    geometry: SegmentGeometry = field(
        default_factory=lambda: SegmentGeometry(x_up=0.0, x_down=500.0, lanes=(1, 2))
    )
    asm: AsmParams = field(default_factory=AsmParams)
    newell: NewellConfig = field(default_factory=NewellConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    grid: GridSpec = field(default_factory=GridSpec)
    penetration: float = 0.10
    seed: int = 42
    sample_interval: float = 1.0
    margin: float = 50.0

    def to_dict(self) -> dict:
        return {
            "geometry": {
                "x_up": self.geometry.x_up,
                "x_down": self.geometry.x_down,
                "lanes": list(self.geometry.lanes),
            },
            "asm": {
                "sigma": self.asm.sigma,
                "tau": self.asm.tau,
                "v_free": self.asm.v_free,
                "v_cong": self.asm.v_cong,
                "v_thresh": self.asm.v_thresh,
                "delta_v": self.asm.delta_v,
                "source_weights": dict(self.asm.source_weights),
                "global_omega": self.asm.global_omega,
                "truncation": self.asm.truncation,
            },
            "newell": {
                "jam_density": self.newell.jam_density,
                "v_cong": self.newell.v_cong,
                "headway_adjust": self.newell.headway_adjust,
            },
            "fusion": {
                "v_threshold": self.fusion.v_threshold,
                "dis_threshold": self.fusion.dis_threshold,
                "l_safe": self.fusion.l_safe,
                "weight_grid_step": self.fusion.weight_grid_step,
            },
            "grid": {"dx": self.grid.dx, "dt": self.grid.dt},
            "penetration": self.penetration,
            "seed": self.seed,
            "sample_interval": self.sample_interval,
            "margin": self.margin,
        }


def _build_section(cls, data: Mapping[str, Any], name: str):
    allowed = {f.name for f in dataclass_fields(cls)}
    unknown = set(data) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in '{name}': {sorted(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid '{name}' section: {exc}") from exc


def config_from_dict(data: Mapping[str, Any]) -> RunConfig:
    """Build a RunConfig from parsed JSON; unknown keys are errors."""
    known = {
        "geometry", "asm", "newell", "fusion", "grid",
        "penetration", "seed", "sample_interval", "margin",
    }
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    kwargs: dict[str, Any] = {}
    if "geometry" in data:
        geo = dict(data["geometry"])
        if "lanes" in geo:
            geo["lanes"] = tuple(geo["lanes"])
        kwargs["geometry"] = _build_section(SegmentGeometry, geo, "geometry")
    if "asm" in data:
        kwargs["asm"] = _build_section(AsmParams, dict(data["asm"]), "asm")
    if "newell" in data:
        kwargs["newell"] = _build_section(NewellConfig, dict(data["newell"]), "newell")
    if "fusion" in data:
        kwargs["fusion"] = _build_section(FusionConfig, dict(data["fusion"]), "fusion")
    if "grid" in data:
        kwargs["grid"] = _build_section(GridSpec, dict(data["grid"]), "grid")
    for key in ("penetration", "seed", "sample_interval", "margin"):
        if key in data:
            kwargs[key] = data[key]
    try:
        return RunConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


@dataclass
class RunResult:
    """Everything a reconstruction run produced, for export or scoring."""

    config: RunConfig
    truth: TrajectorySet
    probes: TrajectorySet
    hidden: TrajectorySet
    log: DetectionLog
    regions: list[Region]
    candidates: list[dict[str, CandidateSet]]
    fields: dict[int, VelocityField]
    reconstruction: ReconstructionResult


def build_fields(
    log: DetectionLog,
    probes: TrajectorySet,
    cfg: RunConfig,
) -> dict[int, VelocityField]:
    """Per-lane velocity contour maps over the data's time span."""
    samples = collect_samples(log, probes)
    if not samples:
        raise ValueError("no velocity samples to build fields from")
    t_lo = min(s.t for s in samples) - cfg.grid.dt
    t_hi = max(s.t for s in samples) + cfg.grid.dt
    x_lo = cfg.geometry.x_up - cfg.grid.dx
    x_hi = cfg.geometry.x_down + cfg.grid.dx
    fields: dict[int, VelocityField] = {}
    for lane in cfg.geometry.lanes:
        lane_samples = [s for s in samples if s.lane == lane]
        if not lane_samples:
            logger.warning("no samples on lane %s, skipping its field", lane)
            continue
        fields[lane] = build_velocity_field(
            lane, (x_lo, x_hi), (t_lo, t_hi), cfg.grid.dx, cfg.grid.dt, lane_samples, cfg.asm
        )
    return fields


def run_reconstruction(truth: TrajectorySet, cfg: RunConfig) -> RunResult:
    """Emulate the sensing environment on ground truth and reconstruct."""
    log = extract_detections(truth)
    probes, hidden = sample_probes(truth, cfg.penetration, cfg.seed)
    regions, skipped = partition_regions(probes, hidden, log)
    fields = build_fields(log, probes, cfg)
    candidates = [
        generate_candidates(region, log, cfg.geometry, cfg.newell) for region in regions
    ]
    usable_regions = [r for r in regions if r.lane in fields]
    usable_candidates = [c for r, c in zip(regions, candidates) if r.lane in fields]
    reconstruction = reconstruct(
        usable_regions,
        usable_candidates,
        fields,
        log,
        probes,
        cfg.geometry,
        cfg.fusion,
        t_int=cfg.sample_interval,
        skipped=skipped,
    )
    return RunResult(
        config=cfg,
        truth=truth,
        probes=probes,
        hidden=hidden,
        log=log,
        regions=regions,
        candidates=candidates,
        fields=fields,
        reconstruction=reconstruction,
    )


def run_baselines(run: RunResult) -> tuple[dict, dict, list[tuple[str, str]]]:
    """Micro and macro baseline reconstructions for the same run."""
    micro = baseline_micro(run.regions, run.candidates, run.config.geometry)
    covered = set(micro) | {
        vid for region in run.regions for vid in region.hidden_vehicle_ids
    }
    macro, diagnostics = baseline_macro(
        run.fields, run.log, covered, run.config.geometry, run.config.sample_interval
    )
    return micro, macro, diagnostics
