"""Accuracy metrics, LC-match classification, and the two baselines.

Reconstructions are compared with ground truth position-by-position on
the shared per-second timestamps, pooled into MAE / MAPE / RMSE. Two
non-integrated baselines bracket the proposed method: a purely
microscopic one (raw forward car-following chains) and a purely
macroscopic one (speeds read off the velocity field and integrated).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from lanefusion.core import LcEvent, SegmentGeometry, Trajectory, lattice
from lanefusion.fusion import LcDecision, LcFailure
from lanefusion.ingest import UPSTREAM, DetectionLog, Region, TrajectorySet
from lanefusion.macro_state import VelocityField, query_many
from lanefusion.micro_candidates import CandidateSet

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class VehicleAccuracy:
    mae: float
    mape: float
    rmse: float
    n_points: int


@dataclass(frozen=True)
class AccuracyReport:
    """Pooled position-error metrics (meters / percent)."""

    mae: float
    mape: float
    rmse: float
    n_points: int
    per_vehicle: Mapping[str, VehicleAccuracy] = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "per_vehicle", dict(self.per_vehicle))

    def to_dict(self) -> dict:
        return {
            "mae_m": self.mae,
            "mape_pct": self.mape,
            "rmse_m": self.rmse,
            "n_points": self.n_points,
            "per_vehicle": {
                vid: {"mae_m": a.mae, "mape_pct": a.mape, "rmse_m": a.rmse, "n_points": a.n_points}
                for vid, a in sorted(self.per_vehicle.items())
            },
        }


@dataclass(frozen=True)
class LcMatchReport:
    """Counts of well / moderate / failed LC position matches."""

    well: int
    moderate: int
    failed: int
    success_rate: float
    details: tuple[tuple[str, str, float], ...] = ()

    @property
    def total(self) -> int:
        return self.well + self.moderate + self.failed

    def to_dict(self) -> dict:
        return {
            "well": self.well,
            "moderate": self.moderate,
            "failed": self.failed,
            "success_rate_pct": self.success_rate,
            "details": [
                {"vehicle_id": vid, "outcome": outcome, "position_error_m": err}
                for vid, outcome, err in self.details
            ],
        }


@dataclass(frozen=True)
class ComparisonTable:
    """Per-method accuracy with percentage deltas against the proposed one."""

    reports: Mapping[str, AccuracyReport]

    def __post_init__(self) -> None:
        object.__setattr__(self, "reports", dict(self.reports))
        if "proposed" not in self.reports:
            raise ValueError("comparison table needs a 'proposed' entry")

    def deltas(self) -> dict[str, dict[str, float]]:
        base = self.reports["proposed"]
        out: dict[str, dict[str, float]] = {}
        for method, rep in self.reports.items():
            if method == "proposed":
                continue
            out[method] = {
                "mae_pct": _pct_delta(rep.mae, base.mae),
                "mape_pct": _pct_delta(rep.mape, base.mape),
                "rmse_pct": _pct_delta(rep.rmse, base.rmse),
            }
        return out

    def to_dict(self) -> dict:
        return {
            "methods": {m: r.to_dict() for m, r in sorted(self.reports.items())},
            "deltas_vs_proposed_pct": self.deltas(),
        }


def _pct_delta(other: float, base: float) -> float:
    if base == 0:
        return float("inf") if other > 0 else 0.0
    return (other - base) / base * 100.0


# ---------------------------------------------------------------------------
# position accuracy


def score_accuracy(
    recon: Mapping[str, Trajectory] | TrajectorySet,
    truth: TrajectorySet,
    t_int: float = 1.0,
) -> AccuracyReport:
    """Pool |X_re - X_gt| over the common vehicles and timestamps.

    MAPE measures positions from the upstream sensor, skipping timestamps
    at or behind it so the denominator stays positive.
    """
    recon_map = recon.trajectories if isinstance(recon, TrajectorySet) else dict(recon)
    common = sorted(set(recon_map) & set(truth.trajectories))
    if not common:
        raise ValueError("no common vehicle ids between reconstruction and truth")
    origin = truth.geometry.x_up
    abs_errors: list[np.ndarray] = []
    pct_terms: list[np.ndarray] = []
    per_vehicle: dict[str, VehicleAccuracy] = {}
    for vid in common:
        r, g = recon_map[vid], truth[vid]
        ts = lattice(max(r.start_time, g.start_time), min(r.end_time, g.end_time), t_int)
        if ts.size == 0:
            logger.debug("no shared timestamps for vehicle %s", vid)
            continue
        err = np.abs(r.sample_positions(ts) - g.sample_positions(ts))
        span = g.sample_positions(ts) - origin
        valid = span > 1e-9
        pct = err[valid] / span[valid] * 100.0
        abs_errors.append(err)
        pct_terms.append(pct)
        per_vehicle[vid] = VehicleAccuracy(
            mae=float(err.mean()),
            mape=float(pct.mean()) if pct.size else 0.0,
            rmse=float(np.sqrt(np.mean(err**2))),
            n_points=int(err.size),
        )
    if not abs_errors:
        raise ValueError("no overlapping timestamps between reconstruction and truth")
    all_err = np.concatenate(abs_errors)
    all_pct = np.concatenate(pct_terms) if pct_terms else np.empty(0)
    return AccuracyReport(
        mae=float(all_err.mean()),
        mape=float(all_pct.mean()) if all_pct.size else 0.0,
        rmse=float(np.sqrt(np.mean(all_err**2))),
        n_points=int(all_err.size),
        per_vehicle=per_vehicle,
    )


# ---------------------------------------------------------------------------
# LC match classification


def classify_lc_matches(
    decisions: Sequence[LcDecision],
    failures: Sequence[LcFailure],
    truth_events: Sequence[LcEvent],
    threshold: float = 30.0,
) -> LcMatchReport:
    """Classify each true LC vehicle's estimate.

    well: paired and within ``threshold`` meters of the true position;
    moderate: paired but farther; failed: no consistent pairing (safety
    infeasible, unmatchable, or never attempted). The three counts
    partition the true LC vehicles exactly.
    """
    truth_by_vid = {ev.vehicle_id: ev for ev in truth_events}
    decision_by_vid = {d.vehicle_id: d for d in decisions}
    details: list[tuple[str, str, float]] = []
    well = moderate = failed = 0
    for vid in sorted(truth_by_vid):
        truth_ev = truth_by_vid[vid]
        decision = decision_by_vid.get(vid)
        if decision is None:
            failed += 1
            details.append((vid, "failed", float("nan")))
            continue
        err = abs(decision.lc_position - truth_ev.lc_position)
        if err < threshold:
            well += 1
            details.append((vid, "well", err))
        else:
            moderate += 1
            details.append((vid, "moderate", err))
    total = well + moderate + failed
    rate = (well + moderate) / total * 100.0 if total else 0.0
    extra = set(decision_by_vid) - set(truth_by_vid)
    if extra:
        logger.warning("LC decisions without a true LC event: %s", sorted(extra))
    return LcMatchReport(
        well=well, moderate=moderate, failed=failed,
        success_rate=rate, details=tuple(details),
    )


# ---------------------------------------------------------------------------
# baselines


def baseline_micro(
    regions: Sequence[Region],
    candidates_by_region: Sequence[Mapping[str, CandidateSet]],
    geometry: SegmentGeometry,
) -> dict[str, Trajectory]:
    """Raw forward car-following chains, no fusion and no LC handling.

    Every vehicle with an upstream detection keeps its CFF candidate
    verbatim (truncated once it passes the downstream sensor). Overlap
    with the trailing probe is possible and expected; that failure mode is
    exactly what fusion removes.
    """
    out: dict[str, Trajectory] = {}
    for region, cands in zip(regions, candidates_by_region):
        for vid in region.up_ids:
            cand = cands[vid].cff
            if cand is None:
                continue
            t_exit = cand.crossing_time(geometry.x_down)
            if t_exit is not None and t_exit < cand.end_time:
                try:
                    cand = cand.window(cand.start_time, t_exit + cand.sample_interval)
                except ValueError:
                    pass
            out[vid] = cand
    return out


def baseline_macro(
    fields: Mapping[int, VelocityField],
    log: DetectionLog,
    vehicle_ids: Iterable[str],
    geometry: SegmentGeometry,
    t_int: float = 1.0,
    stall_speed: float = 0.01,
    stall_limit: int = 300,
) -> tuple[dict[str, Trajectory], list[tuple[str, str]]]:
    """Integrate field speeds forward from each upstream detection.

    The field speed at the current point is treated as the vehicle speed:
    x(t + dt) = x(t) + v(x, t) * dt until the downstream sensor, the field
    horizon, or a stall. Lane changes are ignored; the vehicle stays on
    its detection lane. Returns the trajectories plus stall diagnostics.
    """
    out: dict[str, Trajectory] = {}
    diagnostics: list[tuple[str, str]] = []
    for vid in sorted(set(vehicle_ids)):
        ev = log.event(vid, UPSTREAM)
        if ev is None:
            diagnostics.append((vid, "no upstream detection"))
            continue
        field_ = fields.get(ev.lane)
        if field_ is None:
            diagnostics.append((vid, f"no field for lane {ev.lane}"))
            continue
        t_hi = field_.t_span[1]
        times = [ev.arrival_time]
        positions = [geometry.x_up]
        stalled = 0
        while positions[-1] < geometry.x_down and times[-1] + t_int <= t_hi:
            v = float(query_many(field_, [positions[-1]], [times[-1]], clamp=True)[0])
            v = max(v, 0.0)
            stalled = stalled + 1 if v < stall_speed else 0
            if stalled > stall_limit:
                diagnostics.append((vid, f"integration stalled at x={positions[-1]:.1f} m"))
                break
            times.append(times[-1] + t_int)
            positions.append(min(positions[-1] + v * t_int, field_.x_span[1]))
        if len(times) < 2:
            diagnostics.append((vid, "field horizon too short to integrate"))
            continue
        out[vid] = Trajectory(
            vehicle_id=vid,
            times=np.asarray(times),
            positions=np.asarray(positions),
            lanes=np.full(len(times), ev.lane),
            sample_interval=t_int,
        )
    return out, diagnostics
