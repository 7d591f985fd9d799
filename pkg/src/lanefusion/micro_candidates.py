"""Newell-based candidate trajectories for hidden vehicles.

Each hidden vehicle gets up to four candidates, one per combination of
anchor station and shift direction:

  CFF  follower shift of the vehicle ahead, anchored at the upstream
       detection, propagated forward in time;
  CFB  follower shift anchored at the downstream detection, backward;
  ICFF leader shift of the vehicle behind, anchored upstream, forward;
  ICFB leader shift anchored downstream, backward.

Candidates chain through a region: the forward chains start from the
leading probe and reuse each freshly built candidate as the next
vehicle's reference, the backward chains start from the trailing probe.
Every candidate is translated in time so it crosses its anchor station at
the detected arrival, which makes the effective time lag equal the
detected station headway.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Literal, Mapping, Sequence

import numpy as np

from lanefusion.core import (
    NewellShift,
    SegmentGeometry,
    Trajectory,
    shift_trajectory,
)
from lanefusion.ingest import DOWNSTREAM, UPSTREAM, DetectionEvent, DetectionLog, Region

logger = logging.getLogger(__name__)

Variant = Literal["CFF", "CFB", "ICFF", "ICFB"]

_FOLLOWER_VARIANTS = ("CFF", "CFB")
_UPSTREAM_VARIANTS = ("CFF", "ICFF")


@dataclass(frozen=True)
class NewellConfig:
    """Base Newell lag parameters.

    The space lag is the jam spacing 1/k_j; the time lag follows from the
    congested wave speed: eta = 1 / (|v_cong| * k_j). With headway
    adjustment on, lags shrink proportionally whenever the detected
    station headway is shorter than the base time lag.
    """

    jam_density: float = 1.0 / 7.0
    v_cong: float = -5.0
    headway_adjust: bool = True

    def __post_init__(self) -> None:
        if self.jam_density <= 0:
            raise ValueError("jam_density must be positive")
        if self.v_cong >= 0:
            raise ValueError("v_cong must be negative")

    @property
    def space_lag(self) -> float:
        return 1.0 / self.jam_density

    @property
    def time_lag(self) -> float:
        return 1.0 / (abs(self.v_cong) * self.jam_density)

    def base_shift(self) -> NewellShift:
        return NewellShift(time_lag=self.time_lag, space_lag=self.space_lag)


@dataclass(frozen=True)
class LagSet:
    """Per-variant Newell shifts; a shift is absent when the variant's
    anchor detection is missing."""

    cff: NewellShift | None = None
    cfb: NewellShift | None = None
    icff: NewellShift | None = None
    icfb: NewellShift | None = None

    def get(self, variant: Variant) -> NewellShift | None:
        return getattr(self, variant.lower())


@dataclass(frozen=True)
class CandidateSet:
    """Candidate trajectories of one vehicle on one lane."""

    vehicle_id: str
    lane: int
    cff: Trajectory | None = None
    cfb: Trajectory | None = None
    icff: Trajectory | None = None
    icfb: Trajectory | None = None

    def present(self) -> list[str]:
        return [v for v in ("cff", "cfb", "icff", "icfb") if getattr(self, v) is not None]


# ---------------------------------------------------------------------------
# lag derivation


def _adjusted(shift: NewellShift, headway_: float | None, cfg: NewellConfig) -> NewellShift:
    if not cfg.headway_adjust or headway_ is None:
        return shift
    if 0 < headway_ < shift.time_lag:
        scale = headway_ / shift.time_lag
        return NewellShift(shift.time_lag * scale, shift.space_lag * scale)
    return shift


def _station_sequence(region: Region, log: DetectionLog, station: str) -> list[tuple[str, float]]:
    """(vehicle_id, arrival) along one station, probes included at the ends."""
    ids = region.up_ids if station == UPSTREAM else region.down_ids
    seq: list[tuple[str, float]] = []
    lead_ev = log.event(region.leading_probe.vehicle_id, station)
    if lead_ev is not None:
        seq.append((lead_ev.vehicle_id, lead_ev.arrival_time))
    for vid in ids:
        ev = log.event(vid, station)
        if ev is not None:
            seq.append((vid, ev.arrival_time))
    trail_ev = log.event(region.trailing_probe.vehicle_id, station)
    if trail_ev is not None:
        seq.append((trail_ev.vehicle_id, trail_ev.arrival_time))
    return seq


def _neighbor_headways(
    region: Region, log: DetectionLog, vehicle_id: str, station: str
) -> tuple[float | None, float | None]:
    """Detected time headways (to the vehicle ahead, to the vehicle behind)."""
    seq = _station_sequence(region, log, station)
    for k, (vid, arrival) in enumerate(seq):
        if vid == vehicle_id:
            ahead = arrival - seq[k - 1][1] if k > 0 else None
            behind = seq[k + 1][1] - arrival if k + 1 < len(seq) else None
            return ahead, behind
    return None, None


def derive_lags(
    region: Region, vehicle_id: str, log: DetectionLog, config: NewellConfig
) -> LagSet:
    """Newell shifts for every variant the vehicle's detections support.

    Base values come from the jam density and congested wave speed; when
    headway adjustment is on and the detected station headway h is shorter
    than the base time lag, both lags scale by h / eta so the ratio (and
    with it the wave speed) is preserved.
    """
    up = log.event(vehicle_id, UPSTREAM) if vehicle_id in region.up_ids else None
    down = log.event(vehicle_id, DOWNSTREAM) if vehicle_id in region.down_ids else None
    if up is None and down is None:
        raise ValueError(f"vehicle {vehicle_id!r} has no detection in this region")
    base = config.base_shift()
    cff = cfb = icff = icfb = None
    if up is not None:
        ahead, behind = _neighbor_headways(region, log, vehicle_id, UPSTREAM)
        cff = _adjusted(base, ahead, config)
        icff = _adjusted(base, behind, config)
    if down is not None:
        ahead, behind = _neighbor_headways(region, log, vehicle_id, DOWNSTREAM)
        cfb = _adjusted(base, ahead, config)
        icfb = _adjusted(base, behind, config)
    return LagSet(cff=cff, cfb=cfb, icff=icff, icfb=icfb)


# ---------------------------------------------------------------------------
# candidate construction


def _extend_to_window(traj: Trajectory, t_lo: float, t_hi: float) -> Trajectory:
    """Pad a trajectory with constant-boundary-speed samples to cover a window.

    One extra sample is kept on each side so later interpolation at the
    window edges stays in range.
    """
    dt = traj.sample_interval
    times = traj.times
    positions = traj.positions
    lanes = traj.lanes
    n_before = max(0, int(np.ceil((times[0] - (t_lo - dt)) / dt)))
    n_after = max(0, int(np.ceil(((t_hi + dt) - times[-1]) / dt)))
    if n_before:
        v0 = max(traj.boundary_speed("start"), 0.0)
        pre_t = times[0] - dt * np.arange(n_before, 0, -1)
        pre_x = positions[0] + v0 * (pre_t - times[0])
        times = np.concatenate([pre_t, times])
        positions = np.concatenate([pre_x, positions])
        lanes = np.concatenate([np.full(n_before, lanes[0]), lanes])
    if n_after:
        v1 = max(traj.boundary_speed("end"), 0.0)
        post_t = traj.times[-1] + dt * np.arange(1, n_after + 1)
        post_x = traj.positions[-1] + v1 * (post_t - traj.times[-1])
        times = np.concatenate([times, post_t])
        positions = np.concatenate([positions, post_x])
        lanes = np.concatenate([lanes, np.full(n_after, lanes[-1])])
    keep = (times >= t_lo - dt - 1e-9) & (times <= t_hi + dt + 1e-9)
    return Trajectory(traj.vehicle_id, times[keep], positions[keep], lanes[keep], dt)


def estimate_candidate(
    anchor: DetectionEvent,
    station_x: float,
    reference: Trajectory,
    variant: Variant,
    shift: NewellShift,
    window: tuple[float, float],
) -> Trajectory:
    """One candidate trajectory from a reference path and an anchor detection.

    The reference is Newell-shifted (follower shift for CFF/CFB, leader
    shift for ICFF/ICFB), then translated in time so it crosses the anchor
    station exactly at the detected arrival, and finally extended at the
    boundary speeds to cover the requested window.
    """
    if variant not in ("CFF", "CFB", "ICFF", "ICFB"):
        raise ValueError(f"unknown variant {variant!r}")
    if len(reference) < 2:
        raise ValueError("reference window too short")
    direction = "follower" if variant in _FOLLOWER_VARIANTS else "leader"
    shifted = shift_trajectory(reference, shift, direction)
    t_cross = shifted.crossing_time(station_x, extrapolate=True)
    if t_cross is not None:
        shifted = shifted.shifted(anchor.arrival_time - t_cross, 0.0)
    else:
        # Degenerate reference (never reaches the station even extended):
        # fall back to a space translation onto the anchor point.
        offset = station_x - shifted.position_at(anchor.arrival_time, extrapolate=True)
        shifted = shifted.shifted(0.0, offset)
        logger.debug(
            "candidate %s/%s anchored by space offset %.2f m", anchor.vehicle_id, variant, offset
        )
    t_lo, t_hi = window
    if t_hi <= t_lo:
        raise ValueError(f"empty candidate window [{t_lo}, {t_hi}]")
    out = _extend_to_window(shifted, t_lo, t_hi)
    return out.with_id(anchor.vehicle_id).with_lane(anchor.lane)


def generate_candidates(
    region: Region,
    log: DetectionLog,
    geometry: SegmentGeometry,
    config: NewellConfig,
) -> dict[str, CandidateSet]:
    """All candidate trajectories for one region, chained through the probes.

    Forward chains (CFF from the leading probe, front to rear) cover every
    vehicle with an upstream detection here; backward chains (from the
    trailing probe, rear to front for ICFF/ICFB) mirror them. Lane-keepers
    end up with four candidates, lane-change vehicles with the two their
    detection on this lane supports.
    """
    if region.leading_probe is None or region.trailing_probe is None:
        raise ValueError("region must be bounded by two probes")
    lags = {vid: derive_lags(region, vid, log, config) for vid in region.hidden_vehicle_ids}
    # Windows are padded so the fused forward/backward trajectories always
    # reach past the opposite station arrival, which stage 2 blends need.
    pad = 3.0 * region.leading_probe.sample_interval
    window_fwd = {
        vid: (log.event(vid, UPSTREAM).arrival_time, region.t_hi + pad)
        for vid in region.up_ids
    }
    window_bwd = {
        vid: (region.t_lo - pad, log.event(vid, DOWNSTREAM).arrival_time)
        for vid in region.down_ids
    }
    built: dict[str, dict[str, Trajectory]] = {vid: {} for vid in region.hidden_vehicle_ids}

    # CFF: forward chain from the leading probe through the upstream order.
    ref = region.leading_probe
    for vid in region.up_ids:
        anchor = log.event(vid, UPSTREAM)
        cand = estimate_candidate(
            anchor, geometry.x_up, ref, "CFF", lags[vid].cff, window_fwd[vid]
        )
        built[vid]["cff"] = cand
        ref = cand

    # ICFF: backward chain from the trailing probe (rear vehicle first).
    ref = region.trailing_probe
    for vid in reversed(region.up_ids):
        anchor = log.event(vid, UPSTREAM)
        cand = estimate_candidate(
            anchor, geometry.x_up, ref, "ICFF", lags[vid].icff, window_fwd[vid]
        )
        built[vid]["icff"] = cand
        ref = cand

    # CFB: forward chain through the downstream order, windows backward.
    ref = region.leading_probe
    for vid in region.down_ids:
        anchor = log.event(vid, DOWNSTREAM)
        cand = estimate_candidate(
            anchor, geometry.x_down, ref, "CFB", lags[vid].cfb, window_bwd[vid]
        )
        built[vid]["cfb"] = cand
        ref = cand

    # ICFB: backward chain from the trailing probe.
    ref = region.trailing_probe
    for vid in reversed(region.down_ids):
        anchor = log.event(vid, DOWNSTREAM)
        cand = estimate_candidate(
            anchor, geometry.x_down, ref, "ICFB", lags[vid].icfb, window_bwd[vid]
        )
        built[vid]["icfb"] = cand
        ref = cand

    return {
        vid: CandidateSet(vehicle_id=vid, lane=region.lane, **built[vid])
        for vid in region.hidden_vehicle_ids
    }
