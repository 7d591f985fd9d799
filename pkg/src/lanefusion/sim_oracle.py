"""Deterministic Newell-dynamics traffic simulator used as a test oracle.

Vehicles follow min(desired speed, Newell constraint from the leader),
scripted lane changes execute at the first feasible step after their
trigger, and an optional bottleneck caps speeds inside a zone to spawn
stop-and-go waves. With exact lags the candidate generators reproduce
these trajectories almost exactly, which is what makes the scenarios
usable as ground truth.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from lanefusion.core import LcEvent, SegmentGeometry, Trajectory
from lanefusion.ingest import TrajectorySet
from lanefusion.micro_candidates import NewellConfig

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Bottleneck:
    """Speed cap inside [position - zone_length, position] while active."""

    position: float
    t_start: float
    t_end: float
    capacity_speed: float
    zone_length: float = 50.0


@dataclass(frozen=True)
class LcScriptEntry:
    vehicle_id: str
    target_lane: int
    trigger_time: float


@dataclass(frozen=True)
class ScenarioSpec:
    """Multi-lane platoon scenario definition.

    ``desired_speed`` is either a single value or a (lo, hi) range sampled
    per vehicle from the run seed. Vehicles are released at the entry
    position with the given time headway; lanes are staggered by
    ``lane_stagger`` seconds so the platoons do not move in lockstep.
    """

    geometry: SegmentGeometry
    vehicles_per_lane: int
    entry_headway: float
    desired_speed: float | tuple[float, float] = 22.0
    newell: NewellConfig = field(default_factory=NewellConfig)
    lc_script: tuple[LcScriptEntry, ...] = ()
    bottleneck: Bottleneck | None = None
    entry_position: float = -120.0
    lane_stagger: float = 0.8
    sample_interval: float = 1.0

    def __post_init__(self) -> None:
        if self.entry_headway <= 0:
            raise ValueError("entry_headway must be positive")
        if self.vehicles_per_lane < 1:
            raise ValueError("need at least one vehicle per lane")


@dataclass(frozen=True)
class SimResult:
    trajectories: TrajectorySet
    lc_events: tuple[LcEvent, ...]
    unexecuted_lc: tuple[LcScriptEntry, ...]


def vehicle_id(lane: int, index: int) -> str:
    return f"l{lane}v{index:02d}"


class _Vehicle:
    __slots__ = ("vid", "release_time", "entry_step", "desired", "positions", "lanes")

    def __init__(self, vid: str, release_time: float, desired: float, n_steps: int, lane: int):
        self.vid = vid
        self.release_time = release_time
        self.entry_step: int | None = None
        self.desired = desired
        self.positions = np.full(n_steps, np.nan)
        self.lanes = np.full(n_steps, lane, dtype=np.int64)

    def active(self, step: int) -> bool:
        return self.entry_step is not None and step >= self.entry_step

    def history_at(self, times: np.ndarray, t: float, upto_step: int) -> float:
        """Position at time t from the filled history (clamped at the ends)."""
        lo = self.entry_step or 0
        return float(np.interp(t, times[lo : upto_step + 1], self.positions[lo : upto_step + 1]))


def simulate(spec: ScenarioSpec, horizon: float, seed: int = 0) -> SimResult:
    """Run the scenario for ``horizon`` seconds.

    Deterministic per (spec, seed). Scripted lane changes wait for a gap of
    at least the jam spacing both ahead and behind on the target lane; an
    entry whose gap never opens within the horizon is reported unexecuted
    and the vehicle keeps its lane. Entries are likewise postponed while a
    queued-up lane leaves less than one jam spacing at the entry point.
    """
    dt = spec.sample_interval
    n_steps = int(np.floor(horizon / dt)) + 1
    times = np.arange(n_steps, dtype=float) * dt
    cfg = spec.newell
    eta, theta = cfg.time_lag, cfg.space_lag
    rng = np.random.default_rng(seed)

    vehicles: dict[str, _Vehicle] = {}
    queue: dict[int, list[_Vehicle]] = {lane: [] for lane in spec.geometry.lanes}
    for lane_idx, lane in enumerate(spec.geometry.lanes):
        stagger = lane_idx * spec.lane_stagger
        for k in range(spec.vehicles_per_lane):
            if isinstance(spec.desired_speed, tuple):
                lo, hi = spec.desired_speed
                desired = float(rng.uniform(lo, hi))
            else:
                desired = float(spec.desired_speed)
            veh = _Vehicle(vehicle_id(lane, k), stagger + k * spec.entry_headway, desired, n_steps, lane)
            vehicles[veh.vid] = veh
            queue[lane].append(veh)

    pending = {e.vehicle_id: e for e in spec.lc_script}
    executed: list[LcEvent] = []

    def lane_columns(step: int) -> dict[int, list[_Vehicle]]:
        per_lane: dict[int, list[_Vehicle]] = {lane: [] for lane in spec.geometry.lanes}
        for veh in vehicles.values():
            if veh.active(step):
                per_lane[int(veh.lanes[step])].append(veh)
        for lane in per_lane:
            per_lane[lane].sort(key=lambda v: -v.positions[step])
        return per_lane

    def release(step: int) -> None:
        t = times[step]
        for lane in spec.geometry.lanes:
            pending_entry = queue[lane]
            if not pending_entry or pending_entry[0].release_time > t + 1e-9:
                continue
            actives = [v for v in vehicles.values() if v.active(step) and v.lanes[step] == lane]
            rear = min((v.positions[step] for v in actives), default=np.inf)
            if rear - spec.entry_position < theta:
                continue  # keep the vehicle queued until the entry clears
            veh = pending_entry.pop(0)
            veh.entry_step = step
            veh.positions[step] = spec.entry_position

    release(0)
    for step in range(n_steps - 1):
        t = times[step]
        columns = lane_columns(step)

        # Scripted lane changes: jam-spacing gap ahead and behind on target.
        for vid in sorted(pending):
            entry = pending[vid]
            veh = vehicles[vid]
            if entry.trigger_time > t + 1e-9 or not veh.active(step):
                continue
            x = veh.positions[step]
            target_col = columns.get(entry.target_lane, [])
            gap_ahead = min((v.positions[step] - x for v in target_col if v.positions[step] >= x), default=np.inf)
            gap_behind = min((x - v.positions[step] for v in target_col if v.positions[step] < x), default=np.inf)
            if gap_ahead >= theta and gap_behind >= theta:
                origin = int(veh.lanes[step])
                veh.lanes[step:] = entry.target_lane
                executed.append(
                    LcEvent(
                        vehicle_id=vid,
                        lc_time=float(t),
                        lc_position=float(x),
                        origin_lane=origin,
                        target_lane=entry.target_lane,
                    )
                )
                del pending[vid]
                columns = lane_columns(step)

        # Motion update, front to rear so leader histories are complete.
        t_next = times[step + 1]
        bn = spec.bottleneck
        bn_active = bn is not None and bn.t_start - 1e-9 <= t <= bn.t_end + 1e-9
        for lane, column in columns.items():
            leader: _Vehicle | None = None
            for veh in column:
                x = veh.positions[step]
                x_new = x + veh.desired * dt
                if leader is not None:
                    x_new = min(x_new, leader.history_at(times, t_next - eta, step + 1) - theta)
                if bn_active and bn.position - bn.zone_length <= x <= bn.position:
                    x_new = min(x_new, x + bn.capacity_speed * dt)
                veh.positions[step + 1] = max(x_new, x)
                leader = veh
        release(step + 1)

    trajectories: dict[str, Trajectory] = {}
    for vid, veh in sorted(vehicles.items()):
        valid = ~np.isnan(veh.positions)
        if int(valid.sum()) < 2:
            logger.warning("vehicle %s never entered the simulation", vid)
            continue
        trajectories[vid] = Trajectory(
            vehicle_id=vid,
            times=times[valid],
            positions=veh.positions[valid],
            lanes=veh.lanes[valid],
            sample_interval=dt,
        )
    if pending:
        logger.warning("unexecuted lane changes: %s", sorted(pending))
    return SimResult(
        trajectories=TrajectorySet(trajectories, spec.geometry),
        lc_events=tuple(executed),
        unexecuted_lc=tuple(pending[v] for v in sorted(pending)),
    )
