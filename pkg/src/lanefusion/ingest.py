"""Ground-truth ingestion and sparse-sensing emulation.

Parses trajectory CSVs, resamples them to the working time grid, emulates
the two fixed sensor stations and the probe-vehicle fleet, and partitions
each lane's space-time diagram into reconstruction regions bounded by
consecutive probe trajectories.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from lanefusion.core import (
    TIME_TOL,
    LcEvent,
    SegmentGeometry,
    Trajectory,
    lane_changes,
    lattice,
)

logger = logging.getLogger(__name__)

UPSTREAM = "upstream"
DOWNSTREAM = "downstream"

_STATION_ORDER = {UPSTREAM: 0, DOWNSTREAM: 1}

REQUIRED_COLUMNS = ("vehicle_id", "time_s", "position_m", "lane_id")


@dataclass(frozen=True)
class TrajectorySet:
    """Immutable bundle of trajectories over one segment geometry."""

    trajectories: Mapping[str, Trajectory]
    geometry: SegmentGeometry

    def __post_init__(self) -> None:
        object.__setattr__(self, "trajectories", dict(self.trajectories))
        for vid, traj in self.trajectories.items():
            if vid != traj.vehicle_id:
                raise ValueError(f"key {vid!r} does not match trajectory id {traj.vehicle_id!r}")

    def __len__(self) -> int:
        return len(self.trajectories)

    def __contains__(self, vid: str) -> bool:
        return vid in self.trajectories

    def __getitem__(self, vid: str) -> Trajectory:
        return self.trajectories[vid]

    @property
    def vehicle_ids(self) -> list[str]:
        return sorted(self.trajectories)

    def subset(self, ids: Iterable[str]) -> "TrajectorySet":
        keep = {vid: self.trajectories[vid] for vid in ids}
        return TrajectorySet(keep, self.geometry)


@dataclass(frozen=True)
class DetectionEvent:
    """One fixed-sensor record: vehicle identity, arrival time, speed."""

    vehicle_id: str
    lane: int
    station: str
    arrival_time: float
    speed: float

    def __post_init__(self) -> None:
        if self.station not in _STATION_ORDER:
            raise ValueError(f"station must be upstream/downstream, got {self.station!r}")
        if self.speed < 0:
            raise ValueError(f"speed must be non-negative, got {self.speed}")


@dataclass(frozen=True)
class DetectionLog:
    """All fixed-sensor events, sorted by (lane, station, arrival time)."""

    events: tuple[DetectionEvent, ...]

    def __post_init__(self) -> None:
        ordered = sorted(
            self.events,
            key=lambda e: (e.lane, _STATION_ORDER[e.station], e.arrival_time, e.vehicle_id),
        )
        seen: set[tuple[str, str]] = set()
        for ev in ordered:
            key = (ev.vehicle_id, ev.station)
            if key in seen:
                raise ValueError(f"duplicate detection for {key}")
            seen.add(key)
        object.__setattr__(self, "events", tuple(ordered))

    def event(self, vehicle_id: str, station: str) -> DetectionEvent | None:
        for ev in self.events:
            if ev.vehicle_id == vehicle_id and ev.station == station:
                return ev
        return None

    def station_events(self, lane: int, station: str) -> list[DetectionEvent]:
        return [ev for ev in self.events if ev.lane == lane and ev.station == station]

    def lc_vehicle_ids(self) -> set[str]:
        """Vehicles detected at both stations on different lanes."""
        by_vid: dict[str, dict[str, DetectionEvent]] = {}
        for ev in self.events:
            by_vid.setdefault(ev.vehicle_id, {})[ev.station] = ev
        return {
            vid
            for vid, evs in by_vid.items()
            if UPSTREAM in evs and DOWNSTREAM in evs and evs[UPSTREAM].lane != evs[DOWNSTREAM].lane
        }


@dataclass(frozen=True)
class Region:
    """Space-time slab between two consecutive probes on one lane.

    ``up_ids`` orders the members with an upstream detection here by
    upstream arrival (used by the forward candidate chains); ``down_ids``
    orders the members with a downstream detection here by downstream
    arrival (backward chains). ``hidden_vehicle_ids`` is the merged
    front-to-rear view.
    """

    lane: int
    leading_probe: Trajectory
    trailing_probe: Trajectory
    hidden_vehicle_ids: tuple[str, ...]
    up_ids: tuple[str, ...] = ()
    down_ids: tuple[str, ...] = ()
    t_lo: float = 0.0
    t_hi: float = 0.0


# ---------------------------------------------------------------------------
# parsing


def _open_text(source) -> io.TextIOBase:
    if isinstance(source, (str, Path)):
        return open(source, "r", newline="", encoding="utf-8")
    if isinstance(source, bytes):
        return io.StringIO(source.decode("utf-8"))
    if hasattr(source, "read"):
        probe = source.read(0)
        if isinstance(probe, bytes):
            return io.TextIOWrapper(source, encoding="utf-8")
        return source
    raise TypeError(f"unsupported source type {type(source)!r}")


def parse_trajectory_file(
    source,
    geometry: SegmentGeometry,
    sample_interval: float = 1.0,
    margin: float = 50.0,
) -> TrajectorySet:
    """Read a trajectory CSV and resample every vehicle to the time grid.

    The file needs a header with vehicle_id, time_s, position_m, lane_id
    (extra columns are ignored). Rows more than ``margin`` meters outside
    the segment are clipped; resampling uses linear interpolation onto the
    global ``sample_interval`` lattice.
    """
    stream = _open_text(source)
    reader = csv.reader(stream)
    try:
        header = next(reader)
    except StopIteration:
        raise ValueError("empty trajectory file") from None
    names = [h.strip().lower() for h in header]
    try:
        cols = {name: names.index(name) for name in REQUIRED_COLUMNS}
    except ValueError:
        missing = [n for n in REQUIRED_COLUMNS if n not in names]
        raise ValueError(f"missing required columns: {missing}") from None

    raw: dict[str, list[tuple[float, float, int]]] = {}
    x_lo = geometry.x_up - margin
    x_hi = geometry.x_down + margin
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not cell.strip() for cell in row):
            continue
        try:
            vid = row[cols["vehicle_id"]].strip()
            t = float(row[cols["time_s"]])
            x = float(row[cols["position_m"]])
            lane = int(float(row[cols["lane_id"]]))
        except (IndexError, ValueError) as exc:
            raise ValueError(f"malformed row at line {lineno}: {exc}") from None
        if not vid:
            raise ValueError(f"malformed row at line {lineno}: empty vehicle_id")
        samples = raw.setdefault(vid, [])
        if samples and t <= samples[-1][0]:
            raise ValueError(
                f"non-monotone time for vehicle {vid!r} at line {lineno} "
                f"({t} after {samples[-1][0]})"
            )
        if x_lo <= x <= x_hi:
            samples.append((t, x, lane))

    trajectories: dict[str, Trajectory] = {}
    for vid, samples in raw.items():
        if len(samples) < 2:
            logger.debug("vehicle %s has fewer than 2 in-range samples, dropped", vid)
            continue
        arr = np.asarray(samples, dtype=float)
        times, positions, lanes = arr[:, 0], arr[:, 1], arr[:, 2].astype(np.int64)
        grid = lattice(times[0], times[-1], sample_interval)
        if grid.size < 2:
            logger.debug("vehicle %s spans fewer than 2 grid steps, dropped", vid)
            continue
        grid_pos = np.interp(grid, times, positions)
        idx = np.clip(np.searchsorted(times, grid + TIME_TOL, side="right") - 1, 0, len(times) - 1)
        grid_lanes = lanes[idx]
        trajectories[vid] = Trajectory(
            vehicle_id=vid,
            times=grid,
            positions=grid_pos,
            lanes=grid_lanes,
            sample_interval=sample_interval,
        )
    return TrajectorySet(trajectories, geometry)


def extract_lc_events(ts: TrajectorySet) -> list[LcEvent]:
    """Ground-truth lane-change events of every vehicle, in id order."""
    events: list[LcEvent] = []
    for vid in ts.vehicle_ids:
        events.extend(lane_changes(ts[vid]))
    return events


# ---------------------------------------------------------------------------
# virtual fixed sensors


def _station_crossing(traj: Trajectory, x: float) -> tuple[float, float, int] | None:
    """First crossing of station position x: (arrival, speed, lane)."""
    t_c = traj.crossing_time(x)
    if t_c is None:
        return None
    pos = traj.positions
    if pos[0] > x + 1e-12:
        return None  # entered beyond the station, never crossed it
    k = int(np.searchsorted(traj.times, t_c + TIME_TOL, side="right"))
    k = min(max(k, 1), len(traj) - 1)
    dt = traj.times[k] - traj.times[k - 1]
    speed = max(float((pos[k] - pos[k - 1]) / dt), 0.0)
    return float(t_c), speed, traj.lane_at(t_c)


def extract_detections(ts: TrajectorySet) -> DetectionLog:
    """Emulate the two fixed sensors over every trajectory in the set.

    The arrival time interpolates linearly between the bracketing samples;
    the speed is the bracketing-segment slope; the lane is the lane held
    at the crossing. Vehicles that never reach a station simply produce no
    event there.
    """
    events: list[DetectionEvent] = []
    stations = ((UPSTREAM, ts.geometry.x_up), (DOWNSTREAM, ts.geometry.x_down))
    for vid in ts.vehicle_ids:
        traj = ts[vid]
        for station, x in stations:
            crossing = _station_crossing(traj, x)
            if crossing is None:
                continue
            arrival, speed, lane = crossing
            events.append(DetectionEvent(vid, lane, station, arrival, speed))
    return DetectionLog(tuple(events))


# ---------------------------------------------------------------------------
# probe sampling


def sample_probes(
    ts: TrajectorySet, rate: float, seed: int
) -> tuple[TrajectorySet, TrajectorySet]:
    """Split the fleet into probes and hidden vehicles.

    Only lane-keeping vehicles are eligible probes; each is drawn
    independently with probability ``rate``, so the expected probe count is
    rate times the eligible count. Deterministic for a given seed.
    """
    if not 0.0 < rate < 1.0:
        raise ValueError(f"penetration rate must be in (0, 1), got {rate}")
    eligible = [vid for vid in ts.vehicle_ids if not lane_changes(ts[vid])]
    if not eligible:
        raise ValueError("no lane-keeping vehicles eligible as probes")
    rng = np.random.default_rng(seed)
    draws = rng.random(len(eligible))
    probe_ids = {vid for vid, u in zip(eligible, draws) if u < rate}
    hidden_ids = [vid for vid in ts.vehicle_ids if vid not in probe_ids]
    return ts.subset(sorted(probe_ids)), ts.subset(hidden_ids)


# ---------------------------------------------------------------------------
# region partitioning


def _probe_lane(traj: Trajectory) -> int:
    return int(traj.lanes[0])


def _bracket(value: float, bounds: Sequence[float]) -> int | None:
    """Index i with bounds[i] <= value < bounds[i+1], None when outside."""
    for i in range(len(bounds) - 1):
        if bounds[i] - TIME_TOL <= value < bounds[i + 1] - TIME_TOL:
            return i
    return None


def _merge_order(
    up_members: list[tuple[str, float]],
    enterers: list[tuple[str, float]],
    down_times: dict[str, float],
) -> tuple[str, ...]:
    """Front-to-rear merge of upstream-ordered members with entering vehicles.

    Enterers only carry a downstream arrival, so each one slots in just
    before the first upstream-ordered member that reaches the downstream
    station after it.
    """
    order = [vid for vid, _ in sorted(up_members, key=lambda p: p[1])]
    for vid, a_down in sorted(enterers, key=lambda p: p[1]):
        pos = len(order)
        for i, other in enumerate(order):
            other_down = down_times.get(other)
            if other_down is not None and other_down > a_down:
                pos = i
                break
        order.insert(pos, vid)
    return tuple(order)


def partition_regions(
    probes: TrajectorySet,
    hidden: TrajectorySet,
    log: DetectionLog,
) -> tuple[list[Region], list[tuple[str, str]]]:
    """Assign hidden vehicles to probe-bounded regions per lane.

    Lane-keepers join the region whose probe upstream arrivals bracket
    their own; a lane-change vehicle joins one region on its origin lane
    (via the upstream detection) and one on its target lane (via the
    downstream detection). Returns the regions plus a skip list of
    (vehicle_id, reason) for vehicles no region can cover.
    """
    geometry = probes.geometry
    skipped: list[tuple[str, str]] = []

    lane_probes: dict[int, list[tuple[Trajectory, DetectionEvent, DetectionEvent]]] = {}
    for vid in probes.vehicle_ids:
        traj = probes[vid]
        lane = _probe_lane(traj)
        up = log.event(vid, UPSTREAM)
        down = log.event(vid, DOWNSTREAM)
        if up is None or down is None:
            logger.warning("probe %s does not cross both stations, ignored", vid)
            continue
        lane_probes.setdefault(lane, []).append((traj, up, down))

    shells: dict[int, list[dict]] = {}
    for lane in geometry.lanes:
        entries = sorted(lane_probes.get(lane, ()), key=lambda e: e[1].arrival_time)
        if len(entries) < 2:
            logger.warning("lane %s has %d probes, needs 2+ for regions", lane, len(entries))
            shells[lane] = []
            continue
        shells[lane] = [
            {
                "leading": entries[i],
                "trailing": entries[i + 1],
                "up_members": [],
                "down_members": [],
            }
            for i in range(len(entries) - 1)
        ]

    def assign(lane: int, arrivals: list[float], value: float) -> int | None:
        if not shells.get(lane):
            return None
        return _bracket(value, arrivals)

    up_bounds = {
        lane: [shell["leading"][1].arrival_time for shell in shells[lane]]
        + ([shells[lane][-1]["trailing"][1].arrival_time] if shells[lane] else [])
        for lane in shells
    }
    down_bounds = {
        lane: [shell["leading"][2].arrival_time for shell in shells[lane]]
        + ([shells[lane][-1]["trailing"][2].arrival_time] if shells[lane] else [])
        for lane in shells
    }

    for vid in hidden.vehicle_ids:
        up = log.event(vid, UPSTREAM)
        down = log.event(vid, DOWNSTREAM)
        if up is None and down is None:
            skipped.append((vid, "no detection at either station"))
            continue
        is_lc = up is not None and down is not None and up.lane != down.lane
        if not is_lc and (up is None or down is None):
            skipped.append((vid, "detected at a single station only"))
            continue
        if is_lc:
            i = assign(up.lane, up_bounds.get(up.lane, []), up.arrival_time)
            if i is None:
                skipped.append((vid, f"origin lane {up.lane}: outside probe coverage"))
            else:
                shells[up.lane][i]["up_members"].append((vid, up.arrival_time))
            j = assign(down.lane, down_bounds.get(down.lane, []), down.arrival_time)
            if j is None:
                skipped.append((vid, f"target lane {down.lane}: outside probe coverage"))
            else:
                shells[down.lane][j]["down_members"].append((vid, down.arrival_time))
        else:
            i = assign(up.lane, up_bounds.get(up.lane, []), up.arrival_time)
            if i is None:
                skipped.append((vid, "outside probe coverage"))
                continue
            shells[up.lane][i]["up_members"].append((vid, up.arrival_time))
            shells[up.lane][i]["down_members"].append((vid, down.arrival_time))

    regions: list[Region] = []
    for lane in geometry.lanes:
        for shell in shells.get(lane, ()):
            up_members = sorted(shell["up_members"], key=lambda p: p[1])
            down_members = sorted(shell["down_members"], key=lambda p: p[1])
            up_set = {vid for vid, _ in up_members}
            enterers = [(vid, t) for vid, t in down_members if vid not in up_set]
            down_times = {vid: t for vid, t in down_members}
            order = _merge_order(up_members, enterers, down_times)
            leading, trailing = shell["leading"][0], shell["trailing"][0]
            arrivals = [t for _, t in up_members] + [t for _, t in down_members]
            t_lo = min([leading.start_time, trailing.start_time] + arrivals)
            t_hi = max([leading.end_time, trailing.end_time] + arrivals)
            regions.append(
                Region(
                    lane=lane,
                    leading_probe=leading,
                    trailing_probe=trailing,
                    hidden_vehicle_ids=order,
                    up_ids=tuple(vid for vid, _ in up_members),
                    down_ids=tuple(vid for vid, _ in down_members),
                    t_lo=float(t_lo),
                    t_hi=float(t_hi),
                )
            )
    return regions, skipped
