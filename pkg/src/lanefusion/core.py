"""Trajectory primitives shared across the reconstruction pipeline.

Positions are meters along the travel direction, times are seconds. A
trajectory is a uniformly sampled piecewise-linear path; off-sample
evaluation interpolates linearly, so Newell-style time/space shifts stay
exact instead of accumulating resampling error.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, Sequence

import numpy as np

# Absolute tolerance for time comparisons (grid snapping, window checks).
TIME_TOL = 1e-9

ShiftDirection = Literal["follower", "leader"]


@dataclass(frozen=True)
class TrajectoryPoint:
    """Single (time, position, lane) sample."""

    time: float
    position: float
    lane: int


@dataclass(frozen=True)
class NewellShift:
    """Newell displacement: a follower copies its leader delayed by
    ``time_lag`` seconds and set back ``space_lag`` meters."""

    time_lag: float
    space_lag: float

    def __post_init__(self) -> None:
        if not (np.isfinite(self.time_lag) and self.time_lag > 0):
            raise ValueError(f"time_lag must be positive, got {self.time_lag!r}")
        if not (np.isfinite(self.space_lag) and self.space_lag > 0):
            raise ValueError(f"space_lag must be positive, got {self.space_lag!r}")


@dataclass(frozen=True)
class SegmentGeometry:
    """Study segment bounded by the upstream and downstream sensor stations."""

    x_up: float
    x_down: float
    lanes: tuple[int, ...] = (1,)

    def __post_init__(self) -> None:
        object.__setattr__(self, "lanes", tuple(int(lane) for lane in self.lanes))
        if not (np.isfinite(self.x_up) and np.isfinite(self.x_down)):
            raise ValueError("sensor positions must be finite")
        if not self.x_down > self.x_up:
            raise ValueError(f"x_down ({self.x_down}) must lie beyond x_up ({self.x_up})")

    @property
    def length(self) -> float:
        return self.x_down - self.x_up


@dataclass(frozen=True)
class LcEvent:
    """A single lane-change event: the vehicle leaves ``origin_lane`` and
    appears on ``target_lane`` at (lc_time, lc_position)."""

    vehicle_id: str
    lc_time: float
    lc_position: float
    origin_lane: int
    target_lane: int


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Uniformly sampled vehicle path.

    Samples are strictly increasing in time with a constant step equal to
    ``sample_interval`` (within 1e-9). The time grid may carry an arbitrary
    offset; it does not have to align with the global integer lattice,
    which is what lets shifted copies stay exact.
    """

    vehicle_id: str
    times: np.ndarray
    positions: np.ndarray
    lanes: np.ndarray
    sample_interval: float = 1.0

    def __post_init__(self) -> None:
        times = np.asarray(self.times, dtype=float).copy()
        positions = np.asarray(self.positions, dtype=float).copy()
        lanes = np.asarray(self.lanes)
        if lanes.ndim == 0:
            lanes = np.full(times.shape, int(lanes))
        lanes = lanes.astype(np.int64).copy()
        if times.ndim != 1 or times.shape != positions.shape or times.shape != lanes.shape:
            raise ValueError("times, positions and lanes must be 1-D arrays of equal length")
        if times.size < 2:
            raise ValueError(f"trajectory {self.vehicle_id!r} needs at least 2 samples")
        if not (np.all(np.isfinite(times)) and np.all(np.isfinite(positions))):
            raise ValueError(f"trajectory {self.vehicle_id!r} has non-finite samples")
        steps = np.diff(times)
        if np.any(steps <= 0):
            raise ValueError(f"trajectory {self.vehicle_id!r} times must strictly increase")
        if self.sample_interval <= 0:
            raise ValueError("sample_interval must be positive")
        if np.any(np.abs(steps - self.sample_interval) > TIME_TOL):
            raise ValueError(
                f"trajectory {self.vehicle_id!r} is not uniformly sampled at "
                f"{self.sample_interval} s"
            )
        for arr in (times, positions, lanes):
            arr.flags.writeable = False
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "positions", positions)
        object.__setattr__(self, "lanes", lanes)

    # -- basic accessors -------------------------------------------------

    def __len__(self) -> int:
        return int(self.times.size)

    @property
    def start_time(self) -> float:
        return float(self.times[0])

    @property
    def end_time(self) -> float:
        return float(self.times[-1])

    @property
    def points(self) -> list[TrajectoryPoint]:
        return [
            TrajectoryPoint(float(t), float(x), int(l))
            for t, x, l in zip(self.times, self.positions, self.lanes)
        ]

    def covers(self, t: float) -> bool:
        return self.start_time - TIME_TOL <= t <= self.end_time + TIME_TOL

    # -- evaluation ------------------------------------------------------

    def sample_positions(self, ts, extrapolate: bool = False) -> np.ndarray:
        """Evaluate positions at arbitrary times by linear interpolation.

        With ``extrapolate`` the path continues at the boundary segment
        speed beyond either end; otherwise out-of-window times raise.
        """
        ts = np.atleast_1d(np.asarray(ts, dtype=float))
        lo, hi = self.start_time, self.end_time
        if not extrapolate and (ts.min() < lo - TIME_TOL or ts.max() > hi + TIME_TOL):
            raise ValueError(
                f"time outside trajectory window [{lo}, {hi}] for {self.vehicle_id!r}"
            )
        out = np.interp(ts, self.times, self.positions)
        if extrapolate:
            before = ts < lo
            after = ts > hi
            if np.any(before):
                out[before] = self.positions[0] + self.boundary_speed("start") * (ts[before] - lo)
            if np.any(after):
                out[after] = self.positions[-1] + self.boundary_speed("end") * (ts[after] - hi)
        return out

    def position_at(self, t: float, extrapolate: bool = False) -> float:
        return float(self.sample_positions([t], extrapolate=extrapolate)[0])

    def lane_at(self, t: float) -> int:
        """Lane held at time t (the lane of the last sample at or before t)."""
        idx = int(np.searchsorted(self.times, t + TIME_TOL, side="right")) - 1
        return int(self.lanes[max(idx, 0)])

    def boundary_speed(self, which: Literal["start", "end"]) -> float:
        if which == "start":
            dt = self.times[1] - self.times[0]
            return float((self.positions[1] - self.positions[0]) / dt)
        dt = self.times[-1] - self.times[-2]
        return float((self.positions[-1] - self.positions[-2]) / dt)

    def crossing_time(self, x: float, extrapolate: bool = False) -> float | None:
        """First time the path reaches position ``x`` (linear interpolation).

        Returns None when the position is never reached; with ``extrapolate``
        the boundary-speed continuation is searched as well.
        """
        pos = self.positions
        if pos[0] >= x:
            if pos[0] == x or not extrapolate:
                return self.start_time if pos[0] <= x + 1e-12 else None
            v0 = self.boundary_speed("start")
            if v0 <= 0:
                return None
            return self.start_time - (pos[0] - x) / v0
        hits = np.nonzero(pos >= x)[0]
        if hits.size == 0:
            if not extrapolate:
                return None
            v1 = self.boundary_speed("end")
            if v1 <= 0:
                return None
            return self.end_time + (x - pos[-1]) / v1
        k = int(hits[0])
        dp = pos[k] - pos[k - 1]
        frac = (x - pos[k - 1]) / dp
        return float(self.times[k - 1] + frac * (self.times[k] - self.times[k - 1]))

    # -- derived trajectories ---------------------------------------------

    def shifted(self, dt: float, dx: float) -> Trajectory:
        """Exact translation by dt seconds and dx meters (shape preserved)."""
        return Trajectory(
            vehicle_id=self.vehicle_id,
            times=self.times + dt,
            positions=self.positions + dx,
            lanes=self.lanes,
            sample_interval=self.sample_interval,
        )

    def window(self, t0: float, t1: float) -> Trajectory:
        """Sub-trajectory of the samples inside [t0, t1]."""
        mask = (self.times >= t0 - TIME_TOL) & (self.times <= t1 + TIME_TOL)
        if int(mask.sum()) < 2:
            raise ValueError(
                f"window [{t0}, {t1}] keeps fewer than 2 samples of {self.vehicle_id!r}"
            )
        return Trajectory(
            vehicle_id=self.vehicle_id,
            times=self.times[mask],
            positions=self.positions[mask],
            lanes=self.lanes[mask],
            sample_interval=self.sample_interval,
        )

    def with_id(self, vehicle_id: str) -> Trajectory:
        return Trajectory(
            vehicle_id=vehicle_id,
            times=self.times,
            positions=self.positions,
            lanes=self.lanes,
            sample_interval=self.sample_interval,
        )

    def with_lane(self, lane: int) -> Trajectory:
        return Trajectory(
            vehicle_id=self.vehicle_id,
            times=self.times,
            positions=self.positions,
            lanes=np.full(self.times.shape, int(lane)),
            sample_interval=self.sample_interval,
        )


def lane_changes(traj: Trajectory) -> list[LcEvent]:
    """Lane-switch events of a trajectory, one per switch sample."""
    switches = np.nonzero(np.diff(traj.lanes) != 0)[0]
    return [
        LcEvent(
            vehicle_id=traj.vehicle_id,
            lc_time=float(traj.times[k + 1]),
            lc_position=float(traj.positions[k + 1]),
            origin_lane=int(traj.lanes[k]),
            target_lane=int(traj.lanes[k + 1]),
        )
        for k in switches
    ]


def velocity_profile(traj: Trajectory) -> np.ndarray:
    """Per-sample speeds as an (n, 2) array of (time, speed) rows.

    Interior speeds use the central difference
    ``(x[k+1] - x[k-1]) / (2 * sample_interval)``; the two endpoints fall
    back to one-sided differences.
    """
    if len(traj) < 3:
        raise ValueError(
            f"velocity profile needs at least 3 samples, got {len(traj)} "
            f"for {traj.vehicle_id!r}"
        )
    dt = traj.sample_interval
    pos = traj.positions
    speeds = np.empty_like(pos)
    speeds[1:-1] = (pos[2:] - pos[:-2]) / (2.0 * dt)
    speeds[0] = (pos[1] - pos[0]) / dt
    speeds[-1] = (pos[-1] - pos[-2]) / dt
    return np.column_stack([traj.times, speeds])


def point_speeds(positions: np.ndarray, dt: float) -> np.ndarray:
    """Central-difference speeds along the last axis, one-sided endpoints.

    Works on matrices of stacked position rows, which the fusion weight
    search relies on.
    """
    positions = np.asarray(positions, dtype=float)
    speeds = np.empty_like(positions)
    speeds[..., 1:-1] = (positions[..., 2:] - positions[..., :-2]) / (2.0 * dt)
    speeds[..., 0] = (positions[..., 1] - positions[..., 0]) / dt
    speeds[..., -1] = (positions[..., -1] - positions[..., -2]) / dt
    return speeds


def shift_trajectory(ref: Trajectory, shift: NewellShift, direction: ShiftDirection) -> Trajectory:
    """Newell shift of a reference path.

    follower: output(t) = ref(t - time_lag) - space_lag
    leader:   output(t) = ref(t + time_lag) + space_lag

    The shift moves the sample grid itself, so it is exact and the two
    directions invert each other to machine precision.
    """
    if direction == "follower":
        return ref.shifted(shift.time_lag, -shift.space_lag)
    if direction == "leader":
        return ref.shifted(-shift.time_lag, shift.space_lag)
    raise ValueError(f"direction must be 'follower' or 'leader', got {direction!r}")


def headway(lead: Trajectory, follow: Trajectory, t: float) -> float:
    """Space headway: lead position minus follower position at time t.

    Negative values signal overlap. Raises when t is outside either window.
    """
    return lead.position_at(t) - follow.position_at(t)


def lattice(t0: float, t1: float, step: float) -> np.ndarray:
    """Global-lattice times (integer multiples of ``step``) inside [t0, t1]."""
    k0 = int(np.ceil((t0 - TIME_TOL) / step))
    k1 = int(np.floor((t1 + TIME_TOL) / step))
    if k1 < k0:
        return np.empty(0, dtype=float)
    return np.arange(k0, k1 + 1, dtype=float) * step


def fit_grid(t0: float, t1: float, step_hint: float) -> np.ndarray:
    """Uniform grid spanning [t0, t1] with both endpoints as samples.

    The step shrinks below ``step_hint`` just enough for the span to divide
    evenly, which keeps boundary anchors exact.
    """
    span = t1 - t0
    if span <= 0:
        raise ValueError(f"empty grid span [{t0}, {t1}]")
    n = max(1, int(np.ceil(span / step_hint - 1e-9)))
    ts = t0 + (span / n) * np.arange(n + 1)
    ts[-1] = t1
    return ts
