"""Two-stage fusion of candidate trajectories, macro fields and LC inference.

Stage 1 fuses each vehicle's forward/backward candidate pair with a
convex weight, choosing the weights of a whole platoon at once: the
squared deviation between fused speeds and the velocity contour map is
minimized subject to weights strictly decreasing with vehicle order,
solved exactly on a discrete weight grid by shortest-path dynamic
programming over a layered DAG.

Stage 2 blends the upstream- and downstream-anchored trajectories of each
lane-keeper with a quadratic time-varying weight, and for lane-change
vehicles searches the feasible area for the point maximizing the ratio of
cross-lane speed difference to adjustment extent, subject to safety
headways; the chosen point then acts as a new detection both half
trajectories are bent through.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from lanefusion.core import (
    TIME_TOL,
    SegmentGeometry,
    Trajectory,
    fit_grid,
    point_speeds,
)
from lanefusion.ingest import DOWNSTREAM, UPSTREAM, DetectionLog, Region, TrajectorySet
from lanefusion.macro_state import VelocityField, query_many
from lanefusion.micro_candidates import CandidateSet

logger = logging.getLogger(__name__)


class SafetyInfeasibleError(Exception):
    """Every feasible LC point violates a safety headway."""


class UnmatchableLcError(Exception):
    """The two half trajectories share no usable time window."""


@dataclass(frozen=True)
class FusionConfig:
    """Stage-2 thresholds and the stage-1 weight grid resolution."""

    v_threshold: float = 0.1
    dis_threshold: float = 0.5
    l_safe: float = 5.0
    weight_grid_step: float = 0.01

    def __post_init__(self) -> None:
        if min(self.v_threshold, self.dis_threshold, self.l_safe) <= 0:
            raise ValueError("thresholds must be positive")
        levels = 1.0 / self.weight_grid_step
        if abs(levels - round(levels)) > 1e-9 or self.weight_grid_step <= 0:
            raise ValueError("weight_grid_step must evenly divide 1")

    @property
    def weight_levels(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, int(round(1.0 / self.weight_grid_step)) + 1)


@dataclass(frozen=True)
class WeightAssignment:
    """Solved per-vehicle weights of one fusion pass (front to rear)."""

    vehicle_ids: tuple[str, ...]
    weights: np.ndarray
    objective: float

    def __post_init__(self) -> None:
        w = np.asarray(self.weights, dtype=float)
        if w.size != len(self.vehicle_ids):
            raise ValueError("one weight per vehicle required")
        if np.any(w < 0) or np.any(w > 1):
            raise ValueError("weights must lie in [0, 1]")
        if np.any(np.diff(w) >= 0):
            raise ValueError("weights must strictly decrease with vehicle order")
        w = w.copy()
        w.flags.writeable = False
        object.__setattr__(self, "weights", w)

    def weight_of(self, vehicle_id: str) -> float:
        return float(self.weights[self.vehicle_ids.index(vehicle_id)])


@dataclass(frozen=True)
class PassItem:
    """One vehicle's inputs to a fusion pass.

    ``primary`` is the forward-model candidate (CFF or CFB), ``secondary``
    the inverse-model one; ``anchor_time`` is the detected arrival the
    fused trajectory must keep, and ``direction`` says which way the fused
    grid extends from it.
    """

    vehicle_id: str
    primary: Trajectory
    secondary: Trajectory
    anchor_time: float
    direction: str = "forward"


@dataclass(frozen=True)
class FeasibleArea:
    """Candidate lane-change points: the common time steps of the two half
    trajectories, each with the midpoint position."""

    t_start: float
    t_end: float
    points: tuple[tuple[float, float], ...]


@dataclass(frozen=True)
class LcDecision:
    vehicle_id: str
    origin_lane: int
    target_lane: int
    lc_time: float
    lc_position: float
    extent: float
    score: float


@dataclass(frozen=True)
class LcFailure:
    vehicle_id: str
    origin_lane: int
    target_lane: int
    reason: str


@dataclass
class ReconstructionResult:
    """Reconstructed hidden trajectories plus LC diagnostics."""

    trajectories: dict[str, Trajectory] = field(default_factory=dict)
    decisions: list[LcDecision] = field(default_factory=list)
    failures: list[LcFailure] = field(default_factory=list)
    skipped: list[tuple[str, str]] = field(default_factory=list)


# ---------------------------------------------------------------------------
# stage 1: convex pair fusion under the macro field


def _anchored_grid(item: PassItem, t_int: float) -> np.ndarray:
    """Grid of t_int steps from the anchor, inside both candidate windows."""
    lo = max(item.primary.start_time, item.secondary.start_time)
    hi = min(item.primary.end_time, item.secondary.end_time)
    if hi <= lo:
        raise ValueError(f"candidates of {item.vehicle_id!r} share no time window")
    a = item.anchor_time
    if item.direction == "forward":
        n = int(np.floor((hi - a) / t_int + TIME_TOL))
        ts = a + t_int * np.arange(n + 1)
    else:
        n = int(np.floor((a - lo) / t_int + TIME_TOL))
        ts = a - t_int * np.arange(n, -1, -1)
    if ts.size < 2:
        raise ValueError(f"anchored grid of {item.vehicle_id!r} is too short")
    return ts


def fuse_pair(c1: Trajectory, c2: Trajectory, w: float, grid: np.ndarray | None = None) -> Trajectory:
    """Point-wise convex combination of two candidate positions.

    Both candidates are read on a shared grid (their common window by
    default); since both pass through the anchor detection, so does any
    convex combination.
    """
    if not 0.0 <= w <= 1.0:
        raise ValueError(f"weight must be in [0, 1], got {w}")
    if grid is None:
        lo = max(c1.start_time, c2.start_time)
        hi = min(c1.end_time, c2.end_time)
        if hi <= lo:
            raise ValueError("candidate windows are disjoint")
        grid = fit_grid(lo, hi, c1.sample_interval)
    positions = w * c1.sample_positions(grid) + (1.0 - w) * c2.sample_positions(grid)
    step = float(grid[1] - grid[0])
    return Trajectory(
        vehicle_id=c1.vehicle_id,
        times=grid,
        positions=positions,
        lanes=np.full(grid.shape, int(c1.lanes[0])),
        sample_interval=step,
    )


def _pass_costs(
    item: PassItem, field_: VelocityField, levels: np.ndarray, t_int: float
) -> np.ndarray:
    """Squared speed deviation from the field for every grid weight."""
    ts = _anchored_grid(item, t_int)
    p1 = item.primary.sample_positions(ts)
    p2 = item.secondary.sample_positions(ts)
    x_lo, x_hi = field_.x_span
    t_lo, t_hi = field_.t_span
    mask = (
        (p1 >= x_lo) & (p1 <= x_hi) & (p2 >= x_lo) & (p2 <= x_hi)
        & (ts >= t_lo) & (ts <= t_hi)
    )
    fused = levels[:, None] * p1[None, :] + (1.0 - levels)[:, None] * p2[None, :]
    speeds = point_speeds(fused, t_int)
    flat_t = np.broadcast_to(ts, fused.shape).ravel()
    target = query_many(field_, fused.ravel(), flat_t, clamp=True).reshape(fused.shape)
    dev = np.where(mask[None, :], (speeds - target) ** 2, 0.0)
    return dev.sum(axis=1)


def solve_weights(
    items: Sequence[PassItem], field_: VelocityField, config: FusionConfig
) -> WeightAssignment:
    """Optimal strictly-decreasing weight chain for one pass.

    Layer n of the DAG holds the grid weights of vehicle n with that
    vehicle's deviation sum as node cost; edges only connect to strictly
    smaller weights. The chain is solved exactly by a rear-to-front scan;
    ties break toward the larger weights so results are deterministic.
    """
    if not items:
        raise ValueError("solve_weights needs at least one vehicle")
    levels = config.weight_levels
    n_vehicles = len(items)
    if n_vehicles > levels.size:
        raise ValueError(
            f"{n_vehicles} vehicles cannot hold strictly decreasing weights on "
            f"{levels.size} grid levels; use a finer weight_grid_step"
        )
    t_int = items[0].primary.sample_interval
    costs = np.stack([_pass_costs(item, field_, levels, t_int) for item in items])

    # suffix[n][g]: best cost of vehicles n.. with vehicle n at level g.
    suffix = np.full((n_vehicles, levels.size), np.inf)
    suffix[-1] = costs[-1]
    for n in range(n_vehicles - 2, -1, -1):
        below = np.full(levels.size, np.inf)
        best = np.inf
        for g in range(levels.size):
            below[g] = best
            best = min(best, suffix[n + 1, g])
        suffix[n] = costs[n] + below

    chain = np.empty(n_vehicles, dtype=int)
    if not np.isfinite(suffix[0]).any():
        raise ValueError("no feasible strictly decreasing weight chain")
    best_cost = suffix[0].min()
    chain[0] = int(np.max(np.nonzero(suffix[0] == best_cost)[0]))
    for n in range(1, n_vehicles):
        # largest level strictly below the previous one achieving the optimum
        candidates = suffix[n][: chain[n - 1]]
        opt = candidates.min()
        chain[n] = int(np.max(np.nonzero(candidates == opt)[0]))
    weights = levels[chain]
    return WeightAssignment(
        vehicle_ids=tuple(item.vehicle_id for item in items),
        weights=weights,
        objective=float(best_cost),
    )


def run_pass(
    items: Sequence[PassItem], field_: VelocityField, config: FusionConfig, t_int: float
) -> dict[str, Trajectory]:
    """Solve one pass and return the fused per-vehicle trajectories."""
    if not items:
        return {}
    assignment = solve_weights(items, field_, config)
    fused: dict[str, Trajectory] = {}
    for item, w in zip(items, assignment.weights):
        grid = _anchored_grid(item, t_int)
        fused[item.vehicle_id] = fuse_pair(item.primary, item.secondary, float(w), grid)
    return fused


# ---------------------------------------------------------------------------
# stage 2: upstream/downstream blending and LC inference


def blend_up_down(up: Trajectory, down: Trajectory) -> Trajectory:
    """Quadratic time-varying blend over the shared window of length T:

        X(t) = (t/T)^2 * X_down(t) + (1 - (t/T)^2) * X_up(t)

    so the result equals the upstream-anchored trajectory at the window
    start and the downstream-anchored one at the end.
    """
    lo = max(up.start_time, down.start_time)
    hi = min(up.end_time, down.end_time)
    if hi <= lo:
        raise ValueError(f"up/down windows of {up.vehicle_id!r} are disjoint")
    ts = fit_grid(lo, hi, up.sample_interval)
    s = (ts - lo) / (hi - lo)
    w_down = s**2
    positions = w_down * down.sample_positions(ts) + (1.0 - w_down) * up.sample_positions(ts)
    return Trajectory(
        vehicle_id=up.vehicle_id,
        times=ts,
        positions=positions,
        lanes=np.full(ts.shape, int(up.lanes[0])),
        sample_interval=float(ts[1] - ts[0]),
    )


def feasible_area(
    up_cand: Trajectory, down_cand: Trajectory, geometry: SegmentGeometry
) -> FeasibleArea:
    """Potential LC points: common time steps of the origin-lane (upstream
    anchored) and target-lane (downstream anchored) trajectories, keeping
    the per-step midpoints that fall strictly inside the segment."""
    t_s = max(up_cand.start_time, down_cand.start_time)
    t_e = min(up_cand.end_time, down_cand.end_time)
    if t_e <= t_s:
        raise UnmatchableLcError(
            f"no common window for {up_cand.vehicle_id!r}: "
            f"[{up_cand.start_time}, {up_cand.end_time}] vs "
            f"[{down_cand.start_time}, {down_cand.end_time}]"
        )
    step = up_cand.sample_interval
    n = int(np.floor((t_e - t_s) / step + TIME_TOL))
    ts = t_s + step * np.arange(n + 1)
    x_up_pos = up_cand.sample_positions(ts)
    x_down_pos = down_cand.sample_positions(ts)
    mid = 0.5 * (x_up_pos + x_down_pos)
    inside = (mid > geometry.x_up + 1e-9) & (mid < geometry.x_down - 1e-9)
    # The switch must fall strictly inside both halves so each keeps a
    # non-degenerate segment on its own lane.
    inside &= (ts > up_cand.start_time + 1e-6) & (ts < down_cand.end_time - 1e-6)
    points = tuple((float(t), float(x)) for t, x in zip(ts[inside], mid[inside]))
    return FeasibleArea(t_start=float(t_s), t_end=float(t_e), points=points)


def lc_objective(
    t: float,
    up: Trajectory,
    down: Trajectory,
    field_a: VelocityField,
    field_b: VelocityField,
    config: FusionConfig,
) -> float:
    """Score of a candidate LC time: cross-lane speed contrast over extent.

        (|V_a - V_b| + v_threshold) / (Dis + dis_threshold)

    with Dis = |X_up - X_down| / 2 and both lane speeds read at the
    midpoint of the two half trajectories. Small thresholds keep both the
    numerator and the denominator away from zero.
    """
    x_up_pos = up.position_at(t)
    x_down_pos = down.position_at(t)
    dis = 0.5 * abs(x_up_pos - x_down_pos)
    x_mid = 0.5 * (x_up_pos + x_down_pos)
    v_a = float(query_many(field_a, [x_mid], [t])[0])
    v_b = float(query_many(field_b, [x_mid], [t])[0])
    return (abs(v_a - v_b) + config.v_threshold) / (dis + config.dis_threshold)


def _neighbor_gaps(
    neighbors: Sequence[Trajectory], lane: int, t: float, x: float, exclude: str
) -> tuple[float, float]:
    """(gap to nearest leader, gap to nearest follower) on a lane at time t."""
    lead_gap = np.inf
    follow_gap = np.inf
    for traj in neighbors:
        if traj.vehicle_id == exclude or not traj.covers(t) or traj.lane_at(t) != lane:
            continue
        pos = traj.position_at(t)
        if pos >= x:
            lead_gap = min(lead_gap, pos - x)
        else:
            follow_gap = min(follow_gap, x - pos)
    return lead_gap, follow_gap


def optimize_lc(
    vehicle_id: str,
    area: FeasibleArea,
    up: Trajectory,
    down: Trajectory,
    origin_lane: int,
    target_lane: int,
    fields: Mapping[int, VelocityField],
    neighbors: Sequence[Trajectory],
    config: FusionConfig,
) -> LcDecision:
    """Best safe LC point of the feasible area (exhaustive scan).

    Points whose headway to the nearest leader or follower on either lane
    falls below l_safe are discarded; the survivor with the highest
    objective wins, earliest time on ties.
    """
    if not area.points:
        raise SafetyInfeasibleError(f"feasible area of {vehicle_id!r} has no usable points")
    field_a = fields[origin_lane]
    field_b = fields[target_lane]
    best: tuple[float, float, float] | None = None  # (score, t, x)
    for t, x in area.points:
        safe = True
        for lane in (origin_lane, target_lane):
            lead_gap, follow_gap = _neighbor_gaps(neighbors, lane, t, x, exclude=vehicle_id)
            if lead_gap <= config.l_safe or follow_gap <= config.l_safe:
                safe = False
                break
        if not safe:
            continue
        try:
            score = lc_objective(t, up, down, field_a, field_b, config)
        except ValueError:
            continue  # midpoint fell off the field hull
        if best is None or score > best[0] + 1e-12:
            best = (score, t, x)
    if best is None:
        raise SafetyInfeasibleError(
            f"every feasible LC point of {vehicle_id!r} violates the safety headway"
        )
    score, t, x = best
    return LcDecision(
        vehicle_id=vehicle_id,
        origin_lane=origin_lane,
        target_lane=target_lane,
        lc_time=float(t),
        lc_position=float(x),
        extent=0.5 * abs(up.position_at(t) - down.position_at(t)),
        score=float(score),
    )


def stitch_lc(
    up_traj: Trajectory, down_traj: Trajectory, decision: LcDecision
) -> tuple[Trajectory, Trajectory]:
    """Bend the two half trajectories through the LC point and split there.

    The LC point acts as a new detection: each half gets the quadratic
    endpoint correction that the lane-keeper blend applies, anchored at
    (lc_time, lc_position), so the origin segment ends and the target
    segment starts exactly at the decision point.
    """
    lc_t, lc_x = decision.lc_time, decision.lc_position
    if not (up_traj.covers(lc_t) and down_traj.covers(lc_t)):
        raise ValueError("decision time outside the half-trajectory windows")
    step = up_traj.sample_interval

    ts_o = fit_grid(up_traj.start_time, lc_t, step)
    s = (ts_o - ts_o[0]) / (lc_t - ts_o[0])
    delta_o = lc_x - up_traj.position_at(lc_t)
    origin = Trajectory(
        vehicle_id=decision.vehicle_id,
        times=ts_o,
        positions=up_traj.sample_positions(ts_o) + s**2 * delta_o,
        lanes=np.full(ts_o.shape, decision.origin_lane),
        sample_interval=float(ts_o[1] - ts_o[0]),
    )

    ts_t = fit_grid(lc_t, down_traj.end_time, step)
    r = (ts_t - lc_t) / (ts_t[-1] - lc_t)
    delta_t = lc_x - down_traj.position_at(lc_t)
    target = Trajectory(
        vehicle_id=decision.vehicle_id,
        times=ts_t,
        positions=down_traj.sample_positions(ts_t) + (1.0 - r) ** 2 * delta_t,
        lanes=np.full(ts_t.shape, decision.target_lane),
        sample_interval=float(ts_t[1] - ts_t[0]),
    )
    return origin, target


def _merge_segments(origin: Trajectory, target: Trajectory, t_int: float) -> Trajectory:
    """Single uniformly sampled trajectory from two lane segments.

    Samples before the seam read the origin segment, later ones the target
    segment; the lane label switches exactly once at the seam.
    """
    seam = target.start_time
    ts = fit_grid(origin.start_time, target.end_time, t_int)
    before = ts < seam - TIME_TOL
    positions = np.where(
        before,
        origin.sample_positions(np.minimum(ts, origin.end_time), extrapolate=True),
        target.sample_positions(np.maximum(ts, target.start_time), extrapolate=True),
    )
    lanes = np.where(before, int(origin.lanes[0]), int(target.lanes[0]))
    return Trajectory(
        vehicle_id=origin.vehicle_id,
        times=ts,
        positions=positions,
        lanes=lanes,
        sample_interval=float(ts[1] - ts[0]),
    )


# ---------------------------------------------------------------------------
# full reconstruction


def reconstruct(
    regions: Sequence[Region],
    candidates_by_region: Sequence[Mapping[str, CandidateSet]],
    fields: Mapping[int, VelocityField],
    log: DetectionLog,
    probes: TrajectorySet,
    geometry: SegmentGeometry,
    config: FusionConfig,
    t_int: float = 1.0,
    skipped: Sequence[tuple[str, str]] = (),
) -> ReconstructionResult:
    """Run both fusion stages over every region.

    Lane-keepers are blended inside their region; lane-change vehicles are
    matched across their origin and target regions, front to rear, so each
    safety check sees the already fixed neighbors. A vehicle whose LC
    cannot be placed safely falls back to independent per-lane halves
    joined mid-overlap and is reported as a failure instead of aborting
    the run.
    """
    result = ReconstructionResult(skipped=list(skipped))
    lc_ids = log.lc_vehicle_ids()
    halves: dict[str, dict] = {}
    keeper_final: dict[str, Trajectory] = {}

    for region, cands in zip(regions, candidates_by_region):
        field_ = fields[region.lane]
        up_items = [
            PassItem(
                vehicle_id=vid,
                primary=cands[vid].cff,
                secondary=cands[vid].icff,
                anchor_time=log.event(vid, UPSTREAM).arrival_time,
                direction="forward",
            )
            for vid in region.up_ids
        ]
        down_items = [
            PassItem(
                vehicle_id=vid,
                primary=cands[vid].cfb,
                secondary=cands[vid].icfb,
                anchor_time=log.event(vid, DOWNSTREAM).arrival_time,
                direction="backward",
            )
            for vid in region.down_ids
        ]
        fused_up = run_pass(up_items, field_, config, t_int)
        fused_down = run_pass(down_items, field_, config, t_int)

        for vid in region.hidden_vehicle_ids:
            if vid in lc_ids:
                entry = halves.setdefault(vid, {"a_up": np.inf})
                if vid in fused_up:
                    entry["origin_lane"] = region.lane
                    entry["up"] = fused_up[vid]
                    entry["a_up"] = log.event(vid, UPSTREAM).arrival_time
                if vid in fused_down:
                    entry["target_lane"] = region.lane
                    entry["down"] = fused_down[vid]
            elif vid in fused_up and vid in fused_down:
                keeper_final[vid] = blend_up_down(fused_up[vid], fused_down[vid])

    result.trajectories.update(keeper_final)

    # Neighbor pool: probes, blended keepers, and (until resolved) the
    # stage-1 halves of the remaining LC vehicles.
    neighbor_pool: dict[str, list[Trajectory]] = {
        vid: [probes[vid]] for vid in probes.vehicle_ids
    }
    neighbor_pool.update({vid: [traj] for vid, traj in keeper_final.items()})
    for vid, entry in halves.items():
        parts = [entry.get("up"), entry.get("down")]
        neighbor_pool[vid] = [p for p in parts if p is not None]

    order = sorted(halves, key=lambda vid: (halves[vid]["a_up"], vid))
    for vid in order:
        entry = halves[vid]
        up_traj = entry.get("up")
        down_traj = entry.get("down")
        origin_lane = entry.get("origin_lane")
        target_lane = entry.get("target_lane")
        if up_traj is None or down_traj is None:
            side = "origin" if up_traj is None else "target"
            result.failures.append(
                LcFailure(
                    vehicle_id=vid,
                    origin_lane=origin_lane if origin_lane is not None else -1,
                    target_lane=target_lane if target_lane is not None else -1,
                    reason=f"no {side}-lane region coverage",
                )
            )
            continue
        flat_neighbors = [t for other, ts in neighbor_pool.items() if other != vid for t in ts]
        try:
            area = feasible_area(up_traj, down_traj, geometry)
            decision = optimize_lc(
                vid, area, up_traj, down_traj, origin_lane, target_lane,
                fields, flat_neighbors, config,
            )
        except (UnmatchableLcError, SafetyInfeasibleError) as exc:
            logger.info("LC matching failed for %s: %s", vid, exc)
            result.failures.append(
                LcFailure(vehicle_id=vid, origin_lane=origin_lane,
                          target_lane=target_lane, reason=str(exc))
            )
            merged = _fallback_merge(up_traj, down_traj, origin_lane, target_lane, t_int)
            result.trajectories[vid] = merged
            neighbor_pool[vid] = [merged]
            continue
        origin_seg, target_seg = stitch_lc(up_traj, down_traj, decision)
        merged = _merge_segments(origin_seg, target_seg, t_int)
        result.decisions.append(decision)
        result.trajectories[vid] = merged
        neighbor_pool[vid] = [merged]
    return result


def _fallback_merge(
    up_traj: Trajectory,
    down_traj: Trajectory,
    origin_lane: int,
    target_lane: int,
    t_int: float,
) -> Trajectory:
    """Failed-matching fallback: keep both per-lane halves, split at the
    middle of their overlap (or of the gap between them)."""
    seam = 0.5 * (
        max(up_traj.start_time, down_traj.start_time)
        + min(up_traj.end_time, down_traj.end_time)
    )
    seam = min(max(seam, up_traj.start_time + TIME_TOL), down_traj.end_time - TIME_TOL)
    ts = fit_grid(up_traj.start_time, down_traj.end_time, t_int)
    before = ts < seam
    positions = np.where(
        before,
        up_traj.sample_positions(ts, extrapolate=True),
        down_traj.sample_positions(ts, extrapolate=True),
    )
    lanes = np.where(before, origin_lane, target_lane)
    return Trajectory(
        vehicle_id=up_traj.vehicle_id,
        times=ts,
        positions=positions,
        lanes=lanes,
        sample_interval=float(ts[1] - ts[0]),
    )
