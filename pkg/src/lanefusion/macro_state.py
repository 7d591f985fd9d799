"""Per-lane space-time velocity contour maps via adaptive smoothing.

Sparse speed detections (fixed-sensor crossings plus probe samples) are
smoothed with two anisotropic exponential kernels, one aligned with the
free-flow wave speed and one with the congested wave speed. An s-shaped
congestion weight blends the two components, and source-specific weights
let probe and fixed data contribute with different trust.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from lanefusion.core import Trajectory, velocity_profile
from lanefusion.ingest import DetectionLog, TrajectorySet

logger = logging.getLogger(__name__)

SOURCE_FIXED = "fixed"
SOURCE_PROBE = "probe"


@dataclass(frozen=True)
class AsmParams:
    """Smoothing-kernel and blending parameters.

    Defaults follow the calibrated US-101 values: 6 m / 2 s kernel widths,
    24 m/s free and -5 m/s congested wave speeds, 15 m/s threshold with a
    3.6 m/s transition band.
    """

    sigma: float = 6.0
    tau: float = 2.0
    v_free: float = 24.0
    v_cong: float = -5.0
    v_thresh: float = 15.0
    delta_v: float = 3.6
    source_weights: Mapping[str, float] = field(
        default_factory=lambda: {SOURCE_FIXED: 1.0, SOURCE_PROBE: 1.0}
    )
    # When True the congestion weight is computed once from the pooled
    # samples instead of per source.
    global_omega: bool = False
    # Kernel support cutoff in combined (|dx|/sigma + |dt|/tau) units.
    truncation: float = 5.0

    def __post_init__(self) -> None:
        if min(self.sigma, self.tau, self.delta_v) <= 0:
            raise ValueError("sigma, tau and delta_v must be positive")
        if not self.v_cong < 0 < self.v_free:
            raise ValueError("need v_cong < 0 < v_free")
        object.__setattr__(self, "source_weights", dict(self.source_weights))
        if any(w <= 0 for w in self.source_weights.values()):
            raise ValueError("source weights must be positive")
        if self.truncation <= 0:
            raise ValueError("truncation must be positive")


@dataclass(frozen=True)
class DetectionSample:
    """One disaggregate speed observation at (x, t)."""

    x: float
    t: float
    v: float
    source: str
    lane: int

    def __post_init__(self) -> None:
        if self.v < 0:
            raise ValueError(f"speed must be non-negative, got {self.v}")


@dataclass(frozen=True, eq=False)
class VelocityField:
    """Gridded per-lane velocity estimate with bilinear point queries."""

    lane: int
    x_grid: np.ndarray
    t_grid: np.ndarray
    values: np.ndarray

    def __post_init__(self) -> None:
        x_grid = np.asarray(self.x_grid, dtype=float)
        t_grid = np.asarray(self.t_grid, dtype=float)
        values = np.asarray(self.values, dtype=float)
        if values.shape != (x_grid.size, t_grid.size):
            raise ValueError("values must have shape (len(x_grid), len(t_grid))")
        for arr in (x_grid, t_grid, values):
            arr.flags.writeable = False
        object.__setattr__(self, "x_grid", x_grid)
        object.__setattr__(self, "t_grid", t_grid)
        object.__setattr__(self, "values", values)

    @property
    def x_span(self) -> tuple[float, float]:
        return float(self.x_grid[0]), float(self.x_grid[-1])

    @property
    def t_span(self) -> tuple[float, float]:
        return float(self.t_grid[0]), float(self.t_grid[-1])


# ---------------------------------------------------------------------------
# kernels


def kernel_weight(dx: float, dt: float, params: AsmParams) -> float:
    """Isotropic base kernel exp(-(|dx|/sigma + |dt|/tau))."""
    return float(np.exp(-(np.abs(dx) / params.sigma + np.abs(dt) / params.tau)))


def _wave_weights(
    x: float, t: float, xs: np.ndarray, ts: np.ndarray, wave_speed: float, params: AsmParams
) -> np.ndarray:
    """Kernel weights skewed along the wave line t - t_i = (x - x_i) / c."""
    dx = x - xs
    dt = t - ts - dx / wave_speed
    return np.exp(-(np.abs(dx) / params.sigma + np.abs(dt) / params.tau))


def component_velocity(
    x: float,
    t: float,
    samples: Sequence[DetectionSample],
    wave_speed: float,
    params: AsmParams,
) -> float:
    """Wave-aligned weighted mean speed at one point (full sums)."""
    if not samples:
        raise ValueError("component_velocity needs at least one sample")
    xs = np.array([s.x for s in samples])
    ts = np.array([s.t for s in samples])
    vs = np.array([s.v for s in samples])
    w = _wave_weights(x, t, xs, ts, wave_speed, params)
    return float(np.sum(w * vs) / np.sum(w))


def congestion_weight(v_free_comp: float, v_cong_comp: float, params: AsmParams) -> float:
    """S-shaped blend weight; 0.5 exactly at the free/congested threshold."""
    v_min = min(v_free_comp, v_cong_comp)
    return float(0.5 * (1.0 + np.tanh((params.v_thresh - v_min) / params.delta_v)))


def _component_sums(
    x: float, t: float, samples: Sequence[DetectionSample], params: AsmParams
) -> tuple[float, float, float, float]:
    """(sum w_cong*v, sum w_cong, sum w_free*v, sum w_free) at one point."""
    xs = np.array([s.x for s in samples])
    ts = np.array([s.t for s in samples])
    vs = np.array([s.v for s in samples])
    wc = _wave_weights(x, t, xs, ts, params.v_cong, params)
    wf = _wave_weights(x, t, xs, ts, params.v_free, params)
    return float(np.sum(wc * vs)), float(np.sum(wc)), float(np.sum(wf * vs)), float(np.sum(wf))


def _blend(
    sums_by_source: Mapping[str, tuple[float, float, float, float]], params: AsmParams
) -> float:
    """Source-weighted blend of congested/free components.

    Each source gets its own congestion weight from its own components;
    with ``global_omega`` one pooled weight applies to every source. A
    source without samples contributes zero terms.
    """
    omega_global = None
    if params.global_omega:
        svc = sum(s[0] for s in sums_by_source.values())
        swc = sum(s[1] for s in sums_by_source.values())
        svf = sum(s[2] for s in sums_by_source.values())
        swf = sum(s[3] for s in sums_by_source.values())
        vc = svc / swc if swc > 0 else None
        vf = svf / swf if swf > 0 else None
        if vc is None and vf is None:
            raise ValueError("no kernel support at the query point")
        vc = vc if vc is not None else vf
        vf = vf if vf is not None else vc
        omega_global = congestion_weight(vf, vc, params)

    num = 0.0
    den = 0.0
    for source, (svc, swc, svf, swf) in sums_by_source.items():
        if swc <= 0 and swf <= 0:
            continue
        alpha = params.source_weights.get(source, 1.0)
        if omega_global is not None:
            omega = omega_global
        else:
            vc = svc / swc if swc > 0 else svf / swf
            vf = svf / swf if swf > 0 else svc / swc
            omega = congestion_weight(vf, vc, params)
        num += alpha * (omega * svc + (1.0 - omega) * svf)
        den += alpha * (omega * swc + (1.0 - omega) * swf)
    if den <= 0:
        raise ValueError("no kernel support at the query point")
    return num / den


def estimate_velocity(
    x: float,
    t: float,
    samples_by_source: Mapping[str, Sequence[DetectionSample]],
    params: AsmParams,
) -> float:
    """Blended velocity estimate at one point (exact, untruncated sums).

    The result is a convex combination of the sample speeds, so it always
    lies inside their [min, max] range, and scaling every source weight by
    a common factor leaves it unchanged.
    """
    populated = {s: list(v) for s, v in samples_by_source.items() if v}
    if not populated:
        raise ValueError("estimate_velocity needs at least one sample")
    sums = {s: _component_sums(x, t, v, params) for s, v in populated.items()}
    return _blend(sums, params)


# ---------------------------------------------------------------------------
# field construction


def build_velocity_field(
    lane: int,
    x_span: tuple[float, float],
    t_span: tuple[float, float],
    dx: float,
    dt: float,
    samples: Iterable[DetectionSample],
    params: AsmParams,
) -> VelocityField:
    """Evaluate the blended estimate on a regular grid for one lane.

    Kernel support is truncated where |dx|/sigma + |dt'|/tau exceeds
    ``params.truncation`` (weight < e^-5 by default); each sample then only
    touches a small grid patch, which keeps construction linear in the
    sample count. Grid nodes outside every sample's support fall back to
    the exact untruncated estimate.
    """
    lane_samples = [s for s in samples if s.lane == lane]
    if not lane_samples:
        raise ValueError(f"no samples for lane {lane}")
    x_grid = np.arange(x_span[0], x_span[1] + 0.5 * dx, dx)
    t_grid = np.arange(t_span[0], t_span[1] + 0.5 * dt, dt)
    nx, nt = x_grid.size, t_grid.size

    by_source: dict[str, list[DetectionSample]] = {}
    for s in lane_samples:
        by_source.setdefault(s.source, []).append(s)

    # Four accumulator planes per source: cong num/den, free num/den.
    planes = {src: np.zeros((4, nx, nt)) for src in by_source}
    r_x = params.truncation * params.sigma
    r_t = params.truncation * params.tau

    for src, src_samples in by_source.items():
        acc = planes[src]
        for s in src_samples:
            i0 = int(np.searchsorted(x_grid, s.x - r_x, side="left"))
            i1 = int(np.searchsorted(x_grid, s.x + r_x, side="right"))
            if i0 >= i1:
                continue
            xs = x_grid[i0:i1]
            dxs = xs - s.x
            for kernel_idx, c in ((0, params.v_cong), (2, params.v_free)):
                centers = s.t + dxs / c
                t_lo = float(np.min(centers)) - r_t
                t_hi = float(np.max(centers)) + r_t
                j0 = int(np.searchsorted(t_grid, t_lo, side="left"))
                j1 = int(np.searchsorted(t_grid, t_hi, side="right"))
                if j0 >= j1:
                    continue
                dts = t_grid[j0:j1][None, :] - centers[:, None]
                exponent = np.abs(dxs)[:, None] / params.sigma + np.abs(dts) / params.tau
                w = np.where(exponent <= params.truncation, np.exp(-exponent), 0.0)
                acc[kernel_idx, i0:i1, j0:j1] += w * s.v
                acc[kernel_idx + 1, i0:i1, j0:j1] += w

    def safe_ratio(num: np.ndarray, den: np.ndarray) -> np.ndarray:
        return np.divide(num, den, out=np.zeros_like(num), where=den > 0)

    omega_shared = None
    if params.global_omega:
        svc = sum(acc[0] for acc in planes.values())
        swc = sum(acc[1] for acc in planes.values())
        svf = sum(acc[2] for acc in planes.values())
        swf = sum(acc[3] for acc in planes.values())
        vc = safe_ratio(svc, swc)
        vf = safe_ratio(svf, swf)
        vc = np.where(swc > 0, vc, vf)
        vf = np.where(swf > 0, vf, vc)
        omega_shared = 0.5 * (1.0 + np.tanh((params.v_thresh - np.minimum(vf, vc)) / params.delta_v))

    num = np.zeros((nx, nt))
    den = np.zeros((nx, nt))
    for src, acc in planes.items():
        svc, swc, svf, swf = acc
        supported = (swc > 0) | (swf > 0)
        if omega_shared is not None:
            omega = omega_shared
        else:
            vc = safe_ratio(svc, swc)
            vf = safe_ratio(svf, swf)
            vc = np.where(swc > 0, vc, vf)
            vf = np.where(swf > 0, vf, vc)
            omega = 0.5 * (1.0 + np.tanh((params.v_thresh - np.minimum(vf, vc)) / params.delta_v))
        alpha = params.source_weights.get(src, 1.0)
        num += np.where(supported, alpha * (omega * svc + (1.0 - omega) * svf), 0.0)
        den += np.where(supported, alpha * (omega * swc + (1.0 - omega) * swf), 0.0)

    values = safe_ratio(num, den)
    # Nodes beyond every sample's truncated support: use the exact sums.
    samples_map = {src: list(v) for src, v in by_source.items()}
    for i, j in zip(*np.nonzero(den <= 0)):
        values[i, j] = estimate_velocity(float(x_grid[i]), float(t_grid[j]), samples_map, params)
    return VelocityField(lane=lane, x_grid=x_grid, t_grid=t_grid, values=values)


# ---------------------------------------------------------------------------
# queries


def query_many(
    field_: VelocityField, xs, ts, clamp: bool = False
) -> np.ndarray:
    """Vectorized bilinear interpolation; optionally clamps to the hull."""
    xs = np.atleast_1d(np.asarray(xs, dtype=float))
    ts = np.atleast_1d(np.asarray(ts, dtype=float))
    xg, tg = field_.x_grid, field_.t_grid
    if clamp:
        xs = np.clip(xs, xg[0], xg[-1])
        ts = np.clip(ts, tg[0], tg[-1])
    else:
        if (
            xs.min() < xg[0] - 1e-9
            or xs.max() > xg[-1] + 1e-9
            or ts.min() < tg[0] - 1e-9
            or ts.max() > tg[-1] + 1e-9
        ):
            raise ValueError("query outside the field hull")
        xs = np.clip(xs, xg[0], xg[-1])
        ts = np.clip(ts, tg[0], tg[-1])
    ix = np.clip(np.searchsorted(xg, xs, side="right") - 1, 0, xg.size - 2)
    jt = np.clip(np.searchsorted(tg, ts, side="right") - 1, 0, tg.size - 2)
    fx = (xs - xg[ix]) / (xg[ix + 1] - xg[ix])
    ft = (ts - tg[jt]) / (tg[jt + 1] - tg[jt])
    v00 = field_.values[ix, jt]
    v10 = field_.values[ix + 1, jt]
    v01 = field_.values[ix, jt + 1]
    v11 = field_.values[ix + 1, jt + 1]
    return (
        v00 * (1 - fx) * (1 - ft)
        + v10 * fx * (1 - ft)
        + v01 * (1 - fx) * ft
        + v11 * fx * ft
    )


def query_field(field_: VelocityField, x: float, t: float) -> float:
    """Bilinear point query; exact at grid nodes, error outside the hull."""
    return float(query_many(field_, [x], [t], clamp=False)[0])


# ---------------------------------------------------------------------------
# sample collection and export


def collect_samples(
    log: DetectionLog,
    probes: TrajectorySet,
    margin: float = 10.0,
) -> list[DetectionSample]:
    """Build the disaggregate speed observations feeding the field.

    Fixed-sensor events become one sample each at their station; every
    probe contributes a per-second speed profile along its path (clipped to
    the segment plus ``margin``).
    """
    geometry = probes.geometry
    x_station = {"upstream": geometry.x_up, "downstream": geometry.x_down}
    out: list[DetectionSample] = []
    for ev in log.events:
        out.append(
            DetectionSample(
                x=x_station[ev.station], t=ev.arrival_time, v=ev.speed,
                source=SOURCE_FIXED, lane=ev.lane,
            )
        )
    x_lo = geometry.x_up - margin
    x_hi = geometry.x_down + margin
    for vid in probes.vehicle_ids:
        traj = probes[vid]
        profile = velocity_profile(traj)
        for (t, v), x, lane in zip(profile, traj.positions, traj.lanes):
            if x_lo <= x <= x_hi:
                out.append(
                    DetectionSample(
                        x=float(x), t=float(t), v=max(float(v), 0.0),
                        source=SOURCE_PROBE, lane=int(lane),
                    )
                )
    return out


def field_rows(field_: VelocityField) -> list[tuple[int, float, float, float]]:
    """Flatten a field into (lane, x_m, t_s, v_mps) rows for CSV export."""
    rows = []
    for i, x in enumerate(field_.x_grid):
        for j, t in enumerate(field_.t_grid):
            rows.append((field_.lane, float(x), float(t), float(field_.values[i, j])))
    return rows
