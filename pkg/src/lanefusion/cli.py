"""Command-line front end.

Subcommands:
  simulate        run a scenario file and write ground-truth CSVs
  reconstruct     full pipeline: sensing emulation, fields, fusion, LC
  estimate-state  build and export the velocity contour maps only
  evaluate        score a reconstruction against ground truth
  compare         run proposed + micro + macro methods and tabulate

Exit codes: 0 success, 1 validation error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from lanefusion import __version__
from lanefusion.core import LcEvent, SegmentGeometry, Trajectory
from lanefusion.evaluation import (
    ComparisonTable,
    classify_lc_matches,
    score_accuracy,
)
from lanefusion.fusion import LcDecision, LcFailure
from lanefusion.ingest import TrajectorySet, extract_lc_events, parse_trajectory_file
from lanefusion.macro_state import field_rows
from lanefusion.micro_candidates import NewellConfig
from lanefusion.pipeline import (
    ConfigError,
    RunConfig,
    build_fields,
    config_from_dict,
    run_baselines,
    run_reconstruction,
)
from lanefusion.sim_oracle import Bottleneck, LcScriptEntry, ScenarioSpec, simulate
from lanefusion.ingest import extract_detections, sample_probes

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# file IO helpers


def _write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def write_trajectories_csv(path: Path, entries: list[tuple[Trajectory, str]]) -> None:
    rows = []
    for traj, kind in entries:
        for t, x, lane in zip(traj.times, traj.positions, traj.lanes):
            rows.append((traj.vehicle_id, f"{t:.6f}", f"{x:.6f}", int(lane), kind))
    _write_csv(path, ["vehicle_id", "time_s", "position_m", "lane_id", "kind"], rows)


def write_decisions_csv(path: Path, decisions, failures) -> None:
    rows = [
        (d.vehicle_id, d.origin_lane, d.target_lane,
         f"{d.lc_time:.6f}", f"{d.lc_position:.6f}", f"{d.score:.6f}", "ok")
        for d in decisions
    ]
    rows += [
        (f.vehicle_id, f.origin_lane, f.target_lane, "", "", "", "failed")
        for f in failures
    ]
    rows.sort(key=lambda r: r[0])
    _write_csv(
        path,
        ["vehicle_id", "origin_lane", "target_lane", "lc_time_s", "lc_position_m", "score", "status"],
        rows,
    )


def write_truth_lc_csv(path: Path, events) -> None:
    rows = [
        (e.vehicle_id, f"{e.lc_time:.6f}", f"{e.lc_position:.6f}", e.origin_lane, e.target_lane)
        for e in sorted(events, key=lambda e: e.vehicle_id)
    ]
    _write_csv(path, ["vehicle_id", "lc_time_s", "lc_position_m", "origin_lane", "target_lane"], rows)


def write_fields_csv(path: Path, fields) -> None:
    rows = []
    for lane in sorted(fields):
        for lane_id, x, t, v in field_rows(fields[lane]):
            rows.append((lane_id, f"{x:.3f}", f"{t:.3f}", f"{v:.6f}"))
    _write_csv(path, ["lane", "x_m", "t_s", "v_mps"], rows)


def read_truth_lc_csv(path: Path) -> list[LcEvent]:
    events = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            events.append(
                LcEvent(
                    vehicle_id=row["vehicle_id"],
                    lc_time=float(row["lc_time_s"]),
                    lc_position=float(row["lc_position_m"]),
                    origin_lane=int(row["origin_lane"]),
                    target_lane=int(row["target_lane"]),
                )
            )
    return events


def read_decisions_csv(path: Path) -> tuple[list[LcDecision], list[LcFailure]]:
    decisions, failures = [], []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            if row["status"] == "ok":
                decisions.append(
                    LcDecision(
                        vehicle_id=row["vehicle_id"],
                        origin_lane=int(row["origin_lane"]),
                        target_lane=int(row["target_lane"]),
                        lc_time=float(row["lc_time_s"]),
                        lc_position=float(row["lc_position_m"]),
                        extent=0.0,
                        score=float(row["score"]),
                    )
                )
            else:
                failures.append(
                    LcFailure(
                        vehicle_id=row["vehicle_id"],
                        origin_lane=int(row["origin_lane"]),
                        target_lane=int(row["target_lane"]),
                        reason="failed",
                    )
                )
    return decisions, failures


def _json_dump(path: Path, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_config(args) -> RunConfig:
    data = {}
    if getattr(args, "config", None):
        with open(args.config, encoding="utf-8") as fh:
            data = json.load(fh)
    cfg = config_from_dict(data)
    overrides = {}
    if getattr(args, "penetration", None) is not None:
        overrides["penetration"] = args.penetration
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if overrides:
        merged = cfg.to_dict()
        merged.update(overrides)
        cfg = config_from_dict(merged)
    return cfg


# ---------------------------------------------------------------------------
# scenario files


def scenario_from_json(data: dict) -> tuple[ScenarioSpec, float, int]:
    known = {
        "geometry", "vehicles_per_lane", "entry_headway_s", "desired_speed_mps",
        "newell", "lc_script", "bottleneck", "entry_position_m", "lane_stagger_s",
        "horizon_s", "seed", "sample_interval",
    }
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown scenario keys: {sorted(unknown)}")
    geo = dict(data.get("geometry", {"x_up": 0.0, "x_down": 500.0, "lanes": [1, 2]}))
    geo["lanes"] = tuple(geo.get("lanes", (1, 2)))
    geometry = SegmentGeometry(**geo)
    newell = NewellConfig(**data.get("newell", {}))
    bottleneck = None
    if data.get("bottleneck"):
        b = data["bottleneck"]
        bottleneck = Bottleneck(
            position=b["position_m"],
            t_start=b["t_start_s"],
            t_end=b["t_end_s"],
            capacity_speed=b["capacity_speed_mps"],
            zone_length=b.get("zone_length_m", 50.0),
        )
    desired = data.get("desired_speed_mps", 22.0)
    if isinstance(desired, list):
        desired = (float(desired[0]), float(desired[1]))
    script = tuple(
        LcScriptEntry(vehicle_id=str(e[0]), target_lane=int(e[1]), trigger_time=float(e[2]))
        for e in data.get("lc_script", ())
    )
    spec = ScenarioSpec(
        geometry=geometry,
        vehicles_per_lane=int(data.get("vehicles_per_lane", 20)),
        entry_headway=float(data.get("entry_headway_s", 1.6)),
        desired_speed=desired,
        newell=newell,
        lc_script=script,
        bottleneck=bottleneck,
        entry_position=float(data.get("entry_position_m", -120.0)),
        lane_stagger=float(data.get("lane_stagger_s", 0.8)),
        sample_interval=float(data.get("sample_interval", 1.0)),
    )
    return spec, float(data.get("horizon_s", 240.0)), int(data.get("seed", 0))


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(args) -> int:
    with open(args.scenario, encoding="utf-8") as fh:
        data = json.load(fh)
    spec, horizon, seed = scenario_from_json(data)
    if args.horizon is not None:
        horizon = args.horizon
    if args.seed is not None:
        seed = args.seed
    result = simulate(spec, horizon, seed)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    truth_path = out_dir / "ground_truth.csv"
    lc_path = out_dir / "truth_lc.csv"
    entries = [(result.trajectories[vid], "truth") for vid in result.trajectories.vehicle_ids]
    write_trajectories_csv(truth_path, entries)
    write_truth_lc_csv(lc_path, result.lc_events)
    _json_dump(
        out_dir / "manifest_simulate.json",
        {
            "command": "simulate",
            "version": __version__,
            "scenario": data,
            "horizon_s": horizon,
            "seed": seed,
            "vehicles": len(result.trajectories),
            "executed_lc": len(result.lc_events),
            "unexecuted_lc": [e.vehicle_id for e in result.unexecuted_lc],
            "outputs": [truth_path.name, lc_path.name],
        },
    )
    print(f"wrote {truth_path} ({len(result.trajectories)} vehicles)")
    return 0


def cmd_reconstruct(args) -> int:
    cfg = _load_config(args)
    truth = parse_trajectory_file(
        args.input, cfg.geometry, cfg.sample_interval, cfg.margin
    )
    run = run_reconstruction(truth, cfg)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    recon = run.reconstruction
    entries = [(run.probes[vid], "probe") for vid in run.probes.vehicle_ids]
    entries += [
        (recon.trajectories[vid], "reconstructed") for vid in sorted(recon.trajectories)
    ]
    write_trajectories_csv(out_dir / "reconstructed.csv", entries)
    write_decisions_csv(out_dir / "lc_decisions.csv", recon.decisions, recon.failures)
    write_fields_csv(out_dir / "velocity_field.csv", run.fields)
    _json_dump(
        out_dir / "manifest.json",
        {
            "command": "reconstruct",
            "version": __version__,
            "input": str(args.input),
            "config": cfg.to_dict(),
            "probes": run.probes.vehicle_ids,
            "hidden": len(run.hidden),
            "reconstructed": len(recon.trajectories),
            "lc_decisions": len(recon.decisions),
            "lc_failures": len(recon.failures),
            "skipped": [list(item) for item in recon.skipped],
            "outputs": ["reconstructed.csv", "lc_decisions.csv", "velocity_field.csv"],
        },
    )
    print(
        f"reconstructed {len(recon.trajectories)} vehicles "
        f"({len(recon.decisions)} LC paired, {len(recon.failures)} failed)"
    )
    return 0


def cmd_estimate_state(args) -> int:
    cfg = _load_config(args)
    truth = parse_trajectory_file(args.input, cfg.geometry, cfg.sample_interval, cfg.margin)
    log = extract_detections(truth)
    probes, _hidden = sample_probes(truth, cfg.penetration, cfg.seed)
    fields = build_fields(log, probes, cfg)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_fields_csv(out_dir / "velocity_field.csv", fields)
    _json_dump(
        out_dir / "manifest.json",
        {
            "command": "estimate-state",
            "version": __version__,
            "input": str(args.input),
            "config": cfg.to_dict(),
            "lanes": sorted(fields),
            "outputs": ["velocity_field.csv"],
        },
    )
    print(f"wrote velocity fields for lanes {sorted(fields)}")
    return 0


def _read_kinded_trajectories(path: Path, geometry, sample_interval):
    """Parse a reconstruction CSV, returning {kind: {vid: Trajectory}}."""
    groups: dict[str, dict[str, list]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "vehicle_id" not in reader.fieldnames:
            raise ConfigError(f"{path} is not a trajectory CSV")
        has_kind = "kind" in reader.fieldnames
        for row in reader:
            kind = row["kind"] if has_kind else "reconstructed"
            groups.setdefault(kind, {}).setdefault(row["vehicle_id"], []).append(
                (float(row["time_s"]), float(row["position_m"]), int(float(row["lane_id"])))
            )
    out: dict[str, dict[str, Trajectory]] = {}
    for kind, vehicles in groups.items():
        trajs = {}
        for vid, samples in sorted(vehicles.items()):
            samples.sort()
            arr = np.asarray(samples, dtype=float)
            if arr.shape[0] < 2:
                continue
            step = float(np.median(np.diff(arr[:, 0])))
            trajs[vid] = Trajectory(
                vehicle_id=vid,
                times=arr[:, 0],
                positions=arr[:, 1],
                lanes=arr[:, 2].astype(np.int64),
                sample_interval=step,
            )
        out[kind] = trajs
    return out


def cmd_evaluate(args) -> int:
    cfg = _load_config(args)
    truth = parse_trajectory_file(args.truth, cfg.geometry, cfg.sample_interval, cfg.margin)
    kinded = _read_kinded_trajectories(Path(args.recon), cfg.geometry, cfg.sample_interval)
    recon = kinded.get("reconstructed") or kinded.get("truth") or {}
    if not recon:
        raise ConfigError("reconstruction file holds no reconstructed trajectories")
    orphans = sorted(set(recon) - set(truth.trajectories))
    if orphans:
        print(f"error: reconstructed vehicles missing from truth: {orphans}", file=sys.stderr)
        return 1
    report = score_accuracy(recon, truth, cfg.sample_interval)
    payload = {"accuracy": report.to_dict()}
    if args.truth_lc:
        truth_events = read_truth_lc_csv(Path(args.truth_lc))
        if args.decisions:
            decisions, failures = read_decisions_csv(Path(args.decisions))
        else:
            from lanefusion.core import lane_changes

            decisions, failures = [], []
            for vid, traj in recon.items():
                for ev in lane_changes(traj):
                    decisions.append(
                        LcDecision(
                            vehicle_id=vid,
                            origin_lane=ev.origin_lane,
                            target_lane=ev.target_lane,
                            lc_time=ev.lc_time,
                            lc_position=ev.lc_position,
                            extent=0.0,
                            score=0.0,
                        )
                    )
        lc_report = classify_lc_matches(decisions, failures, truth_events, args.threshold)
        payload["lc_matching"] = lc_report.to_dict()
    text = json.dumps(payload, indent=2, sort_keys=True)
    print(text)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    return 0


def cmd_compare(args) -> int:
    cfg = _load_config(args)
    truth = parse_trajectory_file(args.input, cfg.geometry, cfg.sample_interval, cfg.margin)
    rates = [float(r) for r in args.penetrations.split(",")] if args.penetrations else [cfg.penetration]
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tables = {}
    for rate in rates:
        merged = cfg.to_dict()
        merged["penetration"] = rate
        rate_cfg = config_from_dict(merged)
        run = run_reconstruction(truth, rate_cfg)
        micro, macro, _diag = run_baselines(run)
        reports = {}
        reports["proposed"] = score_accuracy(
            run.reconstruction.trajectories, truth, cfg.sample_interval
        )
        if micro:
            reports["micro"] = score_accuracy(micro, truth, cfg.sample_interval)
        if macro:
            reports["macro"] = score_accuracy(macro, truth, cfg.sample_interval)
        tables[f"{rate:.2f}"] = ComparisonTable(reports).to_dict()
        print(
            f"rate {rate:.0%}: proposed MAE {reports['proposed'].mae:.2f} m"
            + (f", micro {reports['micro'].mae:.2f} m" if "micro" in reports else "")
            + (f", macro {reports['macro'].mae:.2f} m" if "macro" in reports else "")
        )
    _json_dump(out_dir / "comparison.json", {"penetration_rates": tables, "config": cfg.to_dict()})
    print(f"wrote {out_dir / 'comparison.json'}")
    return 0


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lanefusion",
        description="Multi-lane freeway trajectory reconstruction from sparse sensing",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p_sim = sub.add_parser("simulate", help="run a scenario and write ground-truth CSVs")
    p_sim.add_argument("--scenario", required=True, help="scenario JSON file")
    p_sim.add_argument("--out-dir", required=True)
    p_sim.add_argument("--horizon", type=float, default=None)
    p_sim.add_argument("--seed", type=int, default=None)
    p_sim.set_defaults(func=cmd_simulate)

    def add_run_args(p):
        p.add_argument("--config", default=None, help="run-config JSON file")
        p.add_argument("--penetration", type=float, default=None)
        p.add_argument("--seed", type=int, default=None)

    p_rec = sub.add_parser("reconstruct", help="full reconstruction pipeline")
    p_rec.add_argument("--input", required=True, help="ground-truth trajectory CSV")
    p_rec.add_argument("--out-dir", required=True)
    add_run_args(p_rec)
    p_rec.set_defaults(func=cmd_reconstruct)

    p_state = sub.add_parser("estimate-state", help="export velocity contour maps only")
    p_state.add_argument("--input", required=True)
    p_state.add_argument("--out-dir", required=True)
    add_run_args(p_state)
    p_state.set_defaults(func=cmd_estimate_state)

    p_eval = sub.add_parser("evaluate", help="score a reconstruction against truth")
    p_eval.add_argument("--truth", required=True)
    p_eval.add_argument("--recon", required=True)
    p_eval.add_argument("--truth-lc", default=None)
    p_eval.add_argument("--decisions", default=None)
    p_eval.add_argument("--threshold", type=float, default=30.0)
    p_eval.add_argument("--out", default=None)
    add_run_args(p_eval)
    p_eval.set_defaults(func=cmd_evaluate)

    p_cmp = sub.add_parser("compare", help="run proposed, micro and macro methods")
    p_cmp.add_argument("--input", required=True)
    p_cmp.add_argument("--out-dir", required=True)
    p_cmp.add_argument("--penetrations", default=None, help="comma-separated rates")
    add_run_args(p_cmp)
    p_cmp.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ValueError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - runtime failures map to exit 2
        logger.exception("runtime failure")
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
