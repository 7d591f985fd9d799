"""Multi-lane freeway trajectory reconstruction from sparse sensing.

The package fuses per-lane macroscopic velocity contour maps with
Newell-model candidate trajectories to recover per-second vehicle
trajectories, including single lane-change events, between two fixed
sensor stations.
"""

from lanefusion.core import (
    LcEvent,
    NewellShift,
    SegmentGeometry,
    Trajectory,
    TrajectoryPoint,
    headway,
    shift_trajectory,
    velocity_profile,
)
from lanefusion.ingest import (
    DetectionEvent,
    DetectionLog,
    Region,
    TrajectorySet,
    extract_detections,
    parse_trajectory_file,
    partition_regions,
    sample_probes,
)
from lanefusion.macro_state import (
    AsmParams,
    DetectionSample,
    VelocityField,
    build_velocity_field,
    estimate_velocity,
    query_field,
)
from lanefusion.micro_candidates import (
    CandidateSet,
    LagSet,
    NewellConfig,
    derive_lags,
    estimate_candidate,
    generate_candidates,
)
from lanefusion.fusion import (
    FeasibleArea,
    FusionConfig,
    LcDecision,
    ReconstructionResult,
    WeightAssignment,
    blend_up_down,
    feasible_area,
    fuse_pair,
    optimize_lc,
    reconstruct,
    solve_weights,
    stitch_lc,
)
from lanefusion.evaluation import (
    AccuracyReport,
    LcMatchReport,
    baseline_macro,
    baseline_micro,
    classify_lc_matches,
    score_accuracy,
)
from lanefusion.sim_oracle import ScenarioSpec, simulate

__version__ = "0.1.0"
