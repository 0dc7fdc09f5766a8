"""Experiment harness: synthetic scenario generation, the end-to-end fusion
pipeline, the alignment benchmark, the pose-noise sweep, and report emission.

All randomness flows through numpy Generators seeded with integer tuples, so
every artifact except the timing sidecar is reproducible byte for byte.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .baselines import BoxObservation, GraphMatchConfig, graph_match_align, icp_align
from .config import ExperimentConfig, SWEEP_METHODS, config_from_dict
from .detection import (
    Detection,
    EvalConfig,
    HeadParams,
    RotatedBox3D,
    decode_head,
    pooled_average_precision,
    average_precision,
)
from .fusion import (
    BevGrid,
    GridSpec,
    NoSignalError,
    OffsetDelta,
    apply_offset,
    coarse_align,
    confidence_embed,
    estimate_offset,
    rasterize_bev,
    serialize_grid,
    warp_grid,
)
from .geometry import (
    GaussianPoseNoise,
    PointCloud,
    Pose,
    compose,
    inverse,
    load_point_cloud,
    normalize_angle,
    perturb_pose,
    pose_error,
    relative,
    save_points_binary,
)
from .localization import (
    PoseEstimate,
    confidence_from_error,
    oracle_predict,
    pose_message_json,
    ransac_pose,
    voxel_downsample,
)
from .temporal import EncoderParams, encode, temporal_encoding

logger = logging.getLogger("coopalign.harness")

_MAX_TRIES = 400
_MIN_OBJECT_SEPARATION = 6.0
_VIS_INNER_MARGIN = 5.0
_VIS_OUTER_MARGIN = 2.0
_SHARED_LINE_CLEARANCE = 1.5
_SUCCESS_TRANSLATION_M = 3.0

# integer tags mixed into rng seed tuples; one stream per purpose
_TAG_ORACLE = 11
_TAG_GNSS = 12
_TAG_RANSAC = 13
_TAG_BENCH_ORACLE = 21
_TAG_BENCH_GNSS = 22
_TAG_BENCH_RANSAC = 23
_TAG_ENCODER = 31


class ScenarioGenerationError(RuntimeError):
    """Placement constraints could not be satisfied after bounded retries."""


# ---------------------------------------------------------------------------
# scenarios


@dataclass(frozen=True, eq=False)
class AgentObservation:
    agent_id: int
    gt_pose: Pose
    cloud: PointCloud
    visible: tuple[int, ...]


@dataclass(frozen=True, eq=False)
class Scenario:
    seed: int
    agents: tuple[AgentObservation, ...]
    world_objects: tuple[RotatedBox3D, ...]


def _sample_box_surface(box: RotatedBox3D, count: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform samples on five faces of the box (underside excluded)."""
    areas = np.array(
        [
            box.w * box.h,
            box.w * box.h,
            box.l * box.h,
            box.l * box.h,
            box.l * box.w,
        ]
    )
    faces = rng.choice(5, size=count, p=areas / areas.sum())
    u = rng.uniform(-0.5, 0.5, size=count)
    v = rng.uniform(-0.5, 0.5, size=count)
    local = np.empty((count, 3))
    for fid in range(5):
        m = faces == fid
        if not np.any(m):
            continue
        if fid == 0:
            local[m] = np.column_stack([np.full(m.sum(), box.l / 2), u[m] * box.w, v[m] * box.h])
        elif fid == 1:
            local[m] = np.column_stack([np.full(m.sum(), -box.l / 2), u[m] * box.w, v[m] * box.h])
        elif fid == 2:
            local[m] = np.column_stack([u[m] * box.l, np.full(m.sum(), box.w / 2), v[m] * box.h])
        elif fid == 3:
            local[m] = np.column_stack([u[m] * box.l, np.full(m.sum(), -box.w / 2), v[m] * box.h])
        else:
            local[m] = np.column_stack([u[m] * box.l, v[m] * box.w, np.full(m.sum(), box.h / 2)])
    c, s = math.cos(box.theta), math.sin(box.theta)
    world = np.empty_like(local)
    world[:, 0] = c * local[:, 0] - s * local[:, 1] + box.x
    world[:, 1] = s * local[:, 0] + c * local[:, 1] + box.y
    world[:, 2] = local[:, 2] + box.z
    return world


def _place(rng: np.random.Generator, half: float, accept) -> np.ndarray:
    for _ in range(_MAX_TRIES):
        xy = rng.uniform(-half, half, size=2)
        if accept(xy):
            return xy
    raise ScenarioGenerationError("object placement failed after retries")


def _occluded(apos: np.ndarray, target: np.ndarray, others: list[np.ndarray], radius: float) -> bool:
    """True when another object center blocks the 2D sight line within
    radius. Only blockers strictly between agent and target count."""
    d = target - apos
    seg_sq = float(d @ d)
    if seg_sq == 0.0 or radius <= 0.0:
        return False
    for q in others:
        t = float((q - apos) @ d) / seg_sq
        if not 0.0 < t < 1.0:
            continue
        closest = apos + t * d
        if float(np.linalg.norm(q - closest)) < radius:
            return True
    return False


def generate_scenario(params, seed: int) -> Scenario:
    """Build one synthetic scene: planar agent poses, box objects, and a
    point cloud per agent expressed in that agent's frame.

    Visibility requires the object center within sensing_range and, when
    occluder_radius is positive, an unblocked 2D sight line past the other
    object centers. When params.co_visible is set the first co_visible
    objects are placed well inside the range of both of the first two agents
    and the remainder strictly outside the other agent's range, which pins
    the number of objects the pair observes in common; occlusion is skipped
    in that mode so the constructed counts hold exactly.
    """
    rng = np.random.default_rng(seed)
    half = params.world_size / 2.0

    ego_xy = rng.uniform(-half / 3.0, half / 3.0, size=2)
    poses = [Pose.from_planar(float(ego_xy[0]), float(ego_xy[1]), float(rng.uniform(-math.pi, math.pi)))]
    for _ in range(1, params.num_agents):
        placed = None
        for _ in range(_MAX_TRIES):
            ang = rng.uniform(0.0, 2.0 * math.pi)
            dist = rng.uniform(params.min_agent_distance, params.max_agent_distance)
            xy = ego_xy + dist * np.array([math.cos(ang), math.sin(ang)])
            if np.abs(xy).max() <= half:
                placed = xy
                break
        if placed is None:
            raise ScenarioGenerationError("agent placement failed after retries")
        poses.append(Pose.from_planar(float(placed[0]), float(placed[1]), float(rng.uniform(-math.pi, math.pi))))

    centers: list[np.ndarray] = []

    def separated(xy: np.ndarray) -> bool:
        return all(np.linalg.norm(xy - c) >= _MIN_OBJECT_SEPARATION for c in centers)

    if params.co_visible is None:
        for _ in range(params.num_objects):
            centers.append(_place(rng, half, separated))
    else:
        a = poses[0].translation[:2]
        b = poses[1].translation[:2]
        r_in = params.sensing_range - _VIS_INNER_MARGIN
        r_out = params.sensing_range + _VIS_OUTER_MARGIN
        if r_in <= 0.0:
            raise ScenarioGenerationError("sensing_range too small for co-visible placement")

        for j in range(params.co_visible):

            def accept_shared(xy: np.ndarray, j=j) -> bool:
                if np.linalg.norm(xy - a) > r_in or np.linalg.norm(xy - b) > r_in:
                    return False
                if not separated(xy):
                    return False
                if j >= 2:
                    # keep the shared set non-collinear so a 3-point rigid
                    # solve on it stays well conditioned
                    p0, p1 = centers[0], centers[1]
                    d = p1 - p0
                    n = np.linalg.norm(d)
                    if n > 1e-9:
                        perp = abs(d[0] * (xy[1] - p0[1]) - d[1] * (xy[0] - p0[0])) / n
                        if perp < _SHARED_LINE_CLEARANCE:
                            return False
                return True

            centers.append(_place(rng, half, accept_shared))

        for j in range(params.num_objects - params.co_visible):
            own, other = (a, b) if j % 2 == 0 else (b, a)

            def accept_exclusive(xy: np.ndarray, own=own, other=other) -> bool:
                return (
                    np.linalg.norm(xy - own) <= r_in
                    and np.linalg.norm(xy - other) >= r_out
                    and separated(xy)
                )

            centers.append(_place(rng, half, accept_exclusive))

    boxes = []
    for xy in centers:
        length = float(rng.uniform(3.8, 5.0))
        width = float(rng.uniform(1.7, 2.1))
        height = float(rng.uniform(1.4, 1.8))
        yaw = float(rng.uniform(-math.pi, math.pi))
        boxes.append(RotatedBox3D(float(xy[0]), float(xy[1]), height / 2.0, height, width, length, yaw))

    centers_xy = [np.array([b.x, b.y]) for b in boxes]
    agents = []
    for k, pose in enumerate(poses):
        axy = pose.translation[:2]
        vis: list[int] = []
        for i, box in enumerate(boxes):
            if math.hypot(box.x - axy[0], box.y - axy[1]) > params.sensing_range:
                continue
            if params.co_visible is None and _occluded(
                axy, centers_xy[i], [c for j, c in enumerate(centers_xy) if j != i], params.occluder_radius
            ):
                continue
            vis.append(i)
        visible = tuple(vis)
        chunks = [_sample_box_surface(boxes[i], params.points_per_box, rng) for i in visible]
        if params.ground_points > 0:
            radii = params.sensing_range * np.sqrt(rng.uniform(0.0, 1.0, size=params.ground_points))
            angles = rng.uniform(0.0, 2.0 * math.pi, size=params.ground_points)
            ground = np.column_stack(
                [axy[0] + radii * np.cos(angles), axy[1] + radii * np.sin(angles), np.zeros(params.ground_points)]
            )
            chunks.append(ground)
        world_pts = np.concatenate(chunks, axis=0) if chunks else np.zeros((0, 3))
        if len(world_pts):
            apos = pose.translation
            keep = np.linalg.norm(world_pts - apos[None, :], axis=1) <= params.sensing_range
            world_pts = world_pts[keep]
        inv = inverse(pose)
        local = world_pts @ inv.rotation.T + inv.translation
        agents.append(AgentObservation(agent_id=k, gt_pose=pose, cloud=PointCloud(local), visible=visible))

    return Scenario(seed=seed, agents=tuple(agents), world_objects=tuple(boxes))


def box_in_frame(box: RotatedBox3D, pose: Pose) -> RotatedBox3D:
    """Express a world-frame box in the local frame of a planar pose."""
    inv = inverse(pose)
    center = inv.rotation @ np.array([box.x, box.y, box.z]) + inv.translation
    theta = normalize_angle(box.theta - pose.yaw)
    return RotatedBox3D(float(center[0]), float(center[1]), float(center[2]), box.h, box.w, box.l, theta)


def agent_box_observation(scenario: Scenario, agent_idx: int) -> BoxObservation:
    agent = scenario.agents[agent_idx]
    return BoxObservation(tuple(box_in_frame(scenario.world_objects[i], agent.gt_pose) for i in agent.visible))


_ROI_MARGIN_CELLS = 2.0


def _roi_bounds(spec: GridSpec) -> tuple[float, float, float, float]:
    m = _ROI_MARGIN_CELLS * spec.resolution
    x_lo = spec.origin[0] - spec.resolution / 2.0 + m
    x_hi = spec.origin[0] + (spec.width - 0.5) * spec.resolution - m
    y_lo = spec.origin[1] - spec.resolution / 2.0 + m
    y_hi = spec.origin[1] + (spec.height - 0.5) * spec.resolution - m
    return x_lo, x_hi, y_lo, y_hi


def _in_roi(x: float, y: float, spec: GridSpec) -> bool:
    x_lo, x_hi, y_lo, y_hi = _roi_bounds(spec)
    return x_lo <= x <= x_hi and y_lo <= y <= y_hi


def ego_frame_targets(scenario: Scenario, spec: GridSpec) -> list[RotatedBox3D]:
    """World objects whose centers fall inside the evaluation region of the
    ego grid (the grid minus a small border margin), in ego frame. Objects
    straddling the border shed points into edge cells without being fairly
    detectable, so both targets and detections are cropped to the same
    region."""
    ego = scenario.agents[0]
    out = []
    for box in scenario.world_objects:
        local = box_in_frame(box, ego.gt_pose)
        if _in_roi(local.x, local.y, spec):
            out.append(local)
    return out


# ---------------------------------------------------------------------------
# communication ledger

_MESSAGE_KINDS = ("pose", "boxes", "features")


@dataclass(frozen=True)
class CommRecord:
    sender: int
    receiver: int
    kind: str
    size_bytes: int


class CommLedger:
    """Append-only record of simulated agent-to-agent transmissions."""

    def __init__(self) -> None:
        self.records: list[CommRecord] = []

    def add(self, sender: int, receiver: int, kind: str, size_bytes: int) -> None:
        if kind not in _MESSAGE_KINDS:
            raise ValueError(f"unknown message kind {kind!r}")
        if size_bytes < 0:
            raise ValueError("size_bytes must be non-negative")
        self.records.append(CommRecord(sender, receiver, kind, int(size_bytes)))

    def total_bytes(self, kind: str | None = None) -> int:
        return sum(r.size_bytes for r in self.records if kind is None or r.kind == kind)

    def count(self, kind: str | None = None) -> int:
        return sum(1 for r in self.records if kind is None or r.kind == kind)


# ---------------------------------------------------------------------------
# shared estimation helpers


def _derived_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(parts).generate_state(1)[0])


def _estimate_agent_pose(
    scenario: Scenario, agent_idx: int, cfg: ExperimentConfig, tag_oracle: int, tag_ransac: int, frame: int = 0
) -> PoseEstimate | None:
    agent = scenario.agents[agent_idx]
    sampled = voxel_downsample(agent.cloud, cfg.downsample_voxel)
    rng = np.random.default_rng((scenario.seed, tag_oracle, frame, agent_idx))
    pred = oracle_predict(sampled, agent.gt_pose, cfg.oracle.build(), rng)
    rcfg = dataclasses.replace(cfg.ransac, seed=_derived_seed(scenario.seed, tag_ransac, frame, agent_idx))
    return ransac_pose(pred, rcfg)


def _noisy_agent_pose(
    scenario: Scenario, agent_idx: int, cfg: ExperimentConfig, sigma_t: float, sigma_r: float, tag: int, frame: int = 0
) -> tuple[Pose, float]:
    agent = scenario.agents[agent_idx]
    rng = np.random.default_rng((scenario.seed, tag, frame, agent_idx))
    noisy = perturb_pose(agent.gt_pose, GaussianPoseNoise(sigma_t, sigma_r), rng)
    t_err, _ = pose_error(noisy, agent.gt_pose)
    return noisy, confidence_from_error(t_err)


def _build_encoder(cfg: ExperimentConfig) -> EncoderParams:
    channels = 4  # occupancy, density, max height, confidence plane
    if cfg.encoder.mode == "random":
        rng = np.random.default_rng((cfg.seed, _TAG_ENCODER))
        return EncoderParams.seeded(
            in_channels=channels, dim=cfg.encoder.dim, heads=cfg.encoder.heads,
            num_layers=cfg.encoder.layers, hidden=cfg.encoder.hidden, rng=rng,
        )
    return EncoderParams.passthrough(
        in_channels=channels, dim=cfg.encoder.dim, heads=cfg.encoder.heads,
        num_layers=cfg.encoder.layers, hidden=cfg.encoder.hidden,
    )


def _box_blur(field: np.ndarray) -> np.ndarray:
    """3x3 normalized box filter with zero padding."""
    h, w = field.shape
    pad = np.zeros((h + 2, w + 2))
    pad[1:-1, 1:-1] = field
    out = np.zeros((h, w))
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            out += pad[1 + dr : 1 + dr + h, 1 + dc : 1 + dc + w]
    return out / 9.0


def _search_grid(grid: BevGrid, channel: int) -> BevGrid:
    """Single-channel blurred copy used for residual offset search. Both
    sides get the same blur, so the crisp local raster and the already
    interpolation-smoothed warped neighbor present matched sharpness to the
    correlator."""
    return BevGrid(grid.spec, _box_blur(grid.data[channel])[None, :, :])


def build_head(cfg: ExperimentConfig) -> HeadParams:
    """Analytic decode head for the passthrough encoder: objectness is a
    clipped linear ramp in fused max height above a floor, extents and
    center offsets are constants. The temporal encoding adds a constant to
    every channel at the readout frame, so the objectness bias subtracts
    the constant seen by the max-height channel."""
    dim = cfg.encoder.dim
    e_t = temporal_encoding(float(cfg.frames), dim)
    weight = np.zeros((8, dim))
    bias = np.zeros(8)
    gain = cfg.head.height_gain
    weight[0, 2] = gain
    bias[0] = -gain * (cfg.head.height_floor + float(e_t[2]))
    bias[3] = cfg.head.nominal_z
    bias[4] = math.log(cfg.head.nominal_h)
    bias[5] = math.log(cfg.head.nominal_w)
    bias[6] = math.log(cfg.head.nominal_l)
    return HeadParams(weight=weight, bias=bias)


# ---------------------------------------------------------------------------
# end-to-end pipeline


@dataclass(frozen=True, eq=False)
class PipelineResult:
    detections: tuple[Detection, ...]
    targets: tuple[RotatedBox3D, ...]
    fused: BevGrid
    ledger: CommLedger
    pose_estimates: dict
    residual_offsets: dict


def run_pipeline(
    scenario: Scenario,
    cfg: ExperimentConfig,
    pose_source: str = "pgc",
    noise: tuple[float, float] = (0.0, 0.0),
) -> PipelineResult:
    """Run localization, alignment, fusion, encoding and decoding for one
    scenario from the perspective of agent 0.

    pose_source selects how agent poses are obtained: "pgc" runs the
    scene-coordinate oracle plus the robust solver, "gt-noise" perturbs the
    true poses by the given noise level, "gt" uses exact poses, and "none"
    disables fusion entirely (single-agent baseline). The "pgc", "gt" and
    "none" paths never consume the noise argument, so their outputs are
    unchanged across noise levels by construction.
    """
    if pose_source not in ("pgc", "gt-noise", "gt", "none"):
        raise ValueError(f"unknown pose_source {pose_source!r}")
    spec = cfg.grid_spec()
    ego = scenario.agents[0]
    ledger = CommLedger()
    pose_estimates: dict = {}
    residual_offsets: dict = {}

    frames = []
    for frame in range(cfg.frames):
        grids = {a.agent_id: rasterize_bev(a.cloud, spec) for a in scenario.agents}

        poses: dict[int, Pose] = {}
        sigmas: dict[int, float] = {}
        msg_bytes: dict[int, int] = {}
        agent_ids = [a.agent_id for a in scenario.agents]
        if pose_source == "none":
            agent_ids = [ego.agent_id]

        for k in agent_ids:
            if pose_source == "pgc":
                est = _estimate_agent_pose(scenario, k, cfg, _TAG_ORACLE, _TAG_RANSAC, frame)
                pose_estimates[(frame, k)] = est
                if est is None:
                    logger.warning("scenario %d agent %d: pose estimation failed, agent dropped", scenario.seed, k)
                    continue
                poses[k] = est.pose
                sigmas[k] = est.confidence
                msg_bytes[k] = est.message_bytes()
            elif pose_source == "gt-noise":
                noisy, sigma = _noisy_agent_pose(scenario, k, cfg, noise[0], noise[1], _TAG_GNSS, frame)
                poses[k] = noisy
                sigmas[k] = sigma
                msg_bytes[k] = len(pose_message_json(noisy, sigma, 0.0, 1.0).encode("utf-8"))
                pose_estimates[(frame, k)] = noisy
            else:
                poses[k] = scenario.agents[k].gt_pose
                sigmas[k] = 1.0
                msg_bytes[k] = len(pose_message_json(poses[k], 1.0, 0.0, 1.0).encode("utf-8"))
                pose_estimates[(frame, k)] = poses[k]

        if ego.agent_id not in poses:
            # no usable ego pose: fall back to the raw single-agent view
            fused_inputs = [grids[ego.agent_id]]
            weights = [1.0]
        else:
            neighbor_ids = [k for k in poses if k != ego.agent_id]
            neighbor_grids = []
            for k in neighbor_ids:
                ledger.add(k, ego.agent_id, "pose", msg_bytes[k])
                ledger.add(k, ego.agent_id, "features", len(serialize_grid(grids[k])))
                neighbor_grids.append((grids[k], poses[k]))
            warped = coarse_align(poses[ego.agent_id], neighbor_grids)
            deltas = []
            # correlate on blurred max height: ground sits at z = 0 in that
            # channel, so the disk-shaped sensing footprints cannot dominate
            ego_search = _search_grid(grids[ego.agent_id], 2)
            for k, grid in zip(neighbor_ids, warped):
                try:
                    delta = estimate_offset(ego_search, _search_grid(grid, 2), cfg.search)
                except NoSignalError:
                    delta = OffsetDelta(0.0, 0.0, 0.0)
                residual_offsets[(frame, k)] = delta
                deltas.append(delta.invert())
            corrected = apply_offset(warped, deltas)
            fused_inputs = [grids[ego.agent_id]] + corrected
            weights = [sigmas[ego.agent_id]] + [sigmas[k] for k in neighbor_ids]

        embedded = confidence_embed(fused_inputs, weights)
        total = sum(weights)
        stack = np.zeros_like(embedded[0].data)
        for w, grid in zip(weights, embedded):
            stack = stack + (w / total) * grid.data
        frames.append(BevGrid(spec, stack))

    params = _build_encoder(cfg)
    fused = encode(params, frames)
    head = build_head(cfg)
    dets = decode_head(fused, head, cfg.eval, nms_iou=cfg.head.nms_iou)
    dets = [d for d in dets if _in_roi(d.box.x, d.box.y, spec)]
    targets = tuple(ego_frame_targets(scenario, spec))
    return PipelineResult(
        detections=tuple(dets),
        targets=targets,
        fused=fused,
        ledger=ledger,
        pose_estimates=pose_estimates,
        residual_offsets=residual_offsets,
    )


# ---------------------------------------------------------------------------
# alignment benchmark


@dataclass(frozen=True)
class AlignmentRow:
    scenario_id: int
    method: str
    ego_id: int
    neighbor_id: int
    translation_error: float
    rotation_error: float
    success: bool
    message_bytes: int
    time_s: float


@dataclass
class AlignmentReport:
    rows: list[AlignmentRow]

    def aggregates(self) -> dict:
        """Deterministic per-method summary. Wall time is deliberately
        absent; it lives in the timings sidecar only."""
        out: dict = {}
        for method in sorted({r.method for r in self.rows}):
            rows = [r for r in self.rows if r.method == method]
            n = len(rows)
            succ = sum(1 for r in rows if r.success)
            mean_bytes = sum(r.message_bytes for r in rows) / n
            finite = [r.translation_error for r in rows if math.isfinite(r.translation_error)]
            out[method] = {
                "rows": n,
                "delta_s_percent": 100.0 * succ / n,
                "log2_mean_bytes": math.log2(mean_bytes) if mean_bytes > 0 else 0.0,
                "median_translation_error": float(np.median(finite)) if finite else float("inf"),
            }
        return out

    def mean_time_s(self, method: str) -> float:
        rows = [r for r in self.rows if r.method == method]
        return sum(r.time_s for r in rows) / len(rows) if rows else 0.0


def _timed(fn):
    """Median-of-3 wall time; fn must be deterministic across repeats."""
    result = None
    times = []
    for _ in range(3):
        t0 = time.perf_counter()
        result = fn()
        times.append(time.perf_counter() - t0)
    return result, sorted(times)[1]


def _relative_errors(est_rel, gt_rel) -> tuple[float, float]:
    t_err, r_err = pose_error(est_rel, gt_rel)
    return t_err, r_err


def _benchmark_scenario(cfg: ExperimentConfig, scenario_id: int) -> list[AlignmentRow]:
    scenario = generate_scenario(cfg.scenario, _derived_seed(cfg.seed, 1, scenario_id))
    ego = scenario.agents[0]
    rows: list[AlignmentRow] = []
    obs_cache = {a.agent_id: agent_box_observation(scenario, a.agent_id) for a in scenario.agents}

    for nbr in scenario.agents[1:]:
        gt_rel = relative(ego.gt_pose, nbr.gt_pose)

        for method in cfg.methods:
            if method == "pgc":
                def run_pgc():
                    est_e = _estimate_agent_pose(scenario, ego.agent_id, cfg, _TAG_BENCH_ORACLE, _TAG_BENCH_RANSAC)
                    est_n = _estimate_agent_pose(scenario, nbr.agent_id, cfg, _TAG_BENCH_ORACLE, _TAG_BENCH_RANSAC)
                    return est_e, est_n

                (est_e, est_n), t = _timed(run_pgc)
                if est_e is None or est_n is None:
                    rows.append(AlignmentRow(scenario_id, method, ego.agent_id, nbr.agent_id,
                                             float("inf"), float("inf"), False, 0, t))
                    continue
                t_err, r_err = _relative_errors(relative(est_e.pose, est_n.pose), gt_rel)
                rows.append(AlignmentRow(scenario_id, method, ego.agent_id, nbr.agent_id,
                                         t_err, r_err, t_err < _SUCCESS_TRANSLATION_M,
                                         est_n.message_bytes(), t))
            elif method == "icp":
                src_pts = obs_cache[nbr.agent_id].centers()
                dst_pts = obs_cache[ego.agent_id].centers()

                def run_icp():
                    if len(src_pts) == 0 or len(dst_pts) == 0:
                        return None
                    return icp_align(PointCloud(src_pts), PointCloud(dst_pts), cfg.icp)

                result, t = _timed(run_icp)
                nbytes = obs_cache[nbr.agent_id].message_bytes()
                if result is None:
                    rows.append(AlignmentRow(scenario_id, method, ego.agent_id, nbr.agent_id,
                                             float("inf"), float("inf"), False, nbytes, t))
                    continue
                t_err, r_err = _relative_errors(result.pose, gt_rel)
                rows.append(AlignmentRow(scenario_id, method, ego.agent_id, nbr.agent_id,
                                         t_err, r_err, t_err < _SUCCESS_TRANSLATION_M, nbytes, t))
            elif method == "graph":
                def run_graph():
                    return graph_match_align(obs_cache[ego.agent_id], obs_cache[nbr.agent_id], cfg.graph)

                result, t = _timed(run_graph)
                nbytes = obs_cache[nbr.agent_id].message_bytes()
                if result is None:
                    rows.append(AlignmentRow(scenario_id, method, ego.agent_id, nbr.agent_id,
                                             float("inf"), float("inf"), False, nbytes, t))
                    continue
                t_err, r_err = _relative_errors(result.pose, gt_rel)
                rows.append(AlignmentRow(scenario_id, method, ego.agent_id, nbr.agent_id,
                                         t_err, r_err, t_err < _SUCCESS_TRANSLATION_M, nbytes, t))
            elif method == "gt-noise":
                st, sr = cfg.alignment_noise

                def run_noise():
                    pe, ce = _noisy_agent_pose(scenario, ego.agent_id, cfg, st, sr, _TAG_BENCH_GNSS)
                    pn, cn = _noisy_agent_pose(scenario, nbr.agent_id, cfg, st, sr, _TAG_BENCH_GNSS)
                    return pe, ce, pn, cn

                (pe, _, pn, cn), t = _timed(run_noise)
                t_err, r_err = _relative_errors(relative(pe, pn), gt_rel)
                nbytes = len(pose_message_json(pn, cn, 0.0, 1.0).encode("utf-8"))
                rows.append(AlignmentRow(scenario_id, method, ego.agent_id, nbr.agent_id,
                                         t_err, r_err, t_err < _SUCCESS_TRANSLATION_M, nbytes, t))
    return rows


def _benchmark_worker(args) -> list[AlignmentRow]:
    cfg_dict, scenario_id = args
    return _benchmark_scenario(config_from_dict(cfg_dict), scenario_id)


def run_alignment_benchmark(cfg: ExperimentConfig, parallel: int = 1) -> AlignmentReport:
    """Relative pose estimation across methods over generated scenarios."""
    logger.info("alignment benchmark: %d scenarios, %d worker(s)", cfg.num_scenarios, parallel)
    rows: list[AlignmentRow] = []
    if parallel > 1:
        cfg_dict = cfg.to_dict()
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            for chunk in pool.map(_benchmark_worker, [(cfg_dict, i) for i in range(cfg.num_scenarios)]):
                rows.extend(chunk)
    else:
        for i in range(cfg.num_scenarios):
            rows.extend(_benchmark_scenario(cfg, i))
    return AlignmentReport(rows=rows)


# ---------------------------------------------------------------------------
# pose-noise sweep


@dataclass(frozen=True)
class SweepRow:
    scenario_id: int
    method: str
    sigma_t: float
    sigma_r: float
    iou_threshold: float
    ap: float


@dataclass
class SweepReport:
    rows: list[SweepRow]
    pooled: dict  # method -> "st/sr" -> "thr" -> ap

    def pooled_ap(self, method: str, level: tuple[float, float], threshold: float) -> float:
        return self.pooled[method][f"{level[0]:g}/{level[1]:g}"][f"{threshold:g}"]


def _sweep_scenario(cfg: ExperimentConfig, scenario_id: int):
    scenario = generate_scenario(cfg.scenario, _derived_seed(cfg.seed, 1, scenario_id))
    out = {}
    for level_idx, level in enumerate(cfg.noise_levels):
        for method in SWEEP_METHODS:
            result = run_pipeline(scenario, cfg, pose_source=method, noise=level)
            dets = [d.box.as_list() + [d.score] for d in result.detections]
            gts = [b.as_list() for b in result.targets]
            out[(method, level_idx)] = (dets, gts)
    return scenario_id, out


def _sweep_worker(args):
    cfg_dict, scenario_id = args
    return _sweep_scenario(config_from_dict(cfg_dict), scenario_id)


def _rebuild(dets_rows, gt_rows):
    dets = [Detection(RotatedBox3D(*row[:7]), row[7]) for row in dets_rows]
    gts = [RotatedBox3D(*row) for row in gt_rows]
    return dets, gts


def run_noise_sweep(cfg: ExperimentConfig, parallel: int = 1) -> SweepReport:
    """Detection quality as a function of injected pose noise.

    The noisy-pose pipeline is rerun per level; the robust-localization and
    no-fusion pipelines are also rerun per level even though their outputs
    cannot depend on the level, which makes their flatness an observed
    property of the run rather than an assumption baked into the report.
    """
    logger.info(
        "noise sweep: %d scenarios x %d levels, %d worker(s)",
        cfg.num_scenarios, len(cfg.noise_levels), parallel,
    )
    results = {}
    if parallel > 1:
        cfg_dict = cfg.to_dict()
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            for scenario_id, data in pool.map(_sweep_worker, [(cfg_dict, i) for i in range(cfg.num_scenarios)]):
                results[scenario_id] = data
    else:
        for i in range(cfg.num_scenarios):
            scenario_id, data = _sweep_scenario(cfg, i)
            results[scenario_id] = data
            logger.debug("sweep scenario %d done", scenario_id)

    rows: list[SweepRow] = []
    pooled: dict = {}
    for method in SWEEP_METHODS:
        pooled[method] = {}
        for level_idx, (st, sr) in enumerate(cfg.noise_levels):
            frames = []
            for i in range(cfg.num_scenarios):
                dets_rows, gt_rows = results[i][(method, level_idx)]
                dets, gts = _rebuild(dets_rows, gt_rows)
                frames.append((dets, gts))
                for thr in cfg.eval.iou_thresholds:
                    rows.append(SweepRow(i, method, st, sr, thr, average_precision(dets, gts, thr)))
            level_key = f"{st:g}/{sr:g}"
            pooled[method][level_key] = {
                f"{thr:g}": pooled_average_precision(frames, thr) for thr in cfg.eval.iou_thresholds
            }
    return SweepReport(rows=rows, pooled=pooled)


# ---------------------------------------------------------------------------
# report emission

_FLOAT_FMT = "%.17g"


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return _FLOAT_FMT % value
    return str(value)


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def emit_alignment_report(report: AlignmentReport, out_dir: str | Path) -> dict[str, Path]:
    """Write alignment_results.csv, alignment_summary.json and the timing
    sidecar. Wall times live only in alignment_timings.csv; the other two
    files are byte-identical across reruns with the same config."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    results = out / "alignment_results.csv"
    _write_csv(
        results,
        ["scenario_id", "method", "ego_id", "neighbor_id", "translation_error_m",
         "rotation_error_deg", "success", "message_bytes"],
        [[r.scenario_id, r.method, r.ego_id, r.neighbor_id, r.translation_error,
          r.rotation_error, r.success, r.message_bytes] for r in report.rows],
    )
    timings = out / "alignment_timings.csv"
    _write_csv(
        timings,
        ["scenario_id", "method", "ego_id", "neighbor_id", "time_s"],
        [[r.scenario_id, r.method, r.ego_id, r.neighbor_id, r.time_s] for r in report.rows],
    )
    summary = out / "alignment_summary.json"
    summary.write_text(json.dumps({"methods": report.aggregates()}, indent=2, sort_keys=True) + "\n")
    return {"results": results, "summary": summary, "timings": timings}


def emit_sweep_report(report: SweepReport, out_dir: str | Path) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    results = out / "sweep_results.csv"
    _write_csv(
        results,
        ["scenario_id", "method", "sigma_t", "sigma_r", "iou_threshold", "ap"],
        [[r.scenario_id, r.method, r.sigma_t, r.sigma_r, r.iou_threshold, r.ap] for r in report.rows],
    )
    summary = out / "sweep_summary.json"
    summary.write_text(json.dumps({"pooled": report.pooled}, indent=2, sort_keys=True) + "\n")
    return {"results": results, "summary": summary}


def emit_scenario(scenario: Scenario, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "seed": scenario.seed,
        "world_objects": [b.as_list() for b in scenario.world_objects],
        "agents": [],
    }
    for agent in scenario.agents:
        fname = f"agent_{agent.agent_id:02d}.pcb"
        save_points_binary(agent.cloud, out / fname)
        manifest["agents"].append(
            {
                "id": agent.agent_id,
                "pose_rt": [float(v) for v in agent.gt_pose.flat_rt()],
                "visible": list(agent.visible),
                "cloud_file": fname,
            }
        )
    path = out / "scenario.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_scenario(directory: str | Path) -> Scenario:
    d = Path(directory)
    manifest = json.loads((d / "scenario.json").read_text())
    boxes = tuple(RotatedBox3D(*row) for row in manifest["world_objects"])
    agents = []
    for entry in manifest["agents"]:
        cloud = load_point_cloud(d / entry["cloud_file"])
        agents.append(
            AgentObservation(
                agent_id=int(entry["id"]),
                gt_pose=Pose.from_flat_rt(entry["pose_rt"]),
                cloud=cloud,
                visible=tuple(int(i) for i in entry["visible"]),
            )
        )
    return Scenario(seed=int(manifest["seed"]), agents=tuple(agents), world_objects=boxes)


def generate_and_emit(cfg: ExperimentConfig, out_dir: str | Path) -> list[Path]:
    paths = []
    for i in range(cfg.num_scenarios):
        scenario = generate_scenario(cfg.scenario, _derived_seed(cfg.seed, 1, i))
        paths.append(emit_scenario(scenario, Path(out_dir) / f"scenario_{i:03d}"))
    return paths


# ---------------------------------------------------------------------------
# selftest


def selftest() -> list[tuple[str, bool]]:
    """Fast invariant checks over the core primitives. Returns (name, ok)
    pairs; the CLI treats any failure as a runtime error."""
    from . import detection as det
    from .fusion import GridSpec as GS
    from .localization import kabsch_solve
    from .temporal import EncoderParams as EP, encode as enc

    checks: list[tuple[str, bool]] = []
    rng = np.random.default_rng(12345)

    # the geodesic angle behaves like sqrt of the trace rounding error near
    # zero, so rotation tolerances sit well above 1e-9
    ok = True
    for _ in range(25):
        a = Pose.from_planar(*rng.uniform(-5, 5, size=2), rng.uniform(-3, 3))
        b = Pose.from_planar(*rng.uniform(-5, 5, size=2), rng.uniform(-3, 3))
        rel = relative(a, b)
        back = compose(a, rel)
        t_err, r_err = pose_error(back, b)
        ok = ok and t_err < 1e-9 and r_err < 1e-5
        ident = compose(a, inverse(a))
        t_err, r_err = pose_error(ident, Pose.identity())
        ok = ok and t_err < 1e-9 and r_err < 1e-5
    checks.append(("pose_group_laws", ok))

    errs = np.array([0.0, 0.5, 1.0, 2.0])
    conf = np.array([confidence_from_error(e) for e in errs])
    ok = bool(np.all(np.diff(conf) < 0)) and abs(conf[0] - 1.0) < 1e-15 and abs(conf[2] - 0.5) < 1e-15
    checks.append(("confidence_mapping", ok))

    enc0 = temporal_encoding(0.0, 8)
    ok = bool(np.allclose(enc0[0::2], 0.0) and np.allclose(enc0[1::2], 1.0))
    checks.append(("temporal_encoding_t0", ok))

    spec = GS.centered(8, 8, 1.0)
    grid = rasterize_bev(PointCloud(rng.uniform(-3, 3, size=(60, 3))), spec)
    params = EP.passthrough(dim=6, in_channels=grid.data.shape[0] + 1, heads=2, num_layers=2, hidden=8)
    embedded = confidence_embed([grid], [2.5])[0]
    out = enc(params, [embedded])
    e_t = temporal_encoding(1.0, 6)
    recon = out.data[: embedded.data.shape[0]] - e_t[: embedded.data.shape[0], None, None]
    ok = bool(np.allclose(recon, embedded.data, atol=1e-12))
    checks.append(("residual_identity", ok))

    grids = [grid, rasterize_bev(PointCloud(rng.uniform(-3, 3, size=(40, 3))), spec)]
    planes = confidence_embed(grids, [0.3, 0.9])
    total = planes[0].data[-1] + planes[1].data[-1]
    ok = bool(np.allclose(total, 1.0, atol=1e-12))
    checks.append(("confidence_weights", ok))

    warped = warp_grid(grid, OffsetDelta(0.0, 0.0, 0.0).as_pose2d())
    ok = bool(np.array_equal(warped.data, grid.data))
    checks.append(("warp_identity", ok))

    b1 = RotatedBox3D(0, 0, 1, 2, 2, 2, 0.0)
    b2 = RotatedBox3D(1, 0, 1, 2, 2, 2, 0.0)
    b3 = RotatedBox3D(10, 0, 1, 2, 2, 2, 0.0)
    ok = (
        abs(det.rotated_iou_bev(b1, b1) - 1.0) < 1e-12
        and det.rotated_iou_bev(b1, b3) == 0.0
        and abs(det.rotated_iou_bev(b1, b2) - 1.0 / 3.0) < 1e-12
    )
    checks.append(("rotated_iou_cases", ok))

    pts = rng.uniform(-4, 4, size=(30, 3))
    true_pose = Pose.from_planar(1.5, -2.0, 0.7)
    world = pts @ true_pose.rotation.T + true_pose.translation
    solved = kabsch_solve(pts, world)
    t_err, r_err = pose_error(solved, true_pose)
    checks.append(("rigid_solve_recovery", t_err < 1e-9 and r_err < 1e-5))

    ok = abs(normalize_angle(math.pi) - math.pi) < 1e-15 and abs(normalize_angle(-math.pi) - math.pi) < 1e-15
    ok = ok and abs(normalize_angle(3 * math.pi) - math.pi) < 1e-12
    checks.append(("angle_normalization", ok))

    gt = [RotatedBox3D(0, 0, 1, 2, 2, 4, 0.0)]
    dets = [det.Detection(gt[0], 0.9)]
    ok = abs(det.average_precision(dets, gt, 0.5) - 1.0) < 1e-12
    ok = ok and det.average_precision([], gt, 0.5) == 0.0
    ok = ok and det.average_precision(dets, [], 0.5) == 0.0
    checks.append(("average_precision_edges", ok))

    return checks
