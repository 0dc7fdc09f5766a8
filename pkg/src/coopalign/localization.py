"""Map-free pose estimation from per-point scene-coordinate predictions.

A synthetic oracle stands in for a learned scene-coordinate regressor: it maps
a local cloud into world coordinates through the ground-truth pose, corrupts
the result with a structured noise model, and reports a per-point error
estimate of configurable fidelity. A RANSAC rigid solve turns the predicted
correspondences into a pose, and the mean predicted error over the consensus
set becomes a confidence in (0, 1].
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .geometry import (
    Pose,
    PointCloud,
    StructuredLocNoise,
    sample_structured_offsets,
    transform_points,
)


class DegenerateSampleError(ValueError):
    """Raised when a rigid fit is attempted on a rank-deficient point set."""


@dataclass(frozen=True, eq=False)
class SceneCoordPrediction:
    """Per-point world-coordinate predictions for a local cloud.

    predicted_error holds the regressor's own error estimates (meters, one per
    point). gt_world is optional and only needed for supervised losses."""

    local_points: PointCloud
    predicted_world: PointCloud
    predicted_error: np.ndarray
    gt_world: PointCloud | None = None

    def __post_init__(self) -> None:
        err = np.array(self.predicted_error, dtype=float).reshape(-1)
        n = len(self.local_points)
        if len(self.predicted_world) != n or err.shape[0] != n:
            raise ValueError("prediction arrays must share one length")
        if self.gt_world is not None and len(self.gt_world) != n:
            raise ValueError("gt_world must match the prediction length")
        if not np.isfinite(err).all() or (err < 0.0).any():
            raise ValueError("predicted_error must be finite and non-negative")
        err.setflags(write=False)
        object.__setattr__(self, "predicted_error", err)

    def __len__(self) -> int:
        return len(self.local_points)


@dataclass(frozen=True)
class OracleErrorModel:
    """Noise model plus the fidelity of the per-point error estimates.

    fidelity 1.0 reports each point's true error exactly; fidelity 0.0 reports
    errors drawn from the right marginal distribution but uncorrelated with
    which point is actually bad."""

    noise: StructuredLocNoise
    error_prediction_fidelity: float = 1.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.error_prediction_fidelity <= 1.0:
            raise ValueError("error_prediction_fidelity must lie in [0, 1]")


@dataclass(frozen=True)
class RansacConfig:
    max_iterations: int = 256
    inlier_threshold: float = 0.5
    sample_size: int = 3
    min_inliers: int = 10
    confidence_stop: float = 0.999
    seed: int = 0

    def __post_init__(self) -> None:
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be positive")
        if self.inlier_threshold <= 0.0:
            raise ValueError("inlier_threshold must be positive")
        if self.sample_size < 3:
            raise ValueError("sample_size must be at least 3")
        if self.min_inliers < self.sample_size:
            raise ValueError("min_inliers must be at least sample_size")
        if not 0.0 <= self.confidence_stop <= 1.0:
            raise ValueError("confidence_stop must lie in [0, 1]")


@dataclass(frozen=True, eq=False)
class PoseEstimate:
    """RANSAC output: pose, confidence = 1 / (1 + err^2), and bookkeeping."""

    pose: Pose
    confidence: float
    aggregated_error: float
    inlier_indices: np.ndarray
    inlier_ratio: float

    def __post_init__(self) -> None:
        idx = np.array(self.inlier_indices, dtype=int)
        idx.setflags(write=False)
        object.__setattr__(self, "inlier_indices", idx)
        if not 0.0 < self.confidence <= 1.0:
            raise ValueError("confidence must lie in (0, 1]")
        if not 0.0 <= self.inlier_ratio <= 1.0:
            raise ValueError("inlier_ratio must lie in [0, 1]")

    def to_message_json(self) -> str:
        return pose_message_json(
            self.pose, self.confidence, self.aggregated_error, self.inlier_ratio
        )

    def message_bytes(self) -> int:
        return len(self.to_message_json().encode("utf-8"))


def pose_message_json(
    pose: Pose, confidence: float, aggregated_error: float, inlier_ratio: float
) -> str:
    """Compact deterministic wire format: 12 row-major [R | t] floats plus the
    three scalar quality fields."""
    payload = {
        "pose": pose.flat_rt(),
        "confidence": float(confidence),
        "aggregated_error": float(aggregated_error),
        "inlier_ratio": float(inlier_ratio),
    }
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def confidence_from_error(eps: float) -> float:
    """Map an aggregated localization error (meters) to (0, 1]."""
    eps = float(eps)
    if eps < 0.0 or not math.isfinite(eps):
        raise ValueError("error must be finite and non-negative")
    return 1.0 / (1.0 + eps * eps)


def coordinate_error(pred: np.ndarray, gt: np.ndarray, norm: str = "l1") -> float:
    """Distance between a predicted and a true world coordinate.

    The default is the L1 norm; pass norm="l2" for Euclidean."""
    diff = np.asarray(pred, dtype=float) - np.asarray(gt, dtype=float)
    if not np.isfinite(diff).all():
        raise ValueError("coordinates must be finite")
    if norm == "l1":
        return float(np.abs(diff).sum())
    if norm == "l2":
        return float(np.linalg.norm(diff))
    raise ValueError(f"unknown norm {norm!r}")


def regression_loss(pred: SceneCoordPrediction, norm: str = "l1") -> float:
    """Mean over points of u_i + |u_i - eps_i| where u_i is the coordinate
    error against ground truth and eps_i the predicted error. Requires
    gt_world."""
    if pred.gt_world is None:
        raise ValueError("regression_loss requires ground-truth world points")
    diff = pred.predicted_world.points - pred.gt_world.points
    if norm == "l1":
        u = np.abs(diff).sum(axis=1)
    elif norm == "l2":
        u = np.linalg.norm(diff, axis=1)
    else:
        raise ValueError(f"unknown norm {norm!r}")
    return float(np.mean(u + np.abs(u - pred.predicted_error)))


def voxel_downsample(cloud: PointCloud, voxel: float) -> PointCloud:
    """Replace each occupied voxel with the centroid of its points.

    Output order follows the first occurrence of each voxel in the input, so
    the result is deterministic. Attributes are dropped."""
    if voxel <= 0.0:
        raise ValueError("voxel size must be positive")
    pts = cloud.points
    if len(cloud) == 0:
        return PointCloud(np.zeros((0, 3)))
    keys = np.floor(pts / voxel).astype(np.int64)
    _, inverse_idx, counts = np.unique(
        keys, axis=0, return_inverse=True, return_counts=True
    )
    inverse_idx = inverse_idx.reshape(-1)
    sums = np.zeros((counts.shape[0], 3))
    np.add.at(sums, inverse_idx, pts)
    centroids = sums / counts[:, None]
    first_seen = np.full(counts.shape[0], pts.shape[0], dtype=np.int64)
    np.minimum.at(first_seen, inverse_idx, np.arange(pts.shape[0]))
    return PointCloud(centroids[np.argsort(first_seen, kind="stable")])


def oracle_predict(
    cloud: PointCloud,
    gt_pose: Pose,
    model: OracleErrorModel,
    rng: np.random.Generator,
) -> SceneCoordPrediction:
    """Synthesize scene-coordinate predictions for a local cloud.

    World coordinates are the ground-truth transform of the cloud plus
    structured offsets drawn at the true world positions. The reported
    per-point error blends the true error with a shuffled copy of itself:
    fidelity * true + (1 - fidelity) * shuffled, which keeps the marginal
    distribution while degrading per-point informativeness."""
    if len(cloud) == 0:
        raise ValueError("cannot predict coordinates for an empty cloud")
    gt_world = transform_points(gt_pose, cloud)
    offsets, _ = sample_structured_offsets(model.noise, gt_world.points, rng)
    predicted = PointCloud(gt_world.points + offsets)
    true_err = np.abs(offsets).sum(axis=1)
    shuffled = rng.permutation(true_err)
    fid = model.error_prediction_fidelity
    predicted_error = fid * true_err + (1.0 - fid) * shuffled
    return SceneCoordPrediction(
        local_points=cloud,
        predicted_world=predicted,
        predicted_error=predicted_error,
        gt_world=gt_world,
    )


def _kabsch_arrays(local: np.ndarray, world: np.ndarray) -> Pose:
    if local.shape[0] < 3:
        raise DegenerateSampleError("rigid fit needs at least 3 points")
    centroid_l = local.mean(axis=0)
    centroid_w = world.mean(axis=0)
    h = (local - centroid_l).T @ (world - centroid_w)
    u, s, vt = np.linalg.svd(h)
    if s[0] <= 0.0 or s[1] <= 1e-9 * s[0]:
        raise DegenerateSampleError("point set is collinear or coincident")
    d = np.sign(np.linalg.det(vt.T @ u.T))
    rot = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return Pose(rot, centroid_w - rot @ centroid_l)


def kabsch_solve(local: PointCloud | np.ndarray, world: PointCloud | np.ndarray) -> Pose:
    """Least-squares rigid transform mapping local points onto world points.

    SVD solve with reflection correction. Raises DegenerateSampleError for
    fewer than 3 points or a collinear arrangement."""
    lp = local.points if isinstance(local, PointCloud) else np.asarray(local, dtype=float)
    wp = world.points if isinstance(world, PointCloud) else np.asarray(world, dtype=float)
    if lp.shape != wp.shape:
        raise ValueError("local and world point sets must have equal shapes")
    return _kabsch_arrays(lp, wp)


def ransac_pose(pred: SceneCoordPrediction, cfg: RansacConfig) -> PoseEstimate | None:
    """RANSAC rigid solve over predicted correspondences.

    Each iteration draws its minimal sample from an iteration-indexed
    substream of cfg.seed, so results are bitwise reproducible and independent
    of evaluation order. The best hypothesis is the one with the most inliers,
    ties broken by lower mean inlier residual, then earlier iteration. Stops
    early once the standard (1 - (1 - w^s)^k) bound reaches confidence_stop.
    Returns None when the best consensus set is smaller than min_inliers."""
    local = pred.local_points.points
    world = pred.predicted_world.points
    n = local.shape[0]
    if n < cfg.sample_size:
        raise ValueError("fewer points than sample_size")

    best_count = -1
    best_mean = math.inf
    best_mask: np.ndarray | None = None
    best_pose: Pose | None = None
    needed = float(cfg.max_iterations)

    for it in range(cfg.max_iterations):
        rng_it = np.random.default_rng((cfg.seed, it))
        idx = rng_it.choice(n, size=cfg.sample_size, replace=False)
        try:
            pose = _kabsch_arrays(local[idx], world[idx])
        except DegenerateSampleError:
            continue
        resid = np.linalg.norm(local @ pose.rotation.T + pose.translation - world, axis=1)
        mask = resid < cfg.inlier_threshold
        count = int(mask.sum())
        mean_resid = float(resid[mask].mean()) if count else math.inf
        if count > best_count or (count == best_count and mean_resid < best_mean):
            best_count = count
            best_mean = mean_resid
            best_mask = mask
            best_pose = pose
            w = best_count / n
            if w >= 1.0:
                needed = 0.0
            else:
                hit = w ** cfg.sample_size
                if hit > 0.0 and cfg.confidence_stop < 1.0:
                    needed = math.log(1.0 - cfg.confidence_stop) / math.log(1.0 - hit)
        if it + 1 >= needed:
            break

    if best_pose is None or best_mask is None or best_count < cfg.min_inliers:
        return None

    inlier_idx = np.flatnonzero(best_mask)
    try:
        refit = _kabsch_arrays(local[inlier_idx], world[inlier_idx])
    except DegenerateSampleError:
        refit = best_pose
    agg = float(pred.predicted_error[inlier_idx].mean())
    return PoseEstimate(
        pose=refit,
        confidence=confidence_from_error(agg),
        aggregated_error=agg,
        inlier_indices=inlier_idx,
        inlier_ratio=best_count / n,
    )
