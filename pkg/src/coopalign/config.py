"""Experiment configuration: typed parameter groups, JSON loading with strict
validation, and round-tripping for worker processes."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .baselines import GraphMatchConfig, IcpConfig
from .detection import EvalConfig
from .fusion import GridSpec, OffsetSearch
from .geometry import StructuredLocNoise
from .localization import OracleErrorModel, RansacConfig


class ConfigError(ValueError):
    """Invalid experiment configuration; the CLI maps this to exit code 1."""


@dataclass(frozen=True)
class ScenarioParams:
    num_agents: int = 2
    num_objects: int = 8
    world_size: float = 80.0
    sensing_range: float = 25.0
    co_visible: int | None = None
    points_per_box: int = 120
    ground_points: int = 400
    min_agent_distance: float = 12.0
    max_agent_distance: float = 20.0
    occluder_radius: float = 1.2

    def __post_init__(self) -> None:
        if self.num_agents < 1:
            raise ConfigError("num_agents must be at least 1")
        if self.num_objects < 0 or self.points_per_box < 1 or self.ground_points < 0:
            raise ConfigError("object and point counts must be non-negative")
        if self.world_size <= 0.0 or self.sensing_range <= 0.0:
            raise ConfigError("world_size and sensing_range must be positive")
        if self.co_visible is not None:
            if self.num_agents < 2:
                raise ConfigError("co_visible control needs at least 2 agents")
            if not 0 <= self.co_visible <= self.num_objects:
                raise ConfigError("co_visible must lie in [0, num_objects]")
        if not 0.0 < self.min_agent_distance <= self.max_agent_distance:
            raise ConfigError("agent distance bounds must satisfy 0 < min <= max")
        if self.occluder_radius < 0.0:
            raise ConfigError("occluder_radius must be non-negative")


@dataclass(frozen=True)
class OracleParams:
    inlier_sigma: float = 0.02
    outlier_fraction: float = 0.3
    outlier_scale: float = 5.0
    bias_correlation_length: float = 20.0
    error_fidelity: float = 0.9

    def build(self) -> OracleErrorModel:
        return OracleErrorModel(
            noise=StructuredLocNoise(
                inlier_sigma=self.inlier_sigma,
                outlier_fraction=self.outlier_fraction,
                outlier_scale=self.outlier_scale,
                bias_correlation_length=self.bias_correlation_length,
            ),
            error_prediction_fidelity=self.error_fidelity,
        )


@dataclass(frozen=True)
class EncoderConfig:
    dim: int = 8
    heads: int = 2
    layers: int = 1
    hidden: int = 16
    mode: str = "passthrough"

    def __post_init__(self) -> None:
        if self.dim < 2 or self.dim % 2 != 0:
            raise ConfigError("encoder dim must be even and at least 2")
        if self.heads < 1 or self.dim % self.heads != 0:
            raise ConfigError("encoder heads must divide dim")
        if self.layers < 0 or self.hidden < 1:
            raise ConfigError("encoder layers/hidden must be non-negative/positive")
        if self.mode not in ("passthrough", "random"):
            raise ConfigError("encoder mode must be 'passthrough' or 'random'")


@dataclass(frozen=True)
class HeadConfig:
    height_gain: float = 2.0
    height_floor: float = 0.4
    nominal_z: float = 0.8
    nominal_h: float = 1.6
    nominal_w: float = 2.2
    nominal_l: float = 3.6
    nms_iou: float = 0.5

    def __post_init__(self) -> None:
        if self.height_gain <= 0.0:
            raise ConfigError("height_gain must be positive")
        if min(self.nominal_h, self.nominal_w, self.nominal_l) <= 0.0:
            raise ConfigError("nominal extents must be positive")
        if not 0.0 < self.nms_iou < 1.0:
            raise ConfigError("nms_iou must lie in (0, 1)")


_METHODS = ("pgc", "icp", "graph", "gt-noise")
_SWEEP_METHODS = ("gt-noise", "pgc", "none")


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    num_scenarios: int = 100
    frames: int = 1
    methods: tuple[str, ...] = _METHODS
    noise_levels: tuple[tuple[float, float], ...] = (
        (0.0, 0.0),
        (1.0, 1.0),
        (2.0, 2.0),
        (3.0, 3.0),
        (4.0, 4.0),
    )
    alignment_noise: tuple[float, float] = (1.0, 1.0)
    downsample_voxel: float = 0.3
    grid_width: int = 32
    grid_height: int = 32
    grid_resolution: float = 1.25
    scenario: ScenarioParams = field(default_factory=ScenarioParams)
    oracle: OracleParams = field(default_factory=OracleParams)
    ransac: RansacConfig = field(default_factory=RansacConfig)
    icp: IcpConfig = field(default_factory=IcpConfig)
    graph: GraphMatchConfig = field(default_factory=GraphMatchConfig)
    search: OffsetSearch = field(
        default_factory=lambda: OffsetSearch(
            max_xy=1.25, step_xy=0.625, max_theta=0.0, step_theta=math.radians(2.0),
            min_gain=0.02
        )
    )
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self) -> None:
        if self.num_scenarios < 1 or self.frames < 1:
            raise ConfigError("num_scenarios and frames must be positive")
        if self.downsample_voxel <= 0.0:
            raise ConfigError("downsample_voxel must be positive")
        for m in self.methods:
            if m not in _METHODS:
                raise ConfigError(f"unknown method {m!r}; choose from {sorted(_METHODS)}")
        if not self.methods:
            raise ConfigError("at least one method is required")
        for level in self.noise_levels:
            if len(level) != 2 or level[0] < 0.0 or level[1] < 0.0:
                raise ConfigError("noise_levels entries must be [sigma_t, sigma_r] >= 0")

    def grid_spec(self) -> GridSpec:
        return GridSpec.centered(self.grid_width, self.grid_height, self.grid_resolution)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "num_scenarios": self.num_scenarios,
            "frames": self.frames,
            "methods": list(self.methods),
            "noise_levels": [list(lv) for lv in self.noise_levels],
            "alignment_noise": list(self.alignment_noise),
            "downsample_voxel": self.downsample_voxel,
            "grid": {
                "width": self.grid_width,
                "height": self.grid_height,
                "resolution": self.grid_resolution,
            },
            "scenario": {
                "num_agents": self.scenario.num_agents,
                "num_objects": self.scenario.num_objects,
                "world_size": self.scenario.world_size,
                "sensing_range": self.scenario.sensing_range,
                "co_visible": self.scenario.co_visible,
                "points_per_box": self.scenario.points_per_box,
                "ground_points": self.scenario.ground_points,
                "min_agent_distance": self.scenario.min_agent_distance,
                "max_agent_distance": self.scenario.max_agent_distance,
                "occluder_radius": self.scenario.occluder_radius,
            },
            "oracle": {
                "inlier_sigma": self.oracle.inlier_sigma,
                "outlier_fraction": self.oracle.outlier_fraction,
                "outlier_scale": self.oracle.outlier_scale,
                "bias_correlation_length": self.oracle.bias_correlation_length,
                "error_fidelity": self.oracle.error_fidelity,
            },
            "ransac": {
                "max_iterations": self.ransac.max_iterations,
                "inlier_threshold": self.ransac.inlier_threshold,
                "sample_size": self.ransac.sample_size,
                "min_inliers": self.ransac.min_inliers,
                "confidence_stop": self.ransac.confidence_stop,
            },
            "icp": {
                "max_iterations": self.icp.max_iterations,
                "convergence_eps": self.icp.convergence_eps,
                "max_correspondence_dist": self.icp.max_correspondence_dist,
            },
            "graph": {
                "edge_consistency_eps": self.graph.edge_consistency_eps,
                "min_consensus": self.graph.min_consensus,
            },
            "search": {
                "max_xy": self.search.max_xy,
                "step_xy": self.search.step_xy,
                "max_theta_deg": math.degrees(self.search.max_theta),
                "step_theta_deg": math.degrees(self.search.step_theta),
                "min_gain": self.search.min_gain,
            },
            "encoder": {
                "dim": self.encoder.dim,
                "heads": self.encoder.heads,
                "layers": self.encoder.layers,
                "hidden": self.encoder.hidden,
                "mode": self.encoder.mode,
            },
            "head": {
                "height_gain": self.head.height_gain,
                "height_floor": self.head.height_floor,
                "nominal_z": self.head.nominal_z,
                "nominal_h": self.head.nominal_h,
                "nominal_w": self.head.nominal_w,
                "nominal_l": self.head.nominal_l,
                "nms_iou": self.head.nms_iou,
            },
            "eval": {
                "iou_thresholds": list(self.eval.iou_thresholds),
                "score_threshold": self.eval.score_threshold,
            },
        }


def _section(raw: dict, name: str) -> dict:
    value = raw.get(name, {})
    if not isinstance(value, dict):
        raise ConfigError(f"section {name!r} must be an object")
    return dict(value)


def _pop_number(d: dict, key: str, default, minimum=None, maximum=None, integer=False):
    value = d.pop(key, default)
    if value is None:
        return None
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{key} must be a number")
    if integer:
        if int(value) != value:
            raise ConfigError(f"{key} must be an integer")
        value = int(value)
    else:
        value = float(value)
    if minimum is not None and value < minimum:
        raise ConfigError(f"{key} must be >= {minimum}")
    if maximum is not None and value > maximum:
        raise ConfigError(f"{key} must be <= {maximum}")
    return value


def _reject_unknown(d: dict, context: str) -> None:
    if d:
        raise ConfigError(f"unknown keys in {context}: {sorted(d)}")


def config_from_dict(raw: dict) -> ExperimentConfig:
    """Build a validated ExperimentConfig from parsed JSON. Unknown keys are
    rejected so typos fail loudly."""
    if not isinstance(raw, dict):
        raise ConfigError("config root must be an object")
    raw = dict(raw)

    seed = _pop_number(raw, "seed", 0, integer=True)
    num_scenarios = _pop_number(raw, "num_scenarios", 100, minimum=1, integer=True)
    frames = _pop_number(raw, "frames", 1, minimum=1, integer=True)
    downsample_voxel = _pop_number(raw, "downsample_voxel", 0.3, minimum=1e-9)

    methods = raw.pop("methods", list(_METHODS))
    if not isinstance(methods, (list, tuple)) or not all(isinstance(m, str) for m in methods):
        raise ConfigError("methods must be a list of strings")

    levels_raw = raw.pop("noise_levels", [[0, 0], [1, 1], [2, 2], [3, 3], [4, 4]])
    if not isinstance(levels_raw, (list, tuple)) or not levels_raw:
        raise ConfigError("noise_levels must be a non-empty list")
    levels = []
    for entry in levels_raw:
        if not isinstance(entry, (list, tuple)) or len(entry) != 2:
            raise ConfigError("noise_levels entries must be [sigma_t, sigma_r]")
        levels.append((float(entry[0]), float(entry[1])))

    align_noise = raw.pop("alignment_noise", [1.0, 1.0])
    if not isinstance(align_noise, (list, tuple)) or len(align_noise) != 2:
        raise ConfigError("alignment_noise must be [sigma_t, sigma_r]")

    grid = _section(raw, "grid")
    raw.pop("grid", None)
    grid_width = _pop_number(grid, "width", 32, minimum=1, integer=True)
    grid_height = _pop_number(grid, "height", 32, minimum=1, integer=True)
    grid_resolution = _pop_number(grid, "resolution", 1.25, minimum=1e-9)
    _reject_unknown(grid, "grid")

    sc = _section(raw, "scenario")
    raw.pop("scenario", None)
    co_visible = _pop_number(sc, "co_visible", None, minimum=0, integer=True)
    scenario = ScenarioParams(
        num_agents=_pop_number(sc, "num_agents", 2, minimum=1, integer=True),
        num_objects=_pop_number(sc, "num_objects", 8, minimum=0, integer=True),
        world_size=_pop_number(sc, "world_size", 80.0, minimum=1e-9),
        sensing_range=_pop_number(sc, "sensing_range", 25.0, minimum=1e-9),
        co_visible=co_visible,
        points_per_box=_pop_number(sc, "points_per_box", 120, minimum=1, integer=True),
        ground_points=_pop_number(sc, "ground_points", 400, minimum=0, integer=True),
        min_agent_distance=_pop_number(sc, "min_agent_distance", 12.0, minimum=1e-9),
        max_agent_distance=_pop_number(sc, "max_agent_distance", 20.0, minimum=1e-9),
        occluder_radius=_pop_number(sc, "occluder_radius", 1.2, minimum=0.0),
    )
    _reject_unknown(sc, "scenario")

    oc = _section(raw, "oracle")
    raw.pop("oracle", None)
    oracle = OracleParams(
        inlier_sigma=_pop_number(oc, "inlier_sigma", 0.02, minimum=0.0),
        outlier_fraction=_pop_number(oc, "outlier_fraction", 0.3, minimum=0.0, maximum=1.0),
        outlier_scale=_pop_number(oc, "outlier_scale", 5.0, minimum=0.0),
        bias_correlation_length=_pop_number(oc, "bias_correlation_length", 20.0, minimum=0.0),
        error_fidelity=_pop_number(oc, "error_fidelity", 0.9, minimum=0.0, maximum=1.0),
    )
    _reject_unknown(oc, "oracle")

    rc = _section(raw, "ransac")
    raw.pop("ransac", None)
    try:
        ransac = RansacConfig(
            max_iterations=_pop_number(rc, "max_iterations", 256, minimum=1, integer=True),
            inlier_threshold=_pop_number(rc, "inlier_threshold", 0.5, minimum=1e-12),
            sample_size=_pop_number(rc, "sample_size", 3, minimum=3, integer=True),
            min_inliers=_pop_number(rc, "min_inliers", 10, minimum=3, integer=True),
            confidence_stop=_pop_number(rc, "confidence_stop", 0.999, minimum=0.0, maximum=1.0),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    _reject_unknown(rc, "ransac")

    ic = _section(raw, "icp")
    raw.pop("icp", None)
    try:
        icp = IcpConfig(
            max_iterations=_pop_number(ic, "max_iterations", 30, minimum=1, integer=True),
            convergence_eps=_pop_number(ic, "convergence_eps", 1e-4, minimum=1e-12),
            max_correspondence_dist=_pop_number(ic, "max_correspondence_dist", 5.0, minimum=1e-9),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    _reject_unknown(ic, "icp")

    gc = _section(raw, "graph")
    raw.pop("graph", None)
    try:
        graph = GraphMatchConfig(
            edge_consistency_eps=_pop_number(gc, "edge_consistency_eps", 0.3, minimum=1e-12),
            min_consensus=_pop_number(gc, "min_consensus", 3, minimum=3, integer=True),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    _reject_unknown(gc, "graph")

    se = _section(raw, "search")
    raw.pop("search", None)
    try:
        search = OffsetSearch(
            max_xy=_pop_number(se, "max_xy", 1.25, minimum=0.0),
            step_xy=_pop_number(se, "step_xy", 0.625, minimum=1e-12),
            max_theta=math.radians(_pop_number(se, "max_theta_deg", 0.0, minimum=0.0)),
            step_theta=math.radians(_pop_number(se, "step_theta_deg", 2.0, minimum=1e-12)),
            min_gain=_pop_number(se, "min_gain", 0.02, minimum=0.0),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    _reject_unknown(se, "search")

    en = _section(raw, "encoder")
    raw.pop("encoder", None)
    mode = en.pop("mode", "passthrough")
    if not isinstance(mode, str):
        raise ConfigError("encoder mode must be a string")
    encoder = EncoderConfig(
        dim=_pop_number(en, "dim", 8, minimum=2, integer=True),
        heads=_pop_number(en, "heads", 2, minimum=1, integer=True),
        layers=_pop_number(en, "layers", 1, minimum=0, integer=True),
        hidden=_pop_number(en, "hidden", 16, minimum=1, integer=True),
        mode=mode,
    )
    _reject_unknown(en, "encoder")

    hd = _section(raw, "head")
    raw.pop("head", None)
    head = HeadConfig(
        height_gain=_pop_number(hd, "height_gain", 2.0, minimum=1e-12),
        height_floor=_pop_number(hd, "height_floor", 0.4),
        nominal_z=_pop_number(hd, "nominal_z", 0.8),
        nominal_h=_pop_number(hd, "nominal_h", 1.6, minimum=1e-12),
        nominal_w=_pop_number(hd, "nominal_w", 2.2, minimum=1e-12),
        nominal_l=_pop_number(hd, "nominal_l", 3.6, minimum=1e-12),
        nms_iou=_pop_number(hd, "nms_iou", 0.5, minimum=1e-12, maximum=1.0 - 1e-12),
    )
    _reject_unknown(hd, "head")

    ev = _section(raw, "eval")
    raw.pop("eval", None)
    thr_raw = ev.pop("iou_thresholds", [0.3, 0.5, 0.7])
    if not isinstance(thr_raw, (list, tuple)) or not thr_raw:
        raise ConfigError("iou_thresholds must be a non-empty list")
    try:
        eval_cfg = EvalConfig(
            iou_thresholds=tuple(float(t) for t in thr_raw),
            score_threshold=_pop_number(ev, "score_threshold", 0.25, minimum=0.0, maximum=1.0),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    _reject_unknown(ev, "eval")

    _reject_unknown(raw, "config root")

    try:
        return ExperimentConfig(
            seed=seed,
            num_scenarios=num_scenarios,
            frames=frames,
            methods=tuple(methods),
            noise_levels=tuple(levels),
            alignment_noise=(float(align_noise[0]), float(align_noise[1])),
            downsample_voxel=downsample_voxel,
            grid_width=grid_width,
            grid_height=grid_height,
            grid_resolution=grid_resolution,
            scenario=scenario,
            oracle=oracle,
            ransac=ransac,
            icp=icp,
            graph=graph,
            search=search,
            encoder=encoder,
            head=head,
            eval=eval_cfg,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: str | Path | None) -> ExperimentConfig:
    """Load a JSON config file, or the defaults when path is None."""
    if path is None:
        return ExperimentConfig()
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        raw = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return config_from_dict(raw)


SWEEP_METHODS = _SWEEP_METHODS
BENCHMARK_METHODS = _METHODS
