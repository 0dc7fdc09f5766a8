import dataclasses
import json
import math

import numpy as np
import pytest

from coopalign.config import ExperimentConfig, ScenarioParams
from coopalign.fusion import serialize_grid, rasterize_bev
from coopalign.geometry import Pose
from coopalign.harness import (
    AlignmentReport,
    AlignmentRow,
    CommLedger,
    _occluded,
    agent_box_observation,
    box_in_frame,
    build_head,
    ego_frame_targets,
    emit_alignment_report,
    emit_scenario,
    emit_sweep_report,
    generate_and_emit,
    generate_scenario,
    load_scenario,
    run_alignment_benchmark,
    run_noise_sweep,
    run_pipeline,
    selftest,
)
from coopalign.localization import pose_message_json
from coopalign.temporal import temporal_encoding
from coopalign.detection import detections_to_json


def _small_params(**kw):
    base = dict(num_agents=2, num_objects=6, points_per_box=60, ground_points=150)
    base.update(kw)
    return ScenarioParams(**base)


def _small_cfg(**kw):
    base = dict(seed=3, num_scenarios=2, scenario=_small_params())
    base.update(kw)
    return ExperimentConfig(**base)


def test_generate_scenario_is_deterministic():
    params = _small_params()
    a = generate_scenario(params, 42)
    b = generate_scenario(params, 42)
    c = generate_scenario(params, 43)
    for ag_a, ag_b in zip(a.agents, b.agents):
        np.testing.assert_array_equal(ag_a.cloud.points, ag_b.cloud.points)
        assert ag_a.visible == ag_b.visible
        np.testing.assert_array_equal(ag_a.gt_pose.translation, ag_b.gt_pose.translation)
    assert not np.array_equal(a.agents[0].cloud.points, c.agents[0].cloud.points)


def test_scenario_points_stay_within_sensing_range():
    params = _small_params()
    scenario = generate_scenario(params, 7)
    for agent in scenario.agents:
        if len(agent.cloud.points) == 0:
            continue
        dist = np.linalg.norm(agent.cloud.points, axis=1)
        assert dist.max() <= params.sensing_range + 1e-9


def test_visibility_respects_range_exactly_without_occlusion():
    params = _small_params(occluder_radius=0.0)
    scenario = generate_scenario(params, 11)
    for agent in scenario.agents:
        axy = agent.gt_pose.translation[:2]
        in_range = {
            i
            for i, b in enumerate(scenario.world_objects)
            if math.hypot(b.x - axy[0], b.y - axy[1]) <= params.sensing_range
        }
        assert set(agent.visible) == in_range


def test_occlusion_only_removes_objects():
    params_occ = _small_params(occluder_radius=1.2)
    params_open = _small_params(occluder_radius=0.0)
    occ = generate_scenario(params_occ, 13)
    open_ = generate_scenario(params_open, 13)
    # same placement stream, so the worlds agree and occlusion can only shrink
    assert [b.as_list() for b in occ.world_objects] == [b.as_list() for b in open_.world_objects]
    for a_occ, a_open in zip(occ.agents, open_.agents):
        assert set(a_occ.visible) <= set(a_open.visible)


def test_occluded_sight_line_cases():
    apos = np.array([0.0, 0.0])
    target = np.array([10.0, 0.0])
    assert _occluded(apos, target, [np.array([5.0, 0.0])], 1.2)
    assert not _occluded(apos, target, [np.array([5.0, 5.0])], 1.2)
    # an object beyond the target does not block it
    assert not _occluded(apos, target, [np.array([15.0, 0.0])], 1.2)
    assert not _occluded(apos, target, [np.array([5.0, 0.0])], 0.0)


def test_co_visible_counts_are_exact():
    for k in (0, 2, 5):
        params = _small_params(num_objects=8, co_visible=k)
        scenario = generate_scenario(params, 17 + k)
        vis0 = set(scenario.agents[0].visible)
        vis1 = set(scenario.agents[1].visible)
        assert len(vis0 & vis1) == k
        assert len(scenario.world_objects) == 8


def test_box_extent_ranges():
    scenario = generate_scenario(_small_params(), 19)
    for b in scenario.world_objects:
        assert 3.8 <= b.l <= 5.0
        assert 1.7 <= b.w <= 2.1
        assert 1.4 <= b.h <= 1.8
        assert abs(b.z - b.h / 2.0) < 1e-12


def test_box_in_frame_against_manual_transform():
    scenario = generate_scenario(_small_params(), 23)
    pose = scenario.agents[1].gt_pose
    box = scenario.world_objects[0]
    local = box_in_frame(box, pose)
    yaw = pose.yaw
    dx = box.x - pose.translation[0]
    dy = box.y - pose.translation[1]
    want_x = math.cos(yaw) * dx + math.sin(yaw) * dy
    want_y = -math.sin(yaw) * dx + math.cos(yaw) * dy
    assert abs(local.x - want_x) < 1e-9
    assert abs(local.y - want_y) < 1e-9
    assert abs(local.z - box.z) < 1e-9
    ident = box_in_frame(box, Pose.identity())
    assert ident.as_list() == box.as_list()


def test_agent_box_observation_matches_visible():
    scenario = generate_scenario(_small_params(), 29)
    for idx, agent in enumerate(scenario.agents):
        obs = agent_box_observation(scenario, idx)
        assert len(obs.boxes) == len(agent.visible)
        for box in obs.boxes:
            assert math.hypot(box.x, box.y) <= _small_params().sensing_range + 1e-9


def test_ego_frame_targets_lie_inside_roi():
    cfg = _small_cfg()
    spec = cfg.grid_spec()
    scenario = generate_scenario(cfg.scenario, 31)
    targets = ego_frame_targets(scenario, spec)
    margin = 2.0 * spec.resolution
    half_w = spec.width * spec.resolution / 2.0
    for t in targets:
        assert abs(t.x) <= half_w - margin + spec.resolution
        assert abs(t.y) <= half_w - margin + spec.resolution


def test_comm_ledger_accounting():
    ledger = CommLedger()
    ledger.add(1, 0, "pose", 100)
    ledger.add(1, 0, "features", 5000)
    ledger.add(2, 0, "pose", 110)
    assert ledger.count() == 3
    assert ledger.count("pose") == 2
    assert ledger.total_bytes() == 5210
    assert ledger.total_bytes("features") == 5000
    with pytest.raises(ValueError):
        ledger.add(1, 0, "telepathy", 10)
    with pytest.raises(ValueError):
        ledger.add(1, 0, "pose", -1)


def test_message_size_ordering():
    cfg = _small_cfg(scenario=_small_params(num_objects=8, co_visible=6))
    scenario = generate_scenario(cfg.scenario, 37)
    spec = cfg.grid_spec()
    for idx, agent in enumerate(scenario.agents):
        pose_bytes = len(pose_message_json(agent.gt_pose, 1.0, 0.0, 1.0).encode("utf-8"))
        obs = agent_box_observation(scenario, idx)
        assert len(obs.boxes) >= 5
        box_bytes = obs.message_bytes()
        feat_bytes = len(serialize_grid(rasterize_bev(agent.cloud, spec)))
        assert pose_bytes < box_bytes < feat_bytes


def test_build_head_formula():
    cfg = _small_cfg()
    head = build_head(cfg)
    dim = cfg.encoder.dim
    e_t = temporal_encoding(float(cfg.frames), dim)
    assert head.weight.shape == (8, dim)
    assert head.weight[0, 2] == cfg.head.height_gain
    assert abs(head.bias[0] + cfg.head.height_gain * (cfg.head.height_floor + e_t[2])) < 1e-12
    assert head.bias[3] == cfg.head.nominal_z
    assert abs(head.bias[4] - math.log(cfg.head.nominal_h)) < 1e-12
    assert abs(head.bias[5] - math.log(cfg.head.nominal_w)) < 1e-12
    assert abs(head.bias[6] - math.log(cfg.head.nominal_l)) < 1e-12
    # nothing else responds to the fused features
    rest = head.weight.copy()
    rest[0, 2] = 0.0
    assert not rest.any()


def test_run_pipeline_gt_poses_detects_in_roi():
    cfg = _small_cfg()
    scenario = generate_scenario(cfg.scenario, 41)
    result = run_pipeline(scenario, cfg, pose_source="gt")
    assert len(result.targets) > 0
    assert len(result.detections) > 0
    spec = cfg.grid_spec()
    half_w = spec.width * spec.resolution / 2.0
    for det in result.detections:
        assert abs(det.box.x) <= half_w
        assert abs(det.box.y) <= half_w
    # one pose and one feature payload per neighbor per frame
    assert result.ledger.count("pose") == cfg.scenario.num_agents - 1
    assert result.ledger.count("features") == cfg.scenario.num_agents - 1
    assert result.ledger.count("boxes") == 0


def test_run_pipeline_none_is_single_agent():
    cfg = _small_cfg()
    scenario = generate_scenario(cfg.scenario, 41)
    result = run_pipeline(scenario, cfg, pose_source="none")
    assert result.ledger.count() == 0
    # only the ego's own pose enters the record
    assert set(result.pose_estimates) == {(0, 0)}


def test_run_pipeline_rejects_unknown_source():
    cfg = _small_cfg()
    scenario = generate_scenario(cfg.scenario, 41)
    with pytest.raises(ValueError):
        run_pipeline(scenario, cfg, pose_source="gps")


def test_pipeline_noise_blind_sources_are_bitwise_stable():
    cfg = _small_cfg()
    scenario = generate_scenario(cfg.scenario, 43)
    for source in ("pgc", "gt", "none"):
        lo = run_pipeline(scenario, cfg, pose_source=source, noise=(0.0, 0.0))
        hi = run_pipeline(scenario, cfg, pose_source=source, noise=(4.0, 4.0))
        assert detections_to_json(list(lo.detections)) == detections_to_json(list(hi.detections))
        np.testing.assert_array_equal(lo.fused.data, hi.fused.data)


def test_pipeline_gt_noise_source_responds_to_noise():
    cfg = _small_cfg()
    scenario = generate_scenario(cfg.scenario, 43)
    lo = run_pipeline(scenario, cfg, pose_source="gt-noise", noise=(0.0, 0.0))
    hi = run_pipeline(scenario, cfg, pose_source="gt-noise", noise=(4.0, 4.0))
    assert not np.array_equal(lo.fused.data, hi.fused.data)


def test_alignment_benchmark_rows_and_determinism():
    cfg = _small_cfg()
    report = run_alignment_benchmark(cfg)
    # 2 scenarios x 1 neighbor x 4 methods
    assert len(report.rows) == 8
    again = run_alignment_benchmark(cfg)
    for a, b in zip(report.rows, again.rows):
        assert dataclasses.replace(a, time_s=0.0) == dataclasses.replace(b, time_s=0.0)
    agg = report.aggregates()
    assert set(agg) == set(cfg.methods)
    for stats in agg.values():
        assert stats["rows"] == 2
        assert 0.0 <= stats["delta_s_percent"] <= 100.0
        assert "time" not in " ".join(stats)
    assert report.mean_time_s("pgc") > 0.0


def test_alignment_benchmark_parallel_matches_serial():
    cfg = _small_cfg()
    serial = run_alignment_benchmark(cfg, parallel=1)
    par = run_alignment_benchmark(cfg, parallel=2)
    assert len(serial.rows) == len(par.rows)
    for a, b in zip(serial.rows, par.rows):
        assert dataclasses.replace(a, time_s=0.0) == dataclasses.replace(b, time_s=0.0)


def test_aggregates_by_hand():
    rows = [
        AlignmentRow(0, "m", 0, 1, 0.5, 1.0, True, 100, 0.01),
        AlignmentRow(1, "m", 0, 1, float("inf"), float("inf"), False, 300, 0.02),
        AlignmentRow(2, "m", 0, 1, 1.5, 2.0, True, 200, 0.03),
    ]
    agg = AlignmentReport(rows).aggregates()["m"]
    assert agg["rows"] == 3
    assert abs(agg["delta_s_percent"] - 200.0 / 3.0) < 1e-12
    assert abs(agg["log2_mean_bytes"] - math.log2(200.0)) < 1e-12
    assert agg["median_translation_error"] == 1.0


def test_emit_alignment_report_float_format(tmp_path):
    rows = [AlignmentRow(0, "m", 0, 1, 1.0 / 3.0, 2.0, True, 128, 0.5)]
    paths = emit_alignment_report(AlignmentReport(rows), tmp_path)
    text = paths["results"].read_text()
    assert "0.33333333333333331" in text
    assert "true" in text and "True" not in text
    assert "time_s" in paths["timings"].read_text()
    assert "delta_s_percent" in paths["summary"].read_text()
    # identical rows re-emit byte-identically
    again = emit_alignment_report(AlignmentReport(rows), tmp_path / "again")
    assert again["results"].read_bytes() == paths["results"].read_bytes()
    assert again["summary"].read_bytes() == paths["summary"].read_bytes()


def test_noise_sweep_pgc_flat_and_persistence(tmp_path):
    cfg = _small_cfg(num_scenarios=2, noise_levels=((0.0, 0.0), (3.0, 3.0)))
    report = run_noise_sweep(cfg)
    # every (scenario, method, level, threshold) combination is present
    assert len(report.rows) == 2 * 3 * 2 * 3
    for method in ("pgc", "none"):
        for thr in cfg.eval.iou_thresholds:
            lo = report.pooled_ap(method, (0.0, 0.0), thr)
            hi = report.pooled_ap(method, (3.0, 3.0), thr)
            assert lo == hi
    paths = emit_sweep_report(report, tmp_path)
    again = emit_sweep_report(run_noise_sweep(cfg), tmp_path / "b")
    assert paths["results"].read_bytes() == again["results"].read_bytes()
    assert paths["summary"].read_bytes() == again["summary"].read_bytes()


def test_noise_sweep_parallel_matches_serial():
    cfg = _small_cfg(num_scenarios=2, noise_levels=((0.0, 0.0), (2.0, 2.0)))
    serial = run_noise_sweep(cfg, parallel=1)
    par = run_noise_sweep(cfg, parallel=2)
    assert serial.rows == par.rows
    assert serial.pooled == par.pooled


def test_scenario_emit_load_round_trip(tmp_path):
    scenario = generate_scenario(_small_params(), 47)
    emit_scenario(scenario, tmp_path)
    loaded = load_scenario(tmp_path)
    assert loaded.seed == scenario.seed
    assert [b.as_list() for b in loaded.world_objects] == [b.as_list() for b in scenario.world_objects]
    for got, src in zip(loaded.agents, scenario.agents):
        assert got.agent_id == src.agent_id
        assert got.visible == src.visible
        np.testing.assert_allclose(got.gt_pose.matrix(), src.gt_pose.matrix(), atol=1e-15)
        np.testing.assert_array_equal(
            got.cloud.points, src.cloud.points.astype("<f4").astype(float)
        )


def test_generate_and_emit_layout(tmp_path):
    cfg = _small_cfg(num_scenarios=3)
    paths = generate_and_emit(cfg, tmp_path)
    assert len(paths) == 3
    for i, p in enumerate(paths):
        assert p.name == "scenario.json"
        assert p.parent.name == f"scenario_{i:03d}"
        manifest = json.loads(p.read_text())
        assert len(manifest["agents"]) == cfg.scenario.num_agents


def test_selftest_all_green():
    results = selftest()
    assert len(results) >= 8
    failures = [name for name, ok in results if not ok]
    assert failures == []
