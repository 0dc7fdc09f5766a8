"""Cooperative BEV perception without satellite positioning: shared scene
localization, grid fusion with residual alignment, and detection metrics on
synthetic scenes."""

from .baselines import (
    BoxObservation,
    GraphMatchConfig,
    GraphMatchResult,
    IcpConfig,
    IcpResult,
    graph_match_align,
    icp_align,
)
from .config import (
    ConfigError,
    EncoderConfig,
    ExperimentConfig,
    HeadConfig,
    OracleParams,
    ScenarioParams,
    config_from_dict,
    load_config,
)
from .detection import (
    Detection,
    EvalConfig,
    HeadParams,
    RotatedBox3D,
    average_precision,
    decode_head,
    focal_loss,
    pooled_average_precision,
    rotated_iou_bev,
    smooth_l1,
)
from .fusion import (
    BevGrid,
    GridSpec,
    NoSignalError,
    OffsetDelta,
    OffsetNetParams,
    OffsetSearch,
    apply_offset,
    coarse_align,
    confidence_embed,
    deserialize_grid,
    estimate_offset,
    offset_net_backward,
    offset_net_forward,
    rasterize_bev,
    serialize_grid,
    warp_grid,
)
from .geometry import (
    GaussianPoseNoise,
    PointCloud,
    Pose,
    Pose2D,
    StructuredLocNoise,
    compose,
    inverse,
    load_point_cloud,
    normalize_angle,
    perturb_pose,
    pose_error,
    relative,
    rotation_z,
    sample_structured_offsets,
    save_points_ascii,
    save_points_binary,
    transform_points,
)
from .harness import (
    AgentObservation,
    AlignmentReport,
    AlignmentRow,
    CommLedger,
    CommRecord,
    PipelineResult,
    Scenario,
    ScenarioGenerationError,
    SweepReport,
    SweepRow,
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
from .localization import (
    DegenerateSampleError,
    OracleErrorModel,
    PoseEstimate,
    RansacConfig,
    SceneCoordPrediction,
    confidence_from_error,
    coordinate_error,
    kabsch_solve,
    oracle_predict,
    pose_message_json,
    ransac_pose,
    regression_loss,
    voxel_downsample,
)
from .temporal import (
    EncoderParams,
    LayerParams,
    TokenSequence,
    encode,
    layer_attention,
    load_checkpoint,
    project_channels,
    save_checkpoint,
    temporal_encoding,
    tokenize,
    vit_backward,
    vit_forward,
    vit_layer_forward,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
