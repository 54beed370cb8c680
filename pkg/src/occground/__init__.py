"""Deterministic toolkit for 3D occupancy grounding benchmarks."""
from .geometry import (
    FREE,
    Box3D,
    GridMeta,
    OccupancyGrid,
    RigidTransform,
    VoxelSet,
    apply_transform,
    box_contains,
    voxel_center,
    voxel_index,
)
from .grounding import (
    GroundingPrediction,
    GroundingSample,
    binary_mask,
    box_rand_baseline,
    extract_gt_occupancy,
    gt_rand_baseline,
    refine_two_stage,
)
from .metrics import EvaluationReport, acc_at, evaluate, iou
from .voxelizer import PointCloud, crop_to_range, voxelize
from .depthmap import (
    CameraModel,
    DepthMap,
    project_lidar_depth,
    raycast_depth_exact,
    raycast_depth_fixed,
)

__version__ = "0.1.0"
