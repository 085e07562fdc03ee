"""Localize a small UAV in LiDAR scans by range-shell clustering or a pillar
detector, and score both against a reference trajectory."""

from .cloud_io import CropBounds, PointCloud, crop, parse_pcd, read_pcd, write_pcd
from .cluster import ClusterLocalizer, HeuristicConfig, ShellParams, localize_clustering
from .detector import PillarDetector
from .evaluation import Outcome, axis_stats, classify, evaluate_method, fit_z_offset
from .geometry import Cuboid, Detection, PositionEstimate, bev_iou, position_error
from .pillars import DESK_GRID, TUNNEL_GRID, GridParams, PillarEncoder, encode_pillars, pseudo_image_dims
from .synth import SceneSpec, generate_dataset, generate_frame
from .validation import ConfigError, ContractError

__version__ = "0.1.0"

__all__ = [
    "CropBounds",
    "PointCloud",
    "crop",
    "parse_pcd",
    "read_pcd",
    "write_pcd",
    "ClusterLocalizer",
    "HeuristicConfig",
    "ShellParams",
    "localize_clustering",
    "PillarDetector",
    "Outcome",
    "axis_stats",
    "classify",
    "evaluate_method",
    "fit_z_offset",
    "Cuboid",
    "Detection",
    "PositionEstimate",
    "bev_iou",
    "position_error",
    "DESK_GRID",
    "TUNNEL_GRID",
    "GridParams",
    "PillarEncoder",
    "encode_pillars",
    "pseudo_image_dims",
    "SceneSpec",
    "generate_dataset",
    "generate_frame",
    "ConfigError",
    "ContractError",
]
