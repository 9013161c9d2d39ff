"""Lane centerline and divider prediction from rasterized vehicle
trajectories: synthetic scenes, tile extraction, HSV-direction rasters, a
set-prediction transformer, and Chamfer-AP evaluation."""

from .config import Config, preset_config
from .evaluation import APResult, evaluate, evaluate_tiles
from .geom import Polyline, RigidTransform2, chamfer_distance, resample
from .mapgraph import GroundTruthLane, MapGraph, extract_paths, synthesize_dividers
from .model import LaneNetwork, LanePrediction, ModelConfig
from .raster import RasterTensor, TrajectoryRasterizer, rasterize
from .scene import Scene, Trajectory, export_scene, generate_scene, import_scene
from .tiling import Tile, TileExtractor, augment, grid_tiles
from .training import LaneDetector, Trainer, train_loop

__version__ = "0.1.0"

__all__ = [
    "APResult",
    "Config",
    "GroundTruthLane",
    "LaneDetector",
    "LaneNetwork",
    "LanePrediction",
    "MapGraph",
    "ModelConfig",
    "Polyline",
    "RasterTensor",
    "RigidTransform2",
    "Scene",
    "Tile",
    "TileExtractor",
    "Trainer",
    "Trajectory",
    "TrajectoryRasterizer",
    "augment",
    "chamfer_distance",
    "evaluate",
    "evaluate_tiles",
    "export_scene",
    "extract_paths",
    "generate_scene",
    "grid_tiles",
    "import_scene",
    "preset_config",
    "rasterize",
    "resample",
    "synthesize_dividers",
    "train_loop",
]
