"""Zero-shot 6D object pose estimation from depth, instance masks and
embeddings, with BOP-style evaluation."""
from .geometry import CameraIntrinsics, DepthImage, GeometryError, PointCloud, Pose, TriangleMesh
from .io import SceneEstimate
from .pipeline import PipelineConfig, estimate_scene, synth_scenes

__version__ = "0.1.0"

__all__ = ["CameraIntrinsics", "DepthImage", "GeometryError", "PipelineConfig", "PointCloud", "Pose",
           "SceneEstimate", "TriangleMesh", "estimate_scene", "synth_scenes"]
