"""Differentiable tri-grid neural volumes: rendering, fitting, alignment and meshing."""
from .camera import CameraResidual, OrbitCamera, RayBundle, apply_camera_residual, generate_rays, orbit_cameras
from .errors import DivergenceError, InvalidInputError, InvalidStateError, ParseError
from .fitting import FitConfig, FitReport, TrainView, ablate_representation, fit_scene, register_camera
from .meshing import DensityGrid, TriMesh, density_grid, marching_cubes
from .render import RenderOutput, composite, render_image, volume_render, volume_render_backward
from .scene import Background, Decoder, Scene, TriGrid, init_scene, sample_features
from .synthdata import ProxyScene, heldout_views, make_dataset

__version__ = "0.1.0"

__all__ = [
    "Background", "CameraResidual", "Decoder", "DensityGrid", "DivergenceError", "FitConfig", "FitReport",
    "InvalidInputError", "InvalidStateError", "OrbitCamera", "ParseError", "ProxyScene", "RayBundle", "RenderOutput", "Scene",
    "TrainView", "TriGrid", "TriMesh", "ablate_representation", "apply_camera_residual", "composite",
    "density_grid", "fit_scene", "generate_rays", "heldout_views", "init_scene", "make_dataset", "marching_cubes", "orbit_cameras",
    "register_camera", "render_image", "sample_features", "volume_render", "volume_render_backward",
]
