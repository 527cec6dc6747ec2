"""Self-supervised point-cloud pretraining via differentiable Gaussian
splatting of back-projected RGB-D views."""

from .camera import (
    CameraIntrinsics,
    CameraPose,
    PointCloud,
    RgbdFrame,
    back_project,
    project_point,
    rotate_augment,
)
from .gaussian import (
    GaussianSet,
    RawGaussianParams,
    activate,
    build_covariance,
    eval_sh,
    gaussian_density,
)
from .scene_io import Scene, load_scene, sample_view_pair
from .splat_render import (
    RenderOptions,
    RenderOutput,
    rasterize_backward,
    rasterize_forward,
    render_reference,
)
from .trainer import TrainConfig, TrainState, overfit_scene, train_step

__version__ = "0.1.0"

__all__ = [
    "CameraIntrinsics",
    "CameraPose",
    "GaussianSet",
    "PointCloud",
    "RawGaussianParams",
    "RenderOptions",
    "RenderOutput",
    "RgbdFrame",
    "Scene",
    "TrainConfig",
    "TrainState",
    "activate",
    "back_project",
    "build_covariance",
    "eval_sh",
    "gaussian_density",
    "load_scene",
    "overfit_scene",
    "project_point",
    "rasterize_backward",
    "rasterize_forward",
    "render_reference",
    "rotate_augment",
    "sample_view_pair",
    "train_step",
]
