"""Gaussian-splat object pose estimation: coarse NOCS/PnP, ray-cast ICP and render-and-compare refinement."""

__version__ = "0.1.0"

from .lie import RigidTransform, Twist  # noqa: E402
from .scene import Aabb, GaussianModel, SceneSpec, synth_scene  # noqa: E402
from .render import CameraIntrinsics, Frame, observe, rasterize, render_and_grad  # noqa: E402

__all__ = ["Aabb", "CameraIntrinsics", "Frame", "GaussianModel", "RigidTransform", "SceneSpec", "Twist",
           "observe", "rasterize", "render_and_grad", "synth_scene", "__version__"]
