"""Amodal instance segmentation toolkit for RGB-D desk scenes.

Completes occluded object masks from an RGB-D crop and a visible-mask
prior, evaluates predictions with instance-matched mask metrics, and
derives top-grasp points from the completed masks. Ships with a
procedural occlusion dataset generator so the full pipeline trains and
verifies on a single machine.
"""

__version__ = "0.1.0"

from .scene import (
    CameraIntrinsics,
    GeneratorConfig,
    InstanceAnnotation,
    RgbdScene,
    generate_scene,
    load_dataset,
    occlusion_flag,
    save_dataset,
)

__all__ = [
    "CameraIntrinsics",
    "GeneratorConfig",
    "InstanceAnnotation",
    "RgbdScene",
    "generate_scene",
    "load_dataset",
    "occlusion_flag",
    "save_dataset",
    "__version__",
]
