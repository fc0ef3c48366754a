"""Correspondence-pair generation from RGB-D sequences, plus the synthetic
scene generator that provides desk-scale data with exact ground truth."""

from .camera import CameraIntrinsics, Pose, RgbdFrame, backproject, project, visible
from .patches import InsufficientPointsError, PatchOutOfBoundsError, extract_2d_patch, extract_3d_patch
from .records import (
    CorrespondenceRecord,
    SamplingConfig,
    generate_correspondences,
    load_records,
    save_records,
)
from .synth import SynthScene, default_scene_spec, plane_scene_spec, synth_scene

__all__ = [
    "CameraIntrinsics",
    "Pose",
    "RgbdFrame",
    "project",
    "backproject",
    "visible",
    "extract_2d_patch",
    "extract_3d_patch",
    "InsufficientPointsError",
    "PatchOutOfBoundsError",
    "CorrespondenceRecord",
    "SamplingConfig",
    "generate_correspondences",
    "save_records",
    "load_records",
    "SynthScene",
    "synth_scene",
    "default_scene_spec",
    "plane_scene_spec",
]
