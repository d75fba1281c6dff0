"""Distributed multi-agent RGB-D SLAM on a hybrid implicit scene field."""

__version__ = "0.1.0"

from .core_math import SE3Pose, Intrinsics, se3_exp, se3_log  # noqa: F401
from .scene_field import SceneBounds, SceneField, FieldConfig  # noqa: F401
