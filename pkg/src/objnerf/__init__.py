"""Object-compositional neural radiance fields with hand-written gradients.

A scene branch models the whole scene; an object branch, conditioned on a
learnable per-object code, models each labeled object.  Scene-guided sampling
and a depth-based guard mask keep occluded regions from being carved out of
objects during training, and trained objects can be moved, duplicated or
removed at render time.
"""

from .camera import CameraPose, Ray, camera_rays
from .dataset import Dataset, Primitive, SyntheticScene, generate_synthetic_scene, load_dataset
from .edit_compose import Edit, EditScript, compose, render_view
from .errors import (ConfigurationError, InputError, LoadError, NumericError, UsageError,
                     ValidationError)
from .field_network import FieldModel, ModelConfig, NetworkConfig, load_checkpoint, save_checkpoint
from .occlusion import GuardConfig, guard_mask
from .training import TrainConfig, train
from .volume_render import composite, render_ray, stratified_sample

__version__ = "0.1.0"

__all__ = [
    "CameraPose", "Ray", "camera_rays", "Dataset", "Primitive", "SyntheticScene",
    "generate_synthetic_scene", "load_dataset", "Edit", "EditScript", "compose", "render_view",
    "ConfigurationError", "InputError", "LoadError", "NumericError", "UsageError",
    "ValidationError", "FieldModel", "ModelConfig", "NetworkConfig", "load_checkpoint",
    "save_checkpoint", "GuardConfig", "guard_mask", "TrainConfig", "train", "composite",
    "render_ray", "stratified_sample",
]
