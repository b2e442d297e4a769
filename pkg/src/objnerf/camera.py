"""Pinhole cameras and ray generation.

Camera frame convention: x right, y up, the camera looks down -z.  Pixel
``(row, col)`` has its center at image coordinates ``(col + 0.5, row + 0.5)``;
rows grow downward.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InputError

DEFAULT_NEAR = 0.0
DEFAULT_FAR = 6.0
BOUNDS_PAD = 0.01


def check_rotation(rotation, atol=1e-6):
    rotation = np.asarray(rotation, dtype=np.float64)
    if rotation.shape != (3, 3):
        raise InputError(f"rotation must be 3x3, got {rotation.shape}")
    if not np.all(np.isfinite(rotation)):
        raise InputError("rotation contains non-finite entries")
    if not np.allclose(rotation.T @ rotation, np.eye(3), atol=atol, rtol=0.0):
        raise InputError("rotation is not orthonormal")
    return rotation


@dataclass(frozen=True)
class CameraPose:
    """World-from-camera rigid pose plus pinhole intrinsics (pixels)."""

    rotation: np.ndarray
    translation: np.ndarray
    focal: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        object.__setattr__(self, "rotation", check_rotation(self.rotation))
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "translation", t)
        if not self.focal > 0:
            raise InputError(f"focal must be positive, got {self.focal}")
        if self.width < 1 or self.height < 1:
            raise InputError(f"image size must be >= 1, got {self.width}x{self.height}")

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 0.0, 1.0), *, focal, width, height):
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, up)
        right /= np.linalg.norm(right)
        true_up = np.cross(right, forward)
        rotation = np.stack([right, true_up, -forward], axis=1)
        return cls(rotation, eye, float(focal), width / 2.0, height / 2.0, int(width), int(height))

    def to_dict(self):
        return {
            "R": [float(v) for v in self.rotation.ravel()],
            "t": [float(v) for v in self.translation],
            "focal": float(self.focal),
            "cx": float(self.cx),
            "cy": float(self.cy),
            "width": int(self.width),
            "height": int(self.height),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            np.asarray(d["R"], dtype=np.float64).reshape(3, 3),
            np.asarray(d["t"], dtype=np.float64),
            float(d["focal"]),
            float(d["cx"]),
            float(d["cy"]),
            int(d["width"]),
            int(d["height"]),
        )

    def project(self, points):
        """World points (..., 3) -> fractional (row, col) of the pixel whose center they hit."""
        p = (np.asarray(points, dtype=np.float64) - self.translation) @ self.rotation
        depth = -p[..., 2]
        col = self.cx + self.focal * p[..., 0] / depth - 0.5
        row = self.cy - self.focal * p[..., 1] / depth - 0.5
        return np.stack([row, col], axis=-1)


@dataclass
class Ray:
    """A ray or a batch of rays; every field carries the same leading shape."""

    origin: np.ndarray
    direction: np.ndarray
    near: np.ndarray
    far: np.ndarray
    pixel: np.ndarray = field(default=None)

    @property
    def shape(self):
        return np.shape(self.near)

    def __len__(self):
        return int(np.prod(self.shape))

    def __getitem__(self, idx):
        return Ray(
            self.origin[idx],
            self.direction[idx],
            self.near[idx],
            self.far[idx],
            None if self.pixel is None else self.pixel[idx],
        )

    def flatten(self):
        pixel = None if self.pixel is None else np.asarray(self.pixel).reshape(-1, 2)
        return Ray(self.origin.reshape(-1, 3), self.direction.reshape(-1, 3),
                   np.reshape(self.near, -1), np.reshape(self.far, -1), pixel)

    def at(self, t):
        """Positions o + t d for distances ``t`` of shape (*batch, S)."""
        return self.origin[..., None, :] + t[..., None] * self.direction[..., None, :]


def intersect_box(origin, direction, box_min, box_max):
    """Slab test. Returns (t_enter, t_exit, hit) broadcast over leading dims."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / direction
        t0 = (box_min - origin) * inv
        t1 = (box_max - origin) * inv
    lo = np.where(np.isnan(t0), -np.inf, np.minimum(t0, t1))
    hi = np.where(np.isnan(t1), np.inf, np.maximum(t0, t1))
    t_enter = lo.max(axis=-1)
    t_exit = hi.min(axis=-1)
    hit = (t_exit > np.maximum(t_enter, 0.0))
    return t_enter, t_exit, hit


def near_far_from_bounds(origin, direction, bounds, default_near=DEFAULT_NEAR,
                         default_far=DEFAULT_FAR):
    """Clip rays to the scene box padded by 1% of its extent."""
    if bounds is None:
        shape = np.shape(origin)[:-1]
        return np.full(shape, float(default_near)), np.full(shape, float(default_far))
    lo, hi = (np.asarray(b, dtype=np.float64) for b in bounds)
    pad = BOUNDS_PAD * (hi - lo)
    t_enter, t_exit, hit = intersect_box(origin, direction, lo - pad, hi + pad)
    near = np.where(hit, np.maximum(t_enter, 0.0), default_near)
    far = np.where(hit, t_exit, default_far)
    return near, far


def camera_rays(pose: CameraPose, pixels=None, bounds=None) -> Ray:
    """Rays through pixel centers; all pixels in row-major order by default."""
    if pixels is None:
        rows, cols = np.meshgrid(np.arange(pose.height), np.arange(pose.width), indexing="ij")
        pixels = np.stack([rows.ravel(), cols.ravel()], axis=-1)
    pixels = np.asarray(pixels)
    rows, cols = pixels[..., 0], pixels[..., 1]
    if np.any(rows < 0) or np.any(rows >= pose.height) or np.any(cols < 0) or np.any(cols >= pose.width):
        raise InputError(f"pixel outside {pose.height}x{pose.width} image")
    cam = np.stack(
        [
            (cols + 0.5 - pose.cx) / pose.focal,
            -(rows + 0.5 - pose.cy) / pose.focal,
            -np.ones(np.shape(rows)),
        ],
        axis=-1,
    )
    direction = cam @ pose.rotation.T
    direction /= np.linalg.norm(direction, axis=-1, keepdims=True)
    origin = np.broadcast_to(pose.translation, direction.shape).copy()
    near, far = near_far_from_bounds(origin, direction, bounds)
    return Ray(origin, direction, near, far, pixels)


def camera_ray(pose: CameraPose, pixel, bounds=None) -> Ray:
    """Single ray through the center of ``pixel = (row, col)``."""
    return camera_rays(pose, np.asarray(pixel).reshape(2), bounds)


def rigid_inverse(rotation, translation):
    rotation = np.asarray(rotation, dtype=np.float64)
    return rotation.T, -rotation.T @ np.asarray(translation, dtype=np.float64)
