"""Small procedural scenes and camera rigs used by tests, demos and the CLI."""

from __future__ import annotations

import numpy as np

from .camera import CameraPose
from .dataset import Primitive, SyntheticScene

RED = (0.9, 0.3, 0.2)
BLUE = (0.2, 0.4, 0.9)
GREEN = (0.3, 0.8, 0.3)


def occlusion_scene(density=30.0):
    """Box A (id 1) partly hidden behind the larger sphere B (id 2) along +x; gap 0.12.

    From the default arc rig B hides at least 10% of A in about half the views.
    """
    return SyntheticScene(
        [
            Primitive.box((-0.3, 0.0, 0.0), (0.25, 0.25, 0.25), density, RED, 1),
            Primitive.sphere((0.47, 0.0, 0.0), 0.4, density, BLUE, 2),
        ],
        background=(0.0, 0.0, 0.0),
        bounds=((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0)),
    )


def sphere_scene(density=30.0):
    """Single unoccluded sphere (id 1)."""
    return SyntheticScene(
        [Primitive.sphere((0.0, 0.0, 0.0), 0.45, density, GREEN, 1)],
        background=(0.0, 0.0, 0.0),
        bounds=((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0)),
    )


def orbit_pose(azimuth_deg, elevation_deg, radius=2.8, focal=100.0, size=64, target=(0.0, 0.0, 0.0)):
    az, el = np.radians(azimuth_deg), np.radians(elevation_deg)
    eye = np.asarray(target) + radius * np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
    return CameraPose.look_at(eye, target, focal=focal, width=size, height=size)


def arc_poses(n_views=60, azimuth_range=(-110.0, 110.0), elevations=(8.0, 18.0, 28.0),
              radius=2.8, focal=100.0, size=64):
    """Views evenly spaced in azimuth, cycling through a few elevations."""
    az = np.linspace(*azimuth_range, n_views)
    return [orbit_pose(a, elevations[i % len(elevations)], radius, focal, size) for i, a in enumerate(az)]


def ring_poses(n_views=40, elevations=(10.0, 25.0), radius=2.8, focal=100.0, size=64):
    az = np.arange(n_views) * 360.0 / n_views
    return [orbit_pose(a, elevations[i % len(elevations)], radius, focal, size) for i, a in enumerate(az)]


HELD_OUT = ((0.0, 15.0), (90.0, 15.0), (-90.0, 15.0), (45.0, 15.0))


def held_out_poses(radius=2.8, focal=100.0, size=64):
    """Validation views: head-on along the occlusion axis (az 0), the two
    unoccluded side views (az +-90) and one oblique view."""
    return [orbit_pose(a, e, radius, focal, size) for a, e in HELD_OUT]


SCENES = {"occlusion": occlusion_scene, "sphere": sphere_scene}
