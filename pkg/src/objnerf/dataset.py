"""Synthetic scenes with analytic density/color, oracle rendering, dataset I/O.

On-disk layout of a dataset directory::

    poses.json        [{R: 9 floats row-major, t: 3 floats, focal, cx, cy, width, height}, ...]
    rgb/NNNN.png      8-bit RGB
    mask/NNNN.png     8-bit single channel, value = instance id (0 = unlabeled)
    depth/NNNN.f32    optional, row-major little-endian float32
    scene.json        primitive list (synthetic scenes only)
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .camera import CameraPose, camera_rays, check_rotation, intersect_box
from .errors import InputError, LoadError, ValidationError
from .volume_render import SampleSet, composite

log = logging.getLogger(__name__)

MASK_THRESHOLD = 0.5


@dataclass
class Primitive:
    shape: str
    size: np.ndarray
    rotation: np.ndarray
    translation: np.ndarray
    density: float
    albedo: np.ndarray
    instance_id: int

    def __post_init__(self):
        if self.shape not in ("box", "sphere"):
            raise InputError(f"unknown primitive shape {self.shape!r}")
        self.size = np.atleast_1d(np.asarray(self.size, dtype=np.float64))
        self.rotation = check_rotation(self.rotation)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        self.albedo = np.asarray(self.albedo, dtype=np.float64).reshape(3)
        if self.density < 0:
            raise InputError("primitive density must be >= 0")
        if np.any(self.albedo < 0) or np.any(self.albedo > 1):
            raise InputError("albedo must lie in [0, 1]")

    @classmethod
    def box(cls, center, half_extents, density, albedo, instance_id, rotation=None):
        rotation = np.eye(3) if rotation is None else rotation
        return cls("box", half_extents, rotation, center, density, albedo, instance_id)

    @classmethod
    def sphere(cls, center, radius, density, albedo, instance_id):
        return cls("sphere", [radius], np.eye(3), center, density, albedo, instance_id)

    def contains(self, x):
        local = (np.asarray(x) - self.translation) @ self.rotation
        if self.shape == "box":
            return np.all(np.abs(local) <= self.size, axis=-1)
        return np.sum(local * local, axis=-1) <= self.size[0] ** 2

    def aabb(self):
        """World-space axis-aligned bounding box ``(min, max)``."""
        if self.shape == "sphere":
            r = self.size[0]
            return self.translation - r, self.translation + r
        half = np.abs(self.rotation) @ self.size
        return self.translation - half, self.translation + half

    def chord(self, origin, direction):
        """Exact entry and exit distances ``(t_in, t_out)`` along rays, clipped at 0.

        Both are ``inf`` for rays that miss.
        """
        o = (np.asarray(origin) - self.translation) @ self.rotation
        d = np.asarray(direction) @ self.rotation
        if self.shape == "box":
            with np.errstate(divide="ignore", invalid="ignore"):
                t0 = (-self.size - o) / d
                t1 = (self.size - o) / d
            lo = np.where(np.isnan(t0), -np.inf, np.minimum(t0, t1)).max(axis=-1)
            hi = np.where(np.isnan(t1), np.inf, np.maximum(t0, t1)).min(axis=-1)
            hit = hi >= np.maximum(lo, 0.0)
        else:
            b = np.sum(o * d, axis=-1) / np.sum(d * d, axis=-1)
            c = (np.sum(o * o, axis=-1) - self.size[0] ** 2) / np.sum(d * d, axis=-1)
            disc = b * b - c
            root = np.sqrt(np.maximum(disc, 0.0))
            lo, hi = -b - root, -b + root
            hit = (disc >= 0) & (hi >= 0)
        return np.where(hit, np.maximum(lo, 0.0), np.inf), np.where(hit, hi, np.inf)

    def intersect(self, origin, direction):
        """Exact entry distance along rays, ``inf`` on miss."""
        return self.chord(origin, direction)[0]

    def to_dict(self):
        return {
            "shape": self.shape,
            "size": self.size.tolist(),
            "R": self.rotation.ravel().tolist(),
            "t": self.translation.tolist(),
            "density": float(self.density),
            "albedo": self.albedo.tolist(),
            "instance_id": int(self.instance_id),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["shape"], d["size"], np.asarray(d["R"]).reshape(3, 3), d["t"],
                   float(d["density"]), d["albedo"], int(d["instance_id"]))


@dataclass
class SyntheticScene:
    primitives: list
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))
    bounds: tuple = ((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0))

    def __post_init__(self):
        self.background = np.asarray(self.background, dtype=np.float64).reshape(3)
        lo, hi = (np.asarray(b, dtype=np.float64) for b in self.bounds)
        self.bounds = (lo, hi)
        for p in self.primitives:
            pmin, pmax = p.aabb()
            if np.any(pmin < lo - 1e-9) or np.any(pmax > hi + 1e-9):
                raise InputError(f"primitive {p.instance_id} extends outside scene bounds")

    @property
    def instance_ids(self):
        return sorted({p.instance_id for p in self.primitives})

    def subset(self, ids):
        """Scene restricted to the primitives of the given instance ids."""
        ids = set(np.atleast_1d(ids).tolist())
        return SyntheticScene([p for p in self.primitives if p.instance_id in ids],
                              self.background, self.bounds)

    def object_box(self, k, inflate=0.05):
        """AABB of instance ``k``, inflated by ``inflate`` of its size."""
        boxes = [p.aabb() for p in self.primitives if p.instance_id == k]
        lo = np.min([b[0] for b in boxes], axis=0)
        hi = np.max([b[1] for b in boxes], axis=0)
        pad = 0.5 * inflate * (hi - lo)
        return lo - pad, hi + pad

    def min_gap(self):
        """Smallest AABB gap between distinct instances (0 when overlapping)."""
        ids = self.instance_ids
        best = np.inf
        for i, a in enumerate(ids):
            for b in ids[i + 1:]:
                (alo, ahi), (blo, bhi) = self.object_box(a, 0.0), self.object_box(b, 0.0)
                sep = np.maximum(0.0, np.maximum(blo - ahi, alo - bhi))
                best = min(best, float(np.linalg.norm(sep)))
        return best

    def to_dict(self):
        return {
            "primitives": [p.to_dict() for p in self.primitives],
            "background": self.background.tolist(),
            "bounds": [b.tolist() for b in self.bounds],
        }

    @classmethod
    def from_dict(cls, d):
        return cls([Primitive.from_dict(p) for p in d["primitives"]], d["background"],
                   tuple(d["bounds"]))


def _field_terms(scene: SyntheticScene, x):
    x = np.asarray(x, dtype=np.float64)
    sigma = np.zeros(x.shape[:-1])
    weighted = np.zeros(x.shape)
    per_instance = {}
    for p in scene.primitives:
        s = p.density * p.contains(x)
        sigma += s
        weighted += s[..., None] * p.albedo
        per_instance[p.instance_id] = per_instance.get(p.instance_id, 0.0) + s
    return sigma, weighted, per_instance


def eval_analytic_field(scene: SyntheticScene, x):
    """Density (sum over containing primitives) and density-weighted mean albedo."""
    sigma, weighted, _ = _field_terms(scene, x)
    with np.errstate(invalid="ignore", divide="ignore"):
        color = np.where(sigma[..., None] > 0, weighted / sigma[..., None], scene.background)
    return sigma, color


@dataclass
class OracleRender:
    color: np.ndarray
    opacity: np.ndarray
    depth: np.ndarray
    mask: np.ndarray
    instance_opacity: dict


def _aligned_samples(scene, rays, n_samples):
    """``n_samples`` equal bins with every primitive entry/exit inserted as an
    extra bin edge, sampled at bin midpoints.

    Each bin then lies inside one constant-density region, so the midpoint
    rule integrates the piecewise-constant field exactly; ``n_samples`` only
    refines where depth and color are evaluated.
    """
    near = np.asarray(rays.near, dtype=np.float64)[:, None]
    far = np.asarray(rays.far, dtype=np.float64)[:, None]
    edges = [near + (far - near) * np.arange(n_samples + 1) / n_samples]
    for p in scene.primitives:
        t_in, t_out = p.chord(rays.origin, rays.direction)
        edges.append(np.clip(np.stack([t_in, t_out], axis=-1), near, far))
    edges = np.sort(np.concatenate(edges, axis=-1), axis=-1)
    t = 0.5 * (edges[:, 1:] + edges[:, :-1])
    delta = np.diff(edges, axis=-1)
    return SampleSet(t, delta, rays.at(t), np.ones(t.shape, dtype=bool), far[:, 0])


def render_analytic(scene: SyntheticScene, rays, n_samples=1024, chunk=4096):
    """Midpoint quadrature of the analytic fields along ``rays`` with bin
    edges aligned to primitive boundaries (exact up to rounding).

    The instance mask holds the id whose share of the accumulated opacity
    exceeds 0.5 (at most one id can), else 0.
    """
    n = len(rays)
    flat = rays.flatten()
    color = np.tile(scene.background, (n, 1))
    opacity = np.zeros(n)
    depth = np.array(flat.far, dtype=np.float64)
    inst = {k: np.zeros(n) for k in scene.instance_ids}
    # rays missing every primitive box integrate an empty field exactly
    active = np.zeros(n, dtype=bool)
    for p in scene.primitives:
        lo, hi = p.aabb()
        t_in, t_out, hit = intersect_box(flat.origin, flat.direction, lo, hi)
        active |= hit & (t_in <= flat.far) & (t_out >= flat.near)
    active_idx = np.flatnonzero(active)
    for start in range(0, len(active_idx), chunk):
        sl = active_idx[start:start + chunk]
        sub = flat[sl]
        samples = _aligned_samples(scene, sub, n_samples)
        sigma, weighted, per_inst = _field_terms(scene, samples.x)
        with np.errstate(invalid="ignore", divide="ignore"):
            c = np.where(sigma[..., None] > 0, weighted / sigma[..., None], 0.0)
        res = composite(samples, sigma, c, scene.background)
        color[sl], opacity[sl], depth[sl] = res.color, res.opacity, res.depth
        with np.errstate(invalid="ignore", divide="ignore"):
            for k, s in per_inst.items():
                share = np.where(sigma > 0, s / sigma, 0.0)
                inst[k][sl] = np.sum(res.weights * share, axis=-1)
    mask = np.zeros(n, dtype=np.int64)
    for k, o in inst.items():
        mask[o > MASK_THRESHOLD] = k
    return OracleRender(color, opacity, depth, mask, inst)


def render_pose_analytic(scene, pose: CameraPose, n_samples=1024):
    """Full-frame oracle render; arrays reshaped to (H, W, ...)."""
    rays = camera_rays(pose, bounds=scene.bounds)
    out = render_analytic(scene, rays, n_samples)
    h, w = pose.height, pose.width
    return OracleRender(
        out.color.reshape(h, w, 3),
        out.opacity.reshape(h, w),
        out.depth.reshape(h, w),
        out.mask.reshape(h, w),
        {k: v.reshape(h, w) for k, v in out.instance_opacity.items()},
    )


@dataclass(frozen=True)
class Dataset:
    """Posed views with 8-bit images and instance masks. Treat as read-only."""

    images: np.ndarray
    masks: np.ndarray
    poses: list
    depths: np.ndarray = None
    scene: SyntheticScene = None

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[-1] != 3:
            raise ValidationError(f"images must be (V, H, W, 3), got {self.images.shape}")
        if self.masks.shape != self.images.shape[:3]:
            raise ValidationError(
                f"mask shape {self.masks.shape} does not match image shape {self.images.shape[:3]}"
            )
        if len(self.poses) != self.images.shape[0]:
            raise ValidationError("number of poses and images differ")
        for p in self.poses:
            if (p.height, p.width) != self.images.shape[1:3]:
                raise ValidationError("pose resolution does not match image resolution")

    @property
    def n_objects(self):
        return int(self.masks.max()) if self.masks.size else 0

    @property
    def rgb(self):
        return self.images.astype(np.float64) / 255.0

    @property
    def bounds(self):
        return None if self.scene is None else self.scene.bounds


def _to_u8(img):
    return np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def generate_synthetic_scene(scene: SyntheticScene, poses, oracle_samples=1024, path=None):
    """Render every pose with the analytic oracle; optionally write to ``path``."""
    if oracle_samples < 1024:
        raise InputError("oracle_samples must be >= 1024")
    for p in poses:
        check_rotation(p.rotation)
    if len(scene.instance_ids) > 255:
        raise InputError("at most 255 instances fit in an 8-bit mask")
    images, masks, depths = [], [], []
    for pose in poses:
        out = render_pose_analytic(scene, pose, oracle_samples)
        images.append(_to_u8(out.color))
        masks.append(out.mask.astype(np.uint8))
        depths.append(out.depth.astype(np.float32))
    data = Dataset(np.stack(images), np.stack(masks), list(poses), np.stack(depths), scene)
    if path is not None:
        save_dataset(data, path)
    return data


def save_dataset(data: Dataset, path):
    path = Path(path)
    for sub in ("rgb", "mask") + (("depth",) if data.depths is not None else ()):
        (path / sub).mkdir(parents=True, exist_ok=True)
    with open(path / "poses.json", "w") as f:
        json.dump([p.to_dict() for p in data.poses], f, indent=1)
    if data.scene is not None:
        with open(path / "scene.json", "w") as f:
            json.dump(data.scene.to_dict(), f, indent=1)
    for i in range(len(data.poses)):
        Image.fromarray(data.images[i], "RGB").save(path / "rgb" / f"{i:04d}.png")
        Image.fromarray(data.masks[i].astype(np.uint8), "L").save(path / "mask" / f"{i:04d}.png")
        if data.depths is not None:
            data.depths[i].astype("<f4").tofile(path / "depth" / f"{i:04d}.f32")


def _read_json(path):
    try:
        with open(path) as f:
            return json.load(f)
    except FileNotFoundError as exc:
        raise LoadError(path, "file not found") from exc
    except ValueError as exc:
        raise LoadError(path, f"invalid JSON ({exc})") from exc


def _read_png(path, mode):
    try:
        with Image.open(path) as im:
            if im.mode != mode:
                raise LoadError(path, f"expected PNG mode {mode}, got {im.mode}")
            return np.asarray(im).copy()
    except FileNotFoundError as exc:
        raise LoadError(path, "file not found") from exc
    except OSError as exc:
        if isinstance(exc, LoadError):
            raise
        raise LoadError(path, f"unreadable image ({exc})") from exc


def load_dataset(path) -> Dataset:
    """Read a dataset directory written by :func:`save_dataset`."""
    path = Path(path)
    raw_poses = _read_json(path / "poses.json")
    try:
        poses = [CameraPose.from_dict(d) for d in raw_poses]
    except (KeyError, TypeError, ValueError) as exc:
        raise LoadError(path / "poses.json", f"malformed pose entry ({exc})") from exc
    images, masks, depths = [], [], []
    has_depth = (path / "depth").is_dir()
    for i, pose in enumerate(poses):
        images.append(_read_png(path / "rgb" / f"{i:04d}.png", "RGB"))
        masks.append(_read_png(path / "mask" / f"{i:04d}.png", "L"))
        if has_depth:
            f = path / "depth" / f"{i:04d}.f32"
            try:
                d = np.fromfile(f, dtype="<f4")
            except FileNotFoundError as exc:
                raise LoadError(f, "file not found") from exc
            if d.size != pose.width * pose.height:
                raise LoadError(f, f"expected {pose.width * pose.height} floats, got {d.size}")
            depths.append(d.reshape(pose.height, pose.width))
    for i, (im, m) in enumerate(zip(images, masks)):
        if im.shape[:2] != m.shape:
            raise ValidationError(f"view {i}: mask {m.shape} vs image {im.shape[:2]}")
    scene = None
    if (path / "scene.json").exists():
        try:
            scene = SyntheticScene.from_dict(_read_json(path / "scene.json"))
        except (KeyError, TypeError) as exc:
            raise LoadError(path / "scene.json", f"malformed scene ({exc})") from exc
    if not images:
        raise LoadError(path / "poses.json", "no views")
    try:
        return Dataset(np.stack(images), np.stack(masks), poses,
                       np.stack(depths) if has_depth else None, scene)
    except ValueError as exc:
        if isinstance(exc, ValidationError):
            raise
        raise ValidationError(f"views have inconsistent resolutions ({exc})") from exc
