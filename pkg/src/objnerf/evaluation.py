"""Full-frame rendering of trained models and image metrics."""

from __future__ import annotations

import numpy as np

from .camera import camera_rays
from .volume_render import RenderResult, render_samples, stratified_sample


def render_image(model, pose, bounds, field="scene", n_samples=64, background=(0.0, 0.0, 0.0),
                 chunk=2048):
    """Render one branch over every pixel of ``pose`` with midpoint samples.

    Returns a RenderResult whose arrays are shaped (H, W, ...); weights are dropped.
    """
    rays = camera_rays(pose, bounds=bounds)
    n = len(rays)
    color = np.zeros((n, 3))
    opacity = np.zeros(n)
    depth = np.zeros(n)
    for start in range(0, n, chunk):
        sub = rays[start:start + chunk]
        samples = stratified_sample(sub, n_samples, jitter=False)
        res = render_samples(samples, sub, model, field, background)
        color[start:start + chunk] = res.color
        opacity[start:start + chunk] = res.opacity
        depth[start:start + chunk] = res.depth
    h, w = pose.height, pose.width
    return RenderResult(color.reshape(h, w, 3), opacity.reshape(h, w), depth.reshape(h, w), None)


def mse(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.mean((a - b) ** 2))


def psnr(pred, target, peak=1.0):
    err = mse(pred, target)
    if err == 0:
        return float("inf")
    return float(10.0 * np.log10(peak * peak / err))


def soft_iou(opacity, mask):
    """Soft IoU: sum(min(o, m)) / sum(max(o, m)) with ``m`` a 0/1 mask."""
    o = np.clip(np.asarray(opacity, dtype=np.float64), 0.0, 1.0)
    m = np.asarray(mask, dtype=np.float64)
    union = np.sum(np.maximum(o, m))
    if union == 0:
        return 1.0
    return float(np.sum(np.minimum(o, m)) / union)


def evaluate_scene_psnr(model, dataset, views, n_samples=64, background=(0.0, 0.0, 0.0)):
    values = []
    for v in views:
        res = render_image(model, dataset.poses[v], dataset.bounds, "scene", n_samples, background)
        values.append(psnr(res.color, dataset.rgb[v]))
    return float(np.mean(values))
