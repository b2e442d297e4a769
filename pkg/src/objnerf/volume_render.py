"""Ray sampling and quadrature compositing.

For samples ``t_1 < ... < t_N`` with spacings ``delta_i`` (``delta_N = far - t_N``):

    alpha_i = 1 - exp(-sigma_i delta_i)
    T_i     = exp(-sum_{j<i} sigma_j delta_j)
    color   = sum_i T_i alpha_i c_i + (1 - opacity) * background
    opacity = sum_i T_i alpha_i
    depth   = sum_i T_i alpha_i t_i + (1 - opacity) * far

Every function works on a batch: arrays carry leading ray dimensions and a
trailing sample dimension.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import Ray
from .errors import InputError

EPS_FLOOR = 1e-3


@dataclass
class SampleSet:
    t: np.ndarray
    delta: np.ndarray
    x: np.ndarray
    keep: np.ndarray
    far: np.ndarray

    @property
    def n_samples(self):
        return self.t.shape[-1]

    def masked(self, keep):
        return SampleSet(self.t, self.delta, self.x, keep, self.far)


@dataclass
class RenderResult:
    color: np.ndarray
    opacity: np.ndarray
    depth: np.ndarray
    weights: np.ndarray
    transmittance: np.ndarray = None


def spacings(t, far):
    """delta_i = t_{i+1} - t_i, last spacing ``far - t_N``."""
    far = np.asarray(far, dtype=t.dtype)
    return np.concatenate([np.diff(t, axis=-1), far[..., None] - t[..., -1:]], axis=-1)


def make_samples(ray: Ray, t):
    t = np.asarray(t, dtype=np.float64)
    return SampleSet(t, spacings(t, ray.far), ray.at(t), np.ones(t.shape, dtype=bool),
                     np.asarray(ray.far, dtype=np.float64))


def _rng(seed):
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def stratified_sample(ray: Ray, n, jitter=False, rng_seed=0) -> SampleSet:
    """``n`` samples on ``[near, far]``: one uniform draw per equal bin, or bin midpoints."""
    if n < 1:
        raise InputError("need at least one sample per ray")
    near = np.asarray(ray.near, dtype=np.float64)[..., None]
    far = np.asarray(ray.far, dtype=np.float64)[..., None]
    shape = np.shape(ray.near) + (n,)
    u = _rng(rng_seed).random(shape) if jitter else np.full(shape, 0.5)
    t = near + (far - near) * (np.arange(n) + u) / n
    return make_samples(ray, t)


def composite(samples: SampleSet, sigma, color, background=None) -> RenderResult:
    """Quadrature compositing; samples with ``keep == False`` have zero density.

    ``background=None`` drops the ``(1 - opacity) * background`` term (used for
    object-branch renders).
    """
    sigma = np.asarray(sigma)
    color = np.asarray(color)
    if sigma.shape != samples.t.shape or color.shape != samples.t.shape + (3,):
        raise InputError(f"shape mismatch: t {samples.t.shape}, sigma {sigma.shape}, color {color.shape}")
    if np.any(sigma < 0):
        raise InputError("negative density")
    dtype = np.result_type(sigma.dtype, np.float32)
    tau = sigma * samples.delta.astype(dtype) * samples.keep
    cum = np.cumsum(tau, axis=-1)
    trans = np.exp(-(cum - tau))
    weights = trans * (-np.expm1(-tau))
    opacity = weights.sum(axis=-1)
    rgb = np.einsum("...s,...sc->...c", weights, color)
    if background is not None:
        rgb = rgb + (1.0 - opacity)[..., None] * np.asarray(background, dtype=dtype)
    depth = (weights * samples.t).sum(axis=-1) + (1.0 - opacity) * samples.far
    return RenderResult(rgb, opacity, depth, weights, trans)


def composite_backward(samples: SampleSet, result: RenderResult, sigma, color, d_color,
                       d_opacity=None, d_depth=None, background=None):
    """Gradients ``(d_sigma, d_sample_color)`` of a scalar loss through :func:`composite`.

    Uses d(sum_i w_i y_i)/d tau_k = T_{k+1} y_k - sum_{i>k} w_i y_i.
    Pruned samples receive exactly zero gradient.
    """
    w = result.weights
    dtype = w.dtype
    d_color = np.asarray(d_color, dtype=dtype)
    y = np.einsum("...c,...sc->...s", d_color, color)
    if background is not None:
        y = y - (d_color @ np.asarray(background, dtype=dtype))[..., None]
    if d_opacity is not None:
        y = y + np.asarray(d_opacity, dtype=dtype)[..., None]
    if d_depth is not None:
        y = y + np.asarray(d_depth, dtype=dtype)[..., None] * (samples.t - samples.far[..., None])
    wy = w * y
    tail = wy.sum(axis=-1, keepdims=True) - np.cumsum(wy, axis=-1)
    t_next = result.transmittance - w
    d_tau = t_next * y - tail
    d_sigma = d_tau * samples.delta.astype(dtype) * samples.keep
    d_sample_color = w[..., None] * d_color[..., None, :]
    return d_sigma, d_sample_color


def importance_resample(ray: Ray, samples: SampleSet, scene_weights, n_imp, rng_seed=0,
                        eps_floor=EPS_FLOOR) -> SampleSet:
    """Draw ``n_imp`` extra distances from the piecewise-constant pdf whose mass on
    bin ``[t_i, t_i + delta_i]`` is proportional to ``scene_weights_i + eps_floor``,
    then merge them with ``samples`` (sorted ascending)."""
    w = np.asarray(scene_weights, dtype=np.float64) + eps_floor
    total = w.sum(axis=-1, keepdims=True)
    w = np.where(total > 0, w, samples.delta)
    cdf = np.cumsum(w, axis=-1)
    cdf = np.concatenate([np.zeros_like(cdf[..., :1]), cdf / cdf[..., -1:]], axis=-1)
    u = _rng(rng_seed).random(np.shape(ray.near) + (n_imp,))
    n_bins = w.shape[-1]
    bins = np.sum(u[..., :, None] >= cdf[..., None, 1:-1], axis=-1)
    bins = np.clip(bins, 0, n_bins - 1)
    lo = np.take_along_axis(cdf, bins, axis=-1)
    hi = np.take_along_axis(cdf, bins + 1, axis=-1)
    frac = np.where(hi > lo, (u - lo) / np.where(hi > lo, hi - lo, 1.0), 0.5)
    t0 = np.take_along_axis(samples.t, bins, axis=-1)
    dt = np.take_along_axis(samples.delta, bins, axis=-1)
    t_new = t0 + frac * dt
    t = np.sort(np.concatenate([samples.t, t_new], axis=-1), axis=-1)
    return make_samples(ray, t)


def render_ray(ray: Ray, model, field="scene", n_samples=64, jitter=False, rng_seed=0,
               background=(0.0, 0.0, 0.0)) -> RenderResult:
    """Sample, embed, query one branch and composite.

    ``field`` is ``"scene"`` or an object id ``k``; object renders omit the
    background term and return that object's color and 2D opacity.
    """
    samples = stratified_sample(ray, n_samples, jitter, rng_seed)
    return render_samples(samples, ray, model, field, background)


def render_samples(samples: SampleSet, ray: Ray, model, field="scene", background=(0.0, 0.0, 0.0)):
    dirs = np.broadcast_to(ray.direction[..., None, :], samples.x.shape)
    if field == "scene":
        out, _ = model.query_scene(samples.x.reshape(-1, 3), dirs.reshape(-1, 3))
    else:
        out, _ = model.query_object(samples.x.reshape(-1, 3), dirs.reshape(-1, 3), field)
        background = None
    sigma = out.sigma.reshape(samples.t.shape)
    color = out.color.reshape(samples.t.shape + (3,))
    return composite(samples, sigma, color, background)
