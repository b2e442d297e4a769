"""Joint optimization of the scene and object branches from images and masks."""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .camera import camera_rays
from .errors import InputError, NumericError
from .field_network import FieldModel, ModelConfig, save_checkpoint
from .occlusion import GuardConfig, guarded_object_pass
from .volume_render import composite, composite_backward, stratified_sample

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossConfig:
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda_depth: float = 0.0

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0 or self.lambda_depth < 0:
            raise InputError("loss weights must be >= 0")


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 1500
    batch_size: int = 512
    n_samples: int = 32
    n_importance: int = 16
    lr: float = 5e-3
    lr_final: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    guidance: bool = True
    guard: bool = True
    epsilon: float = 0.05
    eps_floor: float = 1e-3
    loss: LossConfig = field(default_factory=LossConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    background: tuple = (0.0, 0.0, 0.0)
    val_views: tuple = ()
    eval_every: int = 0
    eval_samples: int = 64
    checkpoint_every: int = 0

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "loss" in d:
            d["loss"] = LossConfig(**d["loss"])
        if "model" in d:
            d["model"] = ModelConfig.from_dict(d["model"])
        for key in ("background", "val_views"):
            if key in d:
                d[key] = tuple(d[key])
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise InputError(f"unknown training options: {sorted(unknown)}")
        return cls(**d)


def scene_loss(gt_color, render_color):
    """Sum of squared color errors; returns ``(loss, d_render_color)``."""
    diff = render_color - gt_color
    return float(np.sum(diff * diff)), 2.0 * diff


def balanced_weight(mask_values, targets=None):
    """Per-ray weight equalizing total mask-1 and mask-0 influence per object.

    Within the rays targeting object ``k``: mask-1 rays get ``n0 / n`` and
    mask-0 rays ``n1 / n``.  A class-pure group gets weight 1.
    """
    m = np.asarray(mask_values) > 0
    targets = np.zeros(m.shape, dtype=np.int64) if targets is None else np.asarray(targets)
    w = np.ones(m.shape, dtype=np.float64)
    for k in np.unique(targets):
        sel = targets == k
        n1 = int(np.count_nonzero(m & sel))
        n0 = int(np.count_nonzero(~m & sel))
        if n1 == 0 or n0 == 0:
            continue
        n = n0 + n1
        w[sel & m] = n0 / n
        w[sel & ~m] = n1 / n
    return w


def object_loss(gt_color, mask_values, render_color, render_opacity, weights, cfg: LossConfig = LossConfig()):
    """``sum_r l1 M ||C_obj - C||^2 + l2 w (O_obj - M)^2``.

    Returns ``(loss, d_render_color, d_render_opacity)``.
    """
    m = np.asarray(mask_values, dtype=np.float64)
    if not (len(m) == len(render_color) == len(render_opacity) == len(gt_color) == len(weights)):
        raise InputError("render and batch lengths differ")
    diff = render_color - gt_color
    odiff = render_opacity - m
    color_term = cfg.lambda1 * m * np.sum(diff * diff, axis=-1)
    opacity_term = cfg.lambda2 * weights * odiff * odiff
    loss = float(np.sum(color_term) + np.sum(opacity_term))
    d_color = 2.0 * cfg.lambda1 * m[:, None] * diff
    d_opacity = 2.0 * cfg.lambda2 * weights * odiff
    return loss, d_color, d_opacity


def total_loss(l_obj, l_scn):
    return l_obj + l_scn


def assign_targets(n_rays, n_objects, rng):
    """Shuffled round-robin object ids: each id gets ``n_rays / K`` rays (+-1)."""
    return rng.permutation(np.arange(n_rays) % n_objects) + 1


class Adam:
    """Adaptive moment estimation with an exponential learning-rate decay."""

    def __init__(self, params, lr, lr_final, total_steps, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.lr_final, self.total_steps = lr, lr_final, max(int(total_steps), 1)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.step_count = 0

    def current_lr(self):
        if self.lr == 0:
            return 0.0
        frac = min(self.step_count / self.total_steps, 1.0)
        return self.lr * (self.lr_final / self.lr) ** frac

    def step(self, params, grads):
        lr = self.current_lr()
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for name, g in grads.items():
            m, v, p = self.m[name], self.v[name], params[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if lr:
                p -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


@dataclass
class RayTable:
    """Every training pixel flattened: ray geometry, color, instance label."""

    origins: np.ndarray
    directions: np.ndarray
    near: np.ndarray
    far: np.ndarray
    colors: np.ndarray
    labels: np.ndarray
    depths: np.ndarray = None

    @classmethod
    def from_dataset(cls, dataset, views=None, bounds=None):
        views = range(len(dataset.poses)) if views is None else views
        bounds = dataset.bounds if bounds is None else bounds
        parts = []
        for v in views:
            r = camera_rays(dataset.poses[v], bounds=bounds)
            parts.append((r.origin, r.direction, r.near, r.far,
                          dataset.rgb[v].astype(np.float32).reshape(-1, 3), dataset.masks[v].reshape(-1),
                          None if dataset.depths is None else dataset.depths[v].reshape(-1)))
        cols = list(zip(*parts))
        depths = None if dataset.depths is None else np.concatenate(cols[6])
        return cls(*(np.concatenate(c) for c in cols[:6]), depths)

    def __len__(self):
        return len(self.near)

    def rays(self, idx):
        from .camera import Ray
        return Ray(self.origins[idx], self.directions[idx], self.near[idx], self.far[idx])


@dataclass
class StepStats:
    l_scn: float
    l_obj: float
    l_depth: float
    pruned_fraction: float

    @property
    def total(self):
        return self.l_scn + self.l_obj + self.l_depth


def compute_batch(model: FieldModel, table: RayTable, idx, targets, cfg: TrainConfig, rng):
    """Forward + backward for one ray batch. Returns ``(stats, grads, pruned_grad_check)``.

    The third element is the per-sample object-branch density gradient of
    pruned samples (all zeros by construction) for auditing.
    """
    rays = table.rays(idx)
    gt = table.colors[idx].astype(np.float64)
    mask = (table.labels[idx] == targets).astype(np.float64)
    bg = np.asarray(cfg.background, dtype=np.float64)
    dirs_of = lambda s: np.broadcast_to(rays.direction[:, None, :], s.x.shape).reshape(-1, 3)

    # scene branch
    s_samples = stratified_sample(rays, cfg.n_samples, jitter=True, rng_seed=rng)
    s_out, s_tape = model.query_scene(s_samples.x.reshape(-1, 3), dirs_of(s_samples))
    s_sigma = s_out.sigma.reshape(s_samples.t.shape)
    s_color = s_out.color.reshape(s_samples.t.shape + (3,))
    s_res = composite(s_samples, s_sigma, s_color, bg)

    # object branch on scene-guided, guard-masked samples
    o_samples, decision = guarded_object_pass(
        rays, s_samples, s_res, mask, cfg.n_importance, rng, GuardConfig(cfg.epsilon),
        guidance=cfg.guidance, guard=cfg.guard, eps_floor=cfg.eps_floor,
    )
    keep = o_samples.keep
    o_sigma = np.zeros(o_samples.t.shape, dtype=model.dtype)
    o_color = np.zeros(o_samples.t.shape + (3,), dtype=model.dtype)
    o_dirs = np.broadcast_to(rays.direction[:, None, :], o_samples.x.shape)
    sample_targets = np.broadcast_to(targets[:, None], o_samples.t.shape)
    o_out, o_tape = model.query_object(o_samples.x[keep], o_dirs[keep], sample_targets[keep])
    o_sigma[keep] = o_out.sigma
    o_color[keep] = o_out.color
    o_res = composite(o_samples, o_sigma, o_color, None)

    weights = balanced_weight(mask, targets)
    l_scn, d_scn_color = scene_loss(gt, s_res.color)
    l_obj, d_obj_color, d_obj_opacity = object_loss(gt, mask, o_res.color, o_res.opacity, weights, cfg.loss)
    l_depth, d_depth = 0.0, None
    if cfg.loss.lambda_depth > 0 and table.depths is not None:
        gt_d = table.depths[idx].astype(np.float64)
        valid = np.isfinite(gt_d) & (gt_d > 0)
        dd = np.where(valid, s_res.depth - gt_d, 0.0)
        l_depth = float(cfg.loss.lambda_depth * np.sum(dd * dd))
        d_depth = 2.0 * cfg.loss.lambda_depth * dd
    if not np.isfinite(l_scn + l_obj + l_depth):
        raise NumericError(f"non-finite loss (L_scn={l_scn}, L_obj={l_obj})")

    grads = {}
    ds_sigma, ds_color = composite_backward(s_samples, s_res, s_sigma, s_color, d_scn_color,
                                            d_depth=d_depth, background=bg)
    model.backward(s_tape, ds_sigma.reshape(-1), ds_color.reshape(-1, 3), grads)
    do_sigma, do_color = composite_backward(o_samples, o_res, o_sigma, o_color, d_obj_color,
                                            d_opacity=d_obj_opacity)
    model.backward(o_tape, do_sigma[keep], do_color[keep], grads)
    stats = StepStats(l_scn, l_obj, l_depth, decision.pruned_fraction)
    return stats, grads, (do_sigma[~keep], do_color[~keep])


def train(dataset, config: TrainConfig = TrainConfig(), out_dir=None, model=None, callback=None):
    """Train a model on ``dataset``; returns ``(model, history)``.

    With ``out_dir`` the run writes ``train_log.jsonl`` and ``model.ckpt`` (plus
    ``model_<step>.ckpt`` every ``checkpoint_every`` steps).
    """
    n_obj = dataset.n_objects
    if n_obj < 1:
        raise InputError("dataset has no labeled objects")
    bounds = dataset.bounds
    if bounds is None:
        raise InputError("dataset has no scene bounds")
    if dataset.scene is not None and cfg_gap_warning(dataset.scene, config.epsilon):
        log.warning("objects closer than guard distance epsilon=%g", config.epsilon)
    rng = np.random.default_rng(config.seed)
    model = FieldModel.create(bounds, n_obj, config.model, seed=config.seed) if model is None else model
    train_views = [v for v in range(len(dataset.poses)) if v not in set(config.val_views)]
    table = RayTable.from_dataset(dataset, train_views)
    opt = Adam(model.params, config.lr, config.lr_final, config.steps,
               config.beta1, config.beta2, config.adam_eps)
    out_dir = None if out_dir is None else Path(out_dir)
    log_file = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_file = open(out_dir / "train_log.jsonl", "w")
    history = []
    try:
        for step in range(1, config.steps + 1):
            idx = rng.integers(0, len(table), size=config.batch_size)
            targets = assign_targets(config.batch_size, n_obj, rng)
            try:
                stats, grads, _ = compute_batch(model, table, idx, targets, config, rng)
            except NumericError:
                if out_dir is not None:
                    np.savez(out_dir / "nan_batch.npz", idx=idx, targets=targets, step=step)
                raise
            opt.step(model.params, grads)
            model.mark_updated()
            record = {
                "step": step,
                "L_scn": stats.l_scn,
                "L_obj": stats.l_obj,
                "pruned_fraction": stats.pruned_fraction,
                "psnr_val": None,
            }
            if config.eval_every and config.val_views and (step % config.eval_every == 0 or step == config.steps):
                from .evaluation import evaluate_scene_psnr
                record["psnr_val"] = evaluate_scene_psnr(model, dataset, config.val_views,
                                                         config.eval_samples, config.background)
            history.append(record)
            if log_file is not None:
                log_file.write(json.dumps(record) + "\n")
            if callback is not None:
                callback(step, model, record)
            if out_dir is not None and config.checkpoint_every and step % config.checkpoint_every == 0:
                save_checkpoint(out_dir / f"model_{step:06d}.ckpt", model, checkpoint_extra(dataset, config, step))
    finally:
        if log_file is not None:
            log_file.close()
    if out_dir is not None:
        save_checkpoint(out_dir / "model.ckpt", model, checkpoint_extra(dataset, config, config.steps))
    return model, history


def checkpoint_extra(dataset, config, step):
    """Metadata stored next to the weights; object boxes become default removal regions."""
    extra = {"train": config.to_dict(), "step": step}
    if dataset.scene is not None:
        extra["object_boxes"] = {
            str(k): [list(map(float, b)) for b in dataset.scene.object_box(k)]
            for k in dataset.scene.instance_ids
        }
    return extra


def cfg_gap_warning(scene, epsilon):
    return len(scene.instance_ids) > 1 and scene.min_gap() < epsilon
