"""Scene-guided occlusion handling for object-branch supervision.

For a ray whose pixel is *not* labeled with the target object, samples beyond
the scene depth pushed forward by ``epsilon`` may sit inside an occluded part
of the object.  Those samples are pruned so that the "empty" mask signal
cannot carve the hidden region.  Rays inside the object's mask keep every
sample.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import InputError
from .volume_render import EPS_FLOOR, SampleSet, importance_resample


class Reason(enum.IntEnum):
    IN_MASK_FRUSTUM = 0
    BEFORE_GUARD_DEPTH = 1
    PRUNED_OCCLUDED = 2


@dataclass(frozen=True)
class GuardConfig:
    epsilon: float = 0.05

    def __post_init__(self):
        if not self.epsilon > 0:
            raise InputError("guard distance epsilon must be > 0")


@dataclass
class GuardDecision:
    keep: np.ndarray
    reason: np.ndarray
    nonfinite_depth: int = 0

    @property
    def pruned_fraction(self):
        return float(1.0 - self.keep.mean()) if self.keep.size else 0.0


def guard_mask(samples: SampleSet, d_scn, mask_value, cfg: GuardConfig = GuardConfig()):
    """Keep everything on mask=1 rays; on mask=0 rays keep ``t <= d_scn + epsilon``.

    A non-finite scene depth falls back to keep-all for that ray and is
    counted in ``GuardDecision.nonfinite_depth``.
    """
    t = samples.t
    d_scn = np.broadcast_to(np.asarray(d_scn, dtype=np.float64), t.shape[:-1])
    in_mask = np.broadcast_to(np.asarray(mask_value) > 0, t.shape[:-1])
    finite = np.isfinite(d_scn)
    limit = np.where(finite, d_scn, np.inf) + cfg.epsilon
    before = t <= limit[..., None]
    keep = in_mask[..., None] | before
    reason = np.where(
        in_mask[..., None],
        Reason.IN_MASK_FRUSTUM,
        np.where(before, Reason.BEFORE_GUARD_DEPTH, Reason.PRUNED_OCCLUDED),
    ).astype(np.int8)
    return GuardDecision(keep, reason, int(np.count_nonzero(~finite)))


def guarded_object_pass(ray, samples: SampleSet, scene_result, mask_value, n_imp, rng_seed=0,
                        cfg: GuardConfig = GuardConfig(), guidance=True, guard=True,
                        eps_floor=EPS_FLOOR):
    """Scene guidance (importance resampling on scene weights) then the guard mask.

    ``scene_result`` must come from the current parameters; its depth is used
    as a constant (no gradient flows through the guard decision).
    Returns ``(samples_with_keep_flags, decision)``.
    """
    if guidance and n_imp > 0:
        merged = importance_resample(ray, samples, scene_result.weights, n_imp, rng_seed, eps_floor)
    else:
        merged = SampleSet(samples.t, samples.delta, samples.x, np.ones_like(samples.keep), samples.far)
    if guard:
        decision = guard_mask(merged, np.asarray(scene_result.depth, dtype=np.float64), mask_value, cfg)
    else:
        keep = np.ones(merged.t.shape, dtype=bool)
        reason = np.full(merged.t.shape, Reason.IN_MASK_FRUSTUM, dtype=np.int8)
        in_mask = np.broadcast_to(np.asarray(mask_value) > 0, merged.t.shape[:-1])
        reason[~in_mask] = Reason.BEFORE_GUARD_DEPTH
        decision = GuardDecision(keep, reason)
    return merged.masked(decision.keep), decision
