import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from objnerf.camera import Ray
from objnerf.errors import InputError
from objnerf.occlusion import GuardConfig, Reason, guard_mask, guarded_object_pass
from objnerf.volume_render import composite, composite_backward, make_samples, stratified_sample


def samples_at(t, far=4.0):
    t = np.atleast_2d(np.asarray(t, dtype=np.float64))
    n = t.shape[0]
    ray = Ray(np.zeros((n, 3)), np.tile([0, 0, 1.0], (n, 1)), np.zeros(n), np.full(n, far))
    return make_samples(ray, t)


def test_mask_one_keeps_all():
    d = guard_mask(samples_at([1.0, 2.0, 3.0]), 0.5, 1)
    assert d.keep.all()
    assert np.all(d.reason == Reason.IN_MASK_FRUSTUM)


def test_threshold_example():
    d = guard_mask(samples_at([1.0, 2.0, 2.1, 3.0]), 2.0, 0, GuardConfig(0.05))
    np.testing.assert_array_equal(d.keep[0], [True, True, False, False])
    np.testing.assert_array_equal(d.reason[0], [Reason.BEFORE_GUARD_DEPTH] * 2 + [Reason.PRUNED_OCCLUDED] * 2)


def test_boundary_tie_is_kept():
    eps = 0.05
    d = guard_mask(samples_at([1.0, 2.0 + eps, 3.0]), 2.0, 0, GuardConfig(eps))
    np.testing.assert_array_equal(d.keep[0], [True, True, False])


@settings(max_examples=60)
@given(st.integers(0, 2**31 - 1), st.floats(0.01, 0.5), st.booleans())
def test_kept_region_is_closed_interval(seed, eps, in_mask):
    rng = np.random.default_rng(seed)
    t = np.sort(rng.uniform(0, 4, size=(3, 10)), axis=-1)
    d_scn = rng.uniform(0, 4, size=3)
    d = guard_mask(samples_at(t), d_scn, np.full(3, in_mask), GuardConfig(eps))
    expected = np.ones_like(t, bool) if in_mask else t <= (d_scn + eps)[:, None]
    np.testing.assert_array_equal(d.keep, expected)
    np.testing.assert_array_equal(d.keep, d.reason != Reason.PRUNED_OCCLUDED)


def test_nonfinite_depth_keeps_all_and_counts():
    d = guard_mask(samples_at([[1.0, 3.0], [1.0, 3.0]]), np.array([np.nan, 1.5]), np.zeros(2))
    np.testing.assert_array_equal(d.keep, [[True, True], [True, False]])
    assert d.nonfinite_depth == 1


def test_infinite_epsilon_never_prunes():
    d = guard_mask(samples_at([0.1, 5.0, 100.0], far=200.0), 0.0, 0, GuardConfig(np.inf))
    assert d.keep.all()


@pytest.mark.parametrize("eps", [0.0, -1.0, np.nan])
def test_epsilon_must_be_positive(eps):
    with pytest.raises(InputError):
        GuardConfig(eps)


def test_empty_ray_nothing_pruned():
    ray = Ray(np.zeros((1, 3)), np.array([[0, 0, 1.0]]), np.array([0.5]), np.array([4.0]))
    s = stratified_sample(ray, 32)
    scene = composite(s, np.zeros((1, 32)), np.zeros((1, 32, 3)), (0, 0, 0))
    assert scene.depth[0] == 4.0
    merged, d = guarded_object_pass(ray, s, scene, np.zeros(1), 16, rng_seed=0)
    assert d.keep.all() and merged.keep.all()


def _occluded_ray():
    """Scene branch: opaque occluder on [1, 1.2]; object of interest sits on [2, 2.5]."""
    ray = Ray(np.zeros((1, 3)), np.array([[0, 0, 1.0]]), np.array([0.0]), np.array([4.0]))
    s = stratified_sample(ray, 64)
    sigma = np.where((s.t >= 1.0) & (s.t <= 1.2), 200.0, 0.0)
    scene = composite(s, sigma, np.ones(s.t.shape + (3,)), (0, 0, 0))
    return ray, s, scene


def test_occluded_target_gets_no_gradient():
    ray, s, scene = _occluded_ray()
    assert scene.depth[0] == pytest.approx(1.0, abs=0.05)
    merged, d = guarded_object_pass(ray, s, scene, np.zeros(1), 16, rng_seed=3)
    limit = scene.depth[0] + 0.05
    np.testing.assert_array_equal(merged.keep, merged.t <= limit)
    # object branch believes the hidden target is solid; the mask says "not this object"
    o_sigma = np.where((merged.t >= 2.0) & (merged.t <= 2.5), 30.0, 0.0)
    o_color = np.full(merged.t.shape + (3,), 0.5)
    res = composite(merged, o_sigma, o_color)
    assert res.opacity[0] == 0.0
    d_sigma, d_color = composite_backward(merged, res, o_sigma, o_color, np.zeros((1, 3)),
                                          d_opacity=2.0 * (res.opacity - 0.0))
    assert not np.any(d_sigma[~merged.keep])
    assert not np.any(d_color[~merged.keep])


def test_pruned_values_do_not_leak():
    ray, s, scene = _occluded_ray()
    merged, _ = guarded_object_pass(ray, s, scene, np.zeros(1), 16, rng_seed=3)
    rng = np.random.default_rng(0)
    sigma = rng.uniform(0, 3, size=merged.t.shape)
    color = rng.uniform(size=merged.t.shape + (3,))
    base = composite(merged, sigma, color)
    sigma2, color2 = sigma.copy(), color.copy()
    sigma2[~merged.keep] = 1e6
    color2[~merged.keep] = 0.123
    other = composite(merged, sigma2, color2)
    np.testing.assert_array_equal(base.color, other.color)
    np.testing.assert_array_equal(base.opacity, other.opacity)


def test_guard_off_keeps_everything():
    ray, s, scene = _occluded_ray()
    merged, d = guarded_object_pass(ray, s, scene, np.zeros(1), 16, rng_seed=3, guard=False)
    assert d.keep.all() and d.pruned_fraction == 0.0


def test_visible_object_guided_to_surface():
    ray, s, scene = _occluded_ray()
    merged, d = guarded_object_pass(ray, s, scene, np.ones(1), 64, rng_seed=4, eps_floor=1e-3)
    assert d.keep.all()
    new = merged.t[0][~np.isin(merged.t[0], s.t[0])]
    assert np.mean((new >= 0.9) & (new <= 1.3)) > 0.8


def test_guidance_off_uses_stratified_only():
    ray, s, scene = _occluded_ray()
    merged, _ = guarded_object_pass(ray, s, scene, np.ones(1), 16, guidance=False)
    np.testing.assert_array_equal(merged.t, s.t)
