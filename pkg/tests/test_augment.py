import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aimclr import augment as ag
from aimclr.skeleton import SkeletonGraph, default_graph


def sample(seed=0, T=12, V=9, P=1):
    return np.random.default_rng(seed).normal(size=(3, T, V, P))


def test_shear_zero_is_identity():
    x = sample()
    np.testing.assert_array_equal(ag.shear(x, (0.0,) * 6), x)


def test_shear_single_factor():
    x = np.zeros((3, 1, 1, 1))
    x[1] = 1.0
    np.testing.assert_array_equal(ag.shear(x, (1, 0, 0, 0, 0, 0))[:, 0, 0, 0], [1, 1, 0])


def test_crop_padding_for_sixty_frames():
    assert ag.crop_padding(60) == 10
    x = sample(T=60)
    ag.crop(x, 20)
    with pytest.raises(ValueError):
        ag.crop(x, 21)


def test_centered_crop_recovers_input():
    x = sample(T=60)
    np.testing.assert_array_equal(ag.crop(x, 10), x)


def test_crop_of_constant_sequence():
    x = np.full((3, 12, 4, 1), 2.5)
    for start in range(0, 5):
        np.testing.assert_array_equal(ag.crop(x, start), x)


def test_spatial_flip_swap():
    g = SkeletonGraph(3, [(0, 1), (0, 2)], 0, [(1, 2)])
    x = np.zeros((3, 1, 3, 1))
    x[0, 0, :, 0] = [10, 20, 30]
    np.testing.assert_array_equal(ag.spatial_flip(x, g)[0, 0, :, 0], [10, 30, 20])
    np.testing.assert_array_equal(ag.spatial_flip(x, g, apply=False), x)


def test_flips_are_involutions():
    x, g = sample(), default_graph()
    np.testing.assert_array_equal(ag.spatial_flip(ag.spatial_flip(x, g), g), x)
    np.testing.assert_array_equal(ag.temporal_flip(ag.temporal_flip(x)), x)
    np.testing.assert_array_equal(ag.temporal_flip(x, apply=False), x)


def test_temporal_flip_two_frames():
    x = np.zeros((3, 2, 1, 1))
    x[0, :, 0, 0] = [1, 2]
    np.testing.assert_array_equal(ag.temporal_flip(x)[0, :, 0, 0], [2, 1])


def test_rotation_examples():
    x = sample()
    np.testing.assert_array_equal(ag.rotate(x, "Y", (0, 0, 0)), x)
    p = np.zeros((3, 1, 1, 1))
    p[0] = 1
    out = ag.rotate(p, "Z", (0, 0, np.pi / 6))[:, 0, 0, 0]
    np.testing.assert_allclose(out, [np.cos(np.pi / 6), 0.5, 0], atol=1e-15)


def test_rotation_rejects_out_of_range_angles():
    with pytest.raises(ValueError, match="X angle"):
        ag.rotate(sample(), "Z", (0.1, 0, 0))
    with pytest.raises(ValueError, match="axis"):
        ag.rotate(sample(), "W", (0, 0, 0))


def test_axis_mask_examples():
    p = np.array([1.0, 2.0, 3.0]).reshape(3, 1, 1, 1)
    np.testing.assert_array_equal(ag.axis_mask(p, "Y").ravel(), [1, 0, 3])
    np.testing.assert_array_equal(ag.axis_mask(p), p)
    np.testing.assert_array_equal(ag.axis_mask(ag.axis_mask(p, "Y"), "Y"), ag.axis_mask(p, "Y"))


def test_noise_is_seeded():
    x = sample()
    np.testing.assert_array_equal(ag.gaussian_noise(x, 4), ag.gaussian_noise(x, 4))
    assert not np.array_equal(ag.gaussian_noise(x, 4), ag.gaussian_noise(x, 5))


def test_blur_small_sigma_is_identity():
    x = sample()
    k = ag.blur_kernel(0.1)
    assert k[len(k) // 2] == pytest.approx(1.0, abs=1e-15)
    assert np.abs(ag.gaussian_blur(x, 0.1) - x).max() < 1e-9


def test_blur_keeps_constant_sequence():
    x = np.full((3, 20, 2, 1), -1.25)
    np.testing.assert_allclose(ag.gaussian_blur(x, 1.7), x, rtol=0, atol=1e-14)


def test_blur_sigma_range():
    with pytest.raises(ValueError):
        ag.gaussian_blur(sample(), 2.5)


def test_identity_params_are_identity_for_both_pipelines():
    x, g = sample(), default_graph()
    for pipe in (ag.normal_pipeline(), ag.extreme_pipeline()):
        np.testing.assert_array_equal(ag.apply_pipeline(x, pipe, ag.identity_params(), g), x)


def test_sampled_ranges_and_flip_rates():
    rng = np.random.default_rng(0)
    draws = [ag.sample_params(ag.extreme_pipeline(), rng, 30) for _ in range(10_000)]
    shear = np.array([p.shear_factors for p in draws])
    assert shear.min() >= -0.5 and shear.max() <= 0.5
    for attr in ("flip_spatial", "flip_temporal", "blur_apply"):
        assert abs(np.mean([getattr(p, attr) for p in draws]) - 0.5) < 0.02
    starts = np.array([p.crop_start for p in draws])
    assert starts.min() == 0 and starts.max() == 10


def test_same_rng_state_same_params():
    a = ag.sample_params(ag.extreme_pipeline(), np.random.default_rng(9), 16)
    b = ag.sample_params(ag.extreme_pipeline(), np.random.default_rng(9), 16)
    assert a == b


def test_normal_pipeline_leaves_extreme_fields_at_identity():
    p = ag.sample_params(ag.normal_pipeline(), np.random.default_rng(1), 16)
    assert p.noise_seed is None and p.mask_axis is None and not p.blur_apply
    assert p.rotate_angles == (0.0, 0.0, 0.0)


def test_spatial_flip_without_graph_is_rejected():
    params = ag.AugmentParams(flip_spatial=True)
    with pytest.raises(ValueError, match="graph"):
        ag.apply_pipeline(sample(), ag.extreme_pipeline(), params)


def test_noise_variance_monte_carlo():
    n = ag.gaussian_noise(np.zeros((1, 100_000, 1, 1)), 7)
    assert 0.0095 <= n.var() <= 0.0105


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.sampled_from([1, 2, 7, 12, 31]))
def test_augmented_shape_is_preserved(seed, T):
    x = sample(seed % 100, T=T, P=2)
    for pipe in (ag.normal_pipeline(), ag.extreme_pipeline()):
        out = ag.augment(x, pipe, np.random.default_rng(seed), default_graph())
        assert out.shape == x.shape and np.all(np.isfinite(out))


@settings(max_examples=50, deadline=None)
@given(st.sampled_from(ag.AXES), st.floats(0, 1), st.floats(0, 1), st.floats(0, 1))
def test_rotation_preserves_norms(main, u, v, w):
    angles = tuple(f * (ag.MAIN_ANGLE_MAX if a == main else ag.MINOR_ANGLE_MAX)
                   for a, f in zip(ag.AXES, (u, v, w)))
    x = sample(3)
    out = ag.rotate(x, main, angles)
    np.testing.assert_allclose(np.linalg.norm(out, axis=0), np.linalg.norm(x, axis=0), rtol=0, atol=1e-6)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.floats(-3, 3), st.floats(-3, 3))
def test_linear_transforms_are_linear(seed, a, b):
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=(3, 8, 9, 1)), rng.normal(size=(3, 8, 9, 1))
    p = ag.sample_params(ag.extreme_pipeline(), rng, 8)
    g = default_graph()
    transforms = [
        lambda v: ag.shear(v, p.shear_factors),
        lambda v: ag.rotate(v, p.rotate_axis, p.rotate_angles),
        lambda v: ag.spatial_flip(v, g, p.flip_spatial),
        lambda v: ag.temporal_flip(v, p.flip_temporal),
        lambda v: ag.axis_mask(v, p.mask_axis),
    ]
    for f in transforms:
        np.testing.assert_allclose(f(a * x + b * y), a * f(x) + b * f(y), rtol=1e-12, atol=1e-12)


def test_apply_pipeline_is_bit_deterministic():
    x = sample(5, T=20)
    p = ag.sample_params(ag.extreme_pipeline(), np.random.default_rng(5), 20)
    a = ag.apply_pipeline(x, ag.extreme_pipeline(), p, default_graph())
    b = ag.apply_pipeline(x, ag.extreme_pipeline(), p, default_graph())
    assert a.tobytes() == b.tobytes()
