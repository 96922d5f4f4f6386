import os
import subprocess
import sys
import textwrap

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gslang.raster import COV2D_BLUR, EmptyScene, RenderOptions, project, render, render_bruteforce
from gslang.scene import Camera, Gaussian, Scene

from conftest import axis_camera, random_camera, random_scene

CHANNELS = ("color", "feature", "alpha_sum")


def splat(mu, opacity=1.0, scale=0.3, latent=(1.0, 2.0, 3.0), color=(0.2, 0.4, 0.6)):
    return Gaussian(np.asarray(mu, float), np.full(3, scale), np.array([1.0, 0, 0, 0]), np.asarray(color),
                    opacity, np.asarray(latent, float))


def centred_camera(w=15, h=15, f=40.0):
    # principal point on a pixel centre so an on-axis splat lands exactly on pixel (w//2, h//2)
    return Camera(f, f, w // 2 + 0.5, h // 2 + 0.5, w, h)


def max_diff(a, b):
    return max(np.abs(getattr(a, c) - getattr(b, c)).max(initial=0.0) for c in CHANNELS)


def test_project_on_axis():
    cam = axis_camera(32, 32, f=40.0)
    s, z = 0.2, 5.0
    p = project(splat([0, 0, z], scale=s), cam)
    np.testing.assert_allclose(p.mean2d, [cam.cx, cam.cy])
    expected = (cam.fx * s / z) ** 2 + COV2D_BLUR
    np.testing.assert_allclose(p.cov2d, np.diag([expected, expected]), rtol=1e-12)
    assert p.depth == pytest.approx(z)


def test_project_behind_camera_is_culled():
    assert project(splat([0, 0, -2]), axis_camera()) is None


def test_single_opaque_splat_at_pixel_centre():
    cam = centred_camera()
    out = render(Scene.from_gaussians([splat([0, 0, 4])]), cam)
    c = cam.width // 2
    assert out.alpha_sum[c, c] == pytest.approx(1.0)
    np.testing.assert_allclose(out.feature[c, c], [1, 2, 3])
    assert out.contributors(c, c) == [(0, pytest.approx(1.0))]


def test_uncovered_pixel_is_zero():
    cam = axis_camera(64, 64)
    out = render(Scene.from_gaussians([splat([0, 0, 4], scale=0.05)]), cam)
    assert out.alpha_sum[0, 0] == 0 and not out.color[0, 0].any() and not out.feature[0, 0].any()
    assert out.contributors(0, 0) == []


def test_two_half_opaque_splats_composite():
    cam = centred_camera()
    near = splat([0, 0, 3], opacity=0.5, latent=(1, 0, 0))
    far = splat([0, 0, 5], opacity=0.5, latent=(0, 1, 0))
    c = cam.width // 2
    for scene in (Scene.from_gaussians([near, far]), Scene.from_gaussians([far, near])):
        out = render(scene, cam)
        ws = sorted(w for _, w in out.contributors(c, c))[::-1]
        np.testing.assert_allclose(ws, [0.5, 0.25])
        np.testing.assert_allclose(out.feature[c, c], [0.5, 0.25, 0])


def test_bruteforce_single_splat_closed_form():
    cam = axis_camera(24, 20)
    g = splat([0.1, -0.05, 4], opacity=0.7, scale=0.25)
    out = render_bruteforce(Scene.from_gaussians([g]), cam)
    p = project(g, cam)
    inv = np.linalg.inv(p.cov2d)
    ys, xs = np.mgrid[0:20, 0:24]
    d = np.stack([xs + 0.5 - p.mean2d[0], ys + 0.5 - p.mean2d[1]], axis=-1)
    g32 = float(np.float32(0.7))
    alpha = g32 * np.exp(-0.5 * np.einsum("...i,ij,...j->...", d, inv, d))
    alpha[alpha < 1 / 255] = 0
    np.testing.assert_allclose(out.alpha_sum, alpha, atol=1e-12)


def test_empty_scene_raises():
    empty = Scene(np.zeros((0, 3)), np.ones((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)), np.zeros(0), np.zeros((0, 2)))
    with pytest.raises(EmptyScene):
        render(empty, axis_camera())


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 60), st.sampled_from([8, 16, 32]), st.sampled_from([0, 3, 16]))
def test_tile_matches_bruteforce(seed, n, tile, d):
    rng = np.random.default_rng(seed)
    scene = random_scene(rng, n, d)
    cam = random_camera(rng, int(rng.integers(8, 50)), int(rng.integers(8, 50)))
    a = render(scene, cam, RenderOptions(tile_size=tile))
    b = render_bruteforce(scene, cam)
    assert max_diff(a, b) <= 1e-6
    assert np.array_equal(a.contrib_ptr, b.contrib_ptr)
    assert np.array_equal(a.contrib_index, b.contrib_index)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    scene = random_scene(rng, 40, 4)
    cam = random_camera(rng)
    order = rng.permutation(40)
    a, b = render(scene, cam), render(scene.permuted(order), cam)
    for c in CHANNELS:
        np.testing.assert_array_equal(getattr(a, c), getattr(b, c))


def test_depth_ties_follow_index():
    cam = centred_camera()
    a = splat([0, 0, 4], opacity=0.5, latent=(1, 0, 0))
    b = splat([0, 0, 4], opacity=0.5, latent=(0, 1, 0))
    c = cam.width // 2
    out = render(Scene.from_gaussians([a, b]), cam)
    assert [i for i, _ in out.contributors(c, c)] == [0, 1]
    np.testing.assert_allclose(out.feature[c, c], [0.5, 0.25, 0])


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-3, 3), st.floats(-3, 3))
def test_feature_is_linear_in_latents(seed, a, b):
    rng = np.random.default_rng(seed)
    scene = random_scene(rng, 30, 5)
    cam = random_camera(rng)
    z1, z2 = rng.normal(size=(30, 5)), rng.normal(size=(30, 5))
    f1 = render(scene.with_latents(z1), cam).feature
    f2 = render(scene.with_latents(z2), cam).feature
    # latents are stored as float32, so combine the stored values
    zc = a * z1.astype(np.float32).astype(float) + b * z2.astype(np.float32).astype(float)
    fc = render(scene.with_latents(zc), cam).feature
    np.testing.assert_allclose(fc, a * f1 + b * f2, atol=1e-5)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_conservation(seed):
    rng = np.random.default_rng(seed)
    scene = random_scene(rng, 50, 3)
    out = render(scene, random_camera(rng))
    assert out.alpha_sum.min() >= 0 and out.alpha_sum.max() <= 1 + 1e-12
    assert (out.contrib_weight > 0).all()
    pixel = np.repeat(np.arange(out.alpha_sum.size), np.diff(out.contrib_ptr))
    sums = np.bincount(pixel, out.contrib_weight, minlength=out.alpha_sum.size)
    np.testing.assert_allclose(sums.reshape(out.shape), out.alpha_sum, atol=1e-12)
    # colours live in [0, 1], so the composite is bounded by the accumulated alpha
    assert (out.color <= out.alpha_sum[..., None] + 1e-12).all()


def test_weight_matrix_reproduces_feature(rng):
    scene = random_scene(rng, 80, 6)
    out = render(scene, random_camera(rng))
    wm = out.weight_matrix(len(scene))
    np.testing.assert_allclose((wm @ scene.latent.astype(float)).reshape(out.feature.shape), out.feature, atol=1e-12)


def test_render_options_drop_channels(rng):
    scene = random_scene(rng, 20, 4)
    cam = random_camera(rng)
    full = render(scene, cam)
    only_c = render(scene, cam, RenderOptions(with_feature=False))
    np.testing.assert_array_equal(full.color, only_c.color)
    assert not only_c.feature.any()


def test_bit_identical_across_thread_counts(tmp_path):
    script = textwrap.dedent("""
        import sys, numpy as np
        sys.path.insert(0, %r)
        from conftest import random_scene, random_camera
        from gslang.raster import render
        rng = np.random.default_rng(7)
        out = render(random_scene(rng, 400, 8), random_camera(rng, 96, 80), )
        sys.stdout.buffer.write(out.color.tobytes() + out.feature.tobytes() + out.contrib_weight.tobytes())
    """) % os.path.dirname(__file__)
    blobs = []
    for threads in ("1", "4"):
        env = {**os.environ, "NUMBA_NUM_THREADS": threads, "OMP_NUM_THREADS": threads,
               "OPENBLAS_NUM_THREADS": threads}
        blobs.append(subprocess.run([sys.executable, "-c", script], env=env, capture_output=True, check=True).stdout)
    assert blobs[0] == blobs[1] and len(blobs[0]) > 0
