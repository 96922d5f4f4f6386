import numpy as np
import pytest

from gslang.codec import Autoencoder, Layer
from gslang.field import (
    EmptySupervision, FieldTrainConfig, TargetFeatureMap, build_targets, lang_loss, rgb_loss_and_grads, rgb_stage,
    supervised_rows, train_language_field, view_objective, weight_matrices,
)
from gslang.raster import RenderOptions, render
from gslang.scene import Camera, Gaussian, Scene
from gslang.tensorio import DimensionMismatch

from conftest import random_camera, random_scene


def linear_ae(d=6, k=3):
    rng = np.random.default_rng(0)
    enc = Layer(rng.normal(size=(d, k)), rng.normal(size=k) * 0.1, "linear")
    dec = Layer(rng.normal(size=(k, d)), np.zeros(d), "linear")
    return Autoencoder([enc, dec], 1).freeze()


def full_frame_camera(w=8, h=8):
    return Camera(10.0, 10.0, w / 2, h / 2, w, h)


def blanket(latent_dim=3, opacity=1.0, scale=500.0):
    """One splat so wide that alpha ~= opacity over the whole frame."""
    g = Gaussian(np.array([0.0, 0, 5]), np.full(3, scale), np.array([1.0, 0, 0, 0]), np.full(3, 0.5), opacity,
                 np.zeros(latent_dim))
    return Scene.from_gaussians([g])


# ---------------------------------------------------------------- targets


def test_full_frame_mask_gives_constant_target():
    ae = linear_ae()
    cam = full_frame_camera()
    f = np.arange(6.0)
    [t] = build_targets([(cam, [[(np.ones((8, 8), bool), f)]])], ae)
    assert t.valid.all()
    np.testing.assert_allclose(t.target, np.broadcast_to(ae.encode(f), (8, 8, 3)))


def test_disjoint_masks_piecewise_constant():
    ae = linear_ae()
    cam = full_frame_camera()
    left = np.zeros((8, 8), bool)
    left[:, :4] = True
    f1, f2 = np.ones(6), np.arange(6.0)
    [t] = build_targets([(cam, [[(left, f1), (~left, f2)]])], ae)
    np.testing.assert_allclose(t.target[0, 0], ae.encode(f1))
    np.testing.assert_allclose(t.target[0, 7], ae.encode(f2))


def test_overlap_and_shape_errors():
    ae = linear_ae()
    cam = full_frame_camera()
    m = np.ones((8, 8), bool)
    with pytest.raises(ValueError):
        build_targets([(cam, [[(m, np.ones(6)), (m, np.ones(6))]])], ae)
    with pytest.raises(DimensionMismatch):
        build_targets([(cam, [[(m, np.ones(5))]])], ae)
    with pytest.raises(DimensionMismatch):
        build_targets([(cam, [[(np.ones((4, 4), bool), np.ones(6))]])], ae)


def test_two_levels_give_two_maps():
    ae = linear_ae()
    cam = full_frame_camera()
    whole = np.ones((8, 8), bool)
    part = np.zeros((8, 8), bool)
    part[2:5, 2:5] = True
    ts = build_targets([(cam, [[(whole, np.ones(6))], [(part, np.arange(6.0))]])], ae)
    assert [(t.view_id, t.level) for t in ts] == [(0, 0), (0, 1)]
    assert ts[0].valid.sum() == 64 and ts[1].valid.sum() == 9


def test_target_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    t = TargetFeatureMap(rng.normal(size=(5, 4, 3)).astype(np.float32).astype(float), rng.random((5, 4)) > 0.5, 2, 1)
    t.save(tmp_path / "t.gten")
    back = TargetFeatureMap.load(tmp_path / "t.gten", 2, 1)
    np.testing.assert_array_equal(back.target, t.target)
    np.testing.assert_array_equal(back.valid, t.valid)


# ---------------------------------------------------------------- loss


def _target(h, valid=None):
    return TargetFeatureMap(h, np.ones(h.shape[:2], bool) if valid is None else valid, 0)


def test_loss_zero_at_target():
    h = np.random.default_rng(0).normal(size=(4, 4, 3))
    loss, _ = lang_loss(h, _target(h))
    assert loss == pytest.approx(0.0, abs=1e-12)


def test_zero_prediction_hand_value():
    h = np.zeros((3, 3, 4))
    h[..., 1] = 1.0  # unit rows with L1 norm 1
    loss, _ = lang_loss(np.zeros_like(h), _target(h), gamma=1.0)
    assert loss == pytest.approx(2.0)


def test_gamma_zero_is_sign_over_count():
    rng = np.random.default_rng(1)
    h = rng.normal(size=(4, 5, 3))
    valid = rng.random((4, 5)) > 0.3
    z = rng.normal(size=h.shape)
    _, g = lang_loss(z, _target(h, valid), gamma=0.0)
    expected = np.where(valid[..., None], np.sign(z - h) / valid.sum(), 0.0)
    np.testing.assert_allclose(g, expected)


def test_empty_supervision():
    with pytest.raises(EmptySupervision):
        lang_loss(np.zeros((2, 2, 3)), _target(np.zeros((2, 2, 3)), np.zeros((2, 2), bool)))


# ---------------------------------------------------------------- gradients

STEP = 2.0**-12  # latents are stored as float32; grid values keep perturbations exact


def _grid(x):
    return np.round(x / STEP) * STEP


def _render_route_loss(scene, cam, targets, z, k, cfg):
    # independent of the weight-matrix path: full render, then the per-map loss
    feat = render(scene.with_latents(z), cam, RenderOptions(with_color=False)).feature
    total = 0.0
    for t in targets:
        total += lang_loss(feat[..., t.level * k : (t.level + 1) * k], t, cfg.gamma)[0]
    return cfg.beta * total


@pytest.mark.parametrize("seed", range(20))
def test_latent_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    n, k, levels = int(rng.integers(2, 11)), 3, int(rng.integers(1, 3))
    scene = random_scene(rng, n, k * levels, spread=0.6, scale=(0.2, 0.6), opacity=(0.3, 1.0))
    cam = random_camera(rng, 8, 8, distance=3.0)
    cfg = FieldTrainConfig(gamma=rng.uniform(0.1, 1.0), beta=rng.uniform(0.5, 2.0))
    cover = render(scene, cam).alpha_sum > 0.05
    if cover.sum() < 3:
        cover[:] = True
    targets = [
        TargetFeatureMap(rng.normal(3.0, 1.0, (8, 8, k)) * rng.choice([-1, 1]), cover & (rng.random((8, 8)) > 0.2), 0, lvl)
        for lvl in range(levels)
    ]
    z = _grid(rng.normal(size=(n, k * levels)) * 0.3)
    [wm] = weight_matrices(scene, [cam])
    _, _, _, grad = view_objective(z, supervised_rows(wm, targets), k, cfg)

    num = np.zeros_like(z)
    for idx in np.ndindex(z.shape):
        zp, zm = z.copy(), z.copy()
        zp[idx] += STEP
        zm[idx] -= STEP
        num[idx] = (_render_route_loss(scene, cam, targets, zp, k, cfg)
                    - _render_route_loss(scene, cam, targets, zm, k, cfg)) / (2 * STEP)
    scale = max(np.abs(num).max(), 1e-8)
    assert np.abs(grad - num).max() / scale < 1e-4


# ---------------------------------------------------------------- training


def test_single_blanket_converges_to_constant_target():
    scene, cam = blanket(), full_frame_camera()
    h = np.array([0.6, -0.3, 0.2])
    t = TargetFeatureMap(np.broadcast_to(h, (8, 8, 3)).copy(), np.ones((8, 8), bool), 0)
    res = train_language_field(scene, [cam], [t], FieldTrainConfig(iterations=3000, lr=1e-2, lr_final_ratio=0.01))
    wmax = render(scene, cam).alpha_sum
    assert wmax.min() > 0.999  # the optimum is z = h up to the tiny falloff
    np.testing.assert_allclose(res.scene.latent[0], h, atol=1e-3)


def test_l1_case_reaches_weighted_median():
    scene, cam = blanket(opacity=0.9, scale=0.9), full_frame_camera()
    w = render(scene, cam).alpha_sum.ravel()
    rng = np.random.default_rng(5)
    h = rng.normal(size=(8, 8, 3))
    valid = w > 0
    t = TargetFeatureMap(h, valid.reshape(8, 8), 0)
    res = train_language_field(scene, [cam], [t],
                               FieldTrainConfig(gamma=0.0, iterations=4000, lr=1e-2, lr_final_ratio=0.005))
    for j in range(3):
        # brute force: the piecewise-linear optimum sits at one of the breakpoints h/w
        cand = h.reshape(-1, 3)[valid, j] / w[valid]
        obj = np.abs(np.outer(cand, w[valid]) - h.reshape(-1, 3)[valid, j]).sum(axis=1)
        best = cand[np.argmin(obj)]
        z = res.scene.latent[0, j]
        got = np.abs(z * w[valid] - h.reshape(-1, 3)[valid, j]).sum()
        assert abs(z - best) < 1e-3 or got - obj.min() < 1e-6


def test_zero_iterations_is_identity(rng):
    scene = random_scene(rng, 10, 3)
    cam = random_camera(rng, 16, 16)
    t = TargetFeatureMap(np.ones((16, 16, 3)), np.ones((16, 16), bool), 0)
    res = train_language_field(scene, [cam], [t], FieldTrainConfig(iterations=0))
    assert res.scene is scene and res.curve == []


def test_geometry_and_colour_untouched(rng):
    scene = random_scene(rng, 60, 3)
    cams = [random_camera(rng, 24, 24) for _ in range(2)]
    ts = [TargetFeatureMap(rng.normal(size=(24, 24, 4)), np.ones((24, 24), bool), v) for v in range(2)]
    res = train_language_field(scene, cams, ts, FieldTrainConfig(iterations=20))
    for c in cams:
        assert render(scene, c).color.tobytes() == render(res.scene, c).color.tobytes()
    for name in ("mu", "scale", "quat", "color", "opacity"):
        assert getattr(res.scene, name).tobytes() == getattr(scene, name).tobytes()
    assert res.scene.latent_dim == 4 and len(res.curve) == 20
    assert [r["view"] for r in res.curve[:4]] == [0, 1, 0, 1]


def test_permutation_equivariance(rng):
    scene = random_scene(rng, 30, 3)
    cam = random_camera(rng, 20, 20)
    t = TargetFeatureMap(rng.normal(size=(20, 20, 3)), np.ones((20, 20), bool), 0)
    cfg = FieldTrainConfig(iterations=30)
    order = rng.permutation(30)
    a = train_language_field(scene, [cam], [t], cfg).scene.latent
    b = train_language_field(scene.permuted(order), [cam], [t], cfg).scene.latent
    np.testing.assert_allclose(b, a[order], atol=1e-6)


def test_levels_are_independent(rng):
    scene = random_scene(rng, 25, 3)
    cam = random_camera(rng, 16, 16)
    l0 = TargetFeatureMap(rng.normal(size=(16, 16, 3)), np.ones((16, 16), bool), 0, 0)
    l1 = TargetFeatureMap(rng.normal(size=(16, 16, 3)), rng.random((16, 16)) > 0.5, 0, 1)
    cfg = FieldTrainConfig(iterations=25)
    both = train_language_field(scene, [cam], [l0, l1], cfg).scene.latent
    only = train_language_field(scene, [cam], [l0], cfg).scene.latent
    assert both.shape == (25, 6)
    np.testing.assert_array_equal(both[:, :3], only)


def test_field_training_is_deterministic(rng):
    scene = random_scene(rng, 25, 3)
    cam = random_camera(rng, 16, 16)
    t = TargetFeatureMap(rng.normal(size=(16, 16, 3)), np.ones((16, 16), bool), 0)
    a = train_language_field(scene, [cam], [t], FieldTrainConfig(iterations=15))
    b = train_language_field(scene, [cam], [t], FieldTrainConfig(iterations=15))
    assert a.scene.latent.tobytes() == b.scene.latent.tobytes() and a.curve == b.curve


# ---------------------------------------------------------------- rgb stage

RGB_STEP = 2.0**-10


@pytest.mark.parametrize("seed", range(6))
def test_rgb_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(100 + seed)
    n = 6
    scene = random_scene(rng, n, 0, spread=0.5, scale=(0.2, 0.5), opacity=(0.3, 0.9))
    scene = scene.with_appearance(color=np.round(scene.color / RGB_STEP) * RGB_STEP,
                                  opacity=np.round(scene.opacity / RGB_STEP) * RGB_STEP)
    cam = random_camera(rng, 8, 8, distance=3.0)
    image = np.full((8, 8, 3), 2.0)  # keeps every residual on one side of the L1 kink
    _, gc, go = rgb_loss_and_grads(scene, cam, image)

    def loss(color, opac):
        return rgb_loss_and_grads(scene.with_appearance(color=color, opacity=opac), cam, image)[0]

    col, op = scene.color.astype(float), scene.opacity.astype(float)
    for i in range(n):
        e = np.zeros(n)
        e[i] = RGB_STEP
        num = (loss(col, op + e) - loss(col, op - e)) / (2 * RGB_STEP)
        assert go[i] == pytest.approx(num, rel=1e-4, abs=1e-9)
        for c in range(3):
            ec = np.zeros((n, 3))
            ec[i, c] = RGB_STEP
            num = (loss(col + ec, op) - loss(col - ec, op)) / (2 * RGB_STEP)
            assert gc[i, c] == pytest.approx(num, rel=1e-4, abs=1e-9)


def test_rgb_skip_is_identity(rng):
    scene = random_scene(rng, 5, 2)
    cfg = FieldTrainConfig(rgb_stage_iters=10)
    out, curve = rgb_stage(scene, [(random_camera(rng), None)], cfg, skip=True)
    assert out is scene and curve == []


def test_rgb_at_ground_truth_stays_put(rng):
    scene = random_scene(rng, 20, 0)
    cam = random_camera(rng, 24, 24)
    img = render(scene, cam).color
    out, curve = rgb_stage(scene, [(cam, img)], FieldTrainConfig(rgb_stage_iters=5, rgb_lr=1e-4))
    assert curve[0]["loss_rgb"] == pytest.approx(0.0, abs=1e-7)
    np.testing.assert_allclose(out.color, scene.color, atol=1e-3)


def test_single_miscoloured_splat_recovers():
    cam = full_frame_camera(12, 12)
    truth = blanket(latent_dim=0, opacity=0.8, scale=0.8).with_appearance(color=np.array([[0.9, 0.2, 0.4]]))
    img = render(truth, cam).color
    wrong = truth.with_appearance(color=np.array([[0.1, 0.7, 0.7]]))
    out, _ = rgb_stage(wrong, [(cam, img)], FieldTrainConfig(rgb_stage_iters=400, rgb_lr=2e-2), optimize_opacity=False)
    np.testing.assert_allclose(out.color[0], [0.9, 0.2, 0.4], atol=1e-2)
    assert out.mu.tobytes() == truth.mu.tobytes()
