import dataclasses

import numpy as np
import pytest

from conftest import front_camera, random_scene
from splatreg.depth import PatchGrid
from splatreg.gaussians import Scene
from splatreg.photometric import LossWeights
from splatreg.raster import rasterize
from splatreg.trainer import (
    Adam,
    TrainConfig,
    TrainingError,
    TrainState,
    View,
    check_gradients,
    total_loss,
    train,
    train_step,
)

OFF = dict(gamma=0.0, eta=0.0, beta=0.0, phi=0.0)


def instance(rng, n=4, size=16):
    scene = random_scene(rng, n)
    cam = front_camera((size, size))
    target = scene.copy()
    target.mu = target.mu + rng.normal(0, 0.08, target.mu.shape)
    target.color = rng.uniform(0.1, 0.9, target.color.shape)
    ref = rasterize(target, cam)
    return scene, cam, ref.color, 0.5 * ref.depth + 1.0


def test_identity_fit_total_zero(rng):
    scene = random_scene(rng, 3)
    cam = front_camera((12, 12))
    gt = rasterize(scene, cam).color
    rep = total_loss(scene, cam, gt, None, LossWeights(**OFF), PatchGrid(4), False)
    assert rep.total == 0.0 and rep.depth is None


def test_total_is_weighted_sum(rng):
    scene, cam, gt, prior = instance(rng)
    w = LossWeights()
    rep = total_loss(scene, cam, gt, prior, w, PatchGrid(5), True)
    assert rep.total == rep.color + rep.depth + w.beta * rep.edge + w.phi * rep.tv
    assert rep.depth > 0 and rep.edge > 0


def test_total_loss_errors(rng):
    scene, cam, gt, prior = instance(rng)
    with pytest.raises(ValueError):
        total_loss(scene, cam, gt[:8], prior, LossWeights(), PatchGrid(4), False)
    with pytest.raises(ValueError):
        total_loss(scene, cam, gt, None, LossWeights(), PatchGrid(4), True)


def test_zero_weights_zero_gradients(rng):
    scene = random_scene(rng, 3)
    cam = front_camera((12, 12))
    gt = rasterize(scene, cam).color
    rep = total_loss(scene, cam, gt, gt[..., 0], LossWeights(**OFF, lambda_dssim=0.0), PatchGrid(4), True)
    assert all(not g.any() for g in rep.grads)


@pytest.mark.parametrize("mode", ["standard", "enhanced"])
def test_gradient_check_all_terms(rng, mode):
    scene, cam, gt, prior = instance(rng)
    report = check_gradients(scene, cam, gt, prior, LossWeights(), depth_mode=mode)
    for term, r in report.items():
        assert r["passed"], (term, r)
        assert r["checked"] >= 40, (term, r)


def test_config_validation_and_roundtrip():
    cfg = TrainConfig(iterations=10, weights={"gamma": 0.3}, patch_range=[6, 9])
    assert cfg.weights.gamma == 0.3 and cfg.patch_range == (6, 9)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    for bad in ({"depth_every": 0}, {"patch_range": (9, 6)}, {"depth_mode": "x"}, {"iterations": -1}):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


def small_views(rng, n_views=2, size=16):
    target = random_scene(rng, 5)
    views = []
    for k in range(n_views):
        cam = front_camera((size, size), distance=4.0 + 0.3 * k)
        ref = rasterize(target, cam)
        views.append(View(cam, ref.color, 0.5 * ref.depth + 1.0))
    return target, views


def test_schedule_and_patch_sizes(rng):
    _, views = small_views(rng)
    init = random_scene(np.random.default_rng(3), 5)
    _, hist = train(views, init, TrainConfig(iterations=40, seed=1))
    for rep in hist:
        if rep.iteration % 5 == 0:
            assert rep.depth is not None and 5 <= rep.patch_size <= 20
        else:
            assert rep.depth is None and rep.patch_size is None


def test_zero_iterations_and_frozen_lr(rng):
    _, views = small_views(rng)
    init = random_scene(np.random.default_rng(3), 5)
    scene, hist = train(views, init, TrainConfig(iterations=0))
    assert hist == [] and np.array_equal(scene.mu, init.mu)
    frozen = {k: 0.0 for k in ("mu", "scale", "rotation", "opacity", "color")}
    scene, hist = train(views, init, TrainConfig(iterations=3, lr=frozen))
    assert len(hist) == 3
    np.testing.assert_allclose(scene.mu, init.mu, rtol=0, atol=0)
    np.testing.assert_allclose(scene.scale, init.scale, rtol=1e-14)
    np.testing.assert_allclose(scene.opacity, init.opacity, rtol=1e-12)


def test_quaternions_stay_normalized(rng):
    _, views = small_views(rng)
    state = TrainState.from_scene(random_scene(np.random.default_rng(4), 5))
    cfg = TrainConfig(iterations=10)
    for _ in range(10):
        train_step(state, views[0], cfg)
        assert np.max(np.abs(np.linalg.norm(state.params["rotation"], axis=1) - 1)) <= 1e-6


def test_determinism(rng):
    _, views = small_views(rng)
    init = random_scene(np.random.default_rng(3), 5)
    a = train(views, init, TrainConfig(iterations=25, seed=7))
    b = train(views, init, TrainConfig(iterations=25, seed=7))
    assert [r.row() for r in a[1]] == [r.row() for r in b[1]]
    assert np.array_equal(a[0].mu, b[0].mu)


def test_overfit_single_view():
    rng = np.random.default_rng(0)
    target = Scene(rng.uniform(-0.4, 0.4, (5, 3)), rng.uniform(0.2, 0.35, (5, 3)), rng.normal(size=(5, 4)),
                   rng.uniform(0.6, 0.9, 5), rng.uniform(0.1, 0.9, (5, 3)), background=(0.1, 0.1, 0.1))
    cam = front_camera((24, 24))
    view = View(cam, rasterize(target, cam).color)
    init = target.copy()
    init.mu = init.mu + rng.normal(0, 0.1, init.mu.shape)
    init.color = np.full((5, 3), 0.5)
    lr = {"mu": 5e-3, "color": 2e-2}
    scene, hist = train([view], init, TrainConfig(iterations=400, weights=LossWeights(**OFF), lr=lr))
    assert hist[-1].psnr >= 30.0


def test_pure_l1_descent_monotone_windows():
    rng = np.random.default_rng(1)
    target = random_scene(rng, 4)
    cam = front_camera((16, 16))
    view = View(cam, rasterize(target, cam).color)
    init = target.copy()
    init.color = np.clip(init.color + 0.2, 0, 1)
    small = {k: 1e-4 for k in ("mu", "scale", "rotation", "opacity", "color")}
    _, hist = train([view], init, TrainConfig(iterations=30, weights=LossWeights(**OFF, lambda_dssim=0.0), lr=small))
    totals = [r.total for r in hist]
    for k in range(0, len(totals) - 10):
        assert totals[k + 10] <= totals[k]


def test_non_finite_loss_names_term(rng):
    _, views = small_views(rng)
    bad = dataclasses.replace(views[0], prior_depth=np.full_like(views[0].prior_depth, np.nan))
    state = TrainState.from_scene(random_scene(np.random.default_rng(4), 5))
    state.iteration = 4
    with pytest.raises(TrainingError, match="L_depth"):
        train_step(state, bad, TrainConfig())


def test_adam_first_step_is_lr_sized():
    opt = Adam()
    p = {"mu": np.zeros(3)}
    opt.step(p, {"mu": np.array([1.0, -2.0, 0.0])}, {"mu": 0.1})
    np.testing.assert_allclose(p["mu"], [-0.1, 0.1, 0.0])


def test_pruning_keeps_optimizer_in_sync(rng):
    _, views = small_views(rng)
    init = random_scene(np.random.default_rng(3), 5)
    init.opacity[1] = 1e-4
    cfg = TrainConfig(iterations=2, prune_opacity_below=0.005, prune_every=2)
    state = TrainState.from_scene(init)
    for _ in range(2):
        train_step(state, views[0], cfg)
    assert len(state.params["mu"]) == 4
    assert state.optimizer.m["mu"].shape == (4, 3)
