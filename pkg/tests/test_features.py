import csv
import os

import numpy as np
import pytest

from tcreloc.camera import PinholeCamera
from tcreloc.errors import ImageTooSmall, ShapeMismatch
from tcreloc.features import (
    AdamState,
    HeadParams,
    TrainConfig,
    TrainingAborted,
    adam_step,
    base_pyramid,
    box_blur3,
    handcrafted_features,
    head_forward,
    loss_gradient_fd,
    sigmoid,
    train_head,
)


def test_handcrafted_constant_image():
    pyr = handcrafted_features(np.full((48, 64), 0.4))
    for lvl in pyr.levels:
        assert np.allclose(lvl.features[:, :, 0], 0.05 + 0.9 * 0.4)
        assert np.allclose(lvl.features[:, :, 1:], 0.05)
        assert np.all(lvl.saliency == 0.5)
        assert np.all((lvl.features > 0) & (lvl.features < 1))


def test_handcrafted_ramp_has_constant_gradient_channel():
    img = np.tile(np.linspace(0.0, 0.63, 64), (48, 1))
    f = handcrafted_features(img)[0].features
    slope = 0.01
    assert np.allclose(f[:, :, 1], 0.05 + 0.9 * np.tanh(slope))
    assert np.allclose(f[:, :, 2], 0.05)


def test_handcrafted_errors():
    with pytest.raises(ImageTooSmall):
        handcrafted_features(np.zeros((16, 64)))
    with pytest.raises(ShapeMismatch):
        handcrafted_features(np.zeros((48, 64)), PinholeCamera.default(32, 48))
    depth = np.full((48, 64), 3.0)
    assert handcrafted_features(np.zeros((48, 64, 3)), depth=depth).has_depth


def test_box_blur_preserves_constants_and_mean_of_neighbours():
    img = np.arange(20.0).reshape(4, 5, 1)
    out = box_blur3(img)
    assert out[1, 1, 0] == pytest.approx(img[0:3, 0:3, 0].mean())
    assert np.allclose(box_blur3(np.full((4, 4, 2), 3.0)), 3.0)


def test_param_count_and_vector_round_trip():
    p = HeadParams.init(16, seed=1)
    assert p.size == 476
    assert np.array_equal(HeadParams.from_vector(p.to_vector()).to_vector(), p.to_vector())
    with pytest.raises(ShapeMismatch):
        HeadParams.from_vector(np.zeros(10))
    with pytest.raises(ShapeMismatch):
        HeadParams.zeros(c_out=200)
    with pytest.raises(ValueError):
        HeadParams.from_vector(np.full(476, np.nan))


def small_base(seed=0):
    rng = np.random.default_rng(seed)
    return base_pyramid(rng.random((48, 64)))


def test_zero_head_outputs_half():
    pyr = head_forward(HeadParams.zeros(), small_base())
    for lvl in pyr.levels:
        assert np.all(lvl.features == 0.5) and np.all(lvl.saliency == 0.5)
        assert lvl.channels == 16


def test_large_bias_saturates_inside_open_interval():
    p = HeadParams.zeros()
    p.feat_b[:] = 10.0
    p.sal_b[:] = -10.0
    pyr = head_forward(p, small_base())
    f = pyr[0].features
    assert np.allclose(f, sigmoid(10.0)) and np.all(f < 1.0)
    assert np.all(pyr[0].saliency > 0.0)


def test_head_matches_per_pixel_oracle():
    p = HeadParams.init(4, seed=3, scale=0.5)
    base = small_base(1)
    pyr = head_forward(p, base)
    for lvl in (0, 3):
        x = base.channels[lvl]
        for (y, u) in ((0, 0), (2, 3), (x.shape[0] - 1, x.shape[1] - 1)):
            pre = [sum(x[y, u, i] * p.feat_w[lvl, i, j] for i in range(p.c_in)) + p.feat_b[lvl, j] for j in range(4)]
            expect = [1.0 / (1.0 + np.exp(-v)) for v in pre]
            assert np.allclose(pyr[lvl].features[y, u], expect, atol=1e-14)
            s = sum(x[y, u, i] * p.sal_w[lvl, i] for i in range(p.c_in)) + p.sal_b[lvl]
            assert pyr[lvl].saliency[y, u] == pytest.approx(1.0 / (1.0 + np.exp(-s)), abs=1e-14)


def test_head_rejects_wrong_base_width():
    base = small_base()
    base.channels = [c[:, :, :3] for c in base.channels]
    with pytest.raises(ShapeMismatch):
        head_forward(HeadParams.zeros(), base)


# -- gradient, optimizer, training loop through the loss seam -------------------------


def quad_loss(target):
    def fn(theta, sample):
        return float(np.sum((theta - target) ** 2) * sample)

    return fn


def test_fd_gradient_on_quadratic_seam():
    p = HeadParams.init(4, seed=0)
    theta = p.to_vector()
    target = np.linspace(-1, 1, theta.size)
    res = loss_gradient_fd(p, [1.0, 3.0], TrainConfig(c_out=4), loss_fn=quad_loss(target))
    # central differences are exact on quadratics; mean of 1x and 3x
    assert np.allclose(res.gradient, 2 * 2 * (theta - target), rtol=1e-7, atol=1e-7)
    assert res.loss == pytest.approx(2 * np.sum((theta - target) ** 2))


def test_fd_gradient_zero_on_flat_coordinate():
    p = HeadParams.init(4, seed=0)

    def fn(theta, sample):
        return float(np.sum(np.sin(theta[1:])))

    res = loss_gradient_fd(p, [0], TrainConfig(c_out=4), loss_fn=fn)
    assert res.gradient[0] == 0.0
    assert np.allclose(res.gradient[1:], np.cos(p.to_vector()[1:]), atol=1e-5)


def test_fd_error_shrinks_quadratically():
    # Richardson check: halving the step divides the error by about 4
    p = HeadParams.init(4, seed=0)

    def fn(theta, sample):
        return float(np.sum(np.exp(0.3 * theta)))

    exact = 0.3 * np.exp(0.3 * p.to_vector())
    e1 = np.max(np.abs(loss_gradient_fd(p, [0], TrainConfig(c_out=4, fd_step=1e-2), loss_fn=fn).gradient - exact))
    e2 = np.max(np.abs(loss_gradient_fd(p, [0], TrainConfig(c_out=4, fd_step=5e-3), loss_fn=fn).gradient - exact))
    assert 3.0 < e1 / e2 < 5.0


def test_fd_skips_failing_samples():
    p = HeadParams.init(4, seed=0)

    def fn(theta, sample):
        return float("nan") if sample == "bad" else float(np.sum(theta))

    res = loss_gradient_fd(p, ["bad", "ok"], TrainConfig(c_out=4), loss_fn=fn)
    assert res.skipped == ["bad"]
    assert np.allclose(res.gradient, 1.0)


def test_adam_single_step_by_hand():
    g = np.array([0.5, -2.0, 0.0])
    theta, state = adam_step(np.array([1.0, 1.0, 1.0]), g, AdamState.zeros(3), lr=0.1)
    # bias-corrected moments of one step are g and g^2
    expect = np.array([1.0, 1.0, 1.0]) - 0.1 * g / (np.abs(g) + 1e-8)
    assert np.max(np.abs(theta - expect)) < 1e-12
    assert state.t == 1
    assert np.allclose(state.m, 0.1 * g) and np.allclose(state.v, 0.001 * g * g)


def test_adam_zero_gradient_decays_moments():
    state = AdamState(np.array([1.0]), np.array([4.0]), 3)
    theta, new = adam_step(np.array([0.0]), np.array([0.0]), state, lr=0.1)
    assert new.m[0] == pytest.approx(0.9) and new.v[0] == pytest.approx(4.0 * 0.999)
    # the moving average still carries momentum from earlier steps
    assert theta[0] < 0
    theta0, _ = adam_step(np.array([2.0]), np.array([0.0]), AdamState.zeros(1), lr=0.1)
    assert theta0[0] == 2.0


def test_adam_constant_gradient_step_tends_to_lr_sign():
    theta, state = np.zeros(2), AdamState.zeros(2)
    g = np.array([3.0, -0.01])
    for _ in range(2000):
        prev = theta
        theta, state = adam_step(theta, g, state, lr=1e-3)
    assert np.allclose(theta - prev, -1e-3 * np.sign(g), rtol=1e-6)


def test_adam_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        adam_step(np.zeros(2), np.zeros(3), AdamState.zeros(2), 0.1)


def test_train_config_schedules():
    cfg = TrainConfig()
    assert (cfg.lam_for(0), cfg.lam_for(1), cfg.lr_for(0), cfg.lr_for(4)) == (10.0, 1.0, 1e-4, 1e-5)
    with pytest.raises(ValueError):
        TrainConfig(gradient="spsa")
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)


def test_zero_epochs_returns_init():
    init = HeadParams.init(4, seed=2)
    res = train_head([1.0], TrainConfig(epochs=0, c_out=4), init=init, loss_fn=quad_loss(0.0))
    assert np.array_equal(res.params.to_vector(), init.to_vector())
    assert res.epoch_loss == []


def test_training_decreases_quadratic_and_writes_artifacts(tmp_path):
    cfg = TrainConfig(epochs=3, c_out=4, lr_init=0.05, lr=0.05, batch_size=2)
    target = np.full(HeadParams.zeros(c_out=4).size, 0.3)
    out = str(tmp_path / "run")
    res = train_head([1.0, 1.0, 1.0], cfg, out_dir=out, loss_fn=quad_loss(target))
    assert all(b < a for a, b in zip(res.epoch_loss, res.epoch_loss[1:]))
    files = sorted(os.listdir(out))
    assert "head.ckpt" in files and "loss_curve.csv" in files and "batch_log.csv" in files
    assert "head_epoch003.ckpt" in files
    with open(os.path.join(out, "loss_curve.csv")) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["epoch", "mean_loss"] and len(rows) == 4
    assert [float(r[1]) for r in rows[1:]] == res.epoch_loss
    # two batches per epoch (sizes 2 and 1)
    assert len(res.batch_log) == 6


def test_training_is_deterministic():
    cfg = TrainConfig(epochs=2, c_out=4, lr_init=0.01, lr=0.01, batch_size=2, seed=5)
    data = [1.0, 2.0, 3.0]
    a = train_head(data, cfg, loss_fn=quad_loss(0.1))
    b = train_head(data, cfg, loss_fn=quad_loss(0.1))
    assert np.array_equal(a.params.to_vector(), b.params.to_vector())
    assert a.epoch_loss == b.epoch_loss


def test_training_aborts_when_most_samples_fail():
    def fn(theta, sample):
        return float("nan") if sample else 1.0

    with pytest.raises(TrainingAborted):
        train_head([1, 1, 0], TrainConfig(epochs=1, c_out=4), loss_fn=fn)



def test_positive_saliency_bias_saturates_to_one():
    p = HeadParams.zeros()
    p.sal_b[:] = 10.0
    for lvl in head_forward(p, small_base()).levels:
        assert np.all(np.abs(lvl.saliency - 1.0) < 1e-4)


def test_fd_direction_decreases_true_loss(static_triplet):
    from tcreloc.features import TrainingSample, head_triplet_loss
    from tcreloc.registration import RegistrationConfig

    sample = TrainingSample(static_triplet)
    cfg = TrainConfig(c_out=1, registration=RegistrationConfig(iterations_per_level=(1, 1, 1, 1)))
    p = HeadParams.init(1, seed=0)
    res = loss_gradient_fd(p, [sample], cfg, 1.0)
    assert res.skipped == [] and np.linalg.norm(res.gradient) > 0
    step = 1e-3 / np.linalg.norm(res.gradient)
    moved = p.with_vector(p.to_vector() - step * res.gradient)
    assert head_triplet_loss(moved, sample, cfg, 1.0) < res.loss
