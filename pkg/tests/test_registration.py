import dataclasses

import numpy as np
import pytest

from tcreloc.camera import FramePyramid, PinholeCamera, PyramidLevel, _bilinear_unchecked, scale_camera
from tcreloc.errors import ShapeMismatch, SingularSystem, TooFewValidPixels
from tcreloc.features import handcrafted_features
from tcreloc.liegroup import SE3Pose, compose, inverse, se3_exp, so3_log
from tcreloc.registration import (
    QueryLevel,
    ReferenceLevel,
    RegistrationConfig,
    apply_update,
    evaluate,
    gauss_newton_step,
    huber_cost,
    huber_weight,
    objective,
    register,
    residuals_and_weights,
    warp_jacobian,
)
from tcreloc.synthscene import DISTRACTOR, SceneConfig, generate_scene, make_triplet, render_frame

from fd_checks import jacobian_relative_error
from oracles import cramer_solve


def pyramids(triplet):
    r0 = handcrafted_features(triplet.r0.image, triplet.r0.camera, triplet.r0.depth)
    q = handcrafted_features(triplet.q.image, triplet.q.camera)
    return r0, q


def pose_errors(estimate, truth):
    diff = compose(inverse(truth), estimate)
    return np.linalg.norm(diff.translation), np.rad2deg(np.linalg.norm(so3_log(diff.rotation)))


def test_config_validation():
    with pytest.raises(ValueError):
        RegistrationConfig(iterations_per_level=(1, 2, 3))
    with pytest.raises(ValueError):
        RegistrationConfig(iterations_per_level=(1, 0, 1, 1))
    with pytest.raises(ValueError):
        RegistrationConfig(huber_gamma=0.0)
    assert RegistrationConfig().iterations_per_level == (16, 12, 8, 4)


def test_huber_weight_examples():
    assert huber_weight(0.0, 0.1) == 1.0
    assert huber_weight(0.1, 0.1) == 1.0
    assert huber_weight(0.2, 0.1) == 0.5
    assert np.array_equal(huber_weight(np.array([0.0, 0.05, 1.0]), 0.1), [1.0, 1.0, 0.1])
    with pytest.raises(ValueError):
        huber_weight(1.0, 0.0)
    # cost is continuous at gamma and its IRLS weight is rho'(r) / r
    g = 0.1
    assert huber_cost(g, g) == pytest.approx(0.5 * g * g)
    r, h = 0.37, 1e-7
    slope = (huber_cost(r + h, g) - huber_cost(r - h, g)) / (2 * h)
    assert slope / r == pytest.approx(huber_weight(r, g), rel=1e-6)


def test_warp_jacobian_matches_finite_differences():
    cam = PinholeCamera.default(64, 48)
    rng = np.random.default_rng(0)
    pts = np.column_stack([rng.uniform(-2, 2, (10, 2)), rng.uniform(2, 8, 10)])
    jac = warp_jacobian(cam, pts)
    for j in range(6):
        e = np.zeros(6)
        e[j] = 1e-6
        plus = se3_exp(e).apply(pts)
        minus = se3_exp(-e).apply(pts)
        proj = lambda p: np.column_stack([cam.fx * p[:, 0] / p[:, 2] + cam.cx, cam.fy * p[:, 1] / p[:, 2] + cam.cy])  # noqa: E731
        fd = (proj(plus) - proj(minus)) / 2e-6
        assert np.allclose(jac[:, :, j], fd, rtol=1e-6, atol=1e-6)


def test_residual_jacobian_matches_finite_differences(static_triplet):
    r0, _ = pyramids(static_triplet)
    for level in range(4):
        assert jacobian_relative_error(r0[level]) < 1e-4


def test_self_residuals_are_zero(static_triplet):
    r0, _ = pyramids(static_triplet)
    rng = np.random.default_rng(1)
    sal = rng.uniform(0.1, 0.9, r0[0].saliency.shape)
    lvl = dataclasses.replace(r0[0], saliency=sal)
    pix, r, w = residuals_and_weights(lvl, lvl, SE3Pose.identity())
    assert np.max(np.abs(r)) < 1e-12
    assert np.allclose(w, sal[pix[:, 1], pix[:, 0]] ** 2, rtol=0, atol=1e-12)


def test_unit_saliency_huge_gamma_gives_unit_weights(static_triplet):
    r0, q = pyramids(static_triplet)
    ref = dataclasses.replace(r0[1], saliency=np.ones(r0[1].saliency.shape))
    qry = dataclasses.replace(q[1], saliency=np.ones(q[1].saliency.shape))
    _, _, w = residuals_and_weights(ref, qry, static_triplet.gt_q_r0(), gamma=1e6)
    assert np.all(w == 1.0)


def test_residuals_errors(static_triplet):
    r0, q = pyramids(static_triplet)
    with pytest.raises(TooFewValidPixels):
        residuals_and_weights(r0[0], q[0], SE3Pose(np.eye(3), [100.0, 0, 0]))
    bad = PyramidLevel(np.zeros(r0[0].features.shape[:2] + (2,)), r0[0].saliency, r0[0].camera)
    with pytest.raises(ShapeMismatch):
        residuals_and_weights(r0[0], bad, SE3Pose.identity())


def test_objective_minimal_at_ground_truth(static_triplet):
    r0, q = pyramids(static_triplet)
    gt = static_triplet.gt_q_r0()
    cfg = RegistrationConfig()
    best, count = objective(r0, q, gt, cfg)
    rng = np.random.default_rng(2)
    for scale in (0.01, 0.03):
        for _ in range(10):
            pert = compose(gt, se3_exp(scale * rng.normal(size=6)))
            cost, n = objective(r0, q, pert, cfg)
            # compare per valid residual so a shrinking overlap cannot win
            assert best / count < cost / n


def test_zero_residuals_give_zero_step(static_triplet):
    r0, _ = pyramids(static_triplet)
    ref = ReferenceLevel(r0[0])
    res = evaluate(ref, QueryLevel(r0[0]), SE3Pose.identity(), 0.1)
    assert np.max(np.abs(gauss_newton_step(ref, res))) < 1e-12


def test_one_pixel_step_matches_cramer():
    rng = np.random.default_rng(3)
    cam = PinholeCamera.default(5, 5)
    depth = np.zeros((5, 5))
    depth[2, 3] = 4.0
    ref_level = PyramidLevel(rng.random((5, 5, 3)), rng.uniform(0.2, 0.9, (5, 5)), cam, depth)
    query_level = PyramidLevel(rng.random((5, 5, 3)), rng.uniform(0.2, 0.9, (5, 5)), cam)
    ref = ReferenceLevel(ref_level)
    pose = se3_exp([0.01, -0.02, 0.03, 0.01, 0.0, -0.01])
    res = evaluate(ref, QueryLevel(query_level), pose, 0.1)
    assert len(res.index) == 1
    eps = 0.5
    delta = gauss_newton_step(ref, res, eps)
    jac = ref.jacobian[0]  # (C, 6)
    w = res.weights[0]
    a = w * jac.T @ jac + eps * np.eye(6)
    b = -w * jac.T @ res.residuals[0]
    expect = cramer_solve(a.tolist(), b.tolist())
    assert np.max(np.abs(delta - expect)) < 1e-10


def test_textureless_system_is_singular():
    cam = PinholeCamera.default(160, 96)
    levels = []
    for i in range(4):
        c = scale_camera(cam, i)
        shape = (c.height, c.width)
        levels.append(PyramidLevel(np.full(shape + (1,), 0.5), np.full(shape, 0.5), c, np.full(shape, 5.0)))
    pyr = FramePyramid(levels)
    with pytest.raises(SingularSystem) as info:
        register(pyr, pyr, RegistrationConfig(tikhonov_eps=0.0))
    assert (info.value.level, info.value.iteration) == (3, 0)


def test_too_few_pixels_carries_location(static_triplet):
    r0, q = pyramids(static_triplet)
    with pytest.raises(TooFewValidPixels) as info:
        register(r0, q, RegistrationConfig(min_valid_pixels=10**6))
    assert (info.value.level, info.value.iteration) == (3, 0)


def test_reference_needs_depth(static_triplet):
    r0, q = pyramids(static_triplet)
    with pytest.raises(ShapeMismatch):
        register(q, r0)


def test_self_registration_fixed_point(static_triplet):
    r0, _ = pyramids(static_triplet)
    res = register(r0, r0.with_depth(None))
    assert np.max(np.abs(res.final_pose.matrix() - np.eye(4))) < 1e-10
    assert res.converged


def test_trace_structure(static_triplet):
    r0, q = pyramids(static_triplet)
    cfg = RegistrationConfig(iterations_per_level=(3, 2, 2, 1))
    res = register(r0, q, cfg)
    assert len(res.trace) == 8
    assert [e.level for e in res.trace] == [3, 3, 3, 2, 2, 1, 1, 0]
    assert [e.iteration for e in res.trace] == [0, 1, 2, 0, 1, 0, 1, 0]
    assert res.final_pose is res.trace[-1].pose
    assert all(isinstance(e.pose, SE3Pose) and e.valid > 0 for e in res.trace)


def test_apply_update_is_inverse_composition():
    t = se3_exp([0.1, 0.2, 0.3, 0.01, 0.02, 0.03])
    d = np.array([0.01, -0.02, 0.0, 0.003, 0.0, -0.001])
    assert np.allclose(apply_update(t, d).matrix(), t.matrix() @ np.linalg.inv(se3_exp(d).matrix()), atol=1e-14)


def test_recovers_known_offset():
    cfg = SceneConfig(width=160, height=96, query_translation=0.0)
    scene = generate_scene(cfg, seed=11)
    cam = cfg.camera()
    t_w_r = SE3Pose.identity()
    offset = SE3Pose(se3_exp([0, 0, 0, 0.0, np.deg2rad(5.0), 0]).rotation, [0.3 / np.sqrt(2), 0.0, 0.3 / np.sqrt(2)])
    t_w_q = compose(t_w_r, offset)
    ref = render_frame(scene, t_w_r, cam)
    qry = render_frame(scene, t_w_q, cam)
    r0 = handcrafted_features(ref.image, cam, ref.depth)
    q = handcrafted_features(qry.image, cam)
    res = register(r0, q)
    gt = inverse(offset)
    dt, dr = pose_errors(res.final_pose, gt)
    assert dt < 0.02 * 0.3
    assert dr < 0.1
    init_cost, _ = objective(r0, q, SE3Pose.identity())
    final_cost, _ = objective(r0, q, res.final_pose)
    assert final_cost <= init_cost


def test_oracle_saliency_beats_uniform_with_distractor():
    cfg = SceneConfig(width=160, height=96, distractor_count=0)
    scene = generate_scene(cfg, seed=5)
    cam = cfg.camera()
    offset = se3_exp([0.2, 0.0, 0.25, 0.0, 0.05, 0.0])
    from tcreloc.synthscene import Box

    # a large box in front of the camera that moves between the two frames
    box = Box(np.array([-0.6, 0.6, 5.0]), np.array([1.2, 1.2, 0.9]), np.array([0.6, 0.0, 0.0]))
    scene.boxes.append(box)
    ref = render_frame(scene, SE3Pose.identity(), cam, time=0)
    qry = render_frame(scene, offset, cam, time=1)
    share = np.mean(ref.segmentation == DISTRACTOR)
    assert 0.1 < share < 0.35
    uniform = register(handcrafted_features(ref.image, cam, ref.depth), handcrafted_features(qry.image, cam))

    def masked(frame, pyr):
        from tcreloc.camera import downsample_nearest

        sal = [np.where(downsample_nearest(frame.segmentation, i) == DISTRACTOR, 0.01, 0.99) for i in range(4)]
        return pyr.with_saliency(sal)

    r0 = masked(ref, handcrafted_features(ref.image, cam, ref.depth))
    q = masked(qry, handcrafted_features(qry.image, cam))
    oracle = register(r0, q)
    gt = inverse(offset)
    assert pose_errors(oracle.final_pose, gt)[0] < pose_errors(uniform.final_pose, gt)[0]


def test_registration_is_deterministic(static_triplet):
    r0, q = pyramids(static_triplet)
    a = register(r0, q)
    b = register(r0, q)
    assert np.array_equal(a.final_pose.matrix(), b.final_pose.matrix())
    assert [e.cost for e in a.trace] == [e.cost for e in b.trace]
