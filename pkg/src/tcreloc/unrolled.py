"""Reverse-mode gradient of the triplet loss through unrolled registration.

The forward pass is the ordinary coarse-to-fine Gauss-Newton run with a tape.
The backward pass walks the tape in reverse and propagates adjoints through

* the pose update ``T <- T exp(-delta)`` (pose adjoints are 6-vectors for a
  right perturbation ``T exp(eps)``),
* the damped normal equations ``delta = -(H + eps I)^-1 g``,
* the IRLS weights, residuals and bilinear query sampling,
* the reference image gradients,
* the sigmoid head.

Validity masks and Huber branches are held fixed, as an autodiff framework
would. ``loss_gradient_adjoint`` returns the same quantity as
``loss_gradient_fd`` up to finite-difference error and is much cheaper.
"""

from __future__ import annotations

import logging
from typing import List, Optional, Sequence

import numpy as np

from .camera import NUM_LEVELS
from .errors import NonFiniteLoss, RelocError
from .features import (
    BasePyramid,
    GradientResult,
    HeadParams,
    TrainConfig,
    TrainingSample,
    head_forward,
)
from .liegroup import SE3Pose, compose, hat, inverse, pose_error_l1, se3_exp, se3_log
from .losses import LossConfig, triplet_loss
from .registration import RegistrationConfig, TapeEntry, register

log = logging.getLogger(__name__)

POSE_FD_STEP = 1e-6


def adjoint_matrix(t: SE3Pose) -> np.ndarray:
    """``Ad_T`` for twists ordered ``(v, w)``: ``T exp(x) T^-1 = exp(Ad_T x)``."""
    r, p = t.rotation, t.translation
    out = np.zeros((6, 6))
    out[:3, :3] = r
    out[3:, 3:] = r
    out[:3, 3:] = hat(p) @ r
    return out


def right_gradient(fn, t: SE3Pose, h: float = POSE_FD_STEP) -> np.ndarray:
    """Gradient of scalar ``fn`` at ``t`` w.r.t. a right perturbation ``t exp(eps)``."""
    g = np.empty(6)
    for j in range(6):
        e = np.zeros(6)
        e[j] = h
        g[j] = (fn(compose(t, se3_exp(e))) - fn(compose(t, se3_exp(-e)))) / (2.0 * h)
    return g


def _update_jacobian(delta: np.ndarray, h: float = POSE_FD_STEP) -> np.ndarray:
    """``d eps / d delta`` where ``exp(-delta - d) = exp(-delta) exp(eps)``."""
    ed = se3_exp(delta)
    out = np.empty((6, 6))
    for j in range(6):
        e = np.zeros(6)
        e[j] = h
        plus = se3_log(compose(ed, se3_exp(-delta - e)))
        minus = se3_log(compose(ed, se3_exp(-delta + e)))
        out[:, j] = (plus - minus) / (2.0 * h)
    return out


class LevelGrads:
    """Adjoints of one frame's feature and saliency maps, per pyramid level."""

    def __init__(self, shapes):
        self.features = [np.zeros(s) for s in shapes]
        self.saliency = [np.zeros(s[:2]) for s in shapes]


def _gradient_adjoint(gx_bar: np.ndarray, gy_bar: np.ndarray) -> np.ndarray:
    """Transpose of ``image_gradients``."""
    out = np.zeros_like(gx_bar)
    out[:, 2:] += 0.5 * gx_bar[:, 1:-1]
    out[:, :-2] -= 0.5 * gx_bar[:, 1:-1]
    out[:, 1] += gx_bar[:, 0]
    out[:, 0] -= gx_bar[:, 0]
    out[:, -1] += gx_bar[:, -1]
    out[:, -2] -= gx_bar[:, -1]
    out[2:] += 0.5 * gy_bar[1:-1]
    out[:-2] -= 0.5 * gy_bar[1:-1]
    out[1] += gy_bar[0]
    out[0] -= gy_bar[0]
    out[-1] += gy_bar[-1]
    out[-2] -= gy_bar[-1]
    return out


def _bilinear_backward(stack: np.ndarray, coords: np.ndarray, s_bar: np.ndarray):
    """Adjoints of the sampled image and of the sample coordinates."""
    h, w, c = stack.shape
    x, y = coords[:, 0], coords[:, 1]
    x0 = np.minimum(np.floor(x).astype(np.intp), max(w - 2, 0))
    y0 = np.minimum(np.floor(y).astype(np.intp), max(h - 2, 0))
    ax = x - x0
    ay = y - y0
    i00 = y0 * w + x0
    corners = np.concatenate([i00, i00 + 1, i00 + w, i00 + w + 1])
    cw = np.concatenate([(1 - ax) * (1 - ay), ax * (1 - ay), (1 - ax) * ay, ax * ay])
    flat_idx = (corners[:, None] * c + np.arange(c)).ravel()
    img_bar = np.bincount(flat_idx, (cw[:, None] * np.tile(s_bar, (4, 1))).ravel(), minlength=h * w * c)
    flat = stack.reshape(h * w, c)
    f00, f01 = flat[i00], flat[i00 + 1]
    f10, f11 = flat[i00 + w], flat[i00 + w + 1]
    top = f00 + ax[:, None] * (f01 - f00)
    bottom = f10 + ax[:, None] * (f11 - f10)
    dx = (1 - ay)[:, None] * (f01 - f00) + ay[:, None] * (f11 - f10)
    dy = bottom - top
    u_bar = np.stack([np.sum(dx * s_bar, axis=1), np.sum(dy * s_bar, axis=1)], axis=1)
    return img_bar.reshape(h, w, c), u_bar


def registration_backward(tape: Sequence[TapeEntry], pose_bars: Sequence[np.ndarray], gamma: float, eps: float):
    """Propagate per-iteration pose adjoints back to the input maps.

    ``pose_bars[k]`` is dL/d(eps) of the estimate after iteration ``k``.
    Returns ``(ref_grads, query_grads)`` as LevelGrads.
    """
    shapes = [None] * NUM_LEVELS
    for entry in tape:
        shapes[entry.level] = entry.ref.shape
    ref_grads = LevelGrads([s if s is not None else (1, 1, 1) for s in shapes])
    query_grads = LevelGrads([s if s is not None else (1, 1, 1) for s in shapes])
    acc = {}  # level -> per-valid-pixel reference adjoints
    a_pose = np.zeros(6)
    for k in range(len(tape) - 1, -1, -1):
        entry = tape[k]
        ref, query, res, delta = entry.ref, entry.query, entry.res, entry.delta
        a_pose = a_pose + pose_bars[k]
        # T_new = T exp(-delta)
        delta_bar = _update_jacobian(delta).T @ a_pose
        a_pose = adjoint_matrix(se3_exp(delta)).T @ a_pose

        idx, r, wts, norms = res.index, res.residuals, res.weights, res.norms
        c = query.channels
        gx, gy, jx, jy = ref.gx[idx], ref.gy[idx], ref.jx[idx], ref.jy[idx]
        hmat = (wts @ ref.hessians[idx]).reshape(6, 6) + eps * np.eye(6)
        a = np.linalg.solve(hmat, delta_bar)
        g_bar = -a
        hs = -0.5 * (np.outer(a, delta) + np.outer(delta, a))
        # H = sum_u w_u Jw^T (sum_c dF_c dF_c^T) Jw
        w_bar = ref.hessians[idx] @ hs.ravel()
        hj_x = jx @ hs
        b_xx = np.sum(hj_x * jx, axis=1)
        b_xy = np.sum(hj_x * jy, axis=1)
        b_yy = np.sum((jy @ hs) * jy, axis=1)
        gx_bar = 2.0 * wts[:, None] * (b_xx[:, None] * gx + b_xy[:, None] * gy)
        gy_bar = 2.0 * wts[:, None] * (b_xy[:, None] * gx + b_yy[:, None] * gy)
        # g = sum_u Jw^T e_u, e_u = sum_c dF_c w_u r_c
        ex_bar = jx @ g_bar
        ey_bar = jy @ g_bar
        gx_bar += ex_bar[:, None] * wts[:, None] * r
        gy_bar += ey_bar[:, None] * wts[:, None] * r
        rho = ex_bar[:, None] * gx + ey_bar[:, None] * gy
        w_bar += np.sum(rho * r, axis=1)
        r_bar = wts[:, None] * rho
        # w = S_r S_q huber_weight(|r|)
        s_ref = ref.saliency[idx]
        s_q = res.sampled[:, c]
        outside = norms > gamma
        hw = np.where(outside, gamma / np.maximum(norms, gamma), 1.0)
        s_ref_bar = w_bar * s_q * hw
        s_q_bar = w_bar * s_ref * hw
        n_bar = np.where(outside, w_bar * s_ref * s_q * -gamma / np.maximum(norms, gamma) ** 2, 0.0)
        r_bar += (n_bar / np.maximum(norms, 1e-300))[:, None] * r
        # r = F_r - F_q(u')
        f_ref_bar = r_bar
        sampled_bar = np.concatenate([-r_bar, s_q_bar[:, None]], axis=1)
        stack_bar, u_bar = _bilinear_backward(query.stack, res.coords, sampled_bar)
        lvl = entry.level
        query_grads.features[lvl] += stack_bar[:, :, :c]
        query_grads.saliency[lvl] += stack_bar[:, :, c]
        # u' = pi(R p + t), right perturbation: dP = R [I | -hat(p)] eps
        rot, tr = entry.pose.rotation, entry.pose.translation
        pts = ref.points[idx]
        cam_pts = pts @ rot.T + tr
        iz = 1.0 / cam_pts[:, 2]
        cam = query.camera
        p_bar = np.stack(
            [
                u_bar[:, 0] * cam.fx * iz,
                u_bar[:, 1] * cam.fy * iz,
                -(u_bar[:, 0] * cam.fx * cam_pts[:, 0] + u_bar[:, 1] * cam.fy * cam_pts[:, 1]) * iz * iz,
            ],
            axis=1,
        )
        local_bar = p_bar @ rot  # R^T p_bar per row
        a_pose = a_pose + np.concatenate([local_bar.sum(axis=0), np.sum(np.cross(pts, local_bar), axis=0)])

        if lvl not in acc:
            n = len(ref)
            acc[lvl] = (ref, np.zeros((n, c)), np.zeros(n), np.zeros((n, c)), np.zeros((n, c)))
        _, f_acc, s_acc, gx_acc, gy_acc = acc[lvl]
        f_acc[idx] += f_ref_bar
        s_acc[idx] += s_ref_bar
        gx_acc[idx] += gx_bar
        gy_acc[idx] += gy_bar

    for lvl, (ref, f_acc, s_acc, gx_acc, gy_acc) in acc.items():
        shape = ref.shape
        img_gx = np.zeros(shape)
        img_gy = np.zeros(shape)
        img_gx[ref.vs, ref.us] = gx_acc
        img_gy[ref.vs, ref.us] = gy_acc
        f_img = _gradient_adjoint(img_gx, img_gy)
        f_img[ref.vs, ref.us] += f_acc
        ref_grads.features[lvl] += f_img
        ref_grads.saliency[lvl][ref.vs, ref.us] += s_acc
    return ref_grads, query_grads


def trace_pose_gradients(trace_q_r0, trace_q_r1, trace_r1_r0, that_r0_r1: SE3Pose, cfg: LossConfig):
    """Per-iteration pose adjoints of the triplet loss for each of the three traces."""
    star_q_r0 = trace_q_r0.trace[-1].pose
    star_q_r1 = trace_q_r1.trace[-1].pose

    def c_q_r1(t):
        return pose_error_l1(compose(compose(that_r0_r1, inverse(t)), star_q_r0))

    def c_q_r0(t):
        return pose_error_l1(compose(compose(that_r0_r1, inverse(star_q_r1)), t))

    def acc(t):
        return cfg.lam * pose_error_l1(compose(that_r0_r1, t))

    out = []
    for result, fn in ((trace_q_r0, c_q_r0), (trace_q_r1, c_q_r1), (trace_r1_r0, acc)):
        bars = []
        for e in result.trace:
            if cfg.levels == "finest" and e.level != 0:
                bars.append(np.zeros(6))
            else:
                bars.append(right_gradient(fn, e.pose))
        out.append(bars)
    return out


def _head_backward(params: HeadParams, base: BasePyramid, pyr, grads: LevelGrads, out: HeadParams) -> None:
    for i, x in enumerate(base.channels):
        xf = x.reshape(-1, x.shape[2])
        f = pyr[i].features.reshape(-1, params.c_out)
        s = pyr[i].saliency.ravel()
        zf = grads.features[i].reshape(-1, params.c_out) * f * (1.0 - f)
        zs = grads.saliency[i].ravel() * s * (1.0 - s)
        out.feat_w[i] += xf.T @ zf
        out.feat_b[i] += zf.sum(axis=0)
        out.sal_w[i] += xf.T @ zs
        out.sal_b[i] += zs.sum()


def _merge(dst: LevelGrads, src: LevelGrads) -> None:
    for i in range(NUM_LEVELS):
        if src.features[i].shape == dst.features[i].shape:
            dst.features[i] += src.features[i]
            dst.saliency[i] += src.saliency[i]


def head_loss_and_gradient(params: HeadParams, sample: TrainingSample, cfg: TrainConfig, lam: float):
    """Triplet loss of ``sample`` and its exact gradient w.r.t. the head parameters."""
    reg: RegistrationConfig = cfg.registration
    pyrs = {name: head_forward(params, getattr(sample, name)) for name in ("r0", "r1", "q")}
    tapes = ([], [], [])
    q_r0 = register(pyrs["r0"], pyrs["q"], reg, tape=tapes[0])
    q_r1 = register(pyrs["r1"], pyrs["q"], reg, tape=tapes[1])
    r1_r0 = register(pyrs["r0"], pyrs["r1"].with_depth(None), reg, tape=tapes[2])
    that = sample.triplet.that_r0_r1
    loss_cfg = LossConfig(lam, cfg.loss_levels)
    total = triplet_loss(q_r0, q_r1, r1_r0, that, loss_cfg).total
    if not np.isfinite(total):
        raise NonFiniteLoss(f"non-finite loss on triplet {sample.id}")
    bars = trace_pose_gradients(q_r0, q_r1, r1_r0, that, loss_cfg)

    shapes = [lvl.features.shape for lvl in pyrs["r0"].levels]
    frame_grads = {name: LevelGrads(shapes) for name in pyrs}
    roles = (("r0", "q"), ("r1", "q"), ("r0", "r1"))
    for tape, pose_bars, (ref_name, query_name) in zip(tapes, bars, roles):
        ref_g, query_g = registration_backward(tape, pose_bars, reg.huber_gamma, reg.tikhonov_eps)
        _merge(frame_grads[ref_name], ref_g)
        _merge(frame_grads[query_name], query_g)

    grad = HeadParams.zeros(params.c_in, params.c_out)
    for name, pyr in pyrs.items():
        _head_backward(params, getattr(sample, name), pyr, frame_grads[name], grad)
    return float(total), grad.to_vector()


def loss_gradient_adjoint(
    params: HeadParams,
    batch: Sequence,
    cfg: TrainConfig,
    lam: Optional[float] = None,
) -> GradientResult:
    """Mean batch loss and its gradient by reverse-mode differentiation.

    Failing samples are skipped exactly as in ``loss_gradient_fd``.
    """
    lam = cfg.lam if lam is None else lam
    grads: List[np.ndarray] = []
    losses: List[float] = []
    skipped: List[str] = []
    for sample in batch:
        try:
            f, g = head_loss_and_gradient(params, sample, cfg, lam)
            if not np.all(np.isfinite(g)):
                raise NonFiniteLoss("non-finite gradient")
        except RelocError as exc:
            sid = getattr(sample, "id", str(sample))
            log.warning("skipping sample %s: %s", sid, exc)
            skipped.append(sid)
            continue
        grads.append(g)
        losses.append(f)
    theta = params.to_vector()
    if not grads:
        return GradientResult(np.zeros_like(theta), float("nan"), skipped)
    return GradientResult(np.sum(grads, axis=0) / len(grads), float(np.sum(losses) / len(losses)), skipped)
