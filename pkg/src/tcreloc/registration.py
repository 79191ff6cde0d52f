"""Saliency-weighted, Huber-robust direct feature-metric registration.

The query pyramid is aligned to a reference pyramid (which carries depth) by
inverse-compositional Gauss-Newton on SE(3), coarse to fine. For a reference
pixel ``u`` with back-projected point ``p`` and current estimate ``T_qr``::

    u'   = project(K_q, T_qr p)
    r(u) = F_r(u) - F_q(u')
    w(u) = S_r(u) S_q(u') huber_weight(|r(u)|, gamma)

Jacobians are taken with respect to a perturbation ``exp(delta)`` of the
reference warp, so they only depend on reference data and are built once per
level. Each step solves ``(J^T W J + eps I) delta = -J^T W r`` and updates
``T_qr <- T_qr exp(delta)^-1``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from .camera import (
    MIN_Z,
    NUM_LEVELS,
    FramePyramid,
    PinholeCamera,
    PyramidLevel,
    _bilinear_unchecked,
    image_gradients,
)
from .errors import ShapeMismatch, SingularSystem, TooFewValidPixels
from .liegroup import SE3Pose, compose, inverse, se3_exp

MAX_CONDITION = 1e12
CONVERGED_STEP = 1e-7


@dataclass(frozen=True)
class RegistrationConfig:
    iterations_per_level: Tuple[int, ...] = (16, 12, 8, 4)  # coarse -> fine
    huber_gamma: float = 0.1
    tikhonov_eps: float = 1e-8
    min_valid_pixels: int = 100

    def __post_init__(self):
        iters = tuple(int(i) for i in self.iterations_per_level)
        if len(iters) != NUM_LEVELS or min(iters) < 1:
            raise ValueError("iterations_per_level needs 4 entries, each >= 1")
        if not self.huber_gamma > 0:
            raise ValueError("huber_gamma must be positive")
        if self.tikhonov_eps < 0:
            raise ValueError("tikhonov_eps must be non-negative")
        object.__setattr__(self, "iterations_per_level", iters)


class TraceEntry(NamedTuple):
    level: int
    iteration: int
    pose: SE3Pose  # estimate after this iteration's update
    cost: float  # weighted robust cost the update was computed from
    valid: int  # residual count the update was computed from


@dataclass
class RegistrationResult:
    final_pose: SE3Pose
    trace: List[TraceEntry] = field(default_factory=list)
    converged: bool = False

    @property
    def poses(self) -> List[SE3Pose]:
        return [e.pose for e in self.trace]


def huber_weight(residual_norm, gamma: float):
    """IRLS weight of the Huber norm: 1 inside ``gamma``, ``gamma / r`` outside."""
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    r = np.asarray(residual_norm, dtype=float)
    w = np.where(r <= gamma, 1.0, gamma / np.maximum(r, gamma))
    return float(w) if w.ndim == 0 else w


def huber_cost(residual_norm, gamma: float):
    r = np.asarray(residual_norm, dtype=float)
    return np.where(r <= gamma, 0.5 * r * r, gamma * (r - 0.5 * gamma))


def warp_jacobian(cam: PinholeCamera, points: np.ndarray) -> np.ndarray:
    """d project(exp(delta) p) / d delta at delta = 0, shape ``(N, 2, 6)``."""
    x, y, z = points[:, 0], points[:, 1], points[:, 2]
    iz = 1.0 / z
    out = np.zeros((len(points), 2, 6))
    # d pi / d p
    dpx = np.stack([cam.fx * iz, np.zeros_like(z), -cam.fx * x * iz * iz], axis=1)
    dpy = np.stack([np.zeros_like(z), cam.fy * iz, -cam.fy * y * iz * iz], axis=1)
    # d (exp(delta) p) / d delta = [I | -hat(p)]
    for row, dp in ((0, dpx), (1, dpy)):
        out[:, row, :3] = dp
        out[:, row, 3] = dp[:, 1] * -z + dp[:, 2] * y
        out[:, row, 4] = dp[:, 0] * z + dp[:, 2] * -x
        out[:, row, 5] = dp[:, 0] * -y + dp[:, 1] * x
    return out


class ReferenceLevel:
    """Reference data that stays fixed while a level is being optimised.

    The per-pixel Jacobian factors as ``grad F_r(u) @ warp_jacobian(u)``;
    only the factors and the per-pixel 6x6 products are stored.
    """

    def __init__(self, level: PyramidLevel):
        if level.depth is None:
            raise ShapeMismatch("reference level has no depth map")
        cam = level.camera
        depth = level.depth
        vs, us = np.nonzero(depth > 0)
        d = depth[vs, us]
        self.camera = cam
        self.shape = level.features.shape
        self.vs, self.us = vs, us
        self.pixels = np.stack([us, vs], axis=1)
        self.points = np.stack(
            [(us - cam.cx) * d / cam.fx, (vs - cam.cy) * d / cam.fy, d], axis=1
        )
        self.features = level.features[vs, us]
        self.saliency = level.saliency[vs, us]
        gx, gy = image_gradients(level.features)
        self.gx, self.gy = gx[vs, us], gy[vs, us]  # (N, C)
        wj = warp_jacobian(cam, self.points)
        self.jx, self.jy = wj[:, 0], wj[:, 1]  # (N, 6)
        # structure tensor sum_c grad F_c grad F_c^T
        sxx = np.einsum("nc,nc->n", self.gx, self.gx)
        sxy = np.einsum("nc,nc->n", self.gx, self.gy)
        syy = np.einsum("nc,nc->n", self.gy, self.gy)
        xx = self.jx[:, :, None] * self.jx[:, None, :]
        xy = self.jx[:, :, None] * self.jy[:, None, :]
        yy = self.jy[:, :, None] * self.jy[:, None, :]
        hess = sxx[:, None, None] * xx + sxy[:, None, None] * (xy + xy.transpose(0, 2, 1)) + syy[:, None, None] * yy
        self.hessians = hess.reshape(-1, 36)

    @property
    def warp_jac(self) -> np.ndarray:
        return np.stack([self.jx, self.jy], axis=1)

    @property
    def jacobian(self) -> np.ndarray:
        """Full residual Jacobian ``(N, C, 6)``."""
        return self.gx[:, :, None] * self.jx[:, None, :] + self.gy[:, :, None] * self.jy[:, None, :]

    def __len__(self):
        return len(self.points)


class QueryLevel:
    def __init__(self, level: PyramidLevel):
        self.camera = level.camera
        self.stack = np.concatenate([level.features, level.saliency[:, :, None]], axis=2)
        self.channels = level.features.shape[2]


class TapeEntry(NamedTuple):
    """Forward quantities of one iteration, kept for reverse-mode differentiation."""

    level: int
    ref: "ReferenceLevel"
    query: "QueryLevel"
    res: "Residuals"
    pose: SE3Pose  # estimate the step was computed at
    delta: np.ndarray


class Residuals(NamedTuple):
    index: np.ndarray  # indices into the reference level's valid pixels
    residuals: np.ndarray  # (M, C)
    weights: np.ndarray  # (M,)  S_r S_q huber
    cost: float
    coords: np.ndarray  # (M, 2) warped query coordinates
    sampled: np.ndarray  # (M, C + 1) query features and saliency at coords
    norms: np.ndarray  # (M,)


def evaluate(ref: ReferenceLevel, query: QueryLevel, t_qr: SE3Pose, gamma: float) -> Residuals:
    cam = query.camera
    p = ref.points @ t_qr.rotation.T + t_qr.translation
    z = p[:, 2]
    ok = z > MIN_Z
    zs = np.where(ok, z, 1.0)
    ux = cam.fx * p[:, 0] / zs + cam.cx
    uy = cam.fy * p[:, 1] / zs + cam.cy
    ok &= (ux >= 0) & (ux <= cam.width - 1) & (uy >= 0) & (uy <= cam.height - 1)
    idx = np.flatnonzero(ok)
    coords = np.stack([ux[idx], uy[idx]], axis=1)
    sampled = _bilinear_unchecked(query.stack, coords)
    r = ref.features[idx] - sampled[:, : query.channels]
    norm = np.sqrt(np.einsum("nc,nc->n", r, r))
    sal = ref.saliency[idx] * sampled[:, query.channels]
    w = sal * huber_weight(norm, gamma)
    cost = float(np.sum(sal * huber_cost(norm, gamma)))
    return Residuals(idx, r, w, cost, coords, sampled, norm)


def residuals_and_weights(
    ref_level: PyramidLevel,
    query_level: PyramidLevel,
    t_qr: SE3Pose,
    gamma: float = 0.1,
    min_valid_pixels: int = 100,
):
    """Residual set at one level: ``(pixels (M, 2), residuals (M, C), weights (M,))``."""
    if ref_level.channels != query_level.channels:
        raise ShapeMismatch("reference and query channel counts differ")
    ref = ReferenceLevel(ref_level)
    res = evaluate(ref, QueryLevel(query_level), t_qr, gamma)
    if len(res.index) < min_valid_pixels:
        raise TooFewValidPixels(f"only {len(res.index)} valid residuals")
    return ref.pixels[res.index], res.residuals, res.weights


def normal_equations(ref: ReferenceLevel, res: Residuals) -> Tuple[np.ndarray, np.ndarray]:
    idx = res.index
    h = (res.weights @ ref.hessians[idx]).reshape(6, 6)
    # e_u = sum_c grad F_c(u) w_u r_c(u), then g = sum_u warp_jac_u^T e_u
    wr = res.residuals * res.weights[:, None]
    ex = np.einsum("mc,mc->m", ref.gx[idx], wr)
    ey = np.einsum("mc,mc->m", ref.gy[idx], wr)
    g = ex @ ref.jx[idx] + ey @ ref.jy[idx]
    return h, g


def solve_step(h: np.ndarray, g: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    """Solve ``(H + eps I) delta = -g``."""
    a = h + eps * np.eye(6)
    if not np.all(np.isfinite(a)) or np.linalg.cond(a) > MAX_CONDITION:
        raise SingularSystem("normal matrix is numerically rank deficient")
    return -np.linalg.solve(a, g)


def gauss_newton_step(ref: ReferenceLevel, res: Residuals, eps: float = 1e-8) -> np.ndarray:
    """Twist update ``delta`` for one inverse-compositional iteration."""
    h, g = normal_equations(ref, res)
    return solve_step(h, g, eps)


def apply_update(t_qr: SE3Pose, delta: np.ndarray) -> SE3Pose:
    return compose(t_qr, inverse(se3_exp(delta)))


def register(
    ref: FramePyramid,
    query: FramePyramid,
    cfg: Optional[RegistrationConfig] = None,
    init: Optional[SE3Pose] = None,
    tape: Optional[list] = None,
) -> RegistrationResult:
    """Estimate ``T_qr`` (reference frame -> query frame), coarse to fine.

    If ``tape`` is a list, one TapeEntry per iteration is appended to it.
    """
    cfg = cfg or RegistrationConfig()
    pose = init if init is not None else SE3Pose.identity()
    if not ref.has_depth:
        raise ShapeMismatch("reference pyramid has no depth")
    if ref[0].channels != query[0].channels:
        raise ShapeMismatch("reference and query channel counts differ")
    result = RegistrationResult(pose)
    delta = np.full(6, np.inf)
    for step, level in enumerate(range(NUM_LEVELS - 1, -1, -1)):
        ref_level = ReferenceLevel(ref[level])
        query_level = QueryLevel(query[level])
        for it in range(cfg.iterations_per_level[step]):
            res = evaluate(ref_level, query_level, pose, cfg.huber_gamma)
            if len(res.index) < cfg.min_valid_pixels:
                raise TooFewValidPixels(
                    f"{len(res.index)} valid residuals at level {level}, iteration {it}",
                    level=level,
                    iteration=it,
                )
            try:
                delta = gauss_newton_step(ref_level, res, cfg.tikhonov_eps)
            except SingularSystem as exc:
                raise SingularSystem(f"{exc} at level {level}, iteration {it}", level, it) from None
            if tape is not None:
                tape.append(TapeEntry(level, ref_level, query_level, res, pose, delta))
            pose = apply_update(pose, delta)
            result.trace.append(TraceEntry(level, it, pose, res.cost, len(res.index)))
    result.final_pose = pose
    result.converged = bool(np.max(np.abs(delta)) < CONVERGED_STEP)
    return result


def objective(ref: FramePyramid, query: FramePyramid, t_qr: SE3Pose, cfg: Optional[RegistrationConfig] = None, level: int = 0):
    """Weighted robust cost and residual count at one level for a fixed pose."""
    cfg = cfg or RegistrationConfig()
    res = evaluate(ReferenceLevel(ref[level]), QueryLevel(query[level]), t_qr, cfg.huber_gamma)
    return res.cost, len(res.index)
