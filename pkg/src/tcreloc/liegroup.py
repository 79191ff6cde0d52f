"""SE(3) poses and the se(3) exponential / logarithm maps.

Conventions
-----------
``T_ab`` maps points expressed in frame ``b`` into frame ``a``:
``p_a = R_ab @ p_b + t_ab``. Composition ``compose(T_ab, T_bc) = T_ac``.

Twists are plain length-6 arrays ordered ``(v, w)``: translational part first
(meters), rotational part second (radians, axis-angle).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import AngleNearPi, InvalidPose

SMALL_ANGLE = 1e-8
# Below this angle, coefficients that cancel catastrophically use their series.
SERIES_ANGLE = 1e-2
NEAR_PI_MARGIN = 1e-6
ORTHO_TOL = 1e-9
REORTHONORMALIZE_AFTER = 1000


def hat(w: np.ndarray) -> np.ndarray:
    """Skew-symmetric matrix such that ``hat(w) @ p == cross(w, p)``."""
    return np.array(
        [
            [0.0, -w[2], w[1]],
            [w[2], 0.0, -w[0]],
            [-w[1], w[0], 0.0],
        ]
    )


def vee(m: np.ndarray) -> np.ndarray:
    return np.array([m[2, 1], m[0, 2], m[1, 0]])


def check_rotation(r: np.ndarray, tol: float = ORTHO_TOL) -> None:
    r = np.asarray(r, dtype=float)
    if r.shape != (3, 3) or not np.all(np.isfinite(r)):
        raise InvalidPose("rotation must be a finite 3x3 matrix")
    err = np.linalg.norm(r.T @ r - np.eye(3))
    if err > tol:
        raise InvalidPose(f"rotation is not orthonormal (|R^T R - I| = {err:.3g})")
    det = np.linalg.det(r)
    if abs(det - 1.0) > tol:
        raise InvalidPose(f"rotation has det {det:.12g}, expected 1")


@dataclass(frozen=True, eq=False)
class SE3Pose:
    """Rigid transform; immutable value type."""

    rotation: np.ndarray
    translation: np.ndarray
    # Number of compositions since the rotation was last re-orthonormalized.
    chain: int = field(default=0, repr=False, compare=False)

    def __post_init__(self):
        r = np.array(self.rotation, dtype=float)
        t = np.array(self.translation, dtype=float).reshape(3)
        if not np.all(np.isfinite(t)):
            raise InvalidPose("translation must be finite")
        check_rotation(r)
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "SE3Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m) -> "SE3Pose":
        m = np.asarray(m, dtype=float)
        if m.shape == (16,):
            m = m.reshape(4, 4)
        if m.shape != (4, 4):
            raise InvalidPose(f"expected a 4x4 matrix, got shape {m.shape}")
        if not np.allclose(m[3], [0.0, 0.0, 0.0, 1.0], rtol=0.0, atol=ORTHO_TOL):
            raise InvalidPose("last row of a homogeneous transform must be (0, 0, 0, 1)")
        return cls(m[:3, :3], m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform a point ``(3,)`` or a stack of points ``(N, 3)``."""
        points = np.asarray(points, dtype=float)
        return points @ self.rotation.T + self.translation

    def __matmul__(self, other: "SE3Pose") -> "SE3Pose":
        return compose(self, other)

    def __repr__(self):
        return f"SE3Pose(rotation={self.rotation.tolist()}, translation={self.translation.tolist()})"


def orthonormalize(r: np.ndarray) -> np.ndarray:
    """Nearest rotation matrix (polar decomposition via SVD)."""
    u, _, vt = np.linalg.svd(r)
    q = u @ vt
    if np.linalg.det(q) < 0:
        u[:, -1] = -u[:, -1]
        q = u @ vt
    return q


def compose(a: SE3Pose, b: SE3Pose) -> SE3Pose:
    """``a ∘ b``: maps ``p`` to ``a(b(p))``."""
    r = a.rotation @ b.rotation
    t = a.rotation @ b.translation + a.translation
    chain = a.chain + b.chain + 1
    if chain > REORTHONORMALIZE_AFTER:
        r = orthonormalize(r)
        chain = 0
    return SE3Pose(r, t, chain)


def inverse(t: SE3Pose) -> SE3Pose:
    rt = t.rotation.T
    return SE3Pose(rt, -rt @ t.translation, t.chain)


def _so3_coeffs(theta: float):
    """Return (sin t / t, (1 - cos t) / t^2, (t - sin t) / t^3)."""
    if theta < SMALL_ANGLE:
        t2 = theta * theta
        return 1.0 - t2 / 6.0, 0.5 - t2 / 24.0, 1.0 / 6.0 - t2 / 120.0
    t2 = theta * theta
    half = np.sin(0.5 * theta) / theta
    if theta < SERIES_ANGLE:
        # theta - sin(theta) cancels; its series is exact to double precision here
        c = 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0
    else:
        c = (theta - np.sin(theta)) / (t2 * theta)
    return np.sin(theta) / theta, 2.0 * half * half, c


def so3_exp(w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    theta = float(np.linalg.norm(w))
    a, b, _ = _so3_coeffs(theta)
    k = hat(w)
    return np.eye(3) + a * k + b * (k @ k)


def se3_exp(xi) -> SE3Pose:
    """Exponential map of a twist ``(v, w)``."""
    xi = np.asarray(xi, dtype=float).reshape(6)
    v, w = xi[:3], xi[3:]
    theta = float(np.linalg.norm(w))
    a, b, c = _so3_coeffs(theta)
    k = hat(w)
    k2 = k @ k
    r = np.eye(3) + a * k + b * k2
    left_jac = np.eye(3) + b * k + c * k2
    return SE3Pose(r, left_jac @ v)


def so3_log(r: np.ndarray) -> np.ndarray:
    """Axis-angle vector of a rotation with angle below ``pi - 1e-6``."""
    cos_t = 0.5 * (np.trace(r) - 1.0)
    skew = vee(r - r.T)  # = 2 sin(t) * axis
    sin_t = 0.5 * np.linalg.norm(skew)
    theta = float(np.arctan2(sin_t, cos_t))
    if theta >= np.pi - NEAR_PI_MARGIN:
        raise AngleNearPi(f"rotation angle {theta:.9f} too close to pi for a unique log")
    if theta < SMALL_ANGLE:
        # theta / (2 sin theta) ~ 1/2 + theta^2 / 12
        return (0.5 + theta * theta / 12.0) * skew
    if theta < 3.0:
        return theta / (2.0 * sin_t) * skew
    # Close to pi the antisymmetric part loses precision; recover the axis
    # from the symmetric part instead and take the sign from the skew part.
    sym = 0.5 * (r + r.T) - cos_t * np.eye(3)
    i = int(np.argmax(np.diag(sym)))
    axis = sym[:, i] / np.sqrt(sym[i, i] * (1.0 - cos_t))
    if axis @ skew < 0:
        axis = -axis
    return theta * axis


def se3_log(t: SE3Pose) -> np.ndarray:
    """Logarithm map returning the twist ``(v, w)``."""
    w = so3_log(t.rotation)
    theta = float(np.linalg.norm(w))
    k = hat(w)
    if theta < SMALL_ANGLE:
        coeff = 1.0 / 12.0 + theta * theta / 720.0
    elif theta < SERIES_ANGLE:
        t2 = theta * theta
        coeff = 1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0
    else:
        a, b, _ = _so3_coeffs(theta)
        coeff = (1.0 - a / (2.0 * b)) / (theta * theta)
    left_jac_inv = np.eye(3) - 0.5 * k + coeff * (k @ k)
    return np.concatenate([left_jac_inv @ t.translation, w])


def pose_error_l1(t: SE3Pose) -> float:
    """L1 norm of the twist of ``t``; zero only at the identity."""
    return float(np.sum(np.abs(se3_log(t))))


def relative(t_wa: SE3Pose, t_wb: SE3Pose) -> SE3Pose:
    """``T_ab`` from two world-frame poses ``T_wa`` and ``T_wb``."""
    return compose(inverse(t_wa), t_wb)
