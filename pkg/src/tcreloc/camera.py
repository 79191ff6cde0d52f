"""Pinhole cameras, image buffers and image pyramids.

Images are ``numpy`` arrays of shape ``(height, width, channels)``; a 2-D
array is treated as a single-channel image. Depth maps use ``0`` to mark
invalid pixels.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import List, Optional, Sequence

import numpy as np

from .errors import BehindCamera, ImageTooSmall, InvalidDepth, OutOfBounds, ShapeMismatch
from .liegroup import SE3Pose

NUM_LEVELS = 4
MIN_Z = 1e-6
# Interpolation used for query features and saliency.
INTERPOLATION = "bilinear"


@dataclass(frozen=True)
class PinholeCamera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @classmethod
    def default(cls, width: int = 640, height: int = 384) -> "PinholeCamera":
        """90 degree horizontal field of view, centred principal point."""
        f = 0.5 * width
        return cls(f, f, (width - 1) / 2.0, (height - 1) / 2.0, width, height)

    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def as_list(self) -> List[float]:
        return [self.fx, self.fy, self.cx, self.cy, self.width, self.height]


def as_image(img) -> np.ndarray:
    img = np.asarray(img, dtype=float)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3 or img.shape[2] < 1:
        raise ShapeMismatch(f"expected an (H, W, C) image, got shape {img.shape}")
    return img


def project(cam: PinholeCamera, p) -> np.ndarray:
    """Pixel coordinates of camera-frame point(s) ``p``; ``(3,)`` or ``(N, 3)``."""
    p = np.asarray(p, dtype=float)
    z = p[..., 2]
    if np.any(z <= MIN_Z):
        raise BehindCamera("point lies behind the camera")
    return np.stack([cam.fx * p[..., 0] / z + cam.cx, cam.fy * p[..., 1] / z + cam.cy], axis=-1)


def unproject(cam: PinholeCamera, u, d) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    d = np.asarray(d, dtype=float)
    if np.any(d <= 0):
        raise InvalidDepth("depth must be positive")
    x = (u[..., 0] - cam.cx) * d / cam.fx
    y = (u[..., 1] - cam.cy) * d / cam.fy
    return np.stack([x, y, d * np.ones_like(x)], axis=-1)


def pixel_rays(cam: PinholeCamera) -> np.ndarray:
    """Unit-depth rays ``(H, W, 3)`` through every pixel centre."""
    xs, ys = np.meshgrid(np.arange(cam.width, dtype=float), np.arange(cam.height, dtype=float))
    return np.stack([(xs - cam.cx) / cam.fx, (ys - cam.cy) / cam.fy, np.ones_like(xs)], axis=-1)


def in_bounds(img_shape, u) -> np.ndarray:
    h, w = img_shape[:2]
    u = np.asarray(u, dtype=float)
    return (u[..., 0] >= 0) & (u[..., 0] <= w - 1) & (u[..., 1] >= 0) & (u[..., 1] <= h - 1)


def bilinear_sample(img, u) -> np.ndarray:
    """Sample ``img`` at continuous pixel coordinate(s) ``u``.

    ``u`` may be ``(2,)`` or ``(N, 2)``; the result has shape ``(C,)`` or
    ``(N, C)``. Coordinates outside ``[0, w-1] x [0, h-1]`` raise OutOfBounds.
    """
    img = as_image(img)
    u = np.asarray(u, dtype=float)
    single = u.ndim == 1
    u = u.reshape(-1, 2)
    if not np.all(in_bounds(img.shape, u)):
        raise OutOfBounds("sample location outside the image")
    out = _bilinear_unchecked(img, u)
    return out[0] if single else out


def _bilinear_unchecked(img: np.ndarray, u: np.ndarray) -> np.ndarray:
    h, w, c = img.shape
    x, y = u[:, 0], u[:, 1]
    x0 = np.minimum(np.floor(x).astype(np.intp), max(w - 2, 0))
    y0 = np.minimum(np.floor(y).astype(np.intp), max(h - 2, 0))
    ax = (x - x0)[:, None]
    ay = (y - y0)[:, None]
    flat = img.reshape(h * w, c)
    i00 = y0 * w + x0
    x1 = np.minimum(1, w - 1)
    y1 = np.minimum(1, h - 1) * w
    f00 = flat.take(i00, axis=0)
    f01 = flat.take(i00 + x1, axis=0)
    f10 = flat.take(i00 + y1, axis=0)
    f11 = flat.take(i00 + y1 + x1, axis=0)
    top = f00 + ax * (f01 - f00)
    bottom = f10 + ax * (f11 - f10)
    return top + ay * (bottom - top)


def image_gradients(img):
    """Central differences in the interior, one-sided at the borders."""
    img = as_image(img)
    h, w, _ = img.shape
    if h < 3 or w < 3:
        raise ImageTooSmall("gradients need at least a 3x3 image")
    gx = np.empty_like(img)
    gy = np.empty_like(img)
    gx[:, 1:-1] = 0.5 * (img[:, 2:] - img[:, :-2])
    gx[:, 0] = img[:, 1] - img[:, 0]
    gx[:, -1] = img[:, -1] - img[:, -2]
    gy[1:-1] = 0.5 * (img[2:] - img[:-2])
    gy[0] = img[1] - img[0]
    gy[-1] = img[-1] - img[-2]
    return gx, gy


def downsample2x(img, depth: bool = False) -> np.ndarray:
    """2x2 block average. With ``depth=True`` zeros are ignored in each block."""
    img = as_image(img)
    h, w, c = img.shape
    if h < 2 or w < 2:
        raise ImageTooSmall("downsampling needs at least a 2x2 image")
    h2, w2 = h // 2, w // 2
    blocks = img[: 2 * h2, : 2 * w2].reshape(h2, 2, w2, 2, c)
    if not depth:
        return blocks.mean(axis=(1, 3))
    valid = blocks > 0
    count = valid.sum(axis=(1, 3))
    total = np.where(valid, blocks, 0.0).sum(axis=(1, 3))
    return np.where(count > 0, total / np.maximum(count, 1), 0.0)


def downsample_nearest(img, levels: int) -> np.ndarray:
    """Nearest-neighbour reduction by ``2**levels`` (used for label maps)."""
    img = np.asarray(img)
    for _ in range(levels):
        h2, w2 = img.shape[0] // 2, img.shape[1] // 2
        img = img[: 2 * h2 : 2, : 2 * w2 : 2]
    return img


def scale_camera(cam: PinholeCamera, level: int) -> PinholeCamera:
    if not 0 <= level <= NUM_LEVELS - 1:
        raise ValueError(f"level must be in [0, {NUM_LEVELS - 1}]")
    for _ in range(level):
        cam = PinholeCamera(
            cam.fx / 2.0,
            cam.fy / 2.0,
            (cam.cx + 0.5) / 2.0 - 0.5,
            (cam.cy + 0.5) / 2.0 - 0.5,
            cam.width // 2,
            cam.height // 2,
        )
    return cam


def warp_pixel(ref_cam: PinholeCamera, query_cam: PinholeCamera, t_qr: SE3Pose, u, d) -> np.ndarray:
    """Where reference pixel ``u`` with depth ``d`` lands in the query image."""
    p = t_qr.apply(unproject(ref_cam, u, d))
    u_q = project(query_cam, p)
    if not np.all(in_bounds((query_cam.height, query_cam.width), u_q)):
        raise OutOfBounds("warped pixel falls outside the query image")
    return u_q


@dataclass(frozen=True)
class PyramidLevel:
    features: np.ndarray
    saliency: np.ndarray
    camera: PinholeCamera
    depth: Optional[np.ndarray] = None

    def __post_init__(self):
        f = as_image(self.features)
        s = np.asarray(self.saliency, dtype=float)
        if s.ndim == 3:
            s = s[:, :, 0]
        if s.shape != f.shape[:2]:
            raise ShapeMismatch("saliency must match the feature map size")
        if f.shape[:2] != (self.camera.height, self.camera.width):
            raise ShapeMismatch("camera size does not match the feature map")
        object.__setattr__(self, "features", f)
        object.__setattr__(self, "saliency", s)
        if self.depth is not None:
            d = np.asarray(self.depth, dtype=float)
            if d.ndim == 3:
                d = d[:, :, 0]
            if d.shape != f.shape[:2]:
                raise ShapeMismatch("depth must match the feature map size")
            object.__setattr__(self, "depth", d)

    @property
    def channels(self) -> int:
        return self.features.shape[2]


@dataclass(frozen=True)
class FramePyramid:
    """Per-level features, saliency, depth and camera; level 0 is finest."""

    levels: Sequence[PyramidLevel]

    def __post_init__(self):
        levels = tuple(self.levels)
        if len(levels) != NUM_LEVELS:
            raise ShapeMismatch(f"a pyramid has exactly {NUM_LEVELS} levels")
        h0, w0 = levels[0].features.shape[:2]
        for i, lvl in enumerate(levels):
            if lvl.features.shape[:2] != (h0 >> i, w0 >> i):
                raise ShapeMismatch(f"level {i} has size {lvl.features.shape[:2]}")
        object.__setattr__(self, "levels", levels)

    def __getitem__(self, i) -> PyramidLevel:
        return self.levels[i]

    def __len__(self):
        return len(self.levels)

    @property
    def has_depth(self) -> bool:
        return all(lvl.depth is not None for lvl in self.levels)

    def with_saliency(self, saliency: Sequence[np.ndarray]) -> "FramePyramid":
        return FramePyramid([replace(lvl, saliency=s) for lvl, s in zip(self.levels, saliency)])

    def with_depth(self, depth: Optional[np.ndarray]) -> "FramePyramid":
        depths = depth_pyramid(depth) if depth is not None else [None] * NUM_LEVELS
        return FramePyramid([replace(lvl, depth=d) for lvl, d in zip(self.levels, depths)])


def image_pyramid(img, levels: int = NUM_LEVELS) -> List[np.ndarray]:
    out = [as_image(img)]
    for _ in range(levels - 1):
        out.append(downsample2x(out[-1]))
    return out


def depth_pyramid(depth, levels: int = NUM_LEVELS) -> List[np.ndarray]:
    out = [as_image(depth)[:, :, 0]]
    for _ in range(levels - 1):
        out.append(downsample2x(out[-1], depth=True)[:, :, 0])
    return out
