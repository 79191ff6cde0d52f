"""Procedural street-canyon scenes with exact ground truth.

Static geometry is a set of textured rectangles (ground, two facades, a
backdrop and optional extra panels). Dynamic distractors are axis-aligned
boxes moving linearly over frame indices. Rendering casts one ray per pixel,
so depth and labels are exact.

World axes follow the camera convention at the identity pose: x right,
y down, z forward.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import List, Optional, Tuple

import numpy as np

from .camera import PinholeCamera, pixel_rays
from .errors import DegenerateConfig, OverlapUnsatisfied
from .liegroup import SE3Pose, compose, inverse, relative, se3_exp

SKY, GROUND, BUILDING, DISTRACTOR = 0, 1, 2, 3
CLASS_NAMES = {SKY: "sky", GROUND: "ground", BUILDING: "building", DISTRACTOR: "distractor"}
STATIC_CLASSES = (GROUND, BUILDING)

NEAR_CLIP = 0.05
SKY_ALBEDO = 0.9
CAMERA_HEIGHT = 1.5
NOISE_LATTICE = 256
SUPERSAMPLE = 3


@dataclass(frozen=True)
class SceneConfig:
    seed: int = 0
    width: int = 640
    height: int = 384
    plane_count: int = 4
    street_half_width: Tuple[float, float] = (4.0, 7.0)
    wall_height: Tuple[float, float] = (8.0, 14.0)
    backdrop_distance: Tuple[float, float] = (30.0, 45.0)
    texture_octaves: int = 4
    texture_scale: float = 2.2  # lattice spacing of the coarsest octave (m)
    texture_persistence: float = 0.5  # amplitude ratio between successive octaves
    distractor_count: int = 0
    distractor_size: Tuple[float, float] = (1.2, 2.5)
    distractor_distance: Tuple[float, float] = (5.0, 12.0)
    distractor_speed: Tuple[float, float] = (0.3, 0.8)  # m per frame
    gain: Tuple[float, float] = (1.0, 1.0)
    bias: Tuple[float, float] = (0.0, 0.0)
    depth_noise: float = 0.0
    baseline: Tuple[float, float] = (0.5, 2.0)  # median 1.25 m
    query_translation: float = 1.0  # max offset of q from r0 (m)
    query_rotation: float = np.deg2rad(5.0)  # max offset of q from r0 (rad)
    overlap: float = 0.6
    frame_times: Tuple[int, int, int] = (0, 1, 2)  # r0, r1, q
    sequences: int = 1

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple) and f.name != "frame_times":
                if len(v) != 2 or v[0] > v[1]:
                    raise DegenerateConfig(f"{f.name} must be a (low, high) pair, got {v}")
        if self.width < 16 or self.height < 16:
            raise DegenerateConfig("image must be at least 16x16 for a 4-level pyramid")
        if self.plane_count < 1 or self.texture_octaves < 1 or self.texture_scale <= 0:
            raise DegenerateConfig("need at least one textured plane")
        if self.distractor_count < 0 or self.depth_noise < 0 or self.sequences < 1:
            raise DegenerateConfig("counts and noise levels must be non-negative")
        if self.baseline[0] < 0 or self.query_translation < 0 or self.query_rotation < 0:
            raise DegenerateConfig("offset ranges must be non-negative")
        if not 0 <= self.overlap <= 1:
            raise DegenerateConfig("overlap is a fraction")
        if self.street_half_width[0] <= 1.0:
            raise DegenerateConfig("street too narrow for the camera")

    def camera(self) -> PinholeCamera:
        return PinholeCamera.default(self.width, self.height)


class ValueNoise:
    """Multi-octave value noise on a periodic random lattice."""

    def __init__(self, rng: np.random.Generator, octaves: int, scale: float, persistence: float = 0.5):
        self.persistence = persistence
        self.tables = rng.random((octaves, NOISE_LATTICE, NOISE_LATTICE))
        self.offsets = rng.random((octaves, 2)) * NOISE_LATTICE
        self.scale = scale

    def __call__(self, s: np.ndarray, t: np.ndarray) -> np.ndarray:
        total = np.zeros_like(s)
        norm = 0.0
        amp = 1.0
        for k, table in enumerate(self.tables):
            freq = 2.0**k / self.scale
            x = s * freq + self.offsets[k, 0]
            y = t * freq + self.offsets[k, 1]
            x0 = np.floor(x)
            y0 = np.floor(y)
            fx = _fade(x - x0)
            fy = _fade(y - y0)
            i = x0.astype(np.int64) % NOISE_LATTICE
            j = y0.astype(np.int64) % NOISE_LATTICE
            i1 = (i + 1) % NOISE_LATTICE
            j1 = (j + 1) % NOISE_LATTICE
            top = table[j, i] + fx * (table[j, i1] - table[j, i])
            bot = table[j1, i] + fx * (table[j1, i1] - table[j1, i])
            total += amp * (top + fy * (bot - top))
            norm += amp
            amp *= self.persistence
        return total / norm


def _fade(t):
    return t * t * t * (t * (6.0 * t - 15.0) + 10.0)


@dataclass
class Plane:
    """Rectangle ``center + a*axis_u + b*axis_v`` with ``|a| <= extent[0]``, ``|b| <= extent[1]``."""

    center: np.ndarray
    axis_u: np.ndarray
    axis_v: np.ndarray
    extent: Tuple[float, float]
    texture: ValueNoise
    label: int = BUILDING
    albedo_range: Tuple[float, float] = (0.05, 0.75)

    @property
    def normal(self) -> np.ndarray:
        return np.cross(self.axis_u, self.axis_v)

    def albedo(self, a, b):
        n = self.texture(a, b)
        lo, hi = self.albedo_range
        # Value noise clusters around 0.5; stretch it to use the range.
        return lo + (hi - lo) * np.clip(0.5 + 1.8 * (n - 0.5), 0.0, 1.0)


@dataclass
class Box:
    """Axis-aligned box whose centre moves as ``center + time * velocity``."""

    center: np.ndarray
    half_size: np.ndarray
    velocity: np.ndarray
    stripe_period: float = 0.5
    phase: float = 0.0

    def center_at(self, time: float) -> np.ndarray:
        return self.center + time * self.velocity

    def albedo(self, local: np.ndarray) -> np.ndarray:
        s = local.sum(axis=-1)
        return 0.7 + 0.28 * np.sin(2.0 * np.pi * s / self.stripe_period + self.phase)


@dataclass
class Scene:
    planes: List[Plane]
    boxes: List[Box] = field(default_factory=list)
    sky_albedo: float = SKY_ALBEDO


def generate_scene(cfg: SceneConfig, seed: Optional[int] = None) -> Scene:
    """Deterministic canyon scene for ``seed`` (defaults to ``cfg.seed``)."""
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    half_w = rng.uniform(*cfg.street_half_width)
    wall_h = rng.uniform(*cfg.wall_height)
    far = rng.uniform(*cfg.backdrop_distance)
    z_near = -10.0
    length = far - z_near
    ex, ey, ez = np.eye(3)

    def noise(scale):
        return ValueNoise(rng, cfg.texture_octaves, scale, cfg.texture_persistence)

    top = CAMERA_HEIGHT - wall_h
    planes = [
        Plane(np.array([0.0, CAMERA_HEIGHT, (far + z_near) / 2]), ex, ez,
              (half_w, length / 2), noise(cfg.texture_scale), GROUND),
        Plane(np.array([-half_w, (top + CAMERA_HEIGHT) / 2, (far + z_near) / 2]), ez, ey,
              (length / 2, wall_h / 2), noise(cfg.texture_scale), BUILDING),
        Plane(np.array([half_w, (top + CAMERA_HEIGHT) / 2, (far + z_near) / 2]), ez, ey,
              (length / 2, wall_h / 2), noise(cfg.texture_scale), BUILDING),
        Plane(np.array([0.0, CAMERA_HEIGHT - far / 2, far]), ex, ey,
              (half_w + 1.0, far / 2), noise(cfg.texture_scale * far / 10.0), BUILDING),
    ][: cfg.plane_count]
    for _ in range(cfg.plane_count - len(planes)):
        # free-standing panel facing the camera
        w, h = rng.uniform(1.0, 3.0), rng.uniform(1.0, 3.0)
        z = rng.uniform(8.0, far - 2.0)
        x = rng.uniform(-half_w + w, half_w - w)
        planes.append(Plane(np.array([x, CAMERA_HEIGHT - h, z]), ex, ey, (w, h),
                            noise(cfg.texture_scale / 2), BUILDING))

    boxes = []
    for _ in range(cfg.distractor_count):
        size = rng.uniform(*cfg.distractor_size, size=3)
        z = rng.uniform(*cfg.distractor_distance)
        x = rng.uniform(-half_w + size[0] / 2, half_w - size[0] / 2)
        speed = rng.uniform(*cfg.distractor_speed)
        heading = rng.uniform(0, 2 * np.pi)
        velocity = speed * np.array([np.cos(heading), 0.0, np.sin(heading)])
        boxes.append(
            Box(np.array([x, CAMERA_HEIGHT - size[1] / 2, z]), size / 2, velocity,
                phase=rng.uniform(0, 2 * np.pi))
        )
    return Scene(planes, boxes)


@dataclass
class Frame:
    image: np.ndarray
    depth: Optional[np.ndarray]
    segmentation: np.ndarray
    camera: PinholeCamera
    pose: SE3Pose  # camera -> world
    time: int = 0
    gain: float = 1.0
    bias: float = 0.0

    @property
    def empty(self) -> bool:
        return not np.any(self.segmentation != SKY)


def _intersect_plane(plane: Plane, origin, dirs):
    n = plane.normal
    denom = dirs @ n
    with np.errstate(divide="ignore", invalid="ignore"):
        lam = ((plane.center - origin) @ n) / denom
    hit = origin + lam[:, None] * dirs
    rel = hit - plane.center
    a = rel @ plane.axis_u
    b = rel @ plane.axis_v
    ok = (np.abs(denom) > 1e-12) & (lam > NEAR_CLIP)
    ok &= (np.abs(a) <= plane.extent[0]) & (np.abs(b) <= plane.extent[1])
    return np.where(ok, lam, np.inf), a, b


def _intersect_box(box: Box, center, origin, dirs):
    lo = center - box.half_size
    hi = center + box.half_size
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t1 = (lo - origin) * inv
        t2 = (hi - origin) * inv
    t1 = np.nan_to_num(t1, nan=-np.inf)
    t2 = np.nan_to_num(t2, nan=np.inf)
    t_enter = np.max(np.minimum(t1, t2), axis=1)
    t_exit = np.min(np.maximum(t1, t2), axis=1)
    ok = (t_enter <= t_exit) & (t_enter > NEAR_CLIP)
    return np.where(ok, t_enter, np.inf)


def _cast(scene: Scene, rays_c: np.ndarray, pose: SE3Pose, time: int):
    """Nearest hit along camera rays ``(N, 3)`` with unit z: (depth, albedo, label)."""
    dirs = rays_c @ pose.rotation.T  # world directions; the ray parameter is camera depth
    origin = pose.translation
    n = len(rays_c)
    depth = np.full(n, np.inf)
    albedo = np.full(n, scene.sky_albedo)
    label = np.full(n, SKY, dtype=np.int32)
    for plane in scene.planes:
        lam, a, b = _intersect_plane(plane, origin, dirs)
        closer = lam < depth
        if np.any(closer):
            depth[closer] = lam[closer]
            albedo[closer] = plane.albedo(a[closer], b[closer])
            label[closer] = plane.label
    for box in scene.boxes:
        center = box.center_at(time)
        lam = _intersect_box(box, center, origin, dirs)
        closer = lam < depth
        if np.any(closer):
            depth[closer] = lam[closer]
            local = origin + lam[closer, None] * dirs[closer] - center
            albedo[closer] = box.albedo(local)
            label[closer] = DISTRACTOR
    depth[~np.isfinite(depth)] = 0.0
    return depth, albedo, label


def render_frame(
    scene: Scene,
    pose: SE3Pose,
    cam: PinholeCamera,
    time: int = 0,
    gain: float = 1.0,
    bias: float = 0.0,
    supersample: int = SUPERSAMPLE,
) -> Frame:
    """Ray-cast ``scene`` from camera pose ``pose`` (camera -> world).

    Depth and labels come from the ray through each pixel centre; the image
    averages ``supersample**2`` sub-pixel rays (box anti-aliasing).
    """
    rays = pixel_rays(cam).reshape(-1, 3)
    depth, albedo, label = _cast(scene, rays, pose, time)
    if supersample > 1:
        offsets = (np.arange(supersample) + 0.5) / supersample - 0.5
        albedo = np.zeros(len(rays))
        for oy in offsets:
            for ox in offsets:
                sub = rays + np.array([ox / cam.fx, oy / cam.fy, 0.0])
                albedo += _cast(scene, sub, pose, time)[1]
        albedo /= supersample * supersample
    image = np.clip(gain * albedo + bias, 0.0, 1.0)
    shape = (cam.height, cam.width)
    return Frame(image.reshape(shape), depth.reshape(shape), label.reshape(shape), cam, pose, time, gain, bias)


@dataclass
class FrameTriplet:
    r0: Frame
    r1: Frame
    q: Frame  # q.pose is ground truth kept for evaluation only
    that_r0_r1: SE3Pose
    id: str = "0"
    ref_seq: int = 0
    query_seq: int = 0

    def gt_q_r0(self) -> SE3Pose:
        return relative(self.q.pose, self.r0.pose)

    def gt_q_r1(self) -> SE3Pose:
        return relative(self.q.pose, self.r1.pose)

    def gt_r1_r0(self) -> SE3Pose:
        return relative(self.r1.pose, self.r0.pose)


def _random_rotation(rng, max_angle, yaw_bias=3.0):
    axis = rng.normal(size=3) * np.array([1.0, yaw_bias, 1.0])
    axis /= np.linalg.norm(axis)
    return axis * rng.uniform(0.0, max_angle)


def _forward_direction(rng, spread=0.35):
    d = np.array([rng.normal(0, spread), rng.normal(0, spread / 3), 1.0])
    return d / np.linalg.norm(d)


def sample_query_offset(rng, cfg: SceneConfig) -> SE3Pose:
    """Pose of q in the r0 frame (``T_r0,q``)."""
    direction = rng.normal(size=3) * np.array([1.0, 0.3, 1.5])
    direction /= np.linalg.norm(direction)
    t = direction * rng.uniform(0.0, cfg.query_translation)
    r = se3_exp(np.concatenate([np.zeros(3), _random_rotation(rng, cfg.query_rotation)]))
    return SE3Pose(r.rotation, t)


def overlap_fraction(ref: Frame, t_qr: SE3Pose, cam: PinholeCamera) -> float:
    """Share of valid reference pixels that land inside the other camera's image."""
    valid = ref.depth > 0
    if not np.any(valid):
        return 0.0
    rays = pixel_rays(ref.camera)[valid]
    p = t_qr.apply(rays * ref.depth[valid][:, None])
    z = p[:, 2]
    front = z > 1e-6
    zs = np.where(front, z, 1.0)
    u = cam.fx * p[:, 0] / zs + cam.cx
    v = cam.fy * p[:, 1] / zs + cam.cy
    inside = front & (u >= 0) & (u <= cam.width - 1) & (v >= 0) & (v <= cam.height - 1)
    return float(np.mean(inside))


def make_triplet(
    scene: Scene,
    cfg: SceneConfig,
    seed: int,
    id: str = "0",
    ref_seq: int = 0,
    query_seq: int = 0,
    photometric: Optional[dict] = None,
) -> FrameTriplet:
    """Sample and render ``(r0, r1, q)`` satisfying the overlap requirement.

    ``photometric`` optionally maps sequence index -> (gain, bias); otherwise
    each frame draws its own gain and bias from the config ranges.
    """
    rng = np.random.default_rng(seed)
    cam = cfg.camera()
    for _ in range(100):
        start = np.array([rng.uniform(-1.0, 1.0), 0.0, rng.uniform(-2.0, 2.0)])
        yaw = rng.normal(0.0, np.deg2rad(3.0))
        t_w_r0 = se3_exp(np.concatenate([np.zeros(3), [0.0, yaw, 0.0]]))
        t_w_r0 = SE3Pose(t_w_r0.rotation, start)
        step = _forward_direction(rng) * rng.uniform(*cfg.baseline)
        jitter = se3_exp(np.concatenate([np.zeros(3), _random_rotation(rng, np.deg2rad(2.0))]))
        t_r0_r1 = SE3Pose(jitter.rotation, step)
        t_w_r1 = compose(t_w_r0, t_r0_r1)
        t_w_q = compose(t_w_r0, sample_query_offset(rng, cfg))
        if all(
            overlap_fraction(_depth_only(scene, pose_r, cam), relative(t_w_q, pose_r), cam) >= cfg.overlap
            for pose_r in (t_w_r0, t_w_r1)
        ):
            break
    else:
        raise OverlapUnsatisfied("no query pose with enough overlap after 100 draws")

    def photo(seq):
        if photometric is not None and seq in photometric:
            return photometric[seq]
        return rng.uniform(*cfg.gain), rng.uniform(*cfg.bias)

    t0, t1, tq = cfg.frame_times
    r0 = render_frame(scene, t_w_r0, cam, t0, *photo(ref_seq))
    r1 = render_frame(scene, t_w_r1, cam, t1, *photo(ref_seq))
    q = render_frame(scene, t_w_q, cam, tq, *photo(query_seq))
    q.depth = None
    if cfg.depth_noise > 0:
        for f in (r0, r1):
            valid = f.depth > 0
            noisy = f.depth + rng.normal(0.0, cfg.depth_noise, f.depth.shape)
            f.depth = np.where(valid, np.maximum(noisy, NEAR_CLIP), 0.0)
    return FrameTriplet(r0, r1, q, relative(t_w_r0, t_w_r1), id, ref_seq, query_seq)


def _depth_only(scene: Scene, pose: SE3Pose, cam: PinholeCamera) -> Frame:
    # Static geometry is enough for the overlap test.
    return render_frame(Scene(scene.planes, []), pose, cam, supersample=1)


def sequence_photometrics(cfg: SceneConfig) -> dict:
    """One (gain, bias) condition per sequence, fixed by the config seed."""
    rng = np.random.default_rng([cfg.seed, 7919])
    return {s: (rng.uniform(*cfg.gain), rng.uniform(*cfg.bias)) for s in range(cfg.sequences)}


def make_dataset(cfg: SceneConfig, count: int, start: int = 0) -> List[FrameTriplet]:
    """``count`` triplets, each from its own scene; sequence pairs cycle through all combinations."""
    photometric = sequence_photometrics(cfg)
    out = []
    for i in range(start, start + count):
        seed = [cfg.seed, i]
        scene = generate_scene(cfg, seed=np.random.default_rng(seed).integers(2**31))
        pair = i % (cfg.sequences * cfg.sequences)
        ref_seq, query_seq = divmod(pair, cfg.sequences)
        trip_seed = int(np.random.default_rng([cfg.seed, i, 1]).integers(2**31))
        out.append(
            make_triplet(scene, cfg, trip_seed, f"{i:06d}", ref_seq, query_seq,
                         photometric if cfg.sequences > 1 else None)
        )
    return out
