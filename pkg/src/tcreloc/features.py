"""Feature and saliency providers.

``handcrafted_features`` needs no training. ``HeadParams``/``head_forward``
form a small trainable per-pixel head (a 1x1 convolution followed by a
sigmoid, one per pyramid level) on top of fixed base channels; it is trained
on frame triplets with the summed consistency/accuracy objective, using
central finite differences for the gradient and Adam for the update.
"""

from __future__ import annotations

import csv
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from .camera import NUM_LEVELS, FramePyramid, PinholeCamera, PyramidLevel, as_image, image_gradients, image_pyramid, scale_camera
from .errors import ImageTooSmall, NonFiniteLoss, RelocError, ShapeMismatch
from .losses import LossConfig, final_estimates, triplet_loss
from .registration import RegistrationConfig, register

log = logging.getLogger(__name__)

GRADIENT_GAIN = 1.0
UNIFORM_SALIENCY = 0.5
BASE_CHANNELS = 6
MAX_PARAMS = 2048
GRADIENT_MODES = ("fd", "adjoint")


def luminance(image) -> np.ndarray:
    img = as_image(image)
    if img.shape[2] == 1:
        return img[:, :, 0]
    if img.shape[2] == 3:
        return img @ np.array([0.299, 0.587, 0.114])
    raise ShapeMismatch("expected a 1- or 3-channel image")


def _squash(x):
    """Map [0, 1] into the open interval (0, 1)."""
    return 0.05 + 0.9 * x


def handcrafted_level(gray: np.ndarray) -> np.ndarray:
    """Channels ``[intensity, |gx|, |gy|]`` rescaled into (0, 1)."""
    gx, gy = image_gradients(gray)
    return np.concatenate(
        [
            _squash(np.clip(gray[:, :, None], 0.0, 1.0)),
            _squash(np.tanh(GRADIENT_GAIN * np.abs(gx))),
            _squash(np.tanh(GRADIENT_GAIN * np.abs(gy))),
        ],
        axis=2,
    )


def _check_size(gray, cam):
    h, w = gray.shape[:2]
    if (h >> (NUM_LEVELS - 1)) < 3 or (w >> (NUM_LEVELS - 1)) < 3:
        raise ImageTooSmall(f"{w}x{h} is too small for a {NUM_LEVELS}-level pyramid")
    if cam is not None and (cam.width, cam.height) != (w, h):
        raise ShapeMismatch("camera does not match the image size")


def handcrafted_features(image, cam: Optional[PinholeCamera] = None, depth=None) -> FramePyramid:
    """Non-learned pyramid with uniform saliency."""
    gray = luminance(image)
    _check_size(gray, cam)
    cam = cam or PinholeCamera.default(gray.shape[1], gray.shape[0])
    levels = []
    for i, g in enumerate(image_pyramid(gray)):
        feats = handcrafted_level(g[:, :, 0])
        levels.append(PyramidLevel(feats, np.full(feats.shape[:2], UNIFORM_SALIENCY), scale_camera(cam, i)))
    return FramePyramid(levels).with_depth(depth)


def box_blur3(img: np.ndarray) -> np.ndarray:
    """3x3 box filter with edge replication."""
    p = np.pad(img, ((1, 1), (1, 1), (0, 0)), mode="edge")
    h, w = img.shape[:2]
    out = np.zeros_like(img)
    for dy in range(3):
        for dx in range(3):
            out += p[dy : dy + h, dx : dx + w]
    return out / 9.0


@dataclass
class BasePyramid:
    """Fixed input channels of the head: handcrafted channels plus a blurred copy."""

    channels: List[np.ndarray]
    cameras: List[PinholeCamera]
    depth: Optional[np.ndarray] = None


def base_pyramid(image, cam: Optional[PinholeCamera] = None, depth=None) -> BasePyramid:
    hand = handcrafted_features(image, cam)
    chans = []
    for lvl in hand.levels:
        chans.append(np.concatenate([lvl.features, box_blur3(lvl.features)], axis=2))
    return BasePyramid(chans, [lvl.camera for lvl in hand.levels], depth)


@dataclass
class HeadParams:
    feat_w: np.ndarray  # (levels, C_in, C_out)
    feat_b: np.ndarray  # (levels, C_out)
    sal_w: np.ndarray  # (levels, C_in)
    sal_b: np.ndarray  # (levels,)

    def __post_init__(self):
        self.feat_w = np.asarray(self.feat_w, dtype=float)
        self.feat_b = np.asarray(self.feat_b, dtype=float)
        self.sal_w = np.asarray(self.sal_w, dtype=float)
        self.sal_b = np.asarray(self.sal_b, dtype=float)
        levels, c_in, c_out = self.feat_w.shape
        if (
            self.feat_b.shape != (levels, c_out)
            or self.sal_w.shape != (levels, c_in)
            or self.sal_b.shape != (levels,)
        ):
            raise ShapeMismatch("inconsistent head parameter shapes")
        if levels != NUM_LEVELS:
            raise ShapeMismatch(f"head needs {NUM_LEVELS} levels")
        if self.size > MAX_PARAMS:
            raise ShapeMismatch(f"{self.size} parameters exceed the {MAX_PARAMS} limit")
        if not np.all(np.isfinite(self.to_vector())):
            raise ValueError("head parameters must be finite")

    @property
    def c_in(self) -> int:
        return self.feat_w.shape[1]

    @property
    def c_out(self) -> int:
        return self.feat_w.shape[2]

    @property
    def size(self) -> int:
        return self.feat_w.size + self.feat_b.size + self.sal_w.size + self.sal_b.size

    def shapes(self) -> dict:
        return {k: list(getattr(self, k).shape) for k in ("feat_w", "feat_b", "sal_w", "sal_b")}

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.feat_w.ravel(), self.feat_b.ravel(), self.sal_w.ravel(), self.sal_b.ravel()])

    def with_vector(self, theta) -> "HeadParams":
        return HeadParams.from_vector(theta, self.c_in, self.c_out)

    @classmethod
    def from_vector(cls, theta, c_in: int = BASE_CHANNELS, c_out: int = 16) -> "HeadParams":
        theta = np.asarray(theta, dtype=float)
        sizes = [NUM_LEVELS * c_in * c_out, NUM_LEVELS * c_out, NUM_LEVELS * c_in, NUM_LEVELS]
        if theta.size != sum(sizes):
            raise ShapeMismatch(f"expected {sum(sizes)} parameters, got {theta.size}")
        parts = np.split(theta, np.cumsum(sizes)[:-1])
        return cls(
            parts[0].reshape(NUM_LEVELS, c_in, c_out),
            parts[1].reshape(NUM_LEVELS, c_out),
            parts[2].reshape(NUM_LEVELS, c_in),
            parts[3].copy(),
        )

    @classmethod
    def zeros(cls, c_in: int = BASE_CHANNELS, c_out: int = 16) -> "HeadParams":
        return cls(
            np.zeros((NUM_LEVELS, c_in, c_out)),
            np.zeros((NUM_LEVELS, c_out)),
            np.zeros((NUM_LEVELS, c_in)),
            np.zeros(NUM_LEVELS),
        )

    @classmethod
    def init(cls, c_out: int = 16, seed: int = 0, scale: float = 0.1) -> "HeadParams":
        """Start close to the handcrafted features.

        Output channel ``j`` reproduces (through the sigmoid) base channel
        ``j mod 3`` plus a small random mix of the others; saliency starts
        uniform at 0.5.
        """
        rng = np.random.default_rng(seed)
        c_in = BASE_CHANNELS
        w = rng.normal(0.0, scale, (NUM_LEVELS, c_in, c_out))
        b = np.zeros((NUM_LEVELS, c_out))
        for j in range(c_out):
            src = j % 3 + (3 if (j // 3) % 2 else 0)
            w[:, src, j] += 4.0
            b[:, j] -= 2.0
        return cls(w, b, np.zeros((NUM_LEVELS, c_in)), np.zeros(NUM_LEVELS))


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def head_forward(params: HeadParams, base: BasePyramid) -> FramePyramid:
    levels = []
    for i, (x, cam) in enumerate(zip(base.channels, base.cameras)):
        if x.shape[2] != params.c_in:
            raise ShapeMismatch(f"base has {x.shape[2]} channels, head expects {params.c_in}")
        feats = sigmoid(x @ params.feat_w[i] + params.feat_b[i])
        sal = sigmoid(x @ params.sal_w[i] + params.sal_b[i])
        levels.append(PyramidLevel(feats, sal, cam))
    return FramePyramid(levels).with_depth(base.depth)


# -- training -----------------------------------------------------------------


@dataclass
class TrainConfig:
    lr_init: float = 1e-4  # first epoch
    lr: float = 1e-5  # afterwards
    lam_init: float = 10.0
    lam: float = 1.0
    init_epochs: int = 1
    batch_size: int = 16
    fd_step: float = 1e-3
    epochs: int = 5
    seed: int = 0
    c_out: int = 16
    init_scale: float = 0.1
    loss_levels: str = "all"
    gradient: str = "fd"  # or "adjoint": reverse mode through the unrolled registration
    registration: RegistrationConfig = field(default_factory=RegistrationConfig)

    def __post_init__(self):
        if min(self.lr_init, self.lr, self.fd_step) <= 0 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("rates, step sizes and batch size must be positive")
        if self.gradient not in GRADIENT_MODES:
            raise ValueError(f"gradient must be one of {GRADIENT_MODES}")

    def lam_for(self, epoch: int) -> float:
        return self.lam_init if epoch < self.init_epochs else self.lam

    def lr_for(self, epoch: int) -> float:
        return self.lr_init if epoch < self.init_epochs else self.lr

    def to_dict(self) -> dict:
        d = asdict(self)
        d["registration"] = asdict(self.registration)
        d["registration"]["iterations_per_level"] = list(self.registration.iterations_per_level)
        return d


class TrainingSample:
    """A triplet with its fixed base pyramids precomputed."""

    def __init__(self, triplet):
        self.triplet = triplet
        self.id = triplet.id
        self.r0 = base_pyramid(triplet.r0.image, triplet.r0.camera, triplet.r0.depth)
        self.r1 = base_pyramid(triplet.r1.image, triplet.r1.camera, triplet.r1.depth)
        self.q = base_pyramid(triplet.q.image, triplet.q.camera)


def register_triplet(pyr_r0: FramePyramid, pyr_r1: FramePyramid, pyr_q: FramePyramid, reg_cfg: RegistrationConfig):
    """The three registrations a triplet needs: T_q,r0, T_q,r1, T_r1,r0."""
    return (
        register(pyr_r0, pyr_q, reg_cfg),
        register(pyr_r1, pyr_q, reg_cfg),
        register(pyr_r0, pyr_r1.with_depth(None), reg_cfg),
    )


def head_triplet_loss(params: HeadParams, sample: TrainingSample, cfg: TrainConfig, lam: float, stars=None) -> float:
    return _head_triplet(params, sample, cfg, lam, stars)[0]


def _head_triplet(params, sample, cfg, lam, stars=None):
    """Loss and final estimates (T*_q,r0, T*_q,r1) of one triplet."""
    r0 = head_forward(params, sample.r0)
    r1 = head_forward(params, sample.r1)
    q = head_forward(params, sample.q)
    q_r0, q_r1, r1_r0 = register_triplet(r0, r1, q, cfg.registration)
    report = triplet_loss(q_r0, q_r1, r1_r0, sample.triplet.that_r0_r1, LossConfig(lam, cfg.loss_levels), stars)
    if not np.isfinite(report.total):
        raise NonFiniteLoss(f"non-finite loss on triplet {sample.id}")
    return report.total, final_estimates(q_r0, q_r1)


LossFn = Callable[[np.ndarray, object], float]


@dataclass
class GradientResult:
    gradient: np.ndarray
    loss: float  # mean loss at theta over the samples kept
    skipped: List[str] = field(default_factory=list)


def loss_gradient_fd(
    params: HeadParams,
    batch: Sequence,
    cfg: TrainConfig,
    lam: Optional[float] = None,
    loss_fn: Optional[LossFn] = None,
) -> GradientResult:
    """Central-difference gradient of the mean batch loss.

    Each coordinate uses step ``fd_step * max(1, |theta_i|)``. The final
    estimates are held at their values at ``theta`` (they are constants of the
    loss). A sample whose loss fails or is non-finite at any evaluation is
    reported and dropped from the batch. ``loss_fn(theta, sample)`` replaces
    the triplet loss (test seam).
    """
    theta = params.to_vector()
    lam = cfg.lam if lam is None else lam
    if loss_fn is None:
        stars = {}

        def loss_fn(th, sample):
            key = id(sample)
            if key not in stars:
                # first call per sample is at theta itself
                f, stars[key] = _head_triplet(params.with_vector(th), sample, cfg, lam)
                return f
            return head_triplet_loss(params.with_vector(th), sample, cfg, lam, stars[key])

    steps = cfg.fd_step * np.maximum(1.0, np.abs(theta))
    grads, losses, skipped = [], [], []
    for sample in batch:
        try:
            g = np.empty_like(theta)
            f0 = float(loss_fn(theta, sample))
            if not np.isfinite(f0):
                raise NonFiniteLoss("non-finite loss")
            for i in range(theta.size):
                tp = theta.copy()
                tm = theta.copy()
                tp[i] += steps[i]
                tm[i] -= steps[i]
                fp, fm = float(loss_fn(tp, sample)), float(loss_fn(tm, sample))
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    raise NonFiniteLoss(f"non-finite loss at coordinate {i}")
                g[i] = (fp - fm) / (2.0 * steps[i])
        except RelocError as exc:
            sid = getattr(sample, "id", str(sample))
            log.warning("skipping sample %s: %s", sid, exc)
            skipped.append(sid)
            continue
        grads.append(g)
        losses.append(f0)
    if not grads:
        return GradientResult(np.zeros_like(theta), float("nan"), skipped)
    # fixed reduction order: sample order of the batch
    return GradientResult(np.sum(grads, axis=0) / len(grads), float(np.sum(losses) / len(losses)), skipped)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)


def adam_step(theta, grad, state: AdamState, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
    """One Adam update; returns ``(theta, state)`` without mutating the inputs."""
    theta = np.asarray(theta, dtype=float)
    grad = np.asarray(grad, dtype=float)
    if theta.shape != grad.shape or state.m.shape != theta.shape:
        raise ShapeMismatch("parameter, gradient and moment shapes differ")
    t = state.t + 1
    m = beta1 * state.m + (1.0 - beta1) * grad
    v = beta2 * state.v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    return theta - lr * m_hat / (np.sqrt(v_hat) + eps), AdamState(m, v, t)


@dataclass
class TrainResult:
    params: HeadParams
    epoch_loss: List[float]
    batch_log: List[dict] = field(default_factory=list)


class TrainingAborted(RelocError):
    pass


def train_head(
    dataset: Sequence,
    cfg: TrainConfig,
    out_dir: Optional[str] = None,
    init: Optional[HeadParams] = None,
    loss_fn: Optional[LossFn] = None,
) -> TrainResult:
    """Train the head with Adam.

    Gradients come from ``loss_gradient_fd`` or, with ``cfg.gradient ==
    "adjoint"`` and no ``loss_fn``, from reverse-mode differentiation.

    Batches of ``cfg.batch_size`` triplets (gradients averaged, i.e. gradient
    accumulation); lambda and learning rate use their ``*_init`` values for the
    first ``cfg.init_epochs`` epochs. The epoch loss is the mean triplet loss
    at the parameters each batch started from.
    """
    if not len(dataset):
        raise ValueError("dataset is empty")
    params = init if init is not None else HeadParams.init(cfg.c_out, cfg.seed, cfg.init_scale)
    samples = [s if isinstance(s, TrainingSample) or loss_fn is not None else TrainingSample(s) for s in dataset]
    rng = np.random.default_rng(cfg.seed)
    theta = params.to_vector()
    state = AdamState.zeros(theta.size)
    if cfg.gradient == "adjoint" and loss_fn is None:
        from .unrolled import loss_gradient_adjoint

        def gradient(p, batch, lam):
            return loss_gradient_adjoint(p, batch, cfg, lam)
    else:
        def gradient(p, batch, lam):
            return loss_gradient_fd(p, batch, cfg, lam, loss_fn)

    epoch_loss, batch_log = [], []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(samples))
        lam, lr = cfg.lam_for(epoch), cfg.lr_for(epoch)
        total, count, failed = 0.0, 0, 0
        for start in range(0, len(order), cfg.batch_size):
            batch = [samples[i] for i in order[start : start + cfg.batch_size]]
            res = gradient(params.with_vector(theta), batch, lam)
            kept = len(batch) - len(res.skipped)
            failed += len(res.skipped)
            if kept:
                total += res.loss * kept
                count += kept
                theta, state = adam_step(theta, res.gradient, state, lr)
            batch_log.append({"epoch": epoch + 1, "batch": start // cfg.batch_size + 1, "lambda": lam,
                              "lr": lr, "loss": res.loss, "kept": kept, "skipped": len(res.skipped)})
            log.info("epoch %d batch %d: loss %.6f (%d kept)", epoch + 1, start // cfg.batch_size + 1, res.loss, kept)
        if failed > 0.5 * len(samples):
            raise TrainingAborted(f"{failed} of {len(samples)} samples failed in epoch {epoch + 1}")
        epoch_loss.append(total / count)
        if out_dir is not None:
            from .io import write_checkpoint

            os.makedirs(out_dir, exist_ok=True)
            write_checkpoint(os.path.join(out_dir, f"head_epoch{epoch + 1:03d}.ckpt"),
                             params.with_vector(theta), cfg.to_dict(), cfg.seed)
    params = params.with_vector(theta)
    if out_dir is not None:
        from .io import write_checkpoint

        os.makedirs(out_dir, exist_ok=True)
        write_checkpoint(os.path.join(out_dir, "head.ckpt"), params, cfg.to_dict(), cfg.seed)
        with open(os.path.join(out_dir, "loss_curve.csv"), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "mean_loss"])
            for i, v in enumerate(epoch_loss):
                writer.writerow([i + 1, repr(v)])
        with open(os.path.join(out_dir, "batch_log.csv"), "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(batch_log[0]) if batch_log else ["epoch"])
            writer.writeheader()
            writer.writerows(batch_log)
    return TrainResult(params, epoch_loss, batch_log)
