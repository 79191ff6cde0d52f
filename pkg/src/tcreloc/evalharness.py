"""Evaluation artifacts: cumulative accuracy, sequence-pair confusion
matrices and per-class relative saliency weights.

Failed registrations stay in every record list. They count against
cumulative accuracy (they are never "within" a threshold) and are left out
of medians.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .camera import downsample_nearest
from .errors import EmptyInput, RelocError, ValidationError
from .features import base_pyramid, handcrafted_features, head_forward
from .io import write_csv
from .liegroup import compose, inverse, so3_log
from .losses import relative_pose_error
from .registration import RegistrationConfig, register

log = logging.getLogger(__name__)

DEFAULT_THRESHOLDS = tuple(np.round(np.arange(0.05, 1.0001, 0.05), 10))


@dataclass
class EvalRecord:
    triplet_id: str
    ref_seq: int
    query_seq: int
    error: Optional[float] = None  # relative pose error E (m)
    translation_error: Optional[np.ndarray] = None  # |x|, |y|, |z| of T_q,r0 vs ground truth (m)
    rotation_error: Optional[np.ndarray] = None  # |axis-angle| components (rad)
    failed: bool = False
    reason: str = ""

    def __post_init__(self):
        if self.failed and (self.error is not None or self.translation_error is not None):
            raise ValidationError("failed records carry no metrics")
        if self.error is not None and not self.error >= 0:
            raise ValidationError("relative pose error must be non-negative")

    def as_row(self) -> list:
        t = self.translation_error if self.translation_error is not None else [None] * 3
        r = self.rotation_error if self.rotation_error is not None else [None] * 3
        return [self.triplet_id, self.ref_seq, self.query_seq, self.error, *t, *r, int(self.failed), self.reason]


RECORD_HEADER = ["id", "ref_seq", "query_seq", "E", "tx", "ty", "tz", "rx", "ry", "rz", "failed", "reason"]

# Feature providers map a FrameTriplet to pyramids (r0, r1, q).
Provider = Callable[[object], tuple]


def handcrafted_provider(triplet):
    return (
        handcrafted_features(triplet.r0.image, triplet.r0.camera, triplet.r0.depth),
        handcrafted_features(triplet.r1.image, triplet.r1.camera, triplet.r1.depth),
        handcrafted_features(triplet.q.image, triplet.q.camera),
    )


class HeadProvider:
    """Pyramids from a trained head; a class so worker processes can pickle it."""

    def __init__(self, params):
        self.params = params

    def __call__(self, triplet):
        return tuple(
            head_forward(self.params, base_pyramid(f.image, f.camera, f.depth))
            for f in (triplet.r0, triplet.r1, triplet.q)
        )


def evaluate_triplet(triplet, provider: Provider = handcrafted_provider, cfg: Optional[RegistrationConfig] = None,
                     has_ground_truth: bool = True) -> EvalRecord:
    """Register q against both references; E from the pair, direction errors from T_q,r0."""
    rec = EvalRecord(triplet.id, triplet.ref_seq, triplet.query_seq)
    try:
        r0, r1, q = provider(triplet)
        t_q_r0 = register(r0, q, cfg).final_pose
        t_q_r1 = register(r1, q, cfg).final_pose
    except RelocError as exc:
        rec.failed = True
        rec.reason = type(exc).__name__
        return rec
    rec.error = relative_pose_error(t_q_r0, t_q_r1, triplet.that_r0_r1)
    if has_ground_truth:
        diff = compose(inverse(triplet.gt_q_r0()), t_q_r0)
        rec.translation_error = np.abs(diff.translation)
        rec.rotation_error = np.abs(so3_log(diff.rotation))
    return rec


def evaluate_all(triplets: Sequence, provider: Provider = handcrafted_provider, cfg=None, workers: int = 1,
                 has_ground_truth: bool = True) -> List[EvalRecord]:
    """Records sorted by triplet id whatever the worker count."""
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(workers) as pool:
            records = list(pool.map(_evaluate_star, [(t, provider, cfg, has_ground_truth) for t in triplets]))
    else:
        records = [evaluate_triplet(t, provider, cfg, has_ground_truth) for t in triplets]
    return sorted(records, key=lambda r: r.triplet_id)


def _evaluate_star(args):
    return evaluate_triplet(*args)


def _error_or_inf(e) -> float:
    if e is None:
        return np.inf
    e = float(e)
    return e if np.isfinite(e) else np.inf


def cumulative_accuracy(errors: Iterable, thresholds: Sequence[float]) -> List[float]:
    """Fraction of samples with error <= t, per threshold. ``None`` or
    non-finite errors mark failures; they stay in the denominator."""
    errs = np.array([_error_or_inf(e) for e in errors])
    if errs.size == 0:
        raise EmptyInput("no errors to accumulate")
    th = np.asarray(thresholds, dtype=float)
    if th.size == 0 or np.any(np.diff(th) < 0):
        raise ValidationError("thresholds must be non-empty and ascending")
    return [float(np.count_nonzero(errs <= t)) / errs.size for t in th]


def median(values: Sequence[float]) -> float:
    """Median of a non-empty sequence; the mean of the middle two for even counts."""
    s = sorted(float(v) for v in values)
    if not s:
        raise EmptyInput("median of an empty set")
    mid = len(s) // 2
    return s[mid] if len(s) % 2 else (s[mid - 1] + s[mid]) / 2.0


@dataclass
class ConfusionCell:
    ref_seq: int
    query_seq: int
    median_error: Optional[float]  # None marks a missing cell
    count: int  # successful records
    failures: int


def confusion_matrix(records: Sequence[EvalRecord], sequences: Optional[Sequence[int]] = None) -> List[ConfusionCell]:
    """Median E per (reference sequence, query sequence), row-major over
    ``sequences`` (default: every sequence id seen)."""
    if sequences is None:
        sequences = sorted({r.ref_seq for r in records} | {r.query_seq for r in records})
    groups: Dict[Tuple[int, int], List[EvalRecord]] = {}
    for r in records:
        groups.setdefault((r.ref_seq, r.query_seq), []).append(r)
    cells = []
    for i in sequences:
        for j in sequences:
            group = groups.get((i, j), [])
            ok = [r.error for r in group if not r.failed]
            cells.append(ConfusionCell(i, j, median(ok) if ok else None, len(ok), len(group) - len(ok)))
    return cells


def relative_saliency_weights(saliency: Sequence[np.ndarray], segmentation: np.ndarray,
                              classes: Optional[Iterable[int]] = None) -> Dict[Tuple[int, int], float]:
    """``{(class, level): (share of saliency mass) / (share of pixels)}``.

    ``saliency[l]`` is the level-l map; the full-resolution ``segmentation``
    is reduced to each level by nearest-neighbour subsampling. Classes with no
    pixels at a level are absent from the result.
    """
    seg = np.asarray(segmentation)
    out = {}
    for level, sal in enumerate(saliency):
        sal = np.asarray(sal, dtype=float)
        lab = downsample_nearest(seg, level)
        if lab.shape != sal.shape:
            raise ValidationError(f"segmentation {lab.shape} does not match saliency {sal.shape} at level {level}")
        total = sal.sum()
        n = lab.size
        present = np.unique(lab) if classes is None else classes
        for c in present:
            mask = lab == c
            count = int(np.count_nonzero(mask))
            if count == 0 or total <= 0:
                continue
            out[(int(c), level)] = float((sal[mask].sum() / total) / (count / n))
    return out


@dataclass
class SaliencyStat:
    class_id: int
    level: int
    mean: float
    std: float
    images: int


def saliency_report(per_image: Sequence[Dict[Tuple[int, int], float]]) -> List[SaliencyStat]:
    """Mean and (population) standard deviation across images, per class and level."""
    if not per_image:
        raise EmptyInput("no images for the saliency report")
    keys = sorted({k for d in per_image for k in d})
    stats = []
    for c, level in keys:
        vals = np.array([d[(c, level)] for d in per_image if (c, level) in d])
        stats.append(SaliencyStat(c, level, float(vals.mean()), float(vals.std()), len(vals)))
    return stats


def write_records_csv(path: str, records: Sequence[EvalRecord]) -> None:
    write_csv(path, RECORD_HEADER, [r.as_row() for r in records])


def write_curve_csv(path: str, thresholds: Sequence[float], fractions: Sequence[float]) -> None:
    write_csv(path, ["threshold", "fraction"], zip(map(float, thresholds), fractions))


def write_matrix_csv(path: str, cells: Sequence[ConfusionCell]) -> None:
    write_csv(path, ["ref_seq", "query_seq", "median_E", "count"],
              [(c.ref_seq, c.query_seq, "missing" if c.median_error is None else c.median_error, c.count)
               for c in cells])


def write_saliency_csv(path: str, stats: Sequence[SaliencyStat], names: Optional[Dict[int, str]] = None) -> None:
    names = names or {}
    write_csv(path, ["class", "level", "mean", "std"],
              [(names.get(s.class_id, s.class_id), s.level, s.mean, s.std) for s in stats])
