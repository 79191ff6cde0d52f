"""Transform-consistency and transform-accuracy losses over pose traces.

All poses follow ``T_ab``: frame b -> frame a. With ``that_r0_r1`` the known
reference-to-reference transform, perfectly consistent estimates satisfy
``that_r0_r1 ∘ T_q,r1^-1 ∘ T_q,r0 = I`` and ``that_r0_r1 ∘ T_r1,r0 = I``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import EmptyTrace
from .liegroup import SE3Pose, compose, inverse, pose_error_l1

LEVEL_MODES = ("all", "finest")


@dataclass(frozen=True)
class LossConfig:
    lam: float = 1.0
    levels: str = "all"  # which registration iterations enter the sum

    def __post_init__(self):
        if not np.isfinite(self.lam) or self.lam < 0:
            raise ValueError("lambda must be finite and non-negative")
        if self.levels not in LEVEL_MODES:
            raise ValueError(f"levels must be one of {LEVEL_MODES}")


@dataclass
class LossReport:
    consistency_q_r0: float
    consistency_q_r1: float
    accuracy: float  # already multiplied by lambda
    total: float
    per_iteration: List[Tuple[float, float, float]] = field(default_factory=list)

    def as_row(self) -> dict:
        return {
            "consistency_q_r0": self.consistency_q_r0,
            "consistency_q_r1": self.consistency_q_r1,
            "accuracy": self.accuracy,
            "total": self.total,
        }


def consistency_interior(t_star_q_r0: SE3Pose, t_k_q_r1: SE3Pose, that_r0_r1: SE3Pose) -> SE3Pose:
    return compose(compose(that_r0_r1, inverse(t_k_q_r1)), t_star_q_r0)


def consistency_loss(t_star_q_r0: SE3Pose, t_k_q_r1: SE3Pose, that_r0_r1: SE3Pose) -> float:
    return pose_error_l1(consistency_interior(t_star_q_r0, t_k_q_r1, that_r0_r1))


def accuracy_loss(t_k_r1_r0: SE3Pose, that_r0_r1: SE3Pose) -> float:
    return pose_error_l1(compose(that_r0_r1, t_k_r1_r0))


def relative_pose_error(t_star_q_r0: SE3Pose, t_star_q_r1: SE3Pose, that_r0_r1: SE3Pose) -> float:
    """Translation magnitude (m) of the discrepancy between the two registrations."""
    interior = consistency_interior(t_star_q_r0, t_star_q_r1, that_r0_r1)
    return float(np.linalg.norm(interior.translation))


def select_iterations(trace, mode: str = "all"):
    """Poses of a trace to sum over. ``trace`` is a RegistrationResult, a
    sequence of TraceEntry, or a plain sequence of poses."""
    entries = getattr(trace, "trace", trace)
    entries = list(entries)
    if not entries:
        raise EmptyTrace("pose trace is empty")
    if isinstance(entries[0], SE3Pose):
        return entries
    if mode == "finest":
        entries = [e for e in entries if e.level == 0]
    return [e.pose for e in entries]


def final_estimates(trace_q_r0, trace_q_r1) -> Tuple[SE3Pose, SE3Pose]:
    return select_iterations(trace_q_r0, "all")[-1], select_iterations(trace_q_r1, "all")[-1]


def triplet_loss(
    trace_q_r0,
    trace_q_r1,
    trace_r1_r0,
    that_r0_r1: SE3Pose,
    cfg: LossConfig = LossConfig(),
    stars: Optional[Tuple[SE3Pose, SE3Pose]] = None,
) -> LossReport:
    """Sum over registration iterations of both consistency terms plus
    ``lambda`` times the accuracy term.

    The final estimates (T*_q,r0, T*_q,r1) are constants of the loss. They
    default to the last trace entries; a gradient estimator passes ``stars``
    to hold them at the values of the unperturbed parameters.
    """
    q_r0 = select_iterations(trace_q_r0, cfg.levels)
    q_r1 = select_iterations(trace_q_r1, cfg.levels)
    r1_r0 = select_iterations(trace_r1_r0, cfg.levels)
    star_q_r0, star_q_r1 = stars if stars is not None else final_estimates(trace_q_r0, trace_q_r1)

    c0 = [consistency_loss(star_q_r0, t, that_r0_r1) for t in q_r1]
    c1 = [consistency_loss(t, star_q_r1, that_r0_r1) for t in q_r0]
    acc = [cfg.lam * accuracy_loss(t, that_r0_r1) for t in r1_r0]
    n = max(len(c0), len(c1), len(acc))
    pad = lambda xs: xs + [0.0] * (n - len(xs))  # noqa: E731
    per_iteration = list(zip(pad(c0), pad(c1), pad(acc)))
    total = float(sum(c0) + sum(c1) + sum(acc))
    return LossReport(float(sum(c0)), float(sum(c1)), float(sum(acc)), total, per_iteration)
