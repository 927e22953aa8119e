"""Temporal IoU and Gaussian Soft-NMS."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .types import Proposal


@dataclass(frozen=True)
class SuppressionConfig:
    sigma: float = 0.5
    score_floor: float = 0.001
    max_kept: int = 100

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be > 0")
        if not 0 < self.score_floor < 1:
            raise ValueError("score_floor must lie in (0, 1)")
        if self.max_kept < 1:
            raise ValueError("max_kept must be >= 1")


def iou_1d(a, b) -> float:
    inter = min(a[1], b[1]) - max(a[0], b[0])
    if inter <= 0:
        return 0.0
    union = (a[1] - a[0]) + (b[1] - b[0]) - inter
    return inter / union


def iou_matrix(a, b):
    """Pairwise IoU between interval arrays ``a`` (N, 2) and ``b`` (M, 2)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 2)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 2)
    inter = (np.minimum(a[:, None, 1], b[None, :, 1])
             - np.maximum(a[:, None, 0], b[None, :, 0]))
    inter = np.maximum(inter, 0.0)
    union = (a[:, None, 1] - a[:, None, 0]) + (b[None, :, 1] - b[None, :, 0]) - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(inter > 0, inter / np.where(union > 0, union, 1.0), 0.0)
    return out


def soft_nms(proposals, cfg: SuppressionConfig = SuppressionConfig()) -> list:
    """Gaussian Soft-NMS.

    Repeatedly keep the best remaining proposal and decay every other
    remaining score by ``exp(-iou^2 / sigma)``; scores under the floor are
    dropped. Ties prefer the earlier start, then the shorter segment.
    """
    remaining = [p for p in proposals if p.score >= cfg.score_floor]
    if not remaining:
        return []
    starts = np.array([p.start_seconds for p in remaining])
    ends = np.array([p.end_seconds for p in remaining])
    scores = np.array([p.score for p in remaining], dtype=np.float64)
    alive = np.ones(len(remaining), dtype=bool)
    kept = []
    while alive.any() and len(kept) < cfg.max_kept:
        idx = np.flatnonzero(alive)
        # lexsort: last key is primary
        best = idx[np.lexsort((ends[idx] - starts[idx], starts[idx], -scores[idx]))[0]]
        kept.append(Proposal(float(scores[best]), float(starts[best]), float(ends[best])))
        alive[best] = False
        others = np.flatnonzero(alive)
        if len(others) == 0:
            break
        ious = iou_matrix([[starts[best], ends[best]]],
                          np.stack([starts[others], ends[others]], axis=1))[0]
        scores[others] *= np.exp(-(ious * ious) / cfg.sigma)
        alive[others[scores[others] < cfg.score_floor]] = False
    return kept
