"""Anchor-free classification / boundary-regression heads and proposal decoding."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .pyramid import conv1d_same
from .types import InstantMask, Proposal, PyramidLevel, SegmentSet


@dataclass(frozen=True)
class LevelPredictions:
    level: int
    logits: np.ndarray
    offsets: np.ndarray  # (T_l, 2): distance to start, distance to end, level units

    @property
    def start_offsets(self):
        return self.offsets[:, 0]

    @property
    def end_offsets(self):
        return self.offsets[:, 1]


@dataclass(frozen=True)
class LevelTargets:
    labels: np.ndarray     # (T_l,) int
    offsets: np.ndarray    # (T_l, 2), NaN on negatives
    intervals: np.ndarray  # (T_l, 2) matched segment in level units, NaN on negatives
    matched: np.ndarray    # (T_l,) segment index, -1 on negatives
    unmatched_positives: int  # positives resolved by the nearest-segment fallback


def _branch(x, params, prefix):
    h = conv1d_same(x, params[prefix + ".conv1.w"], params[prefix + ".conv1.b"]).relu()
    h = conv1d_same(h, params[prefix + ".conv2.w"], params[prefix + ".conv2.b"]).relu()
    return h @ params[prefix + ".out.w"] + params[prefix + ".out.b"]


def heads_forward(features, params):
    """Return ``(logits (T,), offsets (T, 2))`` on the autodiff graph.

    The same weights serve every pyramid level.
    """
    x = ad.as_tensor(features)
    logits = _branch(x, params, "cls").reshape(-1)
    offsets = _branch(x, params, "reg").exp()
    return logits, offsets


def run_heads(level: PyramidLevel, params) -> LevelPredictions:
    arrays = params.arrays if hasattr(params, "arrays") else params
    logits, offsets = heads_forward(level.features, arrays)
    return LevelPredictions(level=level.level, logits=logits.data, offsets=offsets.data)


def segment_in_level_units(segment, stride, instants_per_second):
    scale = instants_per_second / stride
    return segment[0] * scale, segment[1] * scale


def assign_targets(level: PyramidLevel, mask: InstantMask, gt: SegmentSet,
                   instants_per_second: float) -> LevelTargets:
    """Regression targets for the positive instants of one level.

    A positive instant ``t`` (the window ``[t, t+1)`` in level units) is matched
    to the segment whose level-unit span overlaps that window. Positives with
    no overlapping segment, which the fractional label rule can produce, fall
    back to the nearest segment and are counted in ``unmatched_positives``.
    """
    n = level.features.shape[0]
    if len(mask) != n:
        raise ValueError(f"mask length {len(mask)} does not match level length {n}")
    labels = mask.labels.astype(np.int64)
    offsets = np.full((n, 2), np.nan)
    intervals = np.full((n, 2), np.nan)
    matched = np.full(n, -1, dtype=np.int64)
    spans = [segment_in_level_units(seg, level.stride, instants_per_second)
             for seg in gt.segments]
    fallback = 0
    for t in np.flatnonzero(labels):
        if not spans:
            raise ValueError("positive instant in a sample without segments")
        hit = [k for k, (s, e) in enumerate(spans) if s < t + 1 and e > t]
        if hit:
            k = hit[0]
        else:
            fallback += 1
            gaps = [max(s - (t + 1), t - e) for s, e in spans]
            k = int(np.argmin(gaps))
        s, e = spans[k]
        matched[t] = k
        intervals[t] = (s, e)
        offsets[t] = (t - s, e - t)
    return LevelTargets(labels, offsets, intervals, matched, fallback)


def decode(preds: LevelPredictions, stride: int, instants_per_second: float,
           duration: float, score_floor: float = 0.0) -> list:
    """Turn per-instant predictions into proposals in seconds."""
    logits = np.asarray(preds.logits, dtype=np.float64)
    scores = ad.sigmoid(logits)
    t = np.arange(len(logits), dtype=np.float64)
    scale = stride / instants_per_second
    starts = np.clip((t - preds.offsets[:, 0]) * scale, 0.0, duration)
    ends = np.clip((t + preds.offsets[:, 1]) * scale, 0.0, duration)
    keep = (ends > starts) & (scores >= score_floor) & np.isfinite(scores)
    return [Proposal(float(p), float(s), float(e))
            for p, s, e in zip(scores[keep], starts[keep], ends[keep])]


def init_head_params(rng, in_dim, hidden, prior=0.01, zero=False):
    """Head weights; ``zero=True`` gives the all-zero network."""
    shapes = {}
    for branch, n_out in (("cls", 1), ("reg", 2)):
        shapes[f"{branch}.conv1.w"] = (3, in_dim, hidden)
        shapes[f"{branch}.conv1.b"] = (hidden,)
        shapes[f"{branch}.conv2.w"] = (3, hidden, hidden)
        shapes[f"{branch}.conv2.b"] = (hidden,)
        shapes[f"{branch}.out.w"] = (hidden, n_out)
        shapes[f"{branch}.out.b"] = (n_out,)
    out = {}
    for name, shape in shapes.items():
        if zero or name.endswith(".b"):
            out[name] = np.zeros(shape)
        else:
            fan_in = shape[0] * shape[1] if len(shape) == 3 else shape[0]
            out[name] = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)
    if not zero:
        # Focal-loss prior: start every instant at a low forgery probability.
        out["cls.out.b"][:] = -math.log((1.0 - prior) / prior)
        out["cls.out.w"] *= 0.1
        out["reg.out.w"] *= 0.1
    return out


def as_tensors(params, requires_grad=True):
    return {k: Tensor(v, requires_grad=requires_grad) for k, v in params.items()}
