"""Core value types shared across the package."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np


def _frozen_array(a, dtype=np.float64):
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class FeatureSequence:
    """One sample: a T x C matrix of per-instant embeddings plus timing."""

    id: str
    features: np.ndarray
    instants_per_second: float
    duration_seconds: float

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.ndim != 2:
            raise ValueError(f"{self.id}: features must be 2-D, got shape {feats.shape}")
        object.__setattr__(self, "features", _frozen_array(feats))

    @property
    def num_instants(self) -> int:
        return self.features.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class SegmentSet:
    segments: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "segments",
                           tuple((float(s), float(e)) for s, e in self.segments))

    def __len__(self):
        return len(self.segments)

    def __iter__(self):
        return iter(self.segments)

    @classmethod
    def merged(cls, pairs) -> "SegmentSet":
        """Sort by start and replace overlapping (or touching) runs by their union."""
        out = []
        for s, e in sorted((float(s), float(e)) for s, e in pairs):
            if out and s <= out[-1][1]:
                out[-1] = (out[-1][0], max(out[-1][1], e))
            else:
                out.append((s, e))
        return cls(tuple(out))


@dataclass(frozen=True)
class InstantMask:
    level: int
    labels: np.ndarray

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 1 or not np.all((labels == 0) | (labels == 1)):
            raise ValueError("instant labels must be a binary vector")
        object.__setattr__(self, "labels", _frozen_array(labels, np.int8))

    def __len__(self):
        return len(self.labels)


@dataclass(frozen=True)
class PyramidLevel:
    level: int
    features: np.ndarray
    context: np.ndarray
    stride: int

    def __post_init__(self):
        object.__setattr__(self, "features", _frozen_array(self.features))
        object.__setattr__(self, "context", _frozen_array(self.context))


@dataclass(frozen=True, order=True)
class Proposal:
    score: float
    start_seconds: float
    end_seconds: float


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int = 16
    embed_dim: int = 32
    num_levels: int = 6
    temperature: float = 0.1
    reg_weight: float = 2.0
    cacl_weight: float = 0.5
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    softnms_sigma: float = 0.5
    score_floor: float = 0.001
    max_proposals: int = 100
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    batch_size: int = 8
    epochs: int = 20
    seed: int = 0
    forged_threshold: float = 0.4
    early_stop_window: int = 0
    ablation: bool = False

    def __post_init__(self):
        problems = []
        for name in ("input_dim", "embed_dim", "num_levels", "batch_size", "max_proposals"):
            if int(getattr(self, name)) < 1:
                problems.append(f"{name} must be >= 1")
        for name in ("temperature", "softnms_sigma", "adam_epsilon"):
            if not getattr(self, name) > 0:
                problems.append(f"{name} must be > 0")
        for name in ("reg_weight", "cacl_weight", "focal_gamma", "learning_rate", "epochs",
                     "early_stop_window"):
            if getattr(self, name) < 0:
                problems.append(f"{name} must be >= 0")
        if not 0 < self.forged_threshold < 1:
            problems.append("forged_threshold must lie in (0, 1)")
        if not 0 <= self.focal_alpha <= 1:
            problems.append("focal_alpha must lie in [0, 1]")
        if not 0 < self.score_floor < 1:
            problems.append("score_floor must lie in (0, 1)")
        for name in ("adam_beta1", "adam_beta2"):
            if not 0 <= getattr(self, name) < 1:
                problems.append(f"{name} must lie in [0, 1)")
        if problems:
            raise ValueError("invalid ModelConfig: " + "; ".join(problems))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown ModelConfig fields: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)


@dataclass
class ModelParams:
    """Named float64 arrays in a fixed declaration order.

    ``level{l}.beta`` holds the unconstrained pre-activation; the context
    mixing weight is ``sigmoid`` of it.
    """

    arrays: dict = field(default_factory=dict)

    def __getitem__(self, name):
        return self.arrays[name]

    def __iter__(self):
        return iter(self.arrays)

    def __len__(self):
        return len(self.arrays)

    def names(self):
        return list(self.arrays)

    def items(self):
        return self.arrays.items()

    def copy(self) -> "ModelParams":
        return ModelParams({k: v.copy() for k, v in self.arrays.items()})

    def num_values(self) -> int:
        return sum(v.size for v in self.arrays.values())

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.arrays.values()])

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.arrays.values())


def validate_sample(seq: FeatureSequence, gt: SegmentSet) -> list:
    """Return human-readable descriptions of every violated invariant."""
    report = []
    feats = seq.features
    if feats.shape[0] < 1:
        report.append("T >= 1 violated")
    if feats.shape[1] < 1:
        report.append("C >= 1 violated")
    if not np.all(np.isfinite(feats)):
        report.append("non-finite feature")
    ips = seq.instants_per_second
    if not (ips > 0 and math.isfinite(ips)):
        report.append("instants_per_second must be positive")
    if not (seq.duration_seconds > 0 and math.isfinite(seq.duration_seconds)):
        report.append("duration_seconds must be positive")
    elif ips > 0 and abs(seq.duration_seconds - feats.shape[0] / ips) > 1.0 / ips:
        report.append("duration inconsistent with T / instants_per_second")
    prev_end = None
    for k, (s, e) in enumerate(gt.segments):
        if not s < e:
            report.append(f"segment {k}: start < end violated")
        if s < 0 or e > seq.duration_seconds:
            report.append(f"segment {k}: outside [0, duration]")
        if prev_end is not None and s < prev_end:
            report.append(f"segment {k}: unsorted or overlapping")
        prev_end = e
    return report
