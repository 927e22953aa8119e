"""Dataset serialization, instant-label rasterization and the synthetic
planted-anomaly generator.

On disk a dataset is a JSON manifest plus one headerless float32
little-endian file per sample (row-major, ``num_instants x feature_dim``).
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .types import FeatureSequence, InstantMask, Proposal, SegmentSet, validate_sample

MANIFEST_VERSION = 1
PREDICTIONS_VERSION = 1
FEATURE_DTYPE = np.dtype("<f4")


class DatasetError(ValueError):
    """Malformed manifest, feature file or predictions file."""


# -- labels -----------------------------------------------------------------

def rasterize_labels(gt: SegmentSet, num_instants: int, instants_per_second: float) -> InstantMask:
    """Level-1 labels: instant ``t`` is forged iff its centre time lies in a segment."""
    centres = (np.arange(num_instants) + 0.5) / instants_per_second
    labels = np.zeros(num_instants, dtype=np.int8)
    for s, e in gt.segments:
        labels[(centres >= s) & (centres <= e)] = 1
    return InstantMask(level=1, labels=labels)


def downsample_mask(mask: InstantMask, threshold: float = 0.4) -> InstantMask:
    """Pool labels over windows of 2; a window is forged iff its forged fraction
    strictly exceeds ``threshold``. A ragged tail window uses its own size."""
    if not 0 < threshold < 1:
        raise ValueError("threshold must lie in (0, 1)")
    labels = mask.labels.astype(np.float64)
    n = len(labels)
    out = np.empty((n + 1) // 2, dtype=np.int8)
    for i in range(len(out)):
        window = labels[2 * i:2 * i + 2]
        out[i] = window.sum() / len(window) > threshold
    return InstantMask(level=mask.level + 1, labels=out)


def pool_mask(mask: InstantMask, stride: int, threshold: float = 0.4) -> InstantMask:
    """Average-pool level-1 labels over windows of ``stride`` instants.

    A window is forged iff its forged fraction strictly exceeds ``threshold``;
    the ragged tail window uses its own size. ``stride=2`` matches
    :func:`downsample_mask`.
    """
    if not 0 < threshold < 1:
        raise ValueError("threshold must lie in (0, 1)")
    if mask.level != 1:
        raise ValueError("pool_mask expects level-1 labels")
    labels = mask.labels.astype(np.float64)
    n = len(labels)
    out = np.empty(-(-n // stride), dtype=np.int8)
    for i in range(len(out)):
        window = labels[stride * i:stride * (i + 1)]
        out[i] = window.sum() / len(window) > threshold
    return InstantMask(level=int(round(math.log2(stride))) + 1, labels=out)


def level_masks(gt: SegmentSet, num_instants: int, instants_per_second: float,
                num_levels: int, threshold: float = 0.4) -> list:
    """Labels for every pyramid level, pooled directly from the level-1 labels.

    Chaining :func:`downsample_mask` instead would turn the 40% rule into a
    logical OR above level 2, since one forged instant out of two already
    exceeds the threshold.
    """
    base = rasterize_labels(gt, num_instants, instants_per_second)
    return [base] + [pool_mask(base, 2 ** (lvl - 1), threshold)
                     for lvl in range(2, num_levels + 1)]


# -- manifest / feature files ----------------------------------------------

def _feature_path(sample_id: str) -> str:
    return f"features/{sample_id}.f32"


def save_dataset(dataset, out_dir) -> Path:
    """Write ``manifest.json`` and the feature files; returns the manifest path."""
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    entries = []
    for seq, gt in dataset:
        rel = _feature_path(seq.id)
        data = np.ascontiguousarray(seq.features, dtype=FEATURE_DTYPE)
        if not np.array_equal(data.astype(np.float64), seq.features):
            raise DatasetError(f"{seq.id}: features are not exactly representable in float32")
        (out / rel).write_bytes(data.tobytes())
        entries.append({
            "id": seq.id,
            "feature_file": rel,
            "num_instants": seq.num_instants,
            "feature_dim": seq.feature_dim,
            "instants_per_second": seq.instants_per_second,
            "duration_seconds": seq.duration_seconds,
            "fake_segments": [[s, e] for s, e in gt.segments],
        })
    manifest = {"version": MANIFEST_VERSION, "samples": entries}
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path


_SAMPLE_FIELDS = {
    "id": str, "feature_file": str, "num_instants": int, "feature_dim": int,
    "instants_per_second": (int, float), "duration_seconds": (int, float),
    "fake_segments": list,
}


def _check_manifest(doc):
    if not isinstance(doc, dict) or "version" not in doc:
        raise DatasetError("manifest: missing mandatory 'version' field")
    if doc["version"] != MANIFEST_VERSION:
        raise DatasetError(f"manifest: unsupported version {doc['version']!r}")
    samples = doc.get("samples")
    if not isinstance(samples, list):
        raise DatasetError("manifest: 'samples' must be a list")
    seen = set()
    for i, entry in enumerate(samples):
        sid = entry.get("id", f"#{i}") if isinstance(entry, dict) else f"#{i}"
        if not isinstance(entry, dict):
            raise DatasetError(f"{sid}: sample entry must be an object")
        for name, typ in _SAMPLE_FIELDS.items():
            if name not in entry:
                raise DatasetError(f"{sid}: missing field '{name}'")
            if not isinstance(entry[name], typ) or isinstance(entry[name], bool):
                raise DatasetError(f"{sid}: field '{name}' has wrong type")
        if sid in seen:
            raise DatasetError(f"{sid}: duplicate sample id")
        seen.add(sid)
        if entry["num_instants"] < 1 or entry["feature_dim"] < 1:
            raise DatasetError(f"{sid}: num_instants and feature_dim must be >= 1")
        for seg in entry["fake_segments"]:
            if (not isinstance(seg, list) or len(seg) != 2
                    or not all(isinstance(v, (int, float)) for v in seg)):
                raise DatasetError(f"{sid}: fake_segments must hold [start, end] pairs")


def load_dataset(manifest_path) -> list:
    """Load ``(FeatureSequence, SegmentSet)`` pairs in manifest order."""
    path = Path(manifest_path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(f"manifest: invalid JSON ({exc})") from exc
    _check_manifest(doc)
    root = path.parent
    dataset = []
    for entry in doc["samples"]:
        sid = entry["id"]
        fpath = root / entry["feature_file"]
        if not fpath.is_file():
            raise DatasetError(f"{sid}: feature file missing: {fpath}")
        raw = fpath.read_bytes()
        t, c = entry["num_instants"], entry["feature_dim"]
        if len(raw) != t * c * FEATURE_DTYPE.itemsize:
            raise DatasetError(f"{sid}: feature file has {len(raw)} bytes, "
                               f"expected {t * c * FEATURE_DTYPE.itemsize}")
        feats = np.frombuffer(raw, dtype=FEATURE_DTYPE).reshape(t, c).astype(np.float64)
        if not np.all(np.isfinite(feats)):
            raise DatasetError(f"{sid}: non-finite feature values")
        seq = FeatureSequence(sid, feats, float(entry["instants_per_second"]),
                              float(entry["duration_seconds"]))
        gt = SegmentSet.merged(entry["fake_segments"])
        problems = validate_sample(seq, gt)
        if problems:
            raise DatasetError(f"{sid}: " + "; ".join(problems))
        dataset.append((seq, gt))
    return dataset


# -- synthetic data ---------------------------------------------------------

@dataclass(frozen=True)
class SynthConfig:
    num_samples: int = 200
    t_min: int = 64
    t_max: int = 64
    feature_dim: int = 16
    instants_per_second: float = 1.0
    forged_fraction: float = 0.7
    segments_min: int = 1
    segments_max: int = 1
    length_min: float = 0.1
    length_max: float = 0.25
    epsilon: float = 2.0
    alignment: float = 0.0
    noise_scale: float = 0.5
    context_scale: float = 1.0
    seed: int = 0
    id_prefix: str = "s"

    def __post_init__(self):
        problems = []
        for name in ("num_samples", "t_min", "t_max", "feature_dim", "segments_min",
                     "segments_max"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be >= 1")
        if self.t_max < self.t_min:
            problems.append("t_max must be >= t_min")
        if self.segments_max < self.segments_min:
            problems.append("segments_max must be >= segments_min")
        for name in ("forged_fraction", "length_min", "length_max"):
            if not 0 < getattr(self, name) <= 1:
                problems.append(f"{name} must lie in (0, 1]")
        if self.length_max < self.length_min:
            problems.append("length_max must be >= length_min")
        for name in ("instants_per_second", "noise_scale", "context_scale"):
            if not getattr(self, name) > 0:
                problems.append(f"{name} must be > 0")
        if not -1 <= self.alignment <= 1:
            problems.append("alignment must lie in [-1, 1]")
        if self.epsilon < 0:
            problems.append("epsilon must be >= 0")
        if problems:
            raise ValueError("invalid SynthConfig: " + "; ".join(problems))

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown SynthConfig fields: {sorted(unknown)}")
        return cls(**d)


MAX_PLACEMENT_TRIES = 1000


def _place_segments(rng, t, count, len_lo, len_hi, sid):
    """Non-overlapping, non-touching instant ranges ``[a, b)``."""
    for _ in range(MAX_PLACEMENT_TRIES):
        spans = []
        for _ in range(count):
            frac = rng.uniform(len_lo, len_hi)
            n = max(1, min(t, int(round(frac * t))))
            a = int(rng.integers(0, t - n + 1))
            spans.append((a, a + n))
        spans.sort()
        if all(spans[i][1] < spans[i + 1][0] for i in range(len(spans) - 1)):
            return spans
    raise ValueError(f"{sid}: could not place {count} segments in {t} instants")


def _anomaly_direction(rng, context, alignment):
    """Unit vector whose cosine with ``context`` equals ``alignment``."""
    u = rng.normal(size=context.shape)
    c_hat = context / np.linalg.norm(context)
    u -= (u @ c_hat) * c_hat
    u /= np.linalg.norm(u)
    return alignment * c_hat + np.sqrt(1.0 - alignment * alignment) * u


def generate_synthetic(cfg: SynthConfig) -> list:
    """Deterministic planted-anomaly corpus.

    Each sample draws a latent context vector; genuine instants are the
    context plus Gaussian noise. Forged samples get segments whose instants
    are shifted by ``epsilon`` along a per-sample random unit direction whose
    cosine with the context is ``alignment`` (negative values push forged
    instants away from the sample's own content).
    Values are rounded to float32 so the dataset round-trips exactly.
    """
    rng = np.random.default_rng(cfg.seed)
    n_forged = int(round(cfg.forged_fraction * cfg.num_samples))
    forged = set(rng.permutation(cfg.num_samples)[:n_forged].tolist())
    dataset = []
    for i in range(cfg.num_samples):
        sid = f"{cfg.id_prefix}{i:05d}"
        t = int(rng.integers(cfg.t_min, cfg.t_max + 1))
        c = cfg.feature_dim
        context = rng.normal(0.0, cfg.context_scale, size=c)
        feats = context + rng.normal(0.0, cfg.noise_scale, size=(t, c))
        direction = _anomaly_direction(rng, context, cfg.alignment)
        spans = []
        if i in forged:
            count = int(rng.integers(cfg.segments_min, cfg.segments_max + 1))
            spans = _place_segments(rng, t, count, cfg.length_min, cfg.length_max, sid)
            for a, b in spans:
                feats[a:b] += cfg.epsilon * direction
        feats = feats.astype(FEATURE_DTYPE).astype(np.float64)
        ips = float(cfg.instants_per_second)
        segs = SegmentSet(tuple((a / ips, b / ips) for a, b in spans))
        dataset.append((FeatureSequence(sid, feats, ips, t / ips), segs))
    return dataset


# -- predictions ------------------------------------------------------------

def save_predictions(predictions: dict, path) -> None:
    """``predictions`` maps video id to a list of :class:`Proposal`."""
    doc = {
        "version": PREDICTIONS_VERSION,
        "videos": [
            {"id": vid, "proposals": [{"score": p.score, "start": p.start_seconds,
                                       "end": p.end_seconds} for p in props]}
            for vid, props in predictions.items()
        ],
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def load_predictions(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"predictions file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(f"predictions: invalid JSON ({exc})") from exc
    if not isinstance(doc, dict) or doc.get("version") != PREDICTIONS_VERSION:
        raise DatasetError("predictions: missing or unsupported version")
    out = {}
    for video in doc.get("videos", []):
        vid = video["id"]
        if vid in out:
            raise DatasetError(f"predictions: duplicate video id {vid}")
        props = []
        for p in video["proposals"]:
            score, s, e = float(p["score"]), float(p["start"]), float(p["end"])
            if not (math.isfinite(score) and s < e):
                raise DatasetError(f"{vid}: invalid proposal {p}")
            props.append(Proposal(score, s, e))
        out[vid] = props
    return out


def ground_truth(dataset) -> dict:
    return {seq.id: gt for seq, gt in dataset}


def ensure_dir(path) -> Path:
    p = Path(path)
    os.makedirs(p, exist_ok=True)
    return p
