import json
import shutil

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from unicaclf.data_io import (DatasetError, SynthConfig, downsample_mask, generate_synthetic,
                              ground_truth, level_masks, load_dataset, load_predictions,
                              pool_mask, rasterize_labels, save_dataset, save_predictions)
from unicaclf.types import InstantMask, Proposal, SegmentSet


def test_rasterize_examples():
    m = rasterize_labels(SegmentSet(((1.0, 2.0),)), 4, 1.0)
    assert m.labels.tolist() == [0, 1, 0, 0]
    assert rasterize_labels(SegmentSet(), 5, 1.0).labels.tolist() == [0] * 5
    assert rasterize_labels(SegmentSet(((0.0, 5.0),)), 5, 1.0).labels.tolist() == [1] * 5


def test_rasterize_uses_rate():
    m = rasterize_labels(SegmentSet(((0.5, 1.0),)), 4, 4.0)
    assert m.labels.tolist() == [0, 0, 1, 1]


def test_downsample_examples():
    assert downsample_mask(InstantMask(1, [1, 0])).labels.tolist() == [1]
    assert downsample_mask(InstantMask(1, [0, 0])).labels.tolist() == [0]
    assert downsample_mask(InstantMask(1, [0, 0, 1])).labels.tolist() == [0, 1]
    assert downsample_mask(InstantMask(1, [1, 0]), threshold=0.5).labels.tolist() == [0]


@pytest.mark.parametrize("t", [1, 2, 7, 64, 65])
def test_downsample_length_schedule(t):
    m = InstantMask(1, np.zeros(t, int))
    for lvl in range(2, 8):
        m = downsample_mask(m)
        assert len(m) == -(-t // 2 ** (lvl - 1))
        assert m.level == lvl


def test_pool_mask_fraction_rule():
    base = InstantMask(1, [1, 0, 0, 0, 1, 1, 0, 0, 1])
    assert pool_mask(base, 4).labels.tolist() == [0, 1, 1]
    assert pool_mask(base, 2).labels.tolist() == downsample_mask(base).labels.tolist()


def test_level_masks_lengths():
    masks = level_masks(SegmentSet(((10.0, 20.0),)), 64, 1.0, 6)
    assert [len(m) for m in masks] == [64, 32, 16, 8, 4, 2]
    assert [m.level for m in masks] == [1, 2, 3, 4, 5, 6]
    # 10 of 64 instants forged: the coarsest windows stay genuine
    assert masks[-1].labels.tolist() == [0, 0]


def test_generate_is_deterministic():
    cfg = SynthConfig(num_samples=5, t_min=20, t_max=30, feature_dim=3, seed=4)
    a, b = generate_synthetic(cfg), generate_synthetic(cfg)
    for (sa, ga), (sb, gb) in zip(a, b):
        assert sa.id == sb.id
        assert sa.features.tobytes() == sb.features.tobytes()
        assert ga == gb


def test_save_twice_is_byte_identical(tmp_path):
    cfg = SynthConfig(num_samples=4, t_min=10, t_max=10, feature_dim=2, seed=1)
    for d in ("a", "b"):
        save_dataset(generate_synthetic(cfg), tmp_path / d)
    for f in sorted((tmp_path / "a").rglob("*")):
        if f.is_file():
            assert f.read_bytes() == (tmp_path / "b" / f.relative_to(tmp_path / "a")).read_bytes()


def test_zero_epsilon_is_null_case():
    cfg = SynthConfig(num_samples=1, t_min=50, t_max=50, feature_dim=4, forged_fraction=1.0,
                      epsilon=0.0, seed=3)
    (seq, gt), = generate_synthetic(cfg)
    assert len(gt) == 1
    s, e = (int(v) for v in gt.segments[0])
    inside = seq.features[s:e].mean(axis=0)
    outside = np.delete(seq.features, np.s_[s:e], axis=0).mean(axis=0)
    assert np.abs(inside - outside).max() < 4 * cfg.noise_scale


def test_manifest_audit():
    cfg = SynthConfig(num_samples=200, t_min=64, t_max=64, feature_dim=2, forged_fraction=0.5,
                      length_min=0.1, length_max=0.25, seed=6)
    data = generate_synthetic(cfg)
    forged = [gt for _, gt in data if len(gt)]
    assert len(forged) == round(0.5 * 200)
    for seq, gt in data:
        assert cfg.segments_min <= len(gt) <= cfg.segments_max or len(gt) == 0
        for s, e in gt:
            n = e - s
            assert round(0.1 * 64) <= n <= round(0.25 * 64)
            assert s == int(s) and 0 <= s and e <= seq.duration_seconds


def test_planted_segments_have_positive_instants():
    cfg = SynthConfig(num_samples=50, t_min=16, t_max=40, feature_dim=2, segments_max=3,
                      length_min=0.05, length_max=0.2, seed=2)
    for seq, gt in generate_synthetic(cfg):
        labels = rasterize_labels(gt, seq.num_instants, seq.instants_per_second).labels
        for s, e in gt:
            assert labels[int(s):int(np.ceil(e))].sum() >= 1


def test_infeasible_placement():
    cfg = SynthConfig(num_samples=1, t_min=10, t_max=10, feature_dim=2, forged_fraction=1.0,
                      segments_min=3, segments_max=3, length_min=0.4, length_max=0.4)
    with pytest.raises(ValueError, match="could not place"):
        generate_synthetic(cfg)


def test_synth_config_validation():
    with pytest.raises(ValueError):
        SynthConfig(forged_fraction=0.0)
    with pytest.raises(ValueError):
        SynthConfig(alignment=1.5)
    with pytest.raises(ValueError):
        SynthConfig.from_dict({"bogus": 1})


def _write(tmp_path, n=3):
    data = generate_synthetic(SynthConfig(num_samples=n, t_min=12, t_max=12, feature_dim=3))
    return data, save_dataset(data, tmp_path / "ds")


def test_round_trip(tmp_path):
    data, manifest = _write(tmp_path)
    loaded = load_dataset(manifest)
    for (a, ga), (b, gb) in zip(data, loaded):
        assert a.id == b.id
        assert a.features.tobytes() == b.features.tobytes()
        assert ga == gb


def test_truncated_feature_file(tmp_path):
    data, manifest = _write(tmp_path)
    f = manifest.parent / "features" / f"{data[1][0].id}.f32"
    f.write_bytes(f.read_bytes()[:-4])
    with pytest.raises(DatasetError, match=data[1][0].id):
        load_dataset(manifest)


def test_missing_feature_file(tmp_path):
    data, manifest = _write(tmp_path)
    (manifest.parent / "features" / f"{data[0][0].id}.f32").unlink()
    with pytest.raises(DatasetError, match="missing"):
        load_dataset(manifest)


def test_missing_manifest(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_dataset(tmp_path / "nope.json")


def test_non_finite_values(tmp_path):
    data, manifest = _write(tmp_path)
    f = manifest.parent / "features" / f"{data[2][0].id}.f32"
    arr = np.frombuffer(f.read_bytes(), dtype="<f4").copy()
    arr[3] = np.nan
    f.write_bytes(arr.tobytes())
    with pytest.raises(DatasetError, match="non-finite"):
        load_dataset(manifest)


@pytest.mark.parametrize("mutate, pattern", [
    (lambda d: d.pop("version"), "version"),
    (lambda d: d.update(version=2), "version"),
    (lambda d: d["samples"][0].pop("num_instants"), "num_instants"),
    (lambda d: d["samples"][1].update(id=d["samples"][0]["id"]), "duplicate"),
    (lambda d: d["samples"][0].update(fake_segments=[[5.0, 2.0]]), "start < end"),
    (lambda d: d["samples"][0].update(fake_segments=[[0.0, 99.0]]), "outside"),
])
def test_schema_violations(tmp_path, mutate, pattern):
    _, manifest = _write(tmp_path)
    doc = json.loads(manifest.read_text())
    mutate(doc)
    manifest.write_text(json.dumps(doc))
    with pytest.raises(DatasetError, match=pattern):
        load_dataset(manifest)


def test_overlapping_segments_are_merged(tmp_path):
    _, manifest = _write(tmp_path)
    doc = json.loads(manifest.read_text())
    doc["samples"][0]["fake_segments"] = [[4.0, 6.0], [1.0, 3.0], [2.0, 5.0]]
    manifest.write_text(json.dumps(doc))
    assert load_dataset(manifest)[0][1].segments == ((1.0, 6.0),)


def test_predictions_round_trip(tmp_path):
    preds = {"a": [Proposal(0.9, 0.0, 1.5), Proposal(0.1, 2.0, 3.0)], "b": []}
    save_predictions(preds, tmp_path / "p.json")
    assert load_predictions(tmp_path / "p.json") == preds


def test_empty_predictions_schema(tmp_path):
    save_predictions({}, tmp_path / "p.json")
    doc = json.loads((tmp_path / "p.json").read_text())
    assert doc == {"version": 1, "videos": []}
    assert load_predictions(tmp_path / "p.json") == {}


def test_ground_truth_map():
    data = generate_synthetic(SynthConfig(num_samples=3, t_min=10, t_max=10, feature_dim=2))
    gts = ground_truth(data)
    assert list(gts) == [s.id for s, _ in data]


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 40), st.integers(0, 2 ** 31))
def test_round_trip_property(t, seed):
    tmp = __import__("tempfile").mkdtemp()
    try:
        data = generate_synthetic(SynthConfig(num_samples=2, t_min=t, t_max=t, feature_dim=2,
                                               length_min=0.1, length_max=0.3, seed=seed))
        loaded = load_dataset(save_dataset(data, tmp))
        for (a, ga), (b, gb) in zip(data, loaded):
            assert a.features.tobytes() == b.features.tobytes() and ga == gb
    finally:
        shutil.rmtree(tmp)
