import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from unicaclf.postprocess import SuppressionConfig, iou_1d, iou_matrix, soft_nms
from unicaclf.types import Proposal

CFG = SuppressionConfig(sigma=0.5, score_floor=0.001, max_kept=100)


def test_iou_examples():
    assert iou_1d((0.0, 1.0), (0.0, 1.0)) == 1.0
    assert iou_1d((0.0, 1.0), (2.0, 3.0)) == 0.0
    assert iou_1d((0.0, 1.0), (0.5, 1.5)) == pytest.approx(1 / 3, abs=1e-15)
    assert iou_1d((0.0, 1.0), (1.0, 2.0)) == 0.0


def test_iou_matrix_matches_pairwise():
    rng = np.random.default_rng(0)
    a = np.sort(rng.random((5, 2)) * 10, axis=1)
    b = np.sort(rng.random((4, 2)) * 10, axis=1)
    m = iou_matrix(a, b)
    for i in range(5):
        for j in range(4):
            assert abs(m[i, j] - oracles.iou(a[i], b[j])) < 1e-15


def test_config_validation():
    with pytest.raises(ValueError):
        SuppressionConfig(sigma=0.0)
    with pytest.raises(ValueError):
        SuppressionConfig(score_floor=1.0)
    with pytest.raises(ValueError):
        SuppressionConfig(max_kept=0)


def test_soft_nms_examples():
    p = Proposal(0.7, 1.0, 2.0)
    assert soft_nms([p], CFG) == [p]
    a, b = Proposal(0.9, 0.0, 1.0), Proposal(0.8, 2.0, 3.0)
    assert soft_nms([b, a], CFG) == [a, b]
    out = soft_nms([Proposal(0.8, 0.0, 1.0), Proposal(0.9, 0.0, 1.0)], CFG)
    assert out[0].score == 0.9
    assert out[1].score == pytest.approx(0.8 * math.exp(-1 / 0.5), abs=1e-15)
    assert out[1].score == pytest.approx(0.10827, abs=1e-5)


def test_soft_nms_tie_break():
    a = Proposal(0.5, 1.0, 3.0)
    b = Proposal(0.5, 0.0, 4.0)
    c = Proposal(0.5, 0.0, 2.0)
    out = soft_nms([a, b, c], SuppressionConfig(sigma=100.0))
    assert out[0] == c


def test_soft_nms_floor_and_cap():
    props = [Proposal(0.9 - 0.01 * i, 10.0 * i, 10.0 * i + 1) for i in range(20)]
    assert len(soft_nms(props, SuppressionConfig(max_kept=5))) == 5
    low = [Proposal(0.0005, 0.0, 1.0)]
    assert soft_nms(low, CFG) == []


def _props(draw_list):
    return [Proposal(s, a, a + l) for s, a, l in draw_list]


props_strategy = st.lists(st.tuples(st.floats(0.002, 1.0), st.floats(0, 20), st.floats(0.1, 8)),
                          max_size=12)


@settings(max_examples=150, deadline=None)
@given(props_strategy, st.floats(0.05, 2.0))
def test_soft_nms_properties(raw, sigma):
    props = _props(raw)
    cfg = SuppressionConfig(sigma=sigma, score_floor=0.001, max_kept=100)
    out = soft_nms(props, cfg)
    originals = {}
    for p in props:
        originals.setdefault((p.start_seconds, p.end_seconds), []).append(p.score)
    for q in out:
        key = (q.start_seconds, q.end_seconds)
        assert key in originals
        assert q.score <= max(originals[key])
        assert q.score >= cfg.score_floor
    # selection order is non-increasing
    assert all(out[i].score >= out[i + 1].score for i in range(len(out) - 1))
    ref = oracles.soft_nms([(p.score, p.start_seconds, p.end_seconds) for p in props],
                           sigma, 0.001, 100)
    assert len(ref) == len(out)
    for (s, a, b), q in zip(ref, out):
        assert (a, b) == (q.start_seconds, q.end_seconds)
        assert abs(s - q.score) < 1e-12


def test_soft_nms_small_sigma_is_hard_nms():
    props = [Proposal(0.9, 0.0, 2.0), Proposal(0.8, 1.0, 3.0), Proposal(0.7, 5.0, 6.0)]
    out = soft_nms(props, SuppressionConfig(sigma=1e-6, score_floor=0.01))
    assert [(p.start_seconds, p.end_seconds) for p in out] == [(0.0, 2.0), (5.0, 6.0)]
