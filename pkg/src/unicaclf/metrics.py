"""Corpus-level AP@IoU and AR@N for temporal localization.

Two implementations share one contract: the default path uses vectorised
IoU matrices, ``reference=True`` replays the same protocol with plain loops
and per-pair IoU so that the two can be cross-checked.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .postprocess import iou_1d, iou_matrix

AP_THRESHOLDS = (0.5, 0.75, 0.95)
AR_COUNTS = (100, 50, 30, 20, 10, 5)
AR_COUNTS_SHORT = (50, 20, 10, 5)
# literal decimals, so an IoU of exactly 0.6 clears the 0.6 threshold
AR_IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))


@dataclass(frozen=True)
class EvalConfig:
    ap_thresholds: tuple = AP_THRESHOLDS
    ar_counts: tuple = AR_COUNTS
    per_video_recall: bool = False


@dataclass
class EvalReport:
    ap: dict
    ap_average: float
    ar: dict
    ar_average: float
    per_video: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "ap": {str(k): v for k, v in self.ap.items()},
            "ap_average": self.ap_average,
            "ar": {str(k): v for k, v in self.ar.items()},
            "ar_average": self.ar_average,
            "per_video": self.per_video,
        }

    def rows(self):
        """``(metric, threshold_or_n, value)`` rows for CSV output."""
        out = [("AP", k, v) for k, v in self.ap.items()]
        out.append(("AP", "avg", self.ap_average))
        out += [("AR", k, v) for k, v in self.ar.items()]
        out.append(("AR", "avg", self.ar_average))
        return out


def _check_ids(preds, gts):
    unknown = sorted(set(preds) - set(gts))
    if unknown:
        raise KeyError(f"predictions reference unknown video ids: {unknown[:5]}")


def _seg_array(segments):
    return np.array([[p[0], p[1]] for p in segments], dtype=np.float64).reshape(-1, 2)


def _gt_array(gt):
    return _seg_array(gt.segments if hasattr(gt, "segments") else gt)


def _pooled(preds):
    """All proposals as ``(score, vid, start, end)``, best first."""
    rows = [(p.score, vid, p.start_seconds, p.end_seconds)
            for vid, props in preds.items() for p in props]
    rows.sort(key=lambda r: (-r[0], r[1], r[2], r[3]))
    return rows


def _ranked(props):
    return sorted(props, key=lambda p: (-p.score, p.start_seconds, p.end_seconds))


def _greedy_pick(ious, used, thr):
    """Index of the highest-IoU unused entry with IoU >= thr, else -1."""
    cand = np.where(used | (ious < thr), -1.0, ious)
    if cand.size == 0:
        return -1
    j = int(np.argmax(cand))
    return j if cand[j] >= 0 and ious[j] >= thr and not used[j] else -1


def _interpolated_ap(tp_flags, n_gt):
    if n_gt == 0 or len(tp_flags) == 0:
        return 0.0
    tp = np.cumsum(tp_flags, dtype=np.float64)
    rank = np.arange(1, len(tp_flags) + 1, dtype=np.float64)
    precision = tp / rank
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    hits = np.asarray(tp_flags, dtype=bool)
    return float(np.sum(envelope[hits]) / n_gt)


def average_precision(preds, gts, iou_threshold, reference=False):
    _check_ids(preds, gts)
    if reference:
        return _reference_ap(preds, gts, iou_threshold)
    gt_arrays = {vid: _gt_array(g) for vid, g in gts.items()}
    n_gt = sum(len(a) for a in gt_arrays.values())
    rows = _pooled(preds)
    if not rows:
        return 0.0
    ious = {}
    for vid, props in preds.items():
        ious[vid] = iou_matrix(_seg_array([(p.start_seconds, p.end_seconds) for p in props]),
                               gt_arrays[vid])
    # map each pooled row back to its row in the per-video IoU matrix
    index = {vid: {} for vid in preds}
    for vid, props in preds.items():
        for i, p in enumerate(props):
            index[vid].setdefault((p.score, p.start_seconds, p.end_seconds), []).append(i)
    used = {vid: np.zeros(len(a), dtype=bool) for vid, a in gt_arrays.items()}
    flags = np.zeros(len(rows), dtype=bool)
    for r, (score, vid, s, e) in enumerate(rows):
        i = index[vid][(score, s, e)].pop(0)
        j = _greedy_pick(ious[vid][i], used[vid], iou_threshold)
        if j >= 0:
            used[vid][j] = True
            flags[r] = True
    return _interpolated_ap(flags, n_gt)


def _matched_count(props, gt, thr):
    ious = iou_matrix(_seg_array([(p.start_seconds, p.end_seconds) for p in props]), gt)
    used = np.zeros(len(gt), dtype=bool)
    for i in range(len(props)):
        j = _greedy_pick(ious[i], used, thr)
        if j >= 0:
            used[j] = True
    return int(used.sum())


def average_recall(preds, gts, n_proposals, per_video=False, reference=False):
    """Mean over IoU thresholds 0.50:0.05:0.95 of recall using the top-N
    proposals of every video."""
    _check_ids(preds, gts)
    if reference:
        return _reference_ar(preds, gts, n_proposals, per_video)
    videos = [vid for vid in sorted(gts) if len(_gt_array(gts[vid])) > 0]
    if not videos or n_proposals <= 0:
        return 0.0
    top = {vid: _ranked(preds.get(vid, []))[:n_proposals] for vid in videos}
    gt_arrays = {vid: _gt_array(gts[vid]) for vid in videos}
    n_gt = sum(len(gt_arrays[v]) for v in videos)
    recalls = []
    for thr in AR_IOU_THRESHOLDS:
        counts = [_matched_count(top[v], gt_arrays[v], thr) for v in videos]
        if per_video:
            recalls.append(sum(c / len(gt_arrays[v]) for c, v in zip(counts, videos))
                           / len(videos))
        else:
            recalls.append(sum(counts) / n_gt)
    return sum(recalls) / len(recalls)


def evaluate(preds, gts, config: EvalConfig = EvalConfig(), reference=False) -> EvalReport:
    _check_ids(preds, gts)
    ap = {t: average_precision(preds, gts, t, reference=reference)
          for t in config.ap_thresholds}
    ar = {n: average_recall(preds, gts, n, config.per_video_recall, reference=reference)
          for n in config.ar_counts}
    per_video = {}
    for vid in sorted(gts):
        gt = _gt_array(gts[vid])
        props = preds.get(vid, [])
        best = 0.0
        if len(gt) and props:
            best = float(iou_matrix(_seg_array([(p.start_seconds, p.end_seconds)
                                                for p in props]), gt).max())
        per_video[vid] = {"num_gt": int(len(gt)), "num_pred": len(props), "best_iou": best}
    return EvalReport(ap=ap, ap_average=sum(ap.values()) / len(ap) if ap else 0.0,
                      ar=ar, ar_average=sum(ar.values()) / len(ar) if ar else 0.0,
                      per_video=per_video)


# -- brute-force reference ---------------------------------------------------

def _reference_match(props, gt, thr):
    """Greedy matching with explicit loops; returns per-proposal hit flags."""
    used = [False] * len(gt)
    hits = []
    for p in props:
        best_j, best_iou = -1, -1.0
        for j, g in enumerate(gt):
            if used[j]:
                continue
            iou = iou_1d((p.start_seconds, p.end_seconds), g)
            if iou >= thr and iou > best_iou:
                best_j, best_iou = j, iou
        if best_j >= 0:
            used[best_j] = True
        hits.append(best_j >= 0)
    return hits


def _reference_ap(preds, gts, thr):
    gt_lists = {vid: list(_gt_array(g).tolist()) for vid, g in gts.items()}
    n_gt = sum(len(v) for v in gt_lists.values())
    rows = _pooled(preds)
    if n_gt == 0 or not rows:
        return 0.0
    used = {vid: [False] * len(v) for vid, v in gt_lists.items()}
    hits = []
    for score, vid, s, e in rows:
        best_j, best_iou = -1, -1.0
        for j, g in enumerate(gt_lists[vid]):
            if used[vid][j]:
                continue
            iou = iou_1d((s, e), g)
            if iou >= thr and iou > best_iou:
                best_j, best_iou = j, iou
        if best_j >= 0:
            used[vid][best_j] = True
        hits.append(best_j >= 0)
    precisions = []
    tp = 0
    for k, h in enumerate(hits):
        tp += h
        precisions.append(tp / (k + 1))
    total = 0.0
    for k, h in enumerate(hits):
        if h:
            total += max(precisions[k:])
    return total / n_gt


def _reference_ar(preds, gts, n, per_video):
    videos = [vid for vid in sorted(gts) if len(_gt_array(gts[vid])) > 0]
    if not videos or n <= 0:
        return 0.0
    recalls = []
    for thr in AR_IOU_THRESHOLDS:
        matched, total, per = 0, 0, []
        for vid in videos:
            gt = _gt_array(gts[vid]).tolist()
            props = _ranked(preds.get(vid, []))[:n]
            m = sum(_reference_match(props, gt, thr))
            matched += m
            total += len(gt)
            per.append(m / len(gt))
        recalls.append(sum(per) / len(per) if per_video else matched / total)
    return sum(recalls) / len(recalls)
