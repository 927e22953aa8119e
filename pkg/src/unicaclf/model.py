"""Parameter initialisation, the full training forward pass, and inference."""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data_io import level_masks
from .heads import LevelPredictions, assign_targets, decode, heads_forward, init_head_params
from .losses import ForwardPass, cacl_intra, diou_loss, focal_loss, total_loss
from .postprocess import SuppressionConfig, soft_nms
from .pyramid import pyramid_forward
from .types import ModelConfig, ModelParams, PyramidLevel

PROJ_INIT_STD = 0.1


def init_params(config: ModelConfig, seed=None, zero_heads=False) -> ModelParams:
    """Fresh parameters in declaration order: per-level layers, then heads."""
    rng = np.random.default_rng(config.seed if seed is None else seed)
    c = config.input_dim
    arrays = {}
    for lvl in range(1, config.num_levels + 1):
        p = f"level{lvl}."
        if config.ablation:
            arrays[p + "conv.w"] = rng.normal(0.0, math.sqrt(1.0 / (3 * c)), size=(3, c, c))
            arrays[p + "conv.b"] = np.zeros(c)
        else:
            # near-identity: the gate starts out firing on instants anti-aligned
            # with the context, and genuine instants pass through unchanged
            for name in ("wq", "wk", "wv"):
                arrays[p + name] = np.eye(c) + rng.normal(0.0, PROJ_INIT_STD / math.sqrt(c),
                                                          size=(c, c))
            arrays[p + "beta"] = np.zeros(())
    arrays.update(init_head_params(rng, c, config.embed_dim, zero=zero_heads))
    return ModelParams(arrays)


def _terms_from_input(x, seq, gt, params, config):
    levels = pyramid_forward(x, params, config.num_levels, config.ablation)
    masks = level_masks(gt, seq.num_instants, seq.instants_per_second,
                        config.num_levels, config.forged_threshold)
    logits_all, labels_all, pred_iv, tgt_iv = [], [], [], []
    cacl_terms = []
    fallback = 0
    for (feats, ctx, stride, _), mask in zip(levels, masks):
        logits, offsets = heads_forward(feats, params)
        logits_all.append(logits)
        labels_all.append(mask.labels)
        level = PyramidLevel(level=mask.level, features=feats.data, context=ctx.data,
                             stride=stride)
        targets = assign_targets(level, mask, gt, seq.instants_per_second)
        fallback += targets.unmatched_positives
        pos = np.flatnonzero(targets.labels)
        if len(pos):
            t = Tensor(pos.astype(np.float64))
            off = offsets[pos]
            pred_iv.append(ad.stack([t - off[:, 0], t + off[:, 1]], axis=1))
            tgt_iv.append(targets.intervals[pos])
        if not config.ablation:
            term, skipped = cacl_intra(ctx, feats, mask, config.temperature)
            if not skipped:
                cacl_terms.append(term)
    cls = focal_loss(ad.concat(logits_all), np.concatenate(labels_all),
                     config.focal_gamma, config.focal_alpha)
    n_pos = sum(len(p) for p in tgt_iv)
    if pred_iv:
        reg = diou_loss(ad.concat(pred_iv), np.concatenate(tgt_iv))
    else:
        reg = Tensor(0.0)
    cacl = None
    if cacl_terms:
        cacl = cacl_terms[0]
        for term in cacl_terms[1:]:
            cacl = cacl + term
        cacl = cacl / float(len(cacl_terms))
    return {"cls": cls, "reg": reg, "cacl": cacl, "positives": n_pos,
            "instants": int(sum(len(l) for l in labels_all)), "fallback": fallback}


def forward(params: ModelParams, batch, config: ModelConfig, wrt_inputs=False) -> ForwardPass:
    """Batch objective.

    Classification and regression are averaged over the samples in the batch;
    the contrastive term is averaged over the samples that have both genuine
    and forged instants, and is dropped entirely for the residual baseline.
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    leaves = {k: Tensor(v, requires_grad=True) for k, v in params.items()}
    inputs = []
    cls_sum = reg_sum = None
    cacl_terms = []
    counts = {"samples": len(batch), "positives": 0, "instants": 0,
              "cacl_skipped": 0, "fallback": 0}
    for seq, gt in batch:
        x = Tensor(seq.features, requires_grad=wrt_inputs)
        if wrt_inputs:
            inputs.append(x)
        terms = _terms_from_input(x, seq, gt, leaves, config)
        cls_sum = terms["cls"] if cls_sum is None else cls_sum + terms["cls"]
        reg_sum = terms["reg"] if reg_sum is None else reg_sum + terms["reg"]
        if terms["cacl"] is None:
            counts["cacl_skipped"] += 1
        else:
            cacl_terms.append(terms["cacl"])
        counts["positives"] += terms["positives"]
        counts["instants"] += terms["instants"]
        counts["fallback"] += terms["fallback"]
    n = float(len(batch))
    cls = cls_sum / n
    reg = reg_sum / n
    cacl = Tensor(0.0)
    if cacl_terms:
        cacl = cacl_terms[0]
        for term in cacl_terms[1:]:
            cacl = cacl + term
        cacl = cacl / float(len(cacl_terms))
    cacl_weight = 0.0 if config.ablation else config.cacl_weight
    loss = cls + config.reg_weight * reg
    if cacl_weight:
        loss = loss + cacl_weight * cacl
    breakdown = total_loss(cls, reg, cacl, config.reg_weight, cacl_weight, counts)
    return ForwardPass(loss=loss, breakdown=breakdown, params=leaves, inputs=inputs)


def predict_levels(seq, params: ModelParams, config: ModelConfig):
    """Per-level head outputs for one sample (no gradients)."""
    levels = pyramid_forward(seq.features, params.arrays, config.num_levels, config.ablation)
    out = []
    for i, (feats, _, stride, _) in enumerate(levels):
        logits, offsets = heads_forward(feats.data, params.arrays)
        out.append((LevelPredictions(i + 1, logits.data, offsets.data), stride))
    return out


def predict(seq, params: ModelParams, config: ModelConfig) -> list:
    """Decoded, Soft-NMS filtered proposals for one sample."""
    proposals = []
    for preds, stride in predict_levels(seq, params, config):
        proposals += decode(preds, stride, seq.instants_per_second, seq.duration_seconds,
                            config.score_floor)
    cfg = SuppressionConfig(config.softnms_sigma, config.score_floor, config.max_proposals)
    return soft_nms(proposals, cfg)
