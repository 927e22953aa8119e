"""Context-aware perception (CaP) feature pyramid.

Each level runs the heterogeneous activation operation (HAO), which
amplifies instants that point away from the projected global context, and
then the adaptive context updater (ACU), which refreshes the context with a
cosine-softmax weighted average that discounts outlying instants.

The public functions accept plain arrays or :class:`~unicaclf.autodiff.Tensor`
objects. With arrays in, arrays come out; with any tensor in, the result stays
on the autodiff graph.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .types import FeatureSequence, ModelConfig, ModelParams, PyramidLevel


@dataclass(frozen=True)
class ActivationMask:
    """Per-instant HAO gate ``m_t = relu(-cos_t)`` with its diagnostics."""

    values: np.ndarray
    cosine: np.ndarray
    degenerate: np.ndarray  # zero-norm query or key; cosine forced to 0


def _any_tensor(*xs):
    return any(isinstance(x, Tensor) for x in xs)


def _out(t, keep_tensor):
    return t if keep_tensor else t.data


def cosine_rows(vec, rows):
    """Cosine between ``vec`` (C,) and every row of ``rows`` (T, C).

    Pairs where either vector has zero norm get similarity 0. Returns the
    similarity tensor and the boolean degenerate mask.
    """
    vec, rows = ad.as_tensor(vec), ad.as_tensor(rows)
    dots = rows @ vec
    denom = rows.norm(axis=1) * vec.norm()
    ok = denom.data > 0
    safe = ad.where(ok, denom, 1.0)
    return ad.where(ok, dots / safe, 0.0), ~ok


def init_context(features):
    keep = _any_tensor(features)
    x = ad.as_tensor(features)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ValueError("init_context needs a non-empty T x C matrix")
    return _out(x.mean(axis=0), keep)


def hao(context, features, wq, wk, wv):
    """Heterogeneous activation: ``x_t + relu(-cos(Wq g, Wk x_t)) * Wv x_t``.

    The gate is a scalar per instant, so instants whose projected cosine is
    non-negative pass through untouched.
    """
    keep = _any_tensor(context, features, wq, wk, wv)
    g, x = ad.as_tensor(context), ad.as_tensor(features)
    wq, wk, wv = ad.as_tensor(wq), ad.as_tensor(wk), ad.as_tensor(wv)
    if x.ndim != 2 or g.shape != (x.shape[1],):
        raise ValueError(f"shape mismatch: context {g.shape}, features {x.shape}")
    query = wq @ g
    keys = x @ wk.T
    values = x @ wv.T
    cos, degenerate = cosine_rows(query, keys)
    gate = (-cos).relu()
    out = gate.reshape(-1, 1) * values + x
    mask = ActivationMask(values=gate.data.copy(), cosine=cos.data.copy(),
                          degenerate=degenerate)
    return _out(out, keep), mask


def acu(prev_context, features, beta):
    """Adaptive context update.

    ``alpha = softmax_t(cos(x_t, g))``; the new context is
    ``beta * g + (1 - beta) * sum_t alpha_t x_t``.
    """
    keep = _any_tensor(prev_context, features, beta)
    g, x, b = ad.as_tensor(prev_context), ad.as_tensor(features), ad.as_tensor(beta)
    if x.ndim != 2 or g.shape != (x.shape[1],):
        raise ValueError(f"shape mismatch: context {g.shape}, features {x.shape}")
    sims, _ = cosine_rows(g, x)
    alpha = ad.softmax(sims)
    pooled = alpha @ x
    return _out(b * g + (1.0 - b) * pooled, keep)


def downsample_features(features):
    keep = _any_tensor(features)
    return _out(ad.maxpool2(features), keep)


def conv1d_same(x, w, b):
    """Kernel-3 temporal convolution with zero padding. ``w`` is (3, C_in, C_out)."""
    x = ad.as_tensor(x)
    xp = ad.pad_rows(x)
    t = x.shape[0]
    return xp[0:t] @ w[0] + xp[1:t + 1] @ w[1] + xp[2:t + 2] @ w[2] + b


def residual_block(x, w, b):
    """Baseline stand-in for a CaP layer: ``x + relu(conv3(x))``."""
    return x + conv1d_same(x, w, b).relu()


def beta_of(raw):
    """Map the unconstrained per-level parameter into [0, 1]."""
    if isinstance(raw, Tensor):
        return raw.sigmoid()
    return float(ad.sigmoid(np.asarray(raw)))


def pyramid_forward(x, params, num_levels, ablation=False):
    """Run the pyramid on the autodiff graph.

    ``params`` maps names to tensors (or arrays). Returns a list of
    ``(features, context, stride, mask)`` tuples, one per level; ``mask`` is
    ``None`` for the residual baseline.
    """
    x = ad.as_tensor(x)
    g = x.mean(axis=0)
    levels = []
    feats = x
    for lvl in range(1, num_levels + 1):
        if lvl > 1:
            feats = ad.maxpool2(feats)
        p = f"level{lvl}."
        if ablation:
            feats = residual_block(feats, params[p + "conv.w"], params[p + "conv.b"])
            mask = None
        else:
            feats, mask = hao(g, feats, params[p + "wq"], params[p + "wk"], params[p + "wv"])
            g = acu(g, feats, beta_of(ad.as_tensor(params[p + "beta"])))
        levels.append((feats, g, 2 ** (lvl - 1), mask))
    return levels


def build_pyramid(seq: FeatureSequence, params: ModelParams, config: ModelConfig):
    """Return the L :class:`PyramidLevel` objects for one sample."""
    if config.num_levels < 1:
        raise ValueError("num_levels must be >= 1")
    levels = pyramid_forward(seq.features, params.arrays, config.num_levels, config.ablation)
    return [PyramidLevel(level=i + 1, features=f.data, context=g.data, stride=s)
            for i, (f, g, s, _) in enumerate(levels)]


def similarity_profile(pyramid) -> list:
    """Mean cosine between each instant and its level's average instant, per level.

    Accepts :class:`PyramidLevel` objects or bare T x C matrices.
    """
    if len(pyramid) == 0:
        raise ValueError("empty pyramid")
    out = []
    for level in pyramid:
        feats = level.features if isinstance(level, PyramidLevel) else np.asarray(level, float)
        sims, _ = cosine_rows(feats.mean(axis=0), feats)
        out.append(float(sims.data.mean()))
    return out
