"""Training objective: focal classification loss, 1-D DIoU regression loss and
the per-sample context-aware contrastive loss (CaCL), plus their weighted sum.

All losses accept arrays or autodiff tensors. Array inputs return floats.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

PROB_CLAMP = 1e-12


def _result(t, keep):
    return t if keep else float(t.data)


def focal_loss(logits, labels, gamma=2.0, alpha=0.25):
    """Mean binary focal loss over all instants."""
    keep = isinstance(logits, Tensor)
    z = ad.as_tensor(logits)
    y = np.asarray(labels, dtype=np.float64)
    if z.shape != y.shape:
        raise ValueError(f"logits {z.shape} and labels {y.shape} differ in shape")
    if z.data.size == 0:
        return _result(Tensor(0.0), keep)
    p = z.sigmoid().clip(PROB_CLAMP, 1.0 - PROB_CLAMP)
    q = 1.0 - p
    pos = alpha * (q ** gamma if gamma else 1.0) * -p.log()
    neg = (1.0 - alpha) * (p ** gamma if gamma else 1.0) * -q.log()
    per_instant = ad.where(y > 0.5, pos, neg)
    return _result(per_instant.mean(), keep)


def diou_loss(pred, target):
    """Mean 1-D Distance-IoU loss over paired ``(start, end)`` intervals.

    ``1 - IoU + (center distance / enclosing length)^2`` per pair. A pair of
    identical zero-length intervals contributes 0.
    """
    keep = isinstance(pred, Tensor) or isinstance(target, Tensor)
    p, g = ad.as_tensor(pred), ad.as_tensor(target)
    if p.shape != g.shape:
        raise ValueError(f"pred {p.shape} and target {g.shape} differ in shape")
    if p.data.size == 0:
        return _result(Tensor(0.0), keep)
    p = p.reshape(-1, 2)
    g = g.reshape(-1, 2)
    ps, pe, gs, ge = p[:, 0], p[:, 1], g[:, 0], g[:, 1]
    inter = (ad.minimum(pe, ge) - ad.maximum(ps, gs)).relu()
    union = (pe - ps) + (ge - gs) - inter
    enclose = ad.maximum(pe, ge) - ad.minimum(ps, gs)
    ok = enclose.data > 0
    union_ok = union.data > 0
    iou = ad.where(union_ok, inter / ad.where(union_ok, union, 1.0), 1.0)
    centre = ((ps + pe) - (gs + ge)) * 0.5
    dist = ad.where(ok, (centre / ad.where(ok, enclose, 1.0)) ** 2, 0.0)
    return _result((1.0 - iou + dist).mean(), keep)


def _unit_rows(x):
    n = x.norm(axis=-1, keepdims=True)
    ok = n.data > 0
    return ad.where(ok, x / ad.where(ok, n, 1.0), 0.0)


def cacl_intra(context, features, mask, tau=0.1):
    """Intra-sample contrastive loss.

    Genuine instants (label 0) are the positives, forged ones (label 1) the
    negatives. With unit-normalised vectors,
    ``A = mean_pos exp(g.x/tau)``, ``B = sum_neg exp(g.x/tau)`` and the loss is
    ``-log(A / (A + B))``. Returns ``(loss, skipped)``; a sample lacking either
    class is skipped with loss 0.
    """
    keep = isinstance(context, Tensor) or isinstance(features, Tensor)
    labels = np.asarray(getattr(mask, "labels", mask))
    x = ad.as_tensor(features)
    if x.ndim != 2 or len(labels) != x.shape[0]:
        raise ValueError(f"mask length {len(labels)} does not match features {x.shape}")
    forged = labels == 1
    n_neg = int(forged.sum())
    n_pos = len(labels) - n_neg
    if n_pos == 0 or n_neg == 0:
        return _result(Tensor(0.0), keep), True
    g = _unit_rows(ad.as_tensor(context).reshape(1, -1)).reshape(-1)
    sims = _unit_rows(x) @ g
    # exp arguments are bounded by 1/tau, so no max-shift is needed for sane tau
    e = (sims / tau).exp()
    a = e[np.flatnonzero(~forged)].sum() / float(n_pos)
    b = e[np.flatnonzero(forged)].sum()
    return _result((a + b).log() - a.log(), keep), False


def cacl_batch(samples, tau=0.1):
    """Mean of ``cacl_intra`` over the non-skipped ``(context, features, mask)`` triples."""
    if len(samples) == 0:
        raise ValueError("empty batch")
    terms = []
    for context, features, mask in samples:
        loss, skipped = cacl_intra(context, features, mask, tau)
        if not skipped:
            terms.append(loss)
    keep = any(isinstance(t, Tensor) for t in terms)
    if not terms:
        return 0.0
    if keep:
        total = terms[0]
        for t in terms[1:]:
            total = total + t
        return total / float(len(terms))
    return float(sum(terms) / len(terms))


@dataclass
class LossBreakdown:
    cls: float
    reg: float
    cacl: float
    total: float
    counts: dict = field(default_factory=dict)


def total_loss(cls, reg, cacl, reg_weight=2.0, cacl_weight=0.5, counts=None):
    """Weighted objective ``cls + reg_weight * reg + cacl_weight * cacl``."""
    def val(x):
        return float(x.data) if isinstance(x, Tensor) else float(x)
    total = val(cls) + reg_weight * val(reg) + cacl_weight * val(cacl)
    return LossBreakdown(val(cls), val(reg), val(cacl), total, dict(counts or {}))


@dataclass
class ForwardPass:
    """A recorded forward computation ready for :func:`backward`."""

    loss: Tensor
    breakdown: LossBreakdown
    params: dict                      # name -> leaf Tensor
    inputs: list = field(default_factory=list)  # leaf Tensors for input features
    extras: dict = field(default_factory=dict)
    _consumed: bool = False


def backward(forward, wrt_inputs=False):
    """Exact gradients of the recorded total loss.

    Returns ``{name: grad}`` for every parameter, and with ``wrt_inputs=True``
    a second list holding the gradients for each sample's input features.
    """
    if not isinstance(forward, ForwardPass) or forward.loss is None:
        raise RuntimeError("backward called before a forward pass")
    if forward._consumed:
        raise RuntimeError("forward pass already differentiated; run forward again")
    leaves = list(forward.params.values()) + list(forward.inputs)
    for leaf in leaves:
        leaf.grad = None
    if forward.loss.requires_grad:
        forward.loss.backward()
    forward._consumed = True
    grads = {name: (t.grad if t.grad is not None else np.zeros_like(t.data))
             for name, t in forward.params.items()}
    if wrt_inputs:
        return grads, [t.grad if t.grad is not None else np.zeros_like(t.data)
                       for t in forward.inputs]
    return grads
