"""The three training losses and their weighted combination.

All losses are pure functions of their inputs, differentiable through torch
autograd, and use sum reduction (loss weights absorb scale). The contrastive
term runs on projected vectors z; the metric and prototypical terms run on
encoder embeddings h.
"""

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F


class LossError(ValueError):
    pass


@dataclass
class EmbeddingBatch:
    h: torch.Tensor  # (V, d_e)
    sibling: np.ndarray
    source_proto: np.ndarray
    sample_ids: np.ndarray = None
    n_anchor_views: int = 0

    def __post_init__(self):
        if not torch.isfinite(self.h).all():
            raise LossError("non-finite embedding values")


@dataclass
class ProjectionBatch:
    z: torch.Tensor  # (V, d_c)
    sibling: np.ndarray
    source_proto: np.ndarray = None

    def __post_init__(self):
        if not torch.isfinite(self.z).all():
            raise LossError("non-finite projection values")
        sib = np.asarray(self.sibling, dtype=np.int64)
        v = len(sib)
        if v != self.z.shape[0] or not (sib[sib] == np.arange(v)).all() or (sib == np.arange(v)).any():
            raise LossError("every view needs a distinct sibling (involution)")
        self.sibling = sib


def cosine_similarity(u, v):
    """u.v / (|u||v|) for two vectors; rejects zero-norm input."""
    u = torch.as_tensor(u, dtype=torch.float64).reshape(-1)
    v = torch.as_tensor(v, dtype=torch.float64).reshape(-1)
    nu, nv = float(u.norm()), float(v.norm())
    if nu == 0.0 or nv == 0.0:
        raise LossError("cosine similarity undefined for zero-norm input")
    return float(u @ v) / (nu * nv)


def nt_xent(batch, tau, exclude_positive=True):
    """Temperature-scaled contrastive loss, sum-reduced over all views.

    Every view is an anchor; its positive is the sibling view. With
    exclude_positive the denominator ranges over all views except the anchor
    itself and its positive (which can drive the loss negative); without it,
    the positive stays in the denominator (the familiar convention).
    """
    if not tau > 0:
        raise LossError("temperature must be > 0")
    z = batch.z
    v = z.shape[0]
    if v < 4:
        raise LossError("need at least 4 views (2 samples)")
    norms = z.norm(dim=1, keepdim=True)
    if bool((norms == 0).any()):
        raise LossError("zero-norm projection row")
    zn = z / norms
    sim = (zn @ zn.T) / tau
    arange = torch.arange(v)
    sib = torch.as_tensor(batch.sibling)
    pos = sim[arange, sib]
    mask = torch.zeros(v, v, dtype=torch.bool)
    mask[arange, arange] = True
    if exclude_positive:
        mask[arange, sib] = True
    denom = torch.logsumexp(sim.masked_fill(mask, float("-inf")), dim=1)
    return (denom - pos).sum()


def siamese_metric_loss(batch, plan, head_m):
    """Binary verification loss over elementwise-absolute-difference pairs.

    Each anchor view contributes one same-prototype pair scored toward 1 and
    one cross-prototype pair scored toward 0; head_m emits a single logit.
    """
    a = batch.n_anchor_views
    if a < 1:
        raise LossError("batch carries no anchor views")
    intra = np.asarray(plan.intra, dtype=np.int64)
    inter = np.asarray(plan.inter, dtype=np.int64)
    if len(intra) != a or len(inter) != a:
        raise LossError("pairing plan must cover every anchor view")
    h = batch.h
    v = h.shape[0]
    if intra.min() < 0 or intra.max() >= v or inter.min() < 0 or inter.max() >= v:
        raise LossError("pairing plan refers to views outside the batch")
    anchors = h[:a]
    pos_logit = head_m(torch.abs(anchors - h[torch.as_tensor(intra)])).reshape(-1)
    neg_logit = head_m(torch.abs(anchors - h[torch.as_tensor(inter)])).reshape(-1)
    pos = F.binary_cross_entropy_with_logits(pos_logit, torch.ones_like(pos_logit), reduction="sum")
    neg = F.binary_cross_entropy_with_logits(neg_logit, torch.zeros_like(neg_logit), reduction="sum")
    return pos + neg


def prototypical_ce(batch, labels, head_p):
    """Softmax cross-entropy from embeddings to per-view cluster labels."""
    y = torch.as_tensor(np.asarray(labels, dtype=np.int64))
    logits = head_p(batch.h)
    if y.numel() != logits.shape[0]:
        raise LossError("one label per view required")
    if bool(y.min() < 0) or bool(y.max() >= logits.shape[1]):
        raise LossError(f"label out of range [0, {logits.shape[1]})")
    return F.cross_entropy(logits, y, reduction="sum")


def symmetric_prototypical_ce(batch, labels, head_p, a_sce=1.0, b_sce=1.0, clamp=-4.0):
    """Forward cross-entropy plus reverse cross-entropy with log(0) clamped.

    The reverse term scores -sum_k p_k * log(one_hot_k) with log(0) replaced
    by `clamp` (< 0); at b_sce=0 this reduces exactly to a_sce * the plain
    prototypical cross-entropy.
    """
    if not clamp < 0:
        raise LossError("clamp must be < 0")
    y = torch.as_tensor(np.asarray(labels, dtype=np.int64))
    logits = head_p(batch.h)
    if y.numel() != logits.shape[0]:
        raise LossError("one label per view required")
    if bool(y.min() < 0) or bool(y.max() >= logits.shape[1]):
        raise LossError(f"label out of range [0, {logits.shape[1]})")
    forward = F.cross_entropy(logits, y, reduction="sum")
    if b_sce == 0:
        return a_sce * forward
    p = F.softmax(logits, dim=1)
    p_true = p[torch.arange(len(y)), y]
    reverse = (-clamp * (1.0 - p_true)).sum()
    return a_sce * forward + b_sce * reverse


def total_loss(l_contra, l_metric, l_proto, weights):
    """alpha * contrastive + beta * metric + gamma * prototypical."""
    for name, value in (("contrastive", l_contra), ("metric", l_metric), ("prototypical", l_proto)):
        v = float(value.detach()) if torch.is_tensor(value) else float(value)
        if not math.isfinite(v):
            raise LossError(f"non-finite {name} loss: {v}")
    return weights.alpha * l_contra + weights.beta * l_metric + weights.gamma * l_proto
