"""Step-batch construction: prototype pair choice, index draws, two views each.

Anchor-side indices come from cluster p, the other half either from one
cluster q (single_q) or from everything outside p (mixed_q, marked with
MIXED_Q). Views are laid out sample-major: views 2j and 2j+1 belong to the
j-th drawn sample, anchors first.
"""

import math
from dataclasses import dataclass

import numpy as np
import torch

from .augment import apply_view_params, draw_view_params
from .config import derive_rng

MIXED_Q = -1


class SamplingError(ValueError):
    pass


@dataclass
class StepBatch:
    p: int
    q: int  # cluster index, or MIXED_Q for the "everything but p" mixture
    idx_p: np.ndarray
    idx_q: np.ndarray

    def __post_init__(self):
        self.idx_p = np.asarray(self.idx_p, dtype=np.int64)
        self.idx_q = np.asarray(self.idx_q, dtype=np.int64)
        if self.p == self.q:
            raise SamplingError("p and q must differ")
        if len(self.idx_p) != len(self.idx_q):
            raise SamplingError("idx_p and idx_q must have equal size")

    @property
    def sample_ids(self):
        return np.concatenate([self.idx_p, self.idx_q])


@dataclass
class ViewBatch:
    views: torch.Tensor  # (2 * n_samples, C, ...) sample-major pairs
    sample_ids: np.ndarray  # per view
    source_proto: np.ndarray  # per view
    sibling: np.ndarray  # involution over view indices
    n_anchor_views: int

    def __post_init__(self):
        self.sample_ids = np.asarray(self.sample_ids, dtype=np.int64)
        self.source_proto = np.asarray(self.source_proto, dtype=np.int64)
        self.sibling = np.asarray(self.sibling, dtype=np.int64)
        v = len(self.sibling)
        if not (self.sibling[self.sibling] == np.arange(v)).all() or (self.sibling == np.arange(v)).any():
            raise SamplingError("sibling map must be a fixed-point-free involution")
        if (self.sample_ids != self.sample_ids[self.sibling]).any():
            raise SamplingError("sibling views must share a sample id")


def eligible_clusters(table, min_size=2):
    sizes = table.cluster_sizes()
    return np.where(sizes >= min_size)[0]


def choose_prototype_pair(table, rng, mode="single_q"):
    """Uniform anchor prototype p; q uniform among the rest, or MIXED_Q."""
    eligible = eligible_clusters(table)
    if len(eligible) < 2:
        raise SamplingError(
            f"need at least 2 usable clusters (size >= 2), found {len(eligible)}"
        )
    p = int(eligible[rng.integers(len(eligible))])
    if mode == "mixed_q":
        return p, MIXED_Q
    others = eligible[eligible != p]
    q = int(others[rng.integers(len(others))])
    return p, q


def _draw(pool, n, rng):
    pool = np.asarray(pool, dtype=np.int64)
    if len(pool) >= n:
        return rng.choice(pool, size=n, replace=False)
    # small clusters still train: fall back to replacement
    return rng.choice(pool, size=n, replace=True)


def sample_step_batch(table, p, q, n_per_side, rng):
    members_p = table.members(p)
    if len(members_p) == 0:
        raise SamplingError(f"cluster {p} is empty")
    if q == MIXED_Q:
        pool_q = table.sample_ids[table.assignment != p]
    else:
        pool_q = table.members(q)
    if len(pool_q) == 0:
        raise SamplingError(f"no samples outside prototype {p} to draw from")
    return StepBatch(p=p, q=q, idx_p=_draw(members_p, n_per_side, rng), idx_q=_draw(pool_q, n_per_side, rng))


def make_views(dataset, sample_ids, sample_protos, aug_spec, seed, stream_prefix, n_anchor_samples=None):
    """Two independent augmentation draws per drawn sample.

    Each view's rng stream is keyed by its slot in the batch, so repeated
    sample ids (replacement draws) still get fresh, independent views and
    per-view work can be parallelized without changing results.
    """
    sample_ids = np.asarray(sample_ids, dtype=np.int64)
    sample_protos = np.asarray(sample_protos, dtype=np.int64)
    if len(sample_ids) != len(sample_protos):
        raise SamplingError("sample_ids and sample_protos must align")
    raw = dataset.take(sample_ids)
    finite = torch.isfinite(raw.reshape(len(raw), -1)).all(dim=1)
    if not bool(finite.all()):
        bad = int(sample_ids[(~finite).nonzero()[0, 0]])
        raise SamplingError(f"corrupt sample {bad}: non-finite values")
    height, width = raw.shape[-2], raw.shape[-1]
    params = []
    for slot in range(len(sample_ids)):
        for view in range(2):
            rng = derive_rng(seed, f"{stream_prefix}/slot{slot}/v{view}")
            params.append(draw_view_params(aug_spec, rng, height, width))
    doubled = raw.repeat_interleave(2, dim=0)
    views = apply_view_params(doubled, params)
    v = 2 * len(sample_ids)
    sibling = np.arange(v) ^ 1
    n_anchor = len(sample_ids) if n_anchor_samples is None else n_anchor_samples
    return ViewBatch(
        views=views,
        sample_ids=np.repeat(sample_ids, 2),
        source_proto=np.repeat(sample_protos, 2),
        sibling=sibling,
        n_anchor_views=2 * n_anchor,
    )


def make_step_views(dataset, table, batch, aug_spec, seed, epoch, step):
    ids = batch.sample_ids
    protos = table.assignment_of(ids)
    return make_views(
        dataset,
        ids,
        protos,
        aug_spec,
        seed,
        f"views/e{epoch}/s{step}",
        n_anchor_samples=len(batch.idx_p),
    )


@dataclass
class PairingPlan:
    """Partner view indices for the metric loss, one row per anchor view."""

    intra: np.ndarray
    inter: np.ndarray

    def __post_init__(self):
        self.intra = np.asarray(self.intra, dtype=np.int64)
        self.inter = np.asarray(self.inter, dtype=np.int64)
        if len(self.intra) != len(self.inter):
            raise SamplingError("pairing plan sides must align")


def build_pairing_plan(view_batch, rng):
    """For each anchor view: one same-prototype partner from a different
    sample (sibling fallback when the anchor half has a single sample) and
    one partner from the non-anchor half.
    """
    a = view_batch.n_anchor_views
    v = len(view_batch.sibling)
    if a < 2 or v <= a:
        raise SamplingError("pairing plan needs anchor views and non-anchor views")
    ids = view_batch.sample_ids
    intra = np.empty(a, dtype=np.int64)
    inter = np.empty(a, dtype=np.int64)
    anchor_ids = ids[:a]
    for i in range(a):
        candidates = np.where(anchor_ids != ids[i])[0]
        if len(candidates) == 0:
            intra[i] = view_batch.sibling[i]
        else:
            intra[i] = candidates[rng.integers(len(candidates))]
        inter[i] = a + rng.integers(v - a)
    return PairingPlan(intra=intra, inter=inter)


def epoch_steps(n_samples, batch_size):
    """Steps per epoch: one pass worth of samples at the configured batch."""
    return max(1, math.ceil(n_samples / batch_size))
