"""Epoch-start prototype clustering: feature extraction + Lloyd's k-means.

Clustering runs on L2-normalized encoder embeddings so Euclidean k-means
tracks the cosine geometry used by the losses. Empty clusters are repaired
deterministically by re-seeding onto the farthest member of the largest
cluster.
"""

from dataclasses import dataclass, field

import numpy as np
import torch

from .augment import apply_view_params, draw_view_params
from .config import derive_rng


class ClusteringError(ValueError):
    pass


@dataclass
class FeatureMatrix:
    rows: np.ndarray  # (n_samples, d_e)
    sample_ids: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.float64)
        self.sample_ids = np.asarray(self.sample_ids, dtype=np.int64)
        if self.rows.ndim != 2 or len(self.rows) != len(self.sample_ids):
            raise ClusteringError("feature rows and sample_ids must align")
        if not np.isfinite(self.rows).all():
            bad = int(self.sample_ids[np.where(~np.isfinite(self.rows).all(axis=1))[0][0]])
            raise ClusteringError(f"non-finite feature row for sample {bad}")
        if self.normalized:
            norms = np.linalg.norm(self.rows, axis=1)
            if not np.allclose(norms, 1.0, atol=1e-6):
                raise ClusteringError("normalized=True but rows are not unit length")


@dataclass
class PrototypeTable:
    centroids: np.ndarray  # (K, d_e)
    assignment: np.ndarray  # sample position -> cluster index
    epoch: int = 0
    sse: float = 0.0
    sample_ids: np.ndarray = None
    sse_history: list = field(default_factory=list)

    def __post_init__(self):
        self.centroids = np.asarray(self.centroids, dtype=np.float64)
        self.assignment = np.asarray(self.assignment, dtype=np.int64)
        if self.sample_ids is None:
            self.sample_ids = np.arange(len(self.assignment), dtype=np.int64)
        else:
            self.sample_ids = np.asarray(self.sample_ids, dtype=np.int64)
        if self.assignment.min(initial=0) < 0 or (
            len(self.assignment) and self.assignment.max() >= self.num_prototypes
        ):
            raise ClusteringError("cluster index out of range")

    @property
    def num_prototypes(self):
        return self.centroids.shape[0]

    def cluster_sizes(self):
        return np.bincount(self.assignment, minlength=self.num_prototypes)

    def members(self, k):
        return self.sample_ids[self.assignment == k]

    def assignment_of(self, ids):
        ids = np.asarray(ids, dtype=np.int64)
        n = len(self.sample_ids)
        if np.array_equal(self.sample_ids, np.arange(n)):
            return self.assignment[ids]
        lookup = {int(s): i for i, s in enumerate(self.sample_ids)}
        return np.array([self.assignment[lookup[int(i)]] for i in ids], dtype=np.int64)

    def to_text_table(self):
        lines = ["sample_id\tcluster"]
        for sid, a in zip(self.sample_ids, self.assignment):
            lines.append(f"{int(sid)}\t{int(a)}")
        return "\n".join(lines) + "\n"


def extract_epoch_features(dataset, encoder, aug_spec, seed, epoch=0, batch_size=512):
    """One augmentation draw per sample, encoded gradient-free and L2-normalized."""
    was_training = getattr(encoder, "training", False)
    if hasattr(encoder, "eval"):
        encoder.eval()
    ids = dataset.sample_ids
    chunks = []
    try:
        with torch.no_grad():
            for start in range(0, len(ids), batch_size):
                batch_ids = ids[start : start + batch_size]
                raw = dataset.take(batch_ids)
                params = [
                    draw_view_params(
                        aug_spec,
                        derive_rng(seed, f"feat/e{epoch}/i{int(sid)}"),
                        raw.shape[-2],
                        raw.shape[-1],
                    )
                    for sid in batch_ids
                ]
                views = apply_view_params(raw, params)
                h = encoder(views)
                finite = torch.isfinite(h).all(dim=1)
                if not bool(finite.all()):
                    bad = int(batch_ids[(~finite).nonzero()[0, 0]])
                    raise ClusteringError(f"non-finite activations for sample {bad}")
                norms = h.norm(dim=1, keepdim=True)
                if bool((norms == 0).any()):
                    bad = int(batch_ids[(norms[:, 0] == 0).nonzero()[0, 0]])
                    raise ClusteringError(f"zero-norm embedding for sample {bad}")
                chunks.append((h / norms).numpy().astype(np.float64))
    finally:
        if was_training and hasattr(encoder, "train"):
            encoder.train()
    return FeatureMatrix(np.concatenate(chunks, axis=0), ids, normalized=True)


def _sq_distances(x, centroids):
    d = (x * x).sum(axis=1)[:, None] + (centroids * centroids).sum(axis=1)[None, :]
    d -= 2.0 * (x @ centroids.T)
    return np.maximum(d, 0.0)


def _assign_keep_ties(x, centroids, current):
    """Nearest-centroid assignment, breaking exact ties toward `current`."""
    d = _sq_distances(x, centroids)
    nearest = d.argmin(axis=1)
    keep = d[np.arange(len(x)), current] <= d[np.arange(len(x)), nearest]
    return np.where(keep, current, nearest), d


def _plusplus_init(x, k, rng):
    """k-means++ seeding: spread initial centroids by D^2 sampling."""
    n = len(x)
    chosen = np.empty(k, dtype=np.int64)
    chosen[0] = rng.integers(n)
    d2 = ((x - x[chosen[0]]) ** 2).sum(axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0:
            # all remaining mass at distance 0: fall back to uniform picks
            chosen[i] = rng.integers(n)
        else:
            chosen[i] = rng.choice(n, p=d2 / total)
        d2 = np.minimum(d2, ((x - x[chosen[i]]) ** 2).sum(axis=1))
    return x[chosen].copy()


def kmeans(features, num_prototypes, rng, max_iter=100, tol=1e-4, epoch=0):
    """Lloyd's iterations until the max centroid shift drops below tol.

    Centroids are seeded k-means++ style; the per-iteration SSE is recorded
    and checked non-increasing; empty clusters are repaired before the table
    is returned.
    """
    x = features.rows
    n = len(x)
    if n < num_prototypes:
        raise ClusteringError(
            f"need at least {num_prototypes} samples for {num_prototypes} prototypes, got {n}"
        )
    centroids = _plusplus_init(x, num_prototypes, rng)
    sse_history = []
    assignment = None
    for _ in range(max_iter):
        d = _sq_distances(x, centroids)
        assignment = d.argmin(axis=1)
        sse = float(d[np.arange(n), assignment].sum())
        if sse_history and sse > sse_history[-1] + 1e-8 * (1.0 + sse_history[-1]):
            raise ClusteringError("SSE increased across Lloyd's iterations")
        sse_history.append(sse)
        new_centroids = centroids.copy()
        for k in range(num_prototypes):
            mask = assignment == k
            if mask.any():
                new_centroids[k] = x[mask].mean(axis=0)
        shift = float(np.linalg.norm(new_centroids - centroids, axis=1).max())
        centroids = new_centroids
        if shift < tol:
            break
    # final assignment against the final centroids keeps the nearest invariant
    d = _sq_distances(x, centroids)
    assignment = d.argmin(axis=1)
    sse = float(d[np.arange(n), assignment].sum())
    sse_history.append(sse)
    table = PrototypeTable(
        centroids=centroids,
        assignment=assignment,
        epoch=epoch,
        sse=sse,
        sample_ids=features.sample_ids,
        sse_history=sse_history,
    )
    return repair_empty_clusters(table, features, rng)


def repair_empty_clusters(table, features, rng, max_rounds=None):
    """Re-seed each empty centroid onto the farthest member of the largest
    cluster, hand that sample over, then reassign with ties kept in place.
    Idempotent once every cluster is non-empty.
    """
    sizes = table.cluster_sizes()
    if sizes.min() > 0:
        return table
    x = features.rows
    k_total = table.num_prototypes
    if k_total > len(x):
        raise ClusteringError("cannot repair: more prototypes than samples")
    centroids = table.centroids.copy()
    assignment = table.assignment.copy()
    rounds = max_rounds if max_rounds is not None else 10 * k_total
    for _ in range(rounds):
        sizes = np.bincount(assignment, minlength=k_total)
        empties = np.where(sizes == 0)[0]
        if len(empties) == 0:
            break
        k_empty = int(empties[0])
        donor = int(sizes.argmax())
        if sizes[donor] < 2:
            raise ClusteringError("cannot repair: no cluster has two members to split")
        members = np.where(assignment == donor)[0]
        dists = ((x[members] - centroids[donor]) ** 2).sum(axis=1)
        steal = int(members[dists.argmax()])
        centroids[k_empty] = x[steal]
        assignment[steal] = k_empty
        # tie-preserving reassignment restores the nearest-centroid invariant;
        # only adopt it when it does not drain another cluster
        proposed, _ = _assign_keep_ties(x, centroids, assignment)
        if np.bincount(proposed, minlength=k_total).min() > 0:
            assignment = proposed
    sizes = np.bincount(assignment, minlength=k_total)
    if sizes.min() == 0:
        raise ClusteringError("empty-cluster repair did not converge")
    d = _sq_distances(x, centroids)
    sse = float(d[np.arange(len(x)), assignment].sum())
    return PrototypeTable(
        centroids=centroids,
        assignment=assignment,
        epoch=table.epoch,
        sse=sse,
        sample_ids=table.sample_ids,
        sse_history=list(table.sse_history) + [sse],
    )
