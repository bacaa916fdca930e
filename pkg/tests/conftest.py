"""Shared helpers: small random batches and float64 heads for oracle tests."""

import numpy as np
import pytest
import torch

from spcl.losses import EmbeddingBatch, ProjectionBatch
from spcl.model import MLPHead


def seeded(seed):
    return np.random.default_rng(seed)


def interleaved_sibling(n_views):
    return np.arange(n_views) ^ 1


def random_projection_batch(rng, n_samples, dim, dtype=torch.float64, scale=1.0):
    z = torch.tensor(rng.normal(size=(2 * n_samples, dim)) * scale, dtype=dtype)
    return ProjectionBatch(z=z, sibling=interleaved_sibling(2 * n_samples))


def random_embedding_batch(rng, n_samples, dim, n_anchor_samples=None, num_protos=4, dtype=torch.float64):
    v = 2 * n_samples
    h = torch.tensor(rng.normal(size=(v, dim)), dtype=dtype)
    protos = np.repeat(rng.integers(0, num_protos, size=n_samples), 2)
    anchors = n_samples if n_anchor_samples is None else n_anchor_samples
    return EmbeddingBatch(
        h=h,
        sibling=interleaved_sibling(v),
        source_proto=protos,
        sample_ids=np.repeat(np.arange(n_samples), 2),
        n_anchor_views=2 * anchors,
    )


def double_mlp_head(rng, d_in, d_out, requires_grad=False):
    head = MLPHead(d_in, d_out).double()
    with torch.no_grad():
        for p in head.parameters():
            p.copy_(torch.tensor(rng.normal(size=p.shape, scale=0.5)))
    for p in head.parameters():
        p.requires_grad_(requires_grad)
    return head


def double_linear_head(rng, d_in, d_out, requires_grad=False):
    head = torch.nn.Linear(d_in, d_out).double()
    with torch.no_grad():
        head.weight.copy_(torch.tensor(rng.normal(size=(d_out, d_in), scale=0.5)))
        head.bias.copy_(torch.tensor(rng.normal(size=(d_out,), scale=0.5)))
    for p in head.parameters():
        p.requires_grad_(requires_grad)
    return head


@pytest.fixture
def tmp_out(tmp_path):
    return tmp_path
