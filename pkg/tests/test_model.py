"""Model bundle: builds, encode metadata, head re-initialization isolation."""

import numpy as np
import pytest
import torch

from spcl.config import TrainConfig
from spcl.model import ModelError, build_model, encode, reinit_heads
from spcl.sampling import ViewBatch

from conftest import interleaved_sibling, seeded


def config(embed_dim=8, proj_dim=4, k=6, seed=0):
    return TrainConfig(dataset_path="x", embed_dim=embed_dim, proj_dim=proj_dim, num_prototypes=k, seed=seed)


def snapshot(module):
    return {k: v.detach().clone() for k, v in module.state_dict().items()}


def same_state(a, b):
    return all(torch.equal(a[k], b[k]) for k in a) and set(a) == set(b)


def test_identity_encoder_is_identity():
    bundle = build_model(config(embed_dim=12), "identity", input_dim=12)
    x = torch.randn(5, 3, 2, 2)
    out = bundle.encoder(x)
    assert torch.equal(out, x.reshape(5, 12))


def test_identity_encoder_rejects_wrong_dim():
    bundle = build_model(config(embed_dim=5), "identity", input_dim=5)
    with pytest.raises(ModelError):
        bundle.encoder(torch.randn(2, 12))


def test_linear_encoder_exact_matmul():
    bundle = build_model(config(embed_dim=6), "linear", input_dim=10)
    x = torch.randn(4, 10)
    assert torch.allclose(bundle.encoder(x), x @ bundle.encoder.proj.weight.T)


def test_build_deterministic():
    a = build_model(config(seed=5), "small_resnet")
    b = build_model(config(seed=5), "small_resnet")
    for ma, mb in zip(a.named_modules_flat().values(), b.named_modules_flat().values()):
        assert same_state(snapshot(ma), snapshot(mb))
    c = build_model(config(seed=6), "small_resnet")
    assert not same_state(snapshot(a.head_c), snapshot(c.head_c))


def test_head_p_parameter_count():
    cfg = config(embed_dim=16, k=512)
    bundle = build_model(cfg, "identity", input_dim=16)
    count = sum(p.numel() for p in bundle.head_p.parameters())
    assert count == 16 * 512 + 512


def test_unknown_arch_rejected():
    with pytest.raises(ModelError):
        build_model(config(), "transformer9000")


def test_encode_shapes_and_metadata():
    cfg = config(embed_dim=12)
    bundle = build_model(cfg, "identity", input_dim=12)
    n = 4
    vb = ViewBatch(
        views=torch.randn(2 * n, 3, 2, 2),
        sample_ids=np.repeat(np.arange(n), 2),
        source_proto=np.repeat([0, 0, 1, 1], 2),
        sibling=interleaved_sibling(2 * n),
        n_anchor_views=4,
    )
    emb = encode(bundle, vb)
    assert emb.h.shape == (8, 12)
    assert np.array_equal(emb.sibling[emb.sibling], np.arange(8))
    assert np.array_equal(emb.source_proto, vb.source_proto)
    assert emb.n_anchor_views == 4


def test_encode_linear_stub_exact():
    cfg = config(embed_dim=7)
    bundle = build_model(cfg, "linear", input_dim=12)
    views = torch.randn(6, 3, 2, 2)
    vb = ViewBatch(
        views=views,
        sample_ids=np.repeat(np.arange(3), 2),
        source_proto=np.zeros(6, dtype=int),
        sibling=interleaved_sibling(6),
        n_anchor_views=2,
    )
    emb = encode(bundle, vb)
    assert torch.allclose(emb.h, views.reshape(6, 12) @ bundle.encoder.proj.weight.T)


def test_reinit_empty_scope_is_noop():
    bundle = build_model(config(), "small_resnet")
    before = {n: snapshot(m) for n, m in bundle.named_modules_flat().items()}
    reinit_heads(bundle, (), seed=0, epoch=3)
    after = {n: snapshot(m) for n, m in bundle.named_modules_flat().items()}
    for name in before:
        assert same_state(before[name], after[name])


def test_reinit_scope_isolation():
    bundle = build_model(config(), "small_resnet")
    before = {n: snapshot(m) for n, m in bundle.named_modules_flat().items()}
    reinit_heads(bundle, ("g_p",), seed=0, epoch=1)
    after = {n: snapshot(m) for n, m in bundle.named_modules_flat().items()}
    assert same_state(before["encoder"], after["encoder"])
    assert same_state(before["g_c"], after["g_c"])
    assert same_state(before["g_m"], after["g_m"])
    assert not same_state(before["g_p"], after["g_p"])


def test_reinit_deterministic():
    a = build_model(config(seed=2), "small_resnet")
    b = build_model(config(seed=2), "small_resnet")
    reinit_heads(a, ("g_c", "g_m", "g_p"), seed=2, epoch=4)
    reinit_heads(b, ("g_c", "g_m", "g_p"), seed=2, epoch=4)
    for name in ("g_c", "g_m", "g_p"):
        assert same_state(snapshot(a.named_modules_flat()[name]), snapshot(b.named_modules_flat()[name]))
    c = build_model(config(seed=2), "small_resnet")
    reinit_heads(c, ("g_c",), seed=2, epoch=5)
    assert not same_state(snapshot(a.head_c), snapshot(c.head_c))


def test_parameter_count_positive_and_stable():
    bundle = build_model(config(), "small_resnet")
    assert bundle.parameter_count > 0
    assert bundle.parameter_count == build_model(config(), "small_resnet").parameter_count


def test_resnet50_encoder_builds():
    cfg = config(embed_dim=2048, proj_dim=8, k=4)
    bundle = build_model(cfg, "resnet50")
    out = bundle.encoder(torch.randn(1, 3, 64, 64))
    assert out.shape == (1, 2048)
    with pytest.raises(ModelError):
        build_model(config(embed_dim=128), "resnet50")
