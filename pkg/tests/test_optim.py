"""LARS update rule against hand and loop oracles; schedule endpoints."""

import math

import numpy as np
import pytest
import torch

from spcl.optim import OptimError, lars_update, lr_schedule, sgd_momentum_update

from conftest import seeded


def ref_lars_scalarwise(params, grads, bufs, lr, wd, trust, momentum):
    """Per-parameter loop reference; norms computed with plain sums."""
    out = []
    new_bufs = []
    for w, g, buf in zip(params, grads, bufs):
        w = [float(v) for v in np.asarray(w).reshape(-1)]
        g = [float(v) for v in np.asarray(g).reshape(-1)]
        buf = [float(v) for v in np.asarray(buf).reshape(-1)]
        w_norm = math.sqrt(sum(v * v for v in w))
        g_norm = math.sqrt(sum(v * v for v in g))
        denom = g_norm + wd * w_norm
        if w_norm > 0 and denom > 0:
            local = trust * w_norm / denom
        else:
            local = 0.0 if denom == 0 else 1.0
        nw, nb = [], []
        for wi, gi, bi in zip(w, g, buf):
            step = lr * local * (gi + wd * wi)
            bi = momentum * bi + step
            nb.append(bi)
            nw.append(wi - bi)
        out.append(nw)
        new_bufs.append(nb)
    return out, new_bufs


def test_zero_grad_zero_decay_leaves_params():
    w = torch.tensor([1.0, -2.0, 3.0], dtype=torch.float64)
    g = torch.zeros(3, dtype=torch.float64)
    buf = torch.zeros(3, dtype=torch.float64)
    lars_update([w], [g], [buf], lr=0.1, weight_decay=0.0, trust_coefficient=1.0, momentum=0.9)
    assert torch.equal(w, torch.tensor([1.0, -2.0, 3.0], dtype=torch.float64))


def test_scalar_hand_oracle():
    # w=2, g=1, wd=0, trust=1, lr=0.1 -> local_lr = 2, w' = 2 - 0.1*2*1 = 1.8
    w = torch.tensor([2.0], dtype=torch.float64)
    g = torch.tensor([1.0], dtype=torch.float64)
    buf = torch.zeros(1, dtype=torch.float64)
    lars_update([w], [g], [buf], lr=0.1, weight_decay=0.0, trust_coefficient=1.0, momentum=0.0)
    assert float(w) == pytest.approx(1.8, abs=1e-12)


def test_lars_matches_loop_reference():
    rng = seeded(0)
    for trial in range(30):
        shapes = [(3,), (2, 4), (5,)]
        params = [torch.tensor(rng.normal(size=s), dtype=torch.float64) for s in shapes]
        grads = [torch.tensor(rng.normal(size=s), dtype=torch.float64) for s in shapes]
        bufs = [torch.tensor(rng.normal(size=s) * 0.1, dtype=torch.float64) for s in shapes]
        lr = float(rng.uniform(0.01, 1.0))
        wd = float(rng.uniform(0.0, 0.1))
        trust = float(rng.uniform(0.001, 1.0))
        mom = float(rng.uniform(0.0, 0.95))
        ref_w, ref_b = ref_lars_scalarwise(
            [p.numpy().copy() for p in params],
            [g.numpy() for g in grads],
            [b.numpy().copy() for b in bufs],
            lr, wd, trust, mom,
        )
        lars_update(params, grads, bufs, lr, wd, trust, mom)
        for p, b, rw, rb in zip(params, bufs, ref_w, ref_b):
            assert np.max(np.abs(p.numpy().reshape(-1) - np.array(rw))) <= 1e-7
            assert np.max(np.abs(b.numpy().reshape(-1) - np.array(rb))) <= 1e-7


def test_zero_norm_param_still_trains():
    # zero-initialized tensor must not be frozen by the trust ratio
    w = torch.zeros(3, dtype=torch.float64)
    g = torch.ones(3, dtype=torch.float64)
    buf = torch.zeros(3, dtype=torch.float64)
    lars_update([w], [g], [buf], lr=0.1, weight_decay=0.0, trust_coefficient=0.001, momentum=0.0)
    assert not torch.equal(w, torch.zeros(3, dtype=torch.float64))


def test_shape_mismatch_rejected():
    with pytest.raises(OptimError):
        lars_update([torch.zeros(2)], [torch.zeros(3)], [torch.zeros(2)], 0.1, 0.0, 1.0)


def test_sgd_momentum_basic():
    w = torch.tensor([1.0], dtype=torch.float64)
    g = torch.tensor([0.5], dtype=torch.float64)
    buf = torch.zeros(1, dtype=torch.float64)
    sgd_momentum_update([w], [g], [buf], lr=0.1, weight_decay=0.0, momentum=0.0)
    assert float(w) == pytest.approx(0.95, abs=1e-12)


# ---------------------------------------------------------------------------
# schedule
# ---------------------------------------------------------------------------


def test_schedule_warmup_endpoint_exact():
    assert lr_schedule(100, base_lr=2.0, total_steps=1000, warmup_steps=100) == 2.0


def test_schedule_cosine_midpoint():
    mid = 100 + (1000 - 100) // 2
    lr = lr_schedule(mid, base_lr=2.0, total_steps=1000, warmup_steps=100)
    assert lr == pytest.approx(1.0, abs=1e-12)


def test_schedule_final_step_zero():
    assert lr_schedule(1000, base_lr=2.0, total_steps=1000, warmup_steps=100) == pytest.approx(0.0, abs=1e-12)


def test_schedule_linear_ramp():
    for s in range(0, 100):
        assert lr_schedule(s, base_lr=2.0, total_steps=1000, warmup_steps=100) == pytest.approx(2.0 * s / 100)


def test_schedule_out_of_range():
    with pytest.raises(OptimError):
        lr_schedule(-1, base_lr=1.0, total_steps=10, warmup_steps=0)
    with pytest.raises(OptimError):
        lr_schedule(11, base_lr=1.0, total_steps=10, warmup_steps=0)


def test_schedule_no_warmup():
    assert lr_schedule(0, base_lr=1.0, total_steps=10, warmup_steps=0) == 1.0
