"""Layer-wise adaptive rate scaling, an SGD-momentum fallback, and the
linear-warmup + cosine-decay learning-rate schedule.
"""

import math

import torch


class OptimError(ValueError):
    pass


def lars_update(params, grads, buffers, lr, weight_decay, trust_coefficient, momentum=0.0):
    """One LARS step over per-layer tensors, in place.

    Per tensor: local_lr = trust * |w| / (|g| + wd * |w|) when both norms are
    positive, else 1 (the literal ratio would freeze zero-initialized tensors).
    The momentum buffer accumulates lr * local_lr * (g + wd * w) and is
    subtracted from the weights.
    """
    if len(params) != len(grads) or len(params) != len(buffers):
        raise OptimError("params, grads and buffers must align")
    with torch.no_grad():
        for w, g, buf in zip(params, grads, buffers):
            if w.shape != g.shape or w.shape != buf.shape:
                raise OptimError(f"shape mismatch: {tuple(w.shape)} vs {tuple(g.shape)}")
            w_norm = float(w.norm())
            g_norm = float(g.norm())
            denom = g_norm + weight_decay * w_norm
            if w_norm > 0.0 and denom > 0.0:
                local_lr = trust_coefficient * w_norm / denom
            else:
                local_lr = 0.0 if denom == 0.0 else 1.0
            step = (g + weight_decay * w) * (lr * local_lr)
            buf.mul_(momentum).add_(step)
            w.sub_(buf)
    return params


def sgd_momentum_update(params, grads, buffers, lr, weight_decay, momentum=0.0):
    """Plain momentum SGD with decoupled-from-nothing L2 decay, in place."""
    if len(params) != len(grads) or len(params) != len(buffers):
        raise OptimError("params, grads and buffers must align")
    with torch.no_grad():
        for w, g, buf in zip(params, grads, buffers):
            if w.shape != g.shape:
                raise OptimError(f"shape mismatch: {tuple(w.shape)} vs {tuple(g.shape)}")
            buf.mul_(momentum).add_(g + weight_decay * w)
            w.sub_(buf, alpha=lr)
    return params


class Optimizer:
    """Owns per-parameter momentum buffers for a model bundle.

    The learning rate is supplied per step (the schedule lives outside);
    buffers are exposed for checkpointing and are zeroed for any parameter
    that gets re-initialized.
    """

    def __init__(self, named_params, kind, weight_decay, trust_coefficient, momentum):
        if kind not in ("lars", "sgd_momentum"):
            raise OptimError(f"unknown optimizer kind {kind!r}")
        self.kind = kind
        self.weight_decay = weight_decay
        self.trust_coefficient = trust_coefficient
        self.momentum = momentum
        self.named_params = dict(named_params)
        self.buffers = {name: torch.zeros_like(p) for name, p in self.named_params.items()}

    def step(self, lr):
        names = [n for n, p in self.named_params.items() if p.grad is not None]
        params = [self.named_params[n] for n in names]
        grads = [self.named_params[n].grad for n in names]
        bufs = [self.buffers[n] for n in names]
        if self.kind == "lars":
            lars_update(params, grads, bufs, lr, self.weight_decay, self.trust_coefficient, self.momentum)
        else:
            sgd_momentum_update(params, grads, bufs, lr, self.weight_decay, self.momentum)

    def zero_grad(self):
        for p in self.named_params.values():
            p.grad = None

    def reset_buffers(self, name_prefix):
        for name, buf in self.buffers.items():
            if name.startswith(name_prefix):
                buf.zero_()

    def state_arrays(self):
        return {name: buf.detach().cpu().numpy().copy() for name, buf in self.buffers.items()}

    def load_state_arrays(self, arrays):
        if set(arrays) != set(self.buffers):
            raise OptimError("optimizer state does not match parameter set")
        with torch.no_grad():
            for name, arr in arrays.items():
                self.buffers[name].copy_(torch.from_numpy(arr))


def bundle_optimizer(bundle, opt_config):
    named = {}
    for mod_name, module in bundle.named_modules_flat().items():
        for p_name, p in module.named_parameters():
            named[f"{mod_name}.{p_name}"] = p
    return Optimizer(
        named,
        kind=opt_config.fallback,
        weight_decay=opt_config.weight_decay,
        trust_coefficient=opt_config.trust_coefficient,
        momentum=opt_config.momentum,
    )


def lr_schedule(step, base_lr, total_steps, warmup_steps):
    """Linear ramp 0 -> base_lr over warmup, then cosine decay to 0."""
    if step < 0 or step > total_steps:
        raise OptimError(f"step {step} out of range [0, {total_steps}]")
    if warmup_steps >= total_steps:
        raise OptimError("warmup must end before the run does")
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * step / warmup_steps
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))
