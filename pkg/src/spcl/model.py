"""Encoder f plus the three projection heads g_c, g_m, g_p.

Heads: g_c and g_m are 2-layer MLPs (hidden width = embed dim); g_p is a
single linear layer onto the prototype count. Initialization is driven by
derived seeds per component so re-runs and per-epoch head re-initialization
are reproducible.
"""

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .config import derive_torch_seed
from .losses import EmbeddingBatch, LossError

ENCODER_ARCHS = ("identity", "linear", "small_resnet", "resnet50")


class ModelError(ValueError):
    pass


class IdentityEncoder(nn.Module):
    """Test-scale stub: flattens and passes through; requires d_e = input dim."""

    def __init__(self, embed_dim):
        super().__init__()
        self.embed_dim = embed_dim

    def forward(self, x):
        flat = x.reshape(x.shape[0], -1)
        if flat.shape[1] != self.embed_dim:
            raise ModelError(f"identity encoder needs inputs of dim {self.embed_dim}, got {flat.shape[1]}")
        return flat


class LinearEncoder(nn.Module):
    """Test-scale stub: single bias-free linear map on flattened input."""

    def __init__(self, input_dim, embed_dim):
        super().__init__()
        self.proj = nn.Linear(input_dim, embed_dim, bias=False)

    def forward(self, x):
        return self.proj(x.reshape(x.shape[0], -1))


class ResidualBlock(nn.Module):
    def __init__(self, c_in, c_out, stride):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, stride=1, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(c_out)
        if stride != 1 or c_in != c_out:
            self.shortcut = nn.Sequential(
                nn.Conv2d(c_in, c_out, 1, stride=stride, bias=False), nn.BatchNorm2d(c_out)
            )
        else:
            self.shortcut = nn.Identity()

    def forward(self, x):
        out = torch.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return torch.relu(out + self.shortcut(x))


class SmallResNet(nn.Module):
    """Desk-scale residual CNN for 32x32 images."""

    def __init__(self, embed_dim, width=8):
        super().__init__()
        self.stem = nn.Sequential(
            nn.Conv2d(3, width, 3, stride=2, padding=1, bias=False),
            nn.BatchNorm2d(width),
            nn.ReLU(inplace=True),
        )
        self.block1 = ResidualBlock(width, 2 * width, stride=2)
        self.block2 = ResidualBlock(2 * width, 4 * width, stride=2)
        self.fc = nn.Linear(4 * width, embed_dim)

    def forward(self, x):
        out = self.stem(x)
        out = self.block1(out)
        out = self.block2(out)
        out = out.mean(dim=(2, 3))
        return self.fc(out)


class MLPHead(nn.Module):
    """2-layer head, hidden width = input width, ReLU in between."""

    def __init__(self, d_in, d_out):
        super().__init__()
        self.fc1 = nn.Linear(d_in, d_in)
        self.fc2 = nn.Linear(d_in, d_out)

    def forward(self, x):
        return self.fc2(torch.relu(self.fc1(x)))


def _init_module(module, seed):
    """Deterministic re-randomization of a module's parameters.

    Linear/conv weights get the fan-in uniform scheme, biases the matching
    uniform range; norm layers reset to identity.
    """
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, (nn.Linear, nn.Conv2d)):
                fan_in = m.weight.shape[1] * (m.weight[0][0].numel() if m.weight.ndim > 2 else 1)
                bound = math.sqrt(1.0 / fan_in) if fan_in > 0 else 0.0
                m.weight.uniform_(-bound, bound, generator=gen)
                if m.bias is not None:
                    m.bias.uniform_(-bound, bound, generator=gen)
            elif isinstance(m, (nn.BatchNorm2d, nn.BatchNorm1d)):
                m.weight.fill_(1.0)
                m.bias.fill_(0.0)
                m.running_mean.fill_(0.0)
                m.running_var.fill_(1.0)
                m.num_batches_tracked.fill_(0)
    return module


@dataclass
class ModelBundle:
    encoder: nn.Module
    head_c: nn.Module
    head_m: nn.Module
    head_p: nn.Module
    encoder_arch: str
    embed_dim: int
    proj_dim: int
    num_prototypes: int
    input_dim: int | None = None

    def heads(self):
        return {"g_c": self.head_c, "g_m": self.head_m, "g_p": self.head_p}

    def named_modules_flat(self):
        return {"encoder": self.encoder, "g_c": self.head_c, "g_m": self.head_m, "g_p": self.head_p}

    @property
    def parameter_count(self):
        return sum(p.numel() for m in self.named_modules_flat().values() for p in m.parameters())

    def train(self):
        for m in self.named_modules_flat().values():
            m.train()
        return self

    def eval(self):
        for m in self.named_modules_flat().values():
            m.eval()
        return self

    def parameters(self):
        for m in self.named_modules_flat().values():
            yield from m.parameters()


def _build_encoder(arch, embed_dim, input_dim):
    if arch == "identity":
        return IdentityEncoder(embed_dim)
    if arch == "linear":
        if input_dim is None:
            raise ModelError("linear encoder needs input_dim")
        return LinearEncoder(input_dim, embed_dim)
    if arch == "small_resnet":
        return SmallResNet(embed_dim)
    if arch == "resnet50":
        import torchvision.models

        if embed_dim != 2048:
            raise ModelError("resnet50 produces embed_dim 2048")
        net = torchvision.models.resnet50(weights=None)
        net.fc = nn.Identity()
        return net
    raise ModelError(f"unknown encoder architecture {arch!r} (expected one of {ENCODER_ARCHS})")


def build_model(config, encoder_arch, seed=None, input_dim=None):
    """Assemble encoder + heads with independently seeded initializations."""
    seed = config.seed if seed is None else seed
    encoder = _build_encoder(encoder_arch, config.embed_dim, input_dim)
    _init_module(encoder, derive_torch_seed(seed, "init/encoder"))
    head_c = _init_module(MLPHead(config.embed_dim, config.proj_dim), derive_torch_seed(seed, "init/g_c"))
    head_m = _init_module(MLPHead(config.embed_dim, 1), derive_torch_seed(seed, "init/g_m"))
    head_p = _init_module(nn.Linear(config.embed_dim, config.num_prototypes), derive_torch_seed(seed, "init/g_p"))
    return ModelBundle(
        encoder=encoder,
        head_c=head_c,
        head_m=head_m,
        head_p=head_p,
        encoder_arch=encoder_arch,
        embed_dim=config.embed_dim,
        proj_dim=config.proj_dim,
        num_prototypes=config.num_prototypes,
        input_dim=input_dim,
    )


def encode(bundle, view_batch):
    """Forward the views through the encoder, carrying pairing metadata."""
    h = bundle.encoder(view_batch.views)
    if not torch.isfinite(h).all():
        raise LossError("non-finite activation in encoder output")
    return EmbeddingBatch(
        h=h,
        sibling=view_batch.sibling,
        source_proto=view_batch.source_proto,
        sample_ids=view_batch.sample_ids,
        n_anchor_views=view_batch.n_anchor_views,
    )


def reinit_heads(bundle, scope, seed, epoch=0):
    """Freshly initialize the heads in scope; everything else stays bitwise."""
    for name, head in bundle.heads().items():
        if name in scope:
            _init_module(head, derive_torch_seed(seed, f"reinit/e{epoch}/{name}"))
    return bundle
