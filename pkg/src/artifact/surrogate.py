"""Frozen latent encoder used to define the adversarial objective.

The default encoder is a deterministic random convolutional net with the same
shape contract as a Stable Diffusion VAE encoder: ``3 x H x W -> 4 x H/8 x W/8``.
"""

from __future__ import annotations

import hashlib
import math
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import DimensionError, IncompatibilityError
from .generator import LEAKY_SLOPE, SEED_TENSOR, check_shape_table, read_wgck, write_wgck

DOWNSAMPLE = 8
LATENT_CHANNELS = 4
HIDDEN = (32, 64, 128)


def surrogate_census(latent_channels: int = LATENT_CHANNELS) -> dict[str, tuple[int, ...]]:
    c1, c2, c3 = HIDDEN
    return {
        "enc.0.weight": (c1, 3, 3, 3),
        "enc.0.bias": (c1,),
        "enc.1.weight": (c2, c1, 3, 3),
        "enc.1.bias": (c2,),
        "enc.2.weight": (c3, c2, 3, 3),
        "enc.2.bias": (c3,),
        "enc.3.weight": (latent_channels, c3, 3, 3),
        "enc.3.bias": (latent_channels,),
    }


class SurrogateEncoder(nn.Module):
    """Three stride-2 3x3 convs (3->32->64->128) and a stride-1 linear head."""

    downsample_factor = DOWNSAMPLE

    def __init__(self, seed: int = 42, latent_channels: int = LATENT_CHANNELS):
        super().__init__()
        c1, c2, c3 = HIDDEN
        self.seed = int(seed)
        self.latent_channels = latent_channels
        self.enc = nn.ModuleList(
            [
                nn.Conv2d(3, c1, 3, stride=2, padding=1),
                nn.Conv2d(c1, c2, 3, stride=2, padding=1),
                nn.Conv2d(c2, c3, 3, stride=2, padding=1),
                nn.Conv2d(c3, latent_channels, 3, stride=1, padding=1),
            ]
        )
        gen = torch.Generator().manual_seed(self.seed)
        with torch.no_grad():
            gain = math.sqrt(2.0 / (1.0 + LEAKY_SLOPE**2))
            for conv in self.enc:
                bound = gain * math.sqrt(3.0 / conv.weight[0].numel())
                conv.weight.copy_((torch.rand(conv.weight.shape, generator=gen) * 2 - 1) * bound)
                conv.bias.zero_()
        self.freeze()

    def freeze(self) -> "SurrogateEncoder":
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()
        return self

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        h = img
        for i, conv in enumerate(self.enc):
            h = conv(h)
            if i < len(self.enc) - 1:
                h = F.leaky_relu(h, LEAKY_SLOPE)
        return h

    def checksum(self) -> str:
        digest = hashlib.sha256()
        for name, p in self.named_parameters():
            digest.update(name.encode())
            digest.update(p.detach().cpu().contiguous().numpy().tobytes())
        return digest.hexdigest()


def _check_image(img: torch.Tensor) -> torch.Tensor:
    batched = img if img.dim() == 4 else img.unsqueeze(0)
    if batched.dim() != 4 or batched.shape[1] != 3:
        raise DimensionError(f"encoder input must be (3, H, W) or (N, 3, H, W), got {tuple(img.shape)}")
    h, w = batched.shape[-2:]
    if h % DOWNSAMPLE or w % DOWNSAMPLE:
        raise DimensionError(f"encoder input {h}x{w} must be divisible by {DOWNSAMPLE}")
    return batched


def encode(enc: SurrogateEncoder, img: torch.Tensor) -> torch.Tensor:
    """Latent of ``img``; differentiable w.r.t. the image only."""
    z = enc(_check_image(img).to(enc.enc[0].weight.dtype))
    return z if img.dim() == 4 else z[0]


def encode_input_grad(enc: SurrogateEncoder, img: torch.Tensor, grad_latent: torch.Tensor) -> torch.Tensor:
    """Vector-Jacobian product of :func:`encode` w.r.t. ``img``."""
    _check_image(img)
    x = img.detach().clone().requires_grad_(True)
    with torch.enable_grad():
        z = encode(enc, x)
        if grad_latent.shape != z.shape:
            raise DimensionError(f"grad_latent shape {tuple(grad_latent.shape)} != latent shape {tuple(z.shape)}")
        (g,) = torch.autograd.grad(z, x, grad_latent.to(z.dtype))
    return g


def save_surrogate(enc: SurrogateEncoder, path: str | Path) -> None:
    tensors = {n: p.detach().float() for n, p in enc.named_parameters()}
    tensors[SEED_TENSOR] = torch.tensor(float(enc.seed))
    write_wgck(path, tensors, 0.0, 1.0)


def load_external(path: str | Path, latent_channels: int = LATENT_CHANNELS) -> SurrogateEncoder:
    """Build a frozen encoder from WGCK weights with the surrogate shape table."""
    _, _, tensors = read_wgck(path)
    census = surrogate_census(latent_channels)
    check_shape_table(tensors, census, path)
    unknown = set(tensors) - set(census) - {SEED_TENSOR}
    if unknown:
        raise IncompatibilityError(f"{path}: unexpected tensors {sorted(unknown)}")
    seed = int(tensors[SEED_TENSOR].item()) if SEED_TENSOR in tensors else 0
    enc = SurrogateEncoder(seed=seed, latent_channels=latent_channels)
    with torch.no_grad():
        for name, p in enc.named_parameters():
            p.copy_(tensors[name])
    return enc.freeze()
