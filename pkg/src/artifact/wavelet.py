"""Orthonormal single-level 2D Haar transform.

Subband ``XY`` applies 1D filter ``X`` along the vertical axis and ``Y`` along
the horizontal axis, with ``L = [1, 1]/sqrt(2)`` and ``H = [-1, 1]/sqrt(2)``.
Both transforms work on any ``(..., C, H, W)`` tensor, act per channel, and are
differentiable through autograd.  Because the transform is orthonormal, the
adjoint of :func:`dwt` is :func:`idwt` and vice versa.
"""

from __future__ import annotations

from typing import NamedTuple

import torch

from .errors import DimensionError


class SubbandSet(NamedTuple):
    ll: torch.Tensor
    lh: torch.Tensor
    hl: torch.Tensor
    hh: torch.Tensor

    @property
    def high(self) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        return self.lh, self.hl, self.hh

    def energy(self) -> torch.Tensor:
        return sum((b.double() ** 2).sum() for b in self)


def dwt(f: torch.Tensor) -> SubbandSet:
    if f.dim() < 2:
        raise DimensionError("dwt needs at least a 2D tensor")
    h, w = f.shape[-2:]
    if h % 2 or w % 2:
        raise DimensionError(f"dwt needs even spatial dims, got {h}x{w}")
    a = f[..., 0::2, 0::2]
    b = f[..., 0::2, 1::2]
    c = f[..., 1::2, 0::2]
    d = f[..., 1::2, 1::2]
    # 2D kernels are outer products of the 1D filters: entries +-1/2.
    ll = (a + b + c + d) * 0.5
    lh = (-a + b - c + d) * 0.5
    hl = (-a - b + c + d) * 0.5
    hh = (a - b - c + d) * 0.5
    return SubbandSet(ll, lh, hl, hh)


def idwt(s: SubbandSet | tuple) -> torch.Tensor:
    ll, lh, hl, hh = s
    shape = ll.shape
    if lh.shape != shape or hl.shape != shape or hh.shape != shape:
        raise DimensionError(
            f"subband shapes differ: {tuple(ll.shape)}, {tuple(lh.shape)}, "
            f"{tuple(hl.shape)}, {tuple(hh.shape)}"
        )
    a = (ll - lh - hl + hh) * 0.5
    b = (ll + lh - hl - hh) * 0.5
    c = (ll - lh + hl - hh) * 0.5
    d = (ll + lh + hl + hh) * 0.5
    out = ll.new_empty(*shape[:-2], 2 * shape[-2], 2 * shape[-1])
    out[..., 0::2, 0::2] = a
    out[..., 0::2, 1::2] = b
    out[..., 1::2, 0::2] = c
    out[..., 1::2, 1::2] = d
    return out


def dwt_backward(grad: SubbandSet | tuple, input_shape: torch.Size | tuple | None = None) -> torch.Tensor:
    """Gradient w.r.t. the input of :func:`dwt`, given subband gradients."""
    out = idwt(grad)
    if input_shape is not None and tuple(out.shape) != tuple(input_shape):
        raise DimensionError(f"gradient maps to {tuple(out.shape)}, forward input was {tuple(input_shape)}")
    return out


def idwt_backward(grad: torch.Tensor, subband_shape: torch.Size | tuple | None = None) -> SubbandSet:
    """Gradients w.r.t. the four subbands of :func:`idwt`."""
    out = dwt(grad)
    if subband_shape is not None and tuple(out.ll.shape) != tuple(subband_shape):
        raise DimensionError(f"gradient maps to {tuple(out.ll.shape)}, subbands were {tuple(subband_shape)}")
    return out


def ll_pyramid(f: torch.Tensor, levels: int) -> torch.Tensor:
    """Apply the LL branch ``levels`` times."""
    for _ in range(levels):
        f = dwt(f).ll
    return f
