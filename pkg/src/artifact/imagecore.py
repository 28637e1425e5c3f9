"""Image I/O, protection targets and masks.

Images are planar ``torch.Tensor`` objects shaped ``(C, H, W)`` with values in
``[0, 1]``.  Batched helpers accept ``(N, C, H, W)`` as well.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

from .errors import ContractError, DimensionError, ImageFormatError

LUMA_WEIGHTS = (0.299, 0.587, 0.114)
CHECKER_CELL = 32
SIZE_MULTIPLE = 16

_EIGHT_BIT_MODES = {"1", "L", "LA", "P", "RGB", "RGBA", "CMYK", "YCbCr"}


def load_image(path: str | Path, resize_to: int | None = None) -> torch.Tensor:
    """Read a PNG/PPM file as a float32 ``(3, H, W)`` tensor in ``[0, 1]``.

    With ``resize_to`` the shorter side is scaled to that size (bilinear) and
    the result is center-cropped to a square.
    """
    path = Path(path)
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode not in _EIGHT_BIT_MODES:
                raise ImageFormatError(f"{path}: unsupported pixel mode {im.mode!r} (8-bit only)")
            im = im.convert("RGB")
    except FileNotFoundError:
        raise
    except UnidentifiedImageError as exc:
        raise ImageFormatError(f"{path}: not a decodable image") from exc
    except OSError as exc:
        raise ImageFormatError(f"{path}: {exc}") from exc

    if resize_to is not None:
        im = _resize_center_crop(im, int(resize_to))
    arr = np.asarray(im, dtype=np.float32) / 255.0
    return torch.from_numpy(arr.transpose(2, 0, 1).copy())


def _resize_center_crop(im: Image.Image, size: int) -> Image.Image:
    w, h = im.size
    scale = size / min(w, h)
    nw, nh = max(size, round(w * scale)), max(size, round(h * scale))
    if (nw, nh) != (w, h):
        im = im.resize((nw, nh), Image.BILINEAR)
    left = (nw - size) // 2
    top = (nh - size) // 2
    return im.crop((left, top, left + size, top + size))


def to_uint8(img: torch.Tensor) -> np.ndarray:
    """Quantize an image tensor to ``uint8`` HWC (or HW for one channel)."""
    if img.dim() != 3 or img.shape[0] not in (1, 3):
        raise DimensionError(f"expected (1|3, H, W) image, got {tuple(img.shape)}")
    data = img.detach().to(torch.float64).cpu().numpy()
    if not np.isfinite(data).all() or data.min() < 0.0 or data.max() > 1.0:
        raise ContractError("image values must lie in [0, 1]; clip before saving")
    q = np.rint(data * 255.0).astype(np.uint8)
    return q[0] if q.shape[0] == 1 else q.transpose(1, 2, 0)


def save_image(img: torch.Tensor, path: str | Path) -> None:
    """Write a 1- or 3-channel image as an 8-bit PNG (``v -> round(v*255)``)."""
    q = to_uint8(img)
    mode = "L" if q.ndim == 2 else "RGB"
    Image.fromarray(q, mode=mode).save(Path(path), format="PNG")


def check_spatial(height: int, width: int, multiple: int = SIZE_MULTIPLE) -> None:
    if height <= 0 or width <= 0 or height % multiple or width % multiple:
        raise DimensionError(f"spatial size {height}x{width} must be positive multiples of {multiple}")


def make_default_target(height: int, width: int) -> torch.Tensor:
    """Built-in black-and-white target: a 32-pixel checkerboard, top-left white."""
    check_spatial(height, width)
    rows = torch.arange(height) // CHECKER_CELL
    cols = torch.arange(width) // CHECKER_CELL
    board = ((rows[:, None] + cols[None, :]) % 2 == 0).to(torch.float32)
    return board.expand(3, height, width).clone()


def luminance(img: torch.Tensor) -> torch.Tensor:
    """Rec.601 luma of a ``(..., 3, H, W)`` tensor, keeping a channel axis."""
    if img.dim() < 3 or img.shape[-3] != 3:
        raise DimensionError(f"expected 3 channels, got shape {tuple(img.shape)}")
    w = torch.tensor(LUMA_WEIGHTS, dtype=img.dtype, device=img.device).view(3, 1, 1)
    return (img * w).sum(dim=-3, keepdim=True)


def derive_mask(target: torch.Tensor) -> torch.Tensor:
    """Single-channel template mask from a 3-channel target (luma, no threshold)."""
    return luminance(target).clamp(0.0, 1.0)


def as_three_channel(img: torch.Tensor) -> torch.Tensor:
    if img.shape[-3] == 1:
        return img.expand(*img.shape[:-3], 3, *img.shape[-2:]).clone()
    if img.shape[-3] != 3:
        raise DimensionError(f"expected 1 or 3 channels, got {img.shape[-3]}")
    return img


@dataclass(frozen=True)
class ProtectionTarget:
    """Target image, its mask, and the hinge weight-map parameters."""

    target: torch.Tensor
    mask: torch.Tensor
    weight_w: float = 1.0
    threshold_c: float = 0.0

    def __post_init__(self):
        if self.target.dim() != 3 or self.target.shape[0] != 3:
            raise DimensionError(f"target must be (3, H, W), got {tuple(self.target.shape)}")
        if self.mask.dim() != 3 or self.mask.shape[0] != 1:
            raise DimensionError(f"mask must be (1, H, W), got {tuple(self.mask.shape)}")
        if self.mask.shape[-2:] != self.target.shape[-2:]:
            raise DimensionError("mask and target spatial sizes differ")
        if self.weight_w < 0 or self.threshold_c < 0:
            raise ContractError("weight_w and threshold_c must be nonnegative")

    @classmethod
    def from_image(cls, target: torch.Tensor, weight_w: float = 1.0, threshold_c: float = 0.0):
        target = as_three_channel(target)
        return cls(target, derive_mask(target), float(weight_w), float(threshold_c))

    @classmethod
    def builtin(cls, size: int, weight_w: float = 1.0, threshold_c: float = 0.0):
        return cls.from_image(make_default_target(size, size), weight_w, threshold_c)

    def weight_map(self) -> torch.Tensor:
        """``M = 1 + w * mask``, shape ``(1, H, W)``."""
        return 1.0 + self.weight_w * self.mask


def synthetic_images(count: int, size: int, seed: int = 0, texture: float = 0.08) -> torch.Tensor:
    """Natural-looking test images with a roughly ``1/f`` amplitude spectrum.

    Each image is a smooth base (random low-frequency cosines and soft blobs)
    plus colored ``1/f`` noise of standard deviation ``texture``.
    Returns ``(count, 3, size, size)`` in ``[0, 1]``.
    """
    gen = torch.Generator().manual_seed(int(seed))
    yy, xx = torch.meshgrid(torch.linspace(0, 1, size), torch.linspace(0, 1, size), indexing="ij")
    fy = torch.fft.fftfreq(size)[:, None]
    fx = torch.fft.rfftfreq(size)[None, :]
    radius = torch.sqrt(fy**2 + fx**2)
    falloff = torch.where(radius > 0, 1.0 / radius.clamp(min=1e-6), torch.zeros_like(radius))
    out = torch.empty(count, 3, size, size)
    for i in range(count):
        img = torch.rand(3, 1, 1, generator=gen) * 0.6 + 0.2
        for _ in range(4):
            ky, kx = (torch.rand(2, generator=gen) * 4).tolist()
            phase = float(torch.rand(1, generator=gen)) * 6.283
            amp = torch.rand(3, 1, 1, generator=gen) * 0.3 - 0.15
            img = img + amp * torch.cos(6.283 * (ky * yy + kx * xx) + phase)
        for _ in range(3):
            cy, cx = torch.rand(2, generator=gen).tolist()
            r = float(torch.rand(1, generator=gen)) * 0.2 + 0.05
            amp = torch.rand(3, 1, 1, generator=gen) * 0.6 - 0.3
            img = img + amp * torch.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r * r))
        if texture > 0:
            white = torch.randn(1, size, size, generator=gen)
            noise = torch.fft.irfft2(torch.fft.rfft2(white) * falloff, s=(size, size))
            noise = noise / noise.std()
            tint = 1.0 + 0.3 * torch.randn(3, 1, 1, generator=gen)
            img = img + texture * tint * noise
        out[i] = img.clamp(0.0, 1.0)
    return out
