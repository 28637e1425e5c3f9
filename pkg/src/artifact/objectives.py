"""EOT transforms and the training losses.

Every loss returns ``(value, gradient)`` where the gradient is taken with
respect to the perturbed image (latent loss) or the perturbation (hinge loss).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ContractError, DimensionError
from .imagecore import ProtectionTarget
from .surrogate import SurrogateEncoder, encode

BLUR_KERNEL_SIZE = 5

# Annex K tables (ITU-T T.81), natural row-major order.
LUMA_QTABLE = np.array(
    [
        [16, 11, 10, 16, 24, 40, 51, 61],
        [12, 12, 14, 19, 26, 58, 60, 55],
        [14, 13, 16, 24, 40, 57, 69, 56],
        [14, 17, 22, 29, 51, 87, 80, 62],
        [18, 22, 37, 56, 68, 109, 103, 77],
        [24, 35, 55, 64, 81, 104, 113, 92],
        [49, 64, 78, 87, 103, 121, 120, 101],
        [72, 92, 95, 98, 112, 100, 103, 99],
    ],
    dtype=np.float64,
)
CHROMA_QTABLE = np.full((8, 8), 99.0)
CHROMA_QTABLE[:4, :4] = [[17, 18, 24, 47], [18, 21, 26, 66], [24, 26, 56, 99], [47, 66, 99, 99]]


@dataclass
class EOTConfig:
    jpeg_quality_range: tuple[int, int] = (30, 95)
    blur_sigma_range: tuple[float, float] = (0.1, 1.5)
    apply_prob: float = 0.5
    rng_seed: int = 42

    def __post_init__(self):
        self.jpeg_quality_range = tuple(self.jpeg_quality_range)
        self.blur_sigma_range = tuple(self.blur_sigma_range)
        qlo, qhi = self.jpeg_quality_range
        slo, shi = self.blur_sigma_range
        if not (1 <= qlo <= qhi <= 100):
            raise ContractError(f"jpeg_quality_range must be ordered within [1, 100], got {self.jpeg_quality_range}")
        if not (0 < slo <= shi):
            raise ContractError(f"blur_sigma_range must be ordered and positive, got {self.blur_sigma_range}")
        if not (0.0 <= self.apply_prob <= 1.0):
            raise ContractError(f"apply_prob must lie in [0, 1], got {self.apply_prob}")


@dataclass
class LossWeights:
    lambda_adv: float = 1.0
    lambda_pert: float = 1.0

    def __post_init__(self):
        vals = (self.lambda_adv, self.lambda_pert)
        if not all(math.isfinite(v) and v >= 0 for v in vals):
            raise ContractError("loss weights must be finite and nonnegative")
        if not any(vals):
            raise ContractError("lambda_adv and lambda_pert cannot both be zero")


@dataclass(frozen=True)
class TransformSpec:
    """``JPEG(quality)`` then ``blur(sigma)``; ``None`` means the step is skipped."""

    jpeg_quality: int | None = None
    blur_sigma: float | None = None

    @property
    def is_identity(self) -> bool:
        return self.jpeg_quality is None and self.blur_sigma is None

    def __call__(self, img: torch.Tensor) -> torch.Tensor:
        if self.jpeg_quality is not None:
            img = diff_jpeg(img, self.jpeg_quality)
        if self.blur_sigma is not None:
            img = gaussian_blur(img, self.blur_sigma)
        return img


IDENTITY = TransformSpec()


def sample_transform(cfg: EOTConfig, rng: np.random.Generator) -> TransformSpec:
    """Draw one EOT transform; the two components are present independently."""
    use_jpeg = rng.random() < cfg.apply_prob
    use_blur = rng.random() < cfg.apply_prob
    quality = int(round(rng.uniform(*cfg.jpeg_quality_range))) if use_jpeg else None
    sigma = float(rng.uniform(*cfg.blur_sigma_range)) if use_blur else None
    return TransformSpec(quality, sigma)


# ---------------------------------------------------------------------------
# Differentiable JPEG (4:4:4, straight-through rounding)
# ---------------------------------------------------------------------------


def quality_scaled_tables(quality: int) -> tuple[np.ndarray, np.ndarray]:
    """libjpeg quality scaling of the Annex K tables, clamped to ``[1, 255]``."""
    if not 1 <= quality <= 100:
        raise ContractError(f"JPEG quality must be in [1, 100], got {quality}")
    scale = 5000 / quality if quality < 50 else 200 - 2 * quality
    out = []
    for table in (LUMA_QTABLE, CHROMA_QTABLE):
        q = np.floor((table * scale + 50) / 100)
        out.append(np.clip(q, 1, 255))
    return out[0], out[1]


@lru_cache(maxsize=None)
def _dct_matrix() -> np.ndarray:
    k = np.arange(8)[:, None]
    n = np.arange(8)[None, :]
    mat = np.cos((2 * n + 1) * k * np.pi / 16) * np.sqrt(2 / 8)
    mat[0] /= np.sqrt(2)
    return mat


def _rgb_to_ycbcr(img: torch.Tensor) -> torch.Tensor:
    r, g, b = img.unbind(dim=-3)
    y = 0.299 * r + 0.587 * g + 0.114 * b
    cb = -0.168736 * r - 0.331264 * g + 0.5 * b + 128.0
    cr = 0.5 * r - 0.418688 * g - 0.081312 * b + 128.0
    return torch.stack([y, cb, cr], dim=-3)


def _ycbcr_to_rgb(img: torch.Tensor) -> torch.Tensor:
    y, cb, cr = img.unbind(dim=-3)
    cb = cb - 128.0
    cr = cr - 128.0
    r = y + 1.402 * cr
    g = y - 0.344136 * cb - 0.714136 * cr
    b = y + 1.772 * cb
    return torch.stack([r, g, b], dim=-3)


def straight_through_round(t: torch.Tensor) -> torch.Tensor:
    return t + (torch.round(t) - t).detach()


def _blockify(t: torch.Tensor) -> torch.Tensor:
    *lead, h, w = t.shape
    return t.reshape(*lead, h // 8, 8, w // 8, 8).transpose(-3, -2)


def _unblockify(t: torch.Tensor) -> torch.Tensor:
    *lead, hb, wb, _, _ = t.shape
    return t.transpose(-3, -2).reshape(*lead, hb * 8, wb * 8)


def jpeg_dct_coefficients(img: torch.Tensor) -> torch.Tensor:
    """Level-shifted YCbCr 8x8 DCT coefficients, shape ``(..., 3, H/8, W/8, 8, 8)``."""
    ycc = _rgb_to_ycbcr(img * 255.0) - 128.0
    d = torch.as_tensor(_dct_matrix(), dtype=img.dtype)
    return d @ _blockify(ycc) @ d.T


def jpeg_from_coefficients(coeffs: torch.Tensor) -> torch.Tensor:
    d = torch.as_tensor(_dct_matrix(), dtype=coeffs.dtype)
    ycc = _unblockify(d.T @ coeffs @ d) + 128.0
    return _ycbcr_to_rgb(ycc) / 255.0


def diff_jpeg(
    img: torch.Tensor,
    quality: int,
    tables: tuple[np.ndarray, np.ndarray] | None = None,
) -> torch.Tensor:
    """JPEG round trip with straight-through rounding, clipped to ``[0, 1]``.

    ``tables`` overrides the quality-scaled (luma, chroma) quantization tables.
    """
    if img.dim() < 3 or img.shape[-3] != 3:
        raise DimensionError(f"diff_jpeg expects 3 channels, got {tuple(img.shape)}")
    h, w = img.shape[-2:]
    if h % 8 or w % 8:
        raise DimensionError(f"diff_jpeg needs dims divisible by 8, got {h}x{w}")
    luma, chroma = quality_scaled_tables(quality) if tables is None else tables
    q = torch.as_tensor(np.stack([luma, chroma, chroma]), dtype=img.dtype)[:, None, None]
    coeffs = jpeg_dct_coefficients(img)
    coeffs = straight_through_round(coeffs / q) * q
    return torch.clamp(jpeg_from_coefficients(coeffs), 0.0, 1.0)


# ---------------------------------------------------------------------------
# Gaussian blur
# ---------------------------------------------------------------------------


def gaussian_kernel1d(sigma: float, size: int = BLUR_KERNEL_SIZE, dtype=torch.float32) -> torch.Tensor:
    if sigma <= 0:
        raise ContractError(f"blur sigma must be positive, got {sigma}")
    x = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    k = torch.exp(-(x**2) / (2 * sigma**2))
    return (k / k.sum()).to(dtype)


def gaussian_blur(img: torch.Tensor, sigma: float, size: int = BLUR_KERNEL_SIZE) -> torch.Tensor:
    """Separable Gaussian blur with reflect padding; works on ``(C,H,W)`` or ``(N,C,H,W)``."""
    squeeze = img.dim() == 3
    x = img.unsqueeze(0) if squeeze else img
    n, c, h, w = x.shape
    k = gaussian_kernel1d(sigma, size, x.dtype)
    pad = size // 2
    flat = x.reshape(n * c, 1, h, w)
    flat = F.conv2d(F.pad(flat, (pad, pad, 0, 0), mode="reflect"), k.view(1, 1, 1, size))
    flat = F.conv2d(F.pad(flat, (0, 0, pad, pad), mode="reflect"), k.view(1, 1, size, 1))
    out = flat.reshape(n, c, h, w)
    return out[0] if squeeze else out


def vjp(fn: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor, grad_out: torch.Tensor) -> torch.Tensor:
    """Adjoint of ``fn`` at ``x`` applied to ``grad_out``."""
    x = x.detach().clone().requires_grad_(True)
    with torch.enable_grad():
        y = fn(x)
        (g,) = torch.autograd.grad(y, x, grad_out.to(y.dtype))
    return g


def gaussian_blur_adjoint(grad: torch.Tensor, sigma: float, size: int = BLUR_KERNEL_SIZE) -> torch.Tensor:
    return vjp(lambda t: gaussian_blur(t, sigma, size), torch.zeros_like(grad), grad)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def latent_adv_loss_t(
    enc: SurrogateEncoder,
    x_adv: torch.Tensor,
    target: torch.Tensor,
    transform: Callable[[torch.Tensor], torch.Tensor] = IDENTITY,
    reduction: str = "sum",
) -> torch.Tensor:
    """Per-image ``||E(t(x_adv)) - E(t(m))||^2`` as a differentiable tensor."""
    if x_adv.shape[-3:] != target.shape[-3:]:
        raise DimensionError(f"x_adv {tuple(x_adv.shape)} and target {tuple(target.shape)} differ")
    za = encode(enc, transform(x_adv))
    zm = encode(enc, transform(target.to(x_adv.dtype)))
    sq = (za - zm) ** 2
    dims = tuple(range(-3, 0))
    if reduction == "sum":
        return sq.sum(dim=dims)
    if reduction == "mean":
        return sq.mean(dim=dims)
    raise ContractError(f"unknown reduction {reduction!r}")


def latent_adv_loss(
    enc: SurrogateEncoder,
    x_adv: torch.Tensor,
    target: torch.Tensor,
    transform: Callable[[torch.Tensor], torch.Tensor] = IDENTITY,
    reduction: str = "sum",
) -> tuple[torch.Tensor, torch.Tensor]:
    """Batch-mean latent loss and its gradient w.r.t. ``x_adv``."""
    x = x_adv.detach().clone().requires_grad_(True)
    with torch.enable_grad():
        per_image = latent_adv_loss_t(enc, x, target.detach(), transform, reduction)
        loss = per_image.mean() if per_image.dim() else per_image
        (g,) = torch.autograd.grad(loss, x)
    return loss.detach(), g


def pert_hinge_loss(delta: torch.Tensor, target_cfg: ProtectionTarget) -> tuple[torch.Tensor, torch.Tensor]:
    """``mean_n max(0, ||M * delta_n||_2 - c)`` and its closed-form gradient."""
    squeeze = delta.dim() == 3
    d = delta.unsqueeze(0) if squeeze else delta
    if d.dim() != 4 or d.shape[1] != 3:
        raise DimensionError(f"delta must be (3, H, W) or (N, 3, H, W), got {tuple(delta.shape)}")
    m = target_cfg.weight_map().to(d.dtype)
    if m.shape[-2:] != d.shape[-2:]:
        raise DimensionError(f"weight map {tuple(m.shape[-2:])} does not match delta {tuple(d.shape[-2:])}")
    weighted = m * d
    norms = torch.sqrt((weighted.double() ** 2).sum(dim=(1, 2, 3)))
    active = norms > target_cfg.threshold_c
    n = d.shape[0]
    loss = torch.clamp(norms - target_cfg.threshold_c, min=0.0).sum() / n
    safe = torch.where(norms > 0, norms, torch.ones_like(norms))
    scale = torch.where(active & (norms > 0), 1.0 / (safe * n), torch.zeros_like(norms))
    grad = (m * weighted) * scale.view(-1, 1, 1, 1).to(d.dtype)
    return loss.to(delta.dtype), grad[0] if squeeze else grad


def total_objective(
    weights: LossWeights,
    adv: tuple[torch.Tensor, torch.Tensor],
    pert: tuple[torch.Tensor, torch.Tensor],
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Weighted objective with the scaled ``(grad_x_adv, grad_delta)`` pair."""
    adv_loss, adv_grad = adv
    pert_loss, pert_grad = pert
    value = weights.lambda_adv * adv_loss + weights.lambda_pert * pert_loss
    return value, weights.lambda_adv * adv_grad, weights.lambda_pert * pert_grad
