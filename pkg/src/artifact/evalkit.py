"""Fidelity metrics, perturbation spectra, and the latent-shift robustness harness.

The latent-shift ratio measures how far a protected image's latent has moved
toward the target latent relative to the clean image.  It is the quantity the
adversarial loss optimizes; it is *not* a substitute for style-similarity or
FID-type metrics computed on downstream student models.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from . import wavelet
from .errors import ContractError, DimensionError
from .imagecore import luminance, to_uint8
from .objectives import gaussian_blur
from .surrogate import SurrogateEncoder, encode

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
EVAL_JPEG_QUALITY = 50
EVAL_BLUR_KERNEL = 5
# torchvision's default sigma for a given kernel size: 0.3 * ((k - 1) / 2 - 1) + 0.8
EVAL_BLUR_SIGMA = 0.3 * ((EVAL_BLUR_KERNEL - 1) / 2 - 1) + 0.8
PREPROCESSINGS = ("none", "jpeg50", "blur5")


def _same_shape(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def psnr(a: torch.Tensor, b: torch.Tensor) -> float:
    """Peak signal-to-noise ratio for unit dynamic range; ``inf`` for identical inputs."""
    _same_shape(a, b)
    mse = float(((a.double() - b.double()) ** 2).mean())
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def _gaussian_window(size: int, sigma: float) -> torch.Tensor:
    x = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    g = torch.exp(-(x**2) / (2 * sigma**2))
    g = g / g.sum()
    return torch.outer(g, g)


def ssim(a: torch.Tensor, b: torch.Tensor) -> float:
    """Mean SSIM on Rec.601 luminance, 11x11 Gaussian window (sigma 1.5), valid region."""
    _same_shape(a, b)
    if a.dim() != 3:
        raise DimensionError(f"ssim expects (C, H, W), got {tuple(a.shape)}")
    if a.shape[0] == 3:
        a, b = luminance(a), luminance(b)
    elif a.shape[0] != 1:
        raise DimensionError("ssim expects 1 or 3 channels")
    if min(a.shape[-2:]) < SSIM_WINDOW:
        raise DimensionError(f"image smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    x = a.double().unsqueeze(0)
    y = b.double().unsqueeze(0)
    w = _gaussian_window(SSIM_WINDOW, SSIM_SIGMA).view(1, 1, SSIM_WINDOW, SSIM_WINDOW)
    mu_x = F.conv2d(x, w)
    mu_y = F.conv2d(y, w)
    sxx = F.conv2d(x * x, w) - mu_x**2
    syy = F.conv2d(y * y, w) - mu_y**2
    sxy = F.conv2d(x * y, w) - mu_x * mu_y
    c1 = SSIM_K1**2
    c2 = SSIM_K2**2
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (sxx + syy + c2)
    return float((num / den).mean())


@dataclass
class FidelityRow:
    name: str
    psnr: float
    ssim: float
    linf: float
    l2: float


def fidelity_report(names: Sequence[str], clean: Sequence[torch.Tensor], protected: Sequence[torch.Tensor]) -> list[FidelityRow]:
    """Per-image rows followed by a corpus-mean row named ``mean``."""
    if not (len(names) == len(clean) == len(protected)):
        raise ContractError("corpora are not aligned")
    rows = []
    for name, x, y in zip(names, clean, protected):
        d = (y.double() - x.double())
        rows.append(FidelityRow(name, psnr(x, y), ssim(x, y), float(d.abs().max()), float(d.norm())))
    if rows:
        rows.append(
            FidelityRow(
                "mean",
                float(np.mean([r.psnr for r in rows])),
                float(np.mean([r.ssim for r in rows])),
                float(np.mean([r.linf for r in rows])),
                float(np.mean([r.l2 for r in rows])),
            )
        )
    return rows


# ---------------------------------------------------------------------------
# Spectra
# ---------------------------------------------------------------------------


@dataclass
class SpectrumReport:
    fft_logmag: torch.Tensor  # (H, W), zero frequency centered
    ll_gray: torch.Tensor  # (H/2, W/2), channel-mean LL subband
    hf_bands: dict[str, torch.Tensor]  # per-band energy, summed over channels
    hf_energy: torch.Tensor  # (H/2, W/2), LH^2 + HL^2 + HH^2 over channels
    meta: dict = field(default_factory=lambda: {"normalization": "per-map min-max", "colormap": "gray"})


def spectrum(delta: torch.Tensor) -> SpectrumReport:
    d = delta.double()
    if d.dim() == 2:
        d = d.unsqueeze(0)
    mag = torch.fft.fft2(d).abs().mean(dim=0)
    logmag = torch.fft.fftshift(torch.log1p(mag))
    bands = wavelet.dwt(d)
    hf = {name: (band**2).sum(dim=0) for name, band in zip(("lh", "hl", "hh"), bands.high)}
    return SpectrumReport(logmag, bands.ll.mean(dim=0), hf, hf["lh"] + hf["hl"] + hf["hh"])


def normalize_map(m: torch.Tensor) -> np.ndarray:
    """Min-max scale to 8 bits; constant maps render as zeros."""
    arr = m.detach().double().cpu().numpy()
    lo, hi = arr.min(), arr.max()
    if hi - lo <= 0:
        return np.zeros(arr.shape, dtype=np.uint8)
    return np.rint((arr - lo) / (hi - lo) * 255).astype(np.uint8)


def save_spectrum_grid(rep: SpectrumReport, path: str | Path) -> None:
    """FFT log-magnitude on the left, then LL and HF energy maps upsampled x2."""
    fft = normalize_map(rep.fft_logmag)
    up = lambda a: np.kron(a, np.ones((2, 2), dtype=np.uint8))  # noqa: E731
    tiles = [fft, up(normalize_map(rep.ll_gray)), up(normalize_map(rep.hf_energy))]
    tiles += [up(normalize_map(rep.hf_bands[k])) for k in ("lh", "hl", "hh")]
    Image.fromarray(np.concatenate(tiles, axis=1), mode="L").save(path, format="PNG")


# ---------------------------------------------------------------------------
# Latent shift and preprocessing robustness
# ---------------------------------------------------------------------------


def _latent_dist(enc: SurrogateEncoder, img: torch.Tensor, z_target: torch.Tensor) -> float:
    with torch.no_grad():
        return float(((encode(enc, img).double() - z_target.double()) ** 2).sum())


def latent_shift(enc: SurrogateEncoder, x: torch.Tensor, x_adv: torch.Tensor, target: torch.Tensor) -> float:
    """``||E(x_adv) - E(m)||^2 / ||E(x) - E(m)||^2``; ``nan`` when the denominator is zero."""
    _same_shape(x, x_adv)
    with torch.no_grad():
        zm = encode(enc, target)
    den = _latent_dist(enc, x, zm)
    if den == 0.0:
        return math.nan
    return _latent_dist(enc, x_adv, zm) / den


def reference_jpeg(img: torch.Tensor, quality: int = EVAL_JPEG_QUALITY, subsampling: int | None = None) -> torch.Tensor:
    """Round-trip through Pillow's baseline JPEG codec (8-bit)."""
    buf = io.BytesIO()
    kwargs = {"quality": int(quality)}
    if subsampling is not None:
        kwargs["subsampling"] = subsampling
    Image.fromarray(to_uint8(img.clamp(0, 1)), mode="RGB").save(buf, format="JPEG", **kwargs)
    buf.seek(0)
    with Image.open(buf) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(arr.transpose(2, 0, 1).copy())


def preprocess(name: str, img: torch.Tensor) -> torch.Tensor:
    if name == "none":
        return img
    if name == "jpeg50":
        return reference_jpeg(img, EVAL_JPEG_QUALITY)
    if name == "blur5":
        return gaussian_blur(img, EVAL_BLUR_SIGMA, EVAL_BLUR_KERNEL)
    raise ContractError(f"unknown preprocessing {name!r}")


@dataclass
class RobustnessRow:
    preprocess: str
    ratio: float
    degradation: float


def robustness_suite(
    protected: Sequence[torch.Tensor],
    clean: Sequence[torch.Tensor],
    enc: SurrogateEncoder,
    target: torch.Tensor,
) -> list[RobustnessRow]:
    """Mean latent-shift ratio after each attacker preprocessing, plus ``R_p - R_none``."""
    if len(protected) != len(clean) or not clean:
        raise ContractError("protected and clean corpora must be aligned and nonempty")
    for x, y in zip(clean, protected):
        _same_shape(x, y)
    with torch.no_grad():
        zm = encode(enc, target)
    ratios = {}
    for name in PREPROCESSINGS:
        vals = []
        for x, y in zip(clean, protected):
            den = _latent_dist(enc, preprocess(name, x), zm)
            vals.append(math.nan if den == 0 else _latent_dist(enc, preprocess(name, y), zm) / den)
        ratios[name] = math.fsum(vals) / len(vals)
    return [RobustnessRow(n, ratios[n], ratios[n] - ratios["none"]) for n in PREPROCESSINGS]


@dataclass
class LatentShiftRow:
    name: str
    ratio: float


@dataclass
class SpectrumRow:
    name: str
    hf_energy: float
    ll_energy: float


def write_rows_csv(rows: Sequence, path: str | Path) -> None:
    """Write dataclass rows; floats use ``repr`` so values round-trip exactly."""
    rows = list(rows)
    if not rows:
        Path(path).write_text("")
        return
    names = list(rows[0].__dataclass_fields__)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(names)
        for r in rows:
            writer.writerow([_fmt(getattr(r, n)) for n in names])


def _fmt(v):
    if isinstance(v, float):
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return repr(v)
    return v
