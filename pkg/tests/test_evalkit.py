import csv
import math

import numpy as np
import pytest
import torch

from artifact.errors import DimensionError
from artifact.evalkit import (
    EVAL_BLUR_SIGMA,
    FidelityRow,
    fidelity_report,
    latent_shift,
    normalize_map,
    preprocess,
    psnr,
    robustness_suite,
    save_spectrum_grid,
    spectrum,
    ssim,
    write_rows_csv,
)
from artifact.imagecore import luminance, make_default_target, synthetic_images
from artifact.surrogate import SurrogateEncoder
from artifact.wavelet import dwt


@pytest.fixture(scope="module")
def enc():
    return SurrogateEncoder(seed=42)


def test_psnr_identical_is_inf():
    x = torch.rand(3, 16, 16)
    assert psnr(x, x.clone()) == math.inf


def test_psnr_budget_value():
    x = torch.full((3, 16, 16), 0.5, dtype=torch.float64)
    assert psnr(x, x + 8 / 255) == pytest.approx(20 * math.log10(255 / 8), abs=1e-9)
    assert psnr(x, x + 8 / 255) == pytest.approx(30.07, abs=5e-3)


def test_psnr_shape_mismatch():
    with pytest.raises(DimensionError):
        psnr(torch.rand(3, 8, 8), torch.rand(3, 8, 16))


def test_ssim_identical_and_symmetric():
    x, y = synthetic_images(2, 32, seed=1)
    assert ssim(x, x) == pytest.approx(1.0, abs=1e-12)
    assert ssim(x, y) == pytest.approx(ssim(y, x), rel=1e-12)
    assert ssim(x, y) < 1.0


def test_ssim_anticorrelated_negative():
    x = synthetic_images(1, 32, seed=2)[0]
    assert ssim(x, 1.0 - x) < 0


def test_ssim_matches_skimage():
    metrics = pytest.importorskip("skimage.metrics")
    x, y = synthetic_images(2, 48, seed=3)
    ref = metrics.structural_similarity(
        luminance(x)[0].double().numpy(),
        luminance(y)[0].double().numpy(),
        data_range=1.0,
        gaussian_weights=True,
        sigma=1.5,
        use_sample_covariance=False,
    )
    assert ssim(x, y) == pytest.approx(ref, abs=1e-6)


def test_ssim_too_small():
    with pytest.raises(DimensionError):
        ssim(torch.rand(3, 8, 8), torch.rand(3, 8, 8))


def test_fidelity_report_mean_row():
    clean = list(synthetic_images(2, 32, seed=4))
    prot = [c.clamp(0, 1) for c in clean]
    prot[1] = (clean[1] + 0.01).clamp(0, 1)
    rows = fidelity_report(["a", "b"], clean, prot)
    assert [r.name for r in rows] == ["a", "b", "mean"]
    assert rows[0].psnr == math.inf and rows[0].linf == 0.0
    assert rows[2].linf == pytest.approx((rows[0].linf + rows[1].linf) / 2)


def test_spectrum_zero_delta():
    rep = spectrum(torch.zeros(3, 16, 16))
    assert torch.all(rep.fft_logmag == 0) and torch.all(rep.hf_energy == 0)
    assert np.all(normalize_map(rep.hf_energy) == 0)


def test_spectrum_cosine_peaks():
    n, k = 32, 5
    x = torch.arange(n, dtype=torch.float64)
    d = torch.cos(2 * math.pi * k * x / n).view(1, 1, n).expand(3, n, n)
    rep = spectrum(d)
    flat = rep.fft_logmag.clone()
    c = n // 2
    peaks = {(c, c + k), (c, c - k)}
    top = torch.topk(flat.view(-1), 2).indices.tolist()
    assert {divmod(i, n) for i in top} == peaks


def test_spectrum_parseval():
    d = torch.randn(3, 16, 16, dtype=torch.float64)
    rep = spectrum(d)
    bands = dwt(d)
    total = float((bands.ll**2).sum()) + float(rep.hf_energy.sum())
    assert total == pytest.approx(float((d**2).sum()), rel=1e-12)


def test_spectrum_grid_written(tmp_path):
    from PIL import Image

    save_spectrum_grid(spectrum(torch.randn(3, 16, 16)), tmp_path / "s.png")
    with Image.open(tmp_path / "s.png") as im:
        assert im.mode == "L" and im.size == (16 * 6, 16)


def test_latent_shift_identity_and_target(enc):
    x = synthetic_images(1, 32, seed=5)[0]
    m = make_default_target(32, 32)
    assert latent_shift(enc, x, x.clone(), m) == pytest.approx(1.0)
    assert latent_shift(enc, x, m.clone(), m) == 0.0
    assert math.isnan(latent_shift(enc, m, m.clone(), m))


def test_robustness_identity(enc):
    clean = list(synthetic_images(3, 32, seed=6))
    rows = robustness_suite(clean, clean, enc, make_default_target(32, 32))
    assert [r.preprocess for r in rows] == ["none", "jpeg50", "blur5"]
    for r in rows:
        assert r.ratio == pytest.approx(1.0) and r.degradation == pytest.approx(0.0)


def test_preprocess_blur_sigma():
    assert EVAL_BLUR_SIGMA == pytest.approx(1.1)
    x = synthetic_images(1, 32, seed=7)[0]
    assert preprocess("none", x) is x
    assert preprocess("jpeg50", x).shape == x.shape
    with pytest.raises(Exception):
        preprocess("sharpen", x)


def test_csv_inf_and_repr(tmp_path):
    rows = [FidelityRow("a", math.inf, 1.0, 0.0, 0.0), FidelityRow("b", 31.123456789012345, 0.9, 0.03, 1.5)]
    write_rows_csv(rows, tmp_path / "f.csv")
    with open(tmp_path / "f.csv") as fh:
        data = list(csv.DictReader(fh))
    assert data[0]["psnr"] == "inf"
    assert float(data[1]["psnr"]) == 31.123456789012345
