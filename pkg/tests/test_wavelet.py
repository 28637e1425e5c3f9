import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from artifact.errors import DimensionError
from artifact.wavelet import dwt, dwt_backward, idwt, idwt_backward, ll_pyramid


def _haar_matrix_1d(n):
    # orthonormal 1-level Haar analysis: first half averages, second half details
    m = np.zeros((n, n))
    s = 1 / np.sqrt(2)
    for i in range(n // 2):
        m[i, 2 * i] = m[i, 2 * i + 1] = s
        m[n // 2 + i, 2 * i] = -s
        m[n // 2 + i, 2 * i + 1] = s
    return m


def test_constant_map():
    s = dwt(torch.full((1, 8, 8), 0.5, dtype=torch.float64))
    assert torch.allclose(s.ll, torch.ones_like(s.ll))
    for band in s.high:
        assert torch.all(band == 0)


def test_two_by_two_example():
    f = torch.tensor([[[1.0, 2.0], [3.0, 4.0]]], dtype=torch.float64)
    s = dwt(f)
    assert float(s.ll) == pytest.approx(5.0)
    assert float(s.hh) == pytest.approx(0.0)
    # LH: low-pass vertically, high-pass horizontally
    assert float(s.lh) == pytest.approx(1.0)
    assert float(s.hl) == pytest.approx(2.0)


def test_matches_separable_matrix_oracle():
    f = torch.randn(6, 10, dtype=torch.float64, generator=torch.Generator().manual_seed(2))
    a, b = _haar_matrix_1d(6), _haar_matrix_1d(10)
    full = a @ f.numpy() @ b.T
    s = dwt(f.unsqueeze(0))
    np.testing.assert_allclose(s.ll[0].numpy(), full[:3, :5], atol=1e-12)
    np.testing.assert_allclose(s.lh[0].numpy(), full[:3, 5:], atol=1e-12)
    np.testing.assert_allclose(s.hl[0].numpy(), full[3:, :5], atol=1e-12)
    np.testing.assert_allclose(s.hh[0].numpy(), full[3:, 5:], atol=1e-12)


def test_odd_size_rejected():
    with pytest.raises(DimensionError):
        dwt(torch.zeros(1, 5, 4))


def test_idwt_shape_mismatch_rejected():
    s = dwt(torch.zeros(1, 4, 4))
    with pytest.raises(DimensionError):
        idwt((s.ll, s.lh, s.hl, torch.zeros(1, 3, 2)))


def test_reconstruction_float32_and_batched():
    f = torch.rand(2, 3, 16, 24)
    assert float((idwt(dwt(f)) - f).abs().max()) <= 1e-6


def test_linearity():
    g = torch.Generator().manual_seed(4)
    f1, f2 = torch.randn(2, 8, 8, generator=g, dtype=torch.float64), torch.randn(2, 8, 8, generator=g, dtype=torch.float64)
    lhs = dwt(2.5 * f1 - f2)
    for a, b, c in zip(lhs, dwt(f1), dwt(f2)):
        assert torch.allclose(a, 2.5 * b - c, atol=1e-12)


def test_gradient_of_half_energy_is_identity():
    f = torch.randn(3, 8, 8, dtype=torch.float64, requires_grad=True)
    (sum((b**2).sum() for b in dwt(f)) / 2).backward()
    assert torch.allclose(f.grad, f.detach(), atol=1e-12)


def test_backward_helpers_are_adjoints():
    g = torch.Generator().manual_seed(5)
    f = torch.randn(2, 8, 6, generator=g, dtype=torch.float64)
    s = [torch.randn(2, 4, 3, generator=g, dtype=torch.float64) for _ in range(4)]
    lhs = sum((a * b).sum() for a, b in zip(dwt(f), s))
    rhs = (f * dwt_backward(tuple(s), f.shape)).sum()
    assert float(lhs) == pytest.approx(float(rhs), rel=1e-12)
    back = idwt_backward(f, s[0].shape)
    lhs2 = (idwt(tuple(s)) * f).sum()
    rhs2 = sum((a * b).sum() for a, b in zip(s, back))
    assert float(lhs2) == pytest.approx(float(rhs2), rel=1e-12)


def test_finite_difference_against_autograd():
    f = torch.randn(1, 4, 4, dtype=torch.float64, requires_grad=True)
    assert torch.autograd.gradcheck(lambda t: dwt(t).hh, (f,))
    s = tuple(torch.randn(1, 2, 2, dtype=torch.float64, requires_grad=True) for _ in range(4))
    assert torch.autograd.gradcheck(lambda *b: idwt(b), s)


def test_ll_pyramid():
    f = torch.rand(1, 16, 16, dtype=torch.float64)
    top = ll_pyramid(f, 3)
    assert top.shape == (1, 2, 2)
    # three LL levels scale each 8x8 block sum by 2**-3
    blocks = f.view(1, 2, 8, 2, 8).sum(dim=(2, 4))
    assert torch.allclose(top, blocks / 8, atol=1e-12)


shapes = st.tuples(st.integers(1, 3), st.integers(1, 6), st.integers(1, 6))


@settings(max_examples=40, deadline=None)
@given(shape=shapes, seed=st.integers(0, 2**31 - 1))
def test_property_reconstruction_and_parseval(shape, seed):
    c, h, w = shape
    f = torch.randn(c, 2 * h, 2 * w, dtype=torch.float64, generator=torch.Generator().manual_seed(seed))
    s = dwt(f)
    assert float((idwt(s) - f).abs().max()) <= 1e-12
    assert float(s.energy()) == pytest.approx(float((f**2).sum()), rel=1e-10, abs=1e-12)
