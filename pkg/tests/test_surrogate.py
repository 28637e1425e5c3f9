import pytest
import torch
from fdcheck import coordinate_check

from artifact.errors import CheckpointFormatError, DimensionError, IncompatibilityError
from artifact.generator import write_wgck
from artifact.surrogate import (
    SurrogateEncoder,
    encode,
    encode_input_grad,
    load_external,
    save_surrogate,
    surrogate_census,
)


@pytest.fixture(scope="module")
def enc():
    return SurrogateEncoder(seed=42)


@pytest.mark.parametrize("size", [32, 64, 128])
def test_shape_contract(enc, size):
    assert encode(enc, torch.rand(3, size, size)).shape == (4, size // 8, size // 8)
    assert encode(enc, torch.rand(2, 3, size, size)).shape == (2, 4, size // 8, size // 8)


def test_indivisible_rejected(enc):
    with pytest.raises(DimensionError):
        encode(enc, torch.rand(3, 60, 64))
    with pytest.raises(DimensionError):
        encode(enc, torch.rand(1, 64, 64))


def test_pure_and_frozen(enc):
    x = torch.rand(3, 32, 32)
    assert torch.equal(encode(enc, x), encode(enc, x.clone()))
    assert not any(p.requires_grad for p in enc.parameters())


def test_seeded_construction():
    a, b, c = SurrogateEncoder(42), SurrogateEncoder(42), SurrogateEncoder(7)
    assert a.checksum() == b.checksum()
    assert a.checksum() != c.checksum()


def test_non_degenerate(enc):
    gen = torch.Generator().manual_seed(0)
    for _ in range(100):
        x, y = torch.rand(2, 3, 32, 32, generator=gen)
        assert not torch.allclose(encode(enc, x), encode(enc, y))


def test_input_grad_finite_differences():
    enc = SurrogateEncoder(seed=42).double()
    gen = torch.Generator().manual_seed(1)
    x = torch.rand(3, 16, 16, generator=gen, dtype=torch.float64)
    gz = torch.randn(4, 2, 2, generator=gen, dtype=torch.float64)
    g = encode_input_grad(enc, x, gz)
    idx = torch.randint(x.numel(), (40,), generator=gen).tolist()
    worst, checked, skipped = coordinate_check(lambda: float((encode(enc, x) * gz).sum()), x, g, idx)
    assert worst <= 1e-3
    assert checked >= 32


def test_zero_latent_grad(enc):
    g = encode_input_grad(enc, torch.rand(3, 16, 16), torch.zeros(4, 2, 2))
    assert torch.all(g == 0)


def test_latent_grad_shape_mismatch(enc):
    with pytest.raises(DimensionError):
        encode_input_grad(enc, torch.rand(3, 16, 16), torch.zeros(4, 3, 3))


def test_external_round_trip(enc, tmp_path):
    save_surrogate(enc, tmp_path / "s.wgck")
    loaded = load_external(tmp_path / "s.wgck")
    x = torch.rand(3, 32, 32)
    assert torch.equal(encode(enc, x), encode(loaded, x))
    assert loaded.checksum() == enc.checksum()


def test_wrong_latent_channels(tmp_path):
    save_surrogate(SurrogateEncoder(latent_channels=8), tmp_path / "s.wgck")
    with pytest.raises(IncompatibilityError, match="enc.3.weight"):
        load_external(tmp_path / "s.wgck")


def test_missing_tensor(enc, tmp_path):
    tensors = {n: p for n, p in enc.named_parameters() if n != "enc.2.bias"}
    write_wgck(tmp_path / "s.wgck", tensors, 0.0, 1.0)
    with pytest.raises(CheckpointFormatError, match="enc.2.bias"):
        load_external(tmp_path / "s.wgck")


def test_census_matches(enc):
    assert {n: tuple(p.shape) for n, p in enc.named_parameters()} == surrogate_census()
