import pytest
import torch

from amptool.core import ImageTensor
from amptool.errors import InvalidArgumentError
from amptool.jpeg import (
    DifferentiableJPEG,
    dct_2d,
    differentiable_jpeg,
    idct_2d,
    jpeg_roundtrip,
    psnr,
    quant_tables,
    quality_scale,
)


def test_dct_is_orthonormal():
    gen = torch.Generator().manual_seed(0)
    blocks = torch.rand(2, 3, 8, 8, generator=gen, dtype=torch.float64)
    coeffs = dct_2d(blocks)
    assert torch.allclose(idct_2d(coeffs), blocks, atol=1e-10)
    assert torch.allclose((coeffs ** 2).sum(), (blocks ** 2).sum())


def test_quality_scaling_follows_ijg_curve():
    assert quality_scale(50) == pytest.approx(100.0)
    assert quality_scale(25) == pytest.approx(200.0)
    assert quality_scale(75) == pytest.approx(50.0)
    luma, chroma = quant_tables(100)
    assert torch.all(luma == 1) and torch.all(chroma == 1)
    for q in (0, 101):
        with pytest.raises(InvalidArgumentError):
            quant_tables(q)


def test_shape_and_identity_kind_preserved(smooth_image):
    out = differentiable_jpeg(smooth_image, 75)
    assert isinstance(out, ImageTensor)
    assert out.id == smooth_image.id
    assert out.shape == smooth_image.shape
    raw = differentiable_jpeg(smooth_image.pixels, 75)
    assert isinstance(raw, torch.Tensor)
    assert raw.shape == smooth_image.pixels.shape


@pytest.mark.parametrize("quality", [50, 75, 95])
def test_close_to_real_codec(smooth_image, quality):
    approx = differentiable_jpeg(smooth_image, quality)
    real = jpeg_roundtrip(smooth_image, quality)
    assert psnr(approx.pixels, real.pixels) >= 25.0


def test_gradients_are_finite_and_nonzero():
    gen = torch.Generator().manual_seed(1)
    x = (torch.rand(1, 3, 32, 48, generator=gen) * 0.6 + 0.2).requires_grad_(True)
    DifferentiableJPEG(75)(x).mean().backward()
    assert torch.isfinite(x.grad).all()
    assert (x.grad != 0).all()


def test_odd_sizes_are_padded_and_cropped():
    x = torch.full((1, 3, 13, 21), 0.5)
    out = DifferentiableJPEG(90)(x)
    assert out.shape == x.shape
    assert float((out - x).abs().max()) < 0.02


def test_real_codec_near_lossless_at_quality_100():
    gray = ImageTensor(torch.full((3, 16, 16), 0.5), "gray")
    assert float((jpeg_roundtrip(gray, 100).pixels - gray.pixels).abs().mean()) < 0.005
