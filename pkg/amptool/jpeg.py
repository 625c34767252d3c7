"""DCT helpers and a differentiable stand-in for the baseline JPEG codec.

The approximation follows the libjpeg pipeline closely enough to be compared
against Pillow's encoder: JFIF YCbCr, 4:2:0 chroma subsampling, 8x8 block DCT,
IJG quality-scaled luma/chroma tables. Rounding uses a straight-through
estimator so gradients pass through quantization unchanged.
"""
from __future__ import annotations

import io
import math
from functools import lru_cache
from typing import Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F
import torchvision.transforms.functional as TF
from PIL import Image

from .core import ImageTensor, to_pil
from .errors import InvalidArgumentError


LUMA_TABLE = (
    (16, 11, 10, 16, 24, 40, 51, 61),
    (12, 12, 14, 19, 26, 58, 60, 55),
    (14, 13, 16, 24, 40, 57, 69, 56),
    (14, 17, 22, 29, 51, 87, 80, 62),
    (18, 22, 37, 56, 68, 109, 103, 77),
    (24, 35, 55, 64, 81, 104, 113, 92),
    (49, 64, 78, 87, 103, 121, 120, 101),
    (72, 92, 95, 98, 112, 100, 103, 99),
)

CHROMA_TABLE = (
    (17, 18, 24, 47, 99, 99, 99, 99),
    (18, 21, 26, 66, 99, 99, 99, 99),
    (24, 26, 56, 99, 99, 99, 99, 99),
    (47, 66, 99, 99, 99, 99, 99, 99),
    (99, 99, 99, 99, 99, 99, 99, 99),
    (99, 99, 99, 99, 99, 99, 99, 99),
    (99, 99, 99, 99, 99, 99, 99, 99),
    (99, 99, 99, 99, 99, 99, 99, 99),
)

# JFIF full-range conversion, values on the 0..255 scale
_RGB_TO_YCBCR = (
    (0.299, 0.587, 0.114),
    (-0.168736, -0.331264, 0.5),
    (0.5, -0.418688, -0.081312),
)
_YCBCR_TO_RGB = (
    (1.0, 0.0, 1.402),
    (1.0, -0.344136, -0.714136),
    (1.0, 1.772, 0.0),
)


def _check_quality(quality: int) -> int:
    if not isinstance(quality, int) or not 1 <= quality <= 100:
        raise InvalidArgumentError(f"JPEG quality must be an integer in [1, 100], got {quality!r}")
    return quality


@lru_cache(maxsize=16)
def _dct_matrix_cached(n: int) -> torch.Tensor:
    k = torch.arange(n, dtype=torch.float64).unsqueeze(1)
    i = torch.arange(n, dtype=torch.float64).unsqueeze(0)
    mat = torch.cos(math.pi * (2 * i + 1) * k / (2 * n)) * math.sqrt(2.0 / n)
    mat[0, :] = 1.0 / math.sqrt(n)
    return mat


def dct_matrix(n: int, dtype: torch.dtype = torch.float32, device: torch.device | str | None = None) -> torch.Tensor:
    """Orthonormal DCT-II basis: ``dct_matrix(n) @ v`` transforms ``v``."""
    if n < 1:
        raise InvalidArgumentError("DCT size must be positive")
    return _dct_matrix_cached(n).to(dtype=dtype, device=device)


def dct_2d(x: torch.Tensor) -> torch.Tensor:
    """Orthonormal 2-D DCT over the last two dimensions."""
    h, w = x.shape[-2:]
    dh = dct_matrix(h, x.dtype, x.device)
    dw = dct_matrix(w, x.dtype, x.device)
    return dh @ x @ dw.T


def idct_2d(coeffs: torch.Tensor) -> torch.Tensor:
    h, w = coeffs.shape[-2:]
    dh = dct_matrix(h, coeffs.dtype, coeffs.device)
    dw = dct_matrix(w, coeffs.dtype, coeffs.device)
    return dh.T @ coeffs @ dw


def quality_scale(quality: int) -> float:
    """IJG percentage scaling for the base quantization tables."""
    quality = _check_quality(quality)
    return 5000.0 / quality if quality < 50 else 200.0 - 2.0 * quality


def quant_tables(quality: int) -> Tuple[torch.Tensor, torch.Tensor]:
    """(luma, chroma) 8x8 quantization tables for ``quality``."""
    scale = quality_scale(quality)
    tables = []
    for base in (LUMA_TABLE, CHROMA_TABLE):
        t = torch.tensor(base, dtype=torch.float32)
        tables.append(torch.clamp(torch.floor((t * scale + 50.0) / 100.0), 1, 255))
    return tables[0], tables[1]


def _ste_round(x: torch.Tensor) -> torch.Tensor:
    return x + (torch.round(x) - x).detach()


def _color_matrix(rows: tuple, like: torch.Tensor) -> torch.Tensor:
    return torch.tensor(rows, dtype=like.dtype, device=like.device)


def _blockwise(channel: torch.Tensor, table: torch.Tensor) -> torch.Tensor:
    """Quantize-dequantize one (B, H, W) plane in 8x8 blocks; H and W multiples of 8."""
    b, h, w = channel.shape
    blocks = channel.reshape(b, h // 8, 8, w // 8, 8).permute(0, 1, 3, 2, 4)
    d = dct_matrix(8, channel.dtype, channel.device)
    coeffs = d @ blocks @ d.T
    q = table.to(channel.dtype).to(channel.device)
    coeffs = _ste_round(coeffs / q) * q
    out = d.T @ coeffs @ d
    return out.permute(0, 1, 3, 2, 4).reshape(b, h, w)


class DifferentiableJPEG(nn.Module):
    """Batch module (B, 3, H, W) in [0, 1] -> JPEG-approximated batch."""

    def __init__(self, quality: int = 75) -> None:
        super().__init__()
        self.quality = _check_quality(quality)
        luma, chroma = quant_tables(quality)
        self.register_buffer("luma_table", luma)
        self.register_buffer("chroma_table", chroma)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _, _, h, w = x.shape
        pad_h, pad_w = (-h) % 16, (-w) % 16
        if pad_h or pad_w:
            x = F.pad(x, (0, pad_w, 0, pad_h), mode="replicate")

        rgb = x * 255.0
        ycc = torch.einsum("ij,bjhw->bihw", _color_matrix(_RGB_TO_YCBCR, rgb), rgb)
        y = ycc[:, 0] - 128.0
        chroma = F.avg_pool2d(ycc[:, 1:], kernel_size=2)

        y = _blockwise(y, self.luma_table)
        cb = _blockwise(chroma[:, 0], self.chroma_table)
        cr = _blockwise(chroma[:, 1], self.chroma_table)
        chroma = torch.stack([cb, cr], dim=1)
        chroma = F.interpolate(chroma, scale_factor=2, mode="bilinear", align_corners=False)

        ycc = torch.cat([(y + 128.0).unsqueeze(1), chroma], dim=1)
        offset = torch.tensor((0.0, 128.0, 128.0), dtype=ycc.dtype, device=ycc.device).view(1, 3, 1, 1)
        rgb = torch.einsum("ij,bjhw->bihw", _color_matrix(_YCBCR_TO_RGB, ycc), ycc - offset)
        out = (rgb / 255.0).clamp(0.0, 1.0)
        return out[:, :, :h, :w]


def differentiable_jpeg(image: ImageTensor | torch.Tensor, quality: int) -> ImageTensor | torch.Tensor:
    """Differentiable JPEG approximation at ``quality``.

    Accepts an ``ImageTensor`` (returns one with the same id) or a raw
    (3, H, W) / (B, 3, H, W) tensor (returns a tensor of the same shape).
    """
    module = DifferentiableJPEG(quality)
    if isinstance(image, ImageTensor):
        out = module(image.batch())[0]
        return ImageTensor(out, image.id)
    if image.dim() == 3:
        return module(image.unsqueeze(0))[0]
    return module(image)


def jpeg_roundtrip(image: ImageTensor, quality: int) -> ImageTensor:
    """Encode and decode with the real codec (Pillow/libjpeg)."""
    quality = _check_quality(quality)
    buf = io.BytesIO()
    to_pil(image).save(buf, format="JPEG", quality=quality)
    buf.seek(0)
    with Image.open(buf) as decoded:
        pixels = TF.to_tensor(decoded.convert("RGB"))
    return ImageTensor(pixels.to(image.pixels.dtype), image.id)


def psnr(a: torch.Tensor, b: torch.Tensor) -> float:
    mse = float(((a.detach().double() - b.detach().double()) ** 2).mean())
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)
