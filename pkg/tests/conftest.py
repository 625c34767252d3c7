import os
from pathlib import Path
from typing import Sequence

import pytest
import torch
import torch.nn as nn
import torch.nn.functional as F
from PIL import Image

from amptool.captioning import CaptionerDescriptor, MockCaptioner
from amptool.concepts import tokenize
from amptool.core import ImageTensor
from amptool.embeddings import TextImageScorer, TorchFeatureExtractor


# Word -> RGB direction understood by the toy scorer.
PALETTE = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "dog": (1.0, 0.0, 0.0),
    "car": (0.0, 1.0, 0.0),
    "cat": (0.0, 0.0, 1.0),
    "tree": (0.0, 1.0, 0.0),
    "ball": (1.0, 0.0, 0.0),
    "couch": (0.0, 0.0, 1.0),
}


class ToyScorer(TextImageScorer):
    """Image feature = mean colour; text feature = sum of palette directions."""

    def __init__(self, scale: float = 100.0) -> None:
        self.id = "toy-palette"
        self.scale = scale
        self.supports_grad = True
        self.quality_head = None

    def image_features(self, batch: torch.Tensor) -> torch.Tensor:
        return batch.mean(dim=(2, 3))

    def text_features(self, texts: Sequence[str]) -> torch.Tensor:
        rows = []
        for text in texts:
            vec = torch.full((3,), 0.05)
            for token in tokenize(text):
                if token in PALETTE:
                    vec = vec + torch.tensor(PALETTE[token])
            rows.append(vec)
        return torch.stack(rows)


def make_linear_extractor(dtype: torch.dtype = torch.float32) -> TorchFeatureExtractor:
    """phi(x) = W x over a flattened (3, 1, 2) image; rows 0.2 * ones and alternating +-0.2."""
    linear = nn.Linear(6, 2, bias=False)
    with torch.no_grad():
        linear.weight.copy_(torch.tensor([
            [0.2] * 6,
            [0.2, -0.2, 0.2, -0.2, 0.2, -0.2],
        ]))
    return TorchFeatureExtractor("linear", nn.Sequential(nn.Flatten(), linear).to(dtype), embed_dim=2)


def solid(color, size=(16, 16), image_id="img") -> ImageTensor:
    h, w = size
    pixels = torch.tensor(color, dtype=torch.float32).view(3, 1, 1).expand(3, h, w).clone()
    return ImageTensor(pixels, image_id)


def write_png(path: Path, color, size=(16, 16)) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    rgb = tuple(int(round(c * 255)) for c in color)
    Image.new("RGB", size, rgb).save(path)
    return path


@pytest.fixture
def toy_scorer() -> ToyScorer:
    return ToyScorer()


@pytest.fixture
def linear_extractor() -> TorchFeatureExtractor:
    return make_linear_extractor()


@pytest.fixture
def two_pixel_pair():
    reference = ImageTensor(torch.full((3, 1, 2), 0.4), "ref")
    target = ImageTensor(torch.full((3, 1, 2), 0.9), "tgt")
    return reference, target


@pytest.fixture
def mock_captioner():
    def factory(table=None, default=None, captioner_id="mock", fn=None):
        return MockCaptioner(CaptionerDescriptor(id=captioner_id, kind="mock"), table, default, fn)

    return factory


@pytest.fixture
def smooth_image():
    """Low-frequency content, upsampled from coarse noise."""
    gen = torch.Generator().manual_seed(7)
    coarse = torch.rand(1, 3, 4, 6, generator=gen) * 0.6 + 0.2
    pixels = F.interpolate(coarse, size=(32, 48), mode="bilinear", align_corners=False)[0]
    return ImageTensor(pixels.clamp(0, 1), "smooth")


def pytest_collection_modifyitems(config, items):
    if os.getenv("AMP_RUN_MODEL_TESTS") == "1":
        return
    skip = pytest.mark.skip(reason="needs model weights; set AMP_RUN_MODEL_TESTS=1")
    for item in items:
        if "models" in item.keywords:
            item.add_marker(skip)
