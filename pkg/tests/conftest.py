"""Shared test fixtures and utilities.

Provides synthetic images, small model configurations and on-disk corpora
for testing the Seb transmission pipeline.
"""
# pylint: disable=redefined-outer-name
import tempfile
from pathlib import Path

import pytest
import torch

from dataset_ingest import ImageSet, save_image
from seb_pipeline import ModelConfig


def make_image(height: int, width: int, seed: int = 0) -> torch.Tensor:
    """Uniform random RGB image in [0, 1]."""
    generator = torch.Generator().manual_seed(seed)
    return torch.rand((3, height, width), generator=generator)


def make_smooth_image(height: int, width: int, seed: int = 0) -> torch.Tensor:
    """Low-frequency image: random colour ramps plus a little texture."""
    generator = torch.Generator().manual_seed(seed)
    ys = torch.linspace(0.0, 1.0, height).reshape(1, height, 1)
    xs = torch.linspace(0.0, 1.0, width).reshape(1, 1, width)
    a, b, c = torch.rand((3, 3, 1, 1), generator=generator)
    image = 0.5 * a + 0.25 * b * ys + 0.25 * c * xs
    image = image + 0.02 * torch.rand((3, height, width), generator=generator)
    return image.clamp(0.0, 1.0)


def make_tinted_image(height: int, width: int, tint, seed: int = 0) -> torch.Tensor:
    """Solid colour ``tint`` with small noise."""
    generator = torch.Generator().manual_seed(seed)
    base = torch.tensor(tint, dtype=torch.float32).reshape(3, 1, 1).expand(3, height, width)
    return (base + 0.02 * torch.rand((3, height, width), generator=generator)).clamp(0.0, 1.0)


@pytest.fixture
def temp_dir():
    """Create a temporary directory for test files"""
    with tempfile.TemporaryDirectory() as tmpdir:
        yield Path(tmpdir)


@pytest.fixture
def random_image():
    """A 3×40×56 random image (not a multiple of the patch size)"""
    return make_image(40, 56, seed=1)


@pytest.fixture
def two_group_corpus():
    """Four images forming two obvious colour groups: dark red and light blue"""
    images = [
        make_tinted_image(32, 32, (0.8, 0.1, 0.1), seed=0),
        make_tinted_image(32, 32, (0.1, 0.2, 0.9), seed=1),
        make_tinted_image(32, 32, (0.75, 0.15, 0.1), seed=2),
        make_tinted_image(32, 32, (0.15, 0.2, 0.85), seed=3),
    ]
    return ImageSet(images)


@pytest.fixture
def smooth_corpus():
    """Two smooth 32×32 images"""
    return ImageSet([make_smooth_image(32, 32, seed=s) for s in range(2)])


@pytest.fixture
def tiny_model_config():
    """Narrow model that runs quickly on a CPU"""
    return ModelConfig(
        patch_size=16,
        latent_channels=8,
        hidden_channels=8,
        motion_channels=8,
        hyper_channels=8,
        residual_channels=8,
    )


@pytest.fixture
def png_corpus(temp_dir, two_group_corpus):
    """The two-group corpus written as PNG files in a corpus directory"""
    corpus_dir = temp_dir / "corpus"
    corpus_dir.mkdir()
    for i, image in enumerate(two_group_corpus):
        save_image(image, corpus_dir / f"img{i:02d}.png")
    return corpus_dir
