"""Seb-based reference image generator.

Patch latents from the Seb encoder are clustered into a codebook of Sebs
(the cluster centers), each patch keeps the index of its Seb, and the
reference image is the row-major tiling of the decoded Sebs chosen by
those indices.
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import torch
from torch import nn

from dataset_ingest import PadInfo, PatchGrid, depatchify
from errors import ParameterError, ShapeError, StructuralError
from gdn_layers import AnalysisTransform, SynthesisTransform
from set_splitter import DEFAULT_MAX_ITER, kmeans

logger = logging.getLogger(__name__)

DOWNSAMPLING = AnalysisTransform.DOWNSAMPLING
K_DIVISOR = 25


class SebEncoder(nn.Module):
    """Patch → latent analysis transform (16× spatial downsampling)."""

    def __init__(self, latent_channels: int = 192, hidden_channels: int = 192):
        super().__init__()
        self.latent_channels = latent_channels
        self.transform = AnalysisTransform(3, hidden_channels, latent_channels)

    def forward(self, patches: torch.Tensor) -> torch.Tensor:
        return self.transform(patches)


class RefPatchDecoder(nn.Module):
    """Latent → reference patch synthesis transform."""

    def __init__(self, latent_channels: int = 192, hidden_channels: int = 192):
        super().__init__()
        self.latent_channels = latent_channels
        self.transform = SynthesisTransform(latent_channels, hidden_channels, 3)

    def forward(self, latents: torch.Tensor) -> torch.Tensor:
        return self.transform(latents)


@dataclass
class SebCodebook:
    """K Sebs (latents c'×h'×w') and, once decoded, their reference patches."""
    sebs: torch.Tensor
    ref_patches: Optional[torch.Tensor] = None

    def __post_init__(self):
        if self.sebs.ndim != 4 or self.sebs.shape[0] < 1:
            raise StructuralError(f"sebs must be K×c'×h'×w' with K >= 1, got {tuple(self.sebs.shape)}")
        if self.ref_patches is not None and self.ref_patches.shape[0] != self.sebs.shape[0]:
            raise StructuralError(
                f"{self.ref_patches.shape[0]} reference patches for {self.sebs.shape[0]} Sebs")

    @property
    def K(self) -> int:
        return int(self.sebs.shape[0])


@dataclass
class UsageMap:
    """Per-image, per-patch Seb index (0..K-1), row-major patch order."""
    indices: torch.Tensor
    K: int

    def __post_init__(self):
        if self.indices.ndim != 2:
            raise StructuralError(f"usage must be n_j×n_p, got shape {tuple(self.indices.shape)}")
        if self.indices.numel() and (int(self.indices.min()) < 0 or int(self.indices.max()) >= self.K):
            raise StructuralError(f"usage indices must lie in 0..{self.K - 1}")

    @property
    def n_images(self) -> int:
        return int(self.indices.shape[0])

    @property
    def n_p(self) -> int:
        return int(self.indices.shape[1])


def codebook_size(n_j: int, n_p: int, divisor: int = K_DIVISOR) -> int:
    """K = floor(n_j·n_p / divisor), never below 1."""
    return max(1, (n_j * n_p) // divisor)


def encode_patches(encoder: SebEncoder, grids: Sequence[PatchGrid]) -> torch.Tensor:
    """Encode every patch of every grid, preserving order.

    Returns:
        Tensor: (Σ n_p)×c'×h/16×w/16 latents.

    Raises:
        ShapeError: If the patch size is not divisible by 16.
    """
    if not grids:
        raise ParameterError("no patch grids to encode")
    for grid in grids:
        h, w = grid.patch_size
        if h % DOWNSAMPLING or w % DOWNSAMPLING:
            raise ShapeError(f"patch size {h}×{w} is not divisible by {DOWNSAMPLING}")
    return encoder(torch.cat([grid.patches for grid in grids]))


def build_codebook(
    latents: torch.Tensor,
    n_j: int,
    n_p: int,
    seed: int,
    divisor: int = K_DIVISOR,
    init_centers: Optional[torch.Tensor] = None,
    iterations: int = DEFAULT_MAX_ITER,
) -> Tuple[SebCodebook, UsageMap]:
    """Cluster patch latents into Sebs and record each patch's Seb.

    Args:
        latents: n_j·n_p latents, image-major then row-major patch order.
        n_j: Images in the subset.
        n_p: Patches per image.
        seed: k-means seed.
        divisor: K = floor(n_j·n_p / divisor), clamped to ≥ 1.
        init_centers: Warm-start Sebs; ignored unless the shape matches.
        iterations: k-means iteration cap.

    Raises:
        ParameterError: If there are no latents.
        StructuralError: If the latent count is not n_j·n_p.
    """
    if latents.numel() == 0 or latents.shape[0] == 0:
        raise ParameterError("cannot build a codebook from an empty latent set")
    if latents.shape[0] != n_j * n_p:
        raise StructuralError(f"{latents.shape[0]} latents for n_j={n_j}, n_p={n_p}")
    k = codebook_size(n_j, n_p, divisor)
    flat = latents.detach().reshape(latents.shape[0], -1)
    warm = None
    if init_centers is not None and init_centers.reshape(init_centers.shape[0], -1).shape == (k, flat.shape[1]):
        warm = init_centers.detach().reshape(k, -1)
    result = kmeans(flat, k, seed=seed, max_iter=iterations, init_centers=warm)
    sebs = result.centers.reshape((k,) + tuple(latents.shape[1:]))
    usage = UsageMap(result.labels.reshape(n_j, n_p), k)
    logger.debug("Built codebook K=%d from %d latents (inertia %.4g)", k, flat.shape[0], result.inertia)
    return SebCodebook(sebs), usage


def cluster_means(latents: torch.Tensor, usage: UsageMap, fallback: torch.Tensor) -> torch.Tensor:
    """Differentiable per-Seb mean of the assigned latents.

    Sebs with no assigned latent keep their ``fallback`` value (detached).
    """
    flat_labels = usage.indices.reshape(-1).to(latents.device)
    sums = torch.zeros_like(fallback).index_add(0, flat_labels, latents)
    counts = torch.bincount(flat_labels, minlength=usage.K).to(latents.dtype)
    shape = (-1,) + (1,) * (latents.ndim - 1)
    means = sums / counts.clamp(min=1).reshape(shape)
    return torch.where(counts.reshape(shape) > 0, means, fallback.detach())


def decode_codebook(decoder: RefPatchDecoder, codebook: SebCodebook) -> SebCodebook:
    """Decode every Seb into its reference patch, clamped to [0, 1]."""
    if codebook.sebs.shape[1] != decoder.latent_channels:
        raise ShapeError(
            f"Sebs have {codebook.sebs.shape[1]} channels, decoder expects {decoder.latent_channels}")
    return SebCodebook(codebook.sebs, decoder(codebook.sebs).clamp(0.0, 1.0))


def assemble_reference(
    codebook: SebCodebook,
    usage: UsageMap,
    rows: int,
    cols: int,
    pad_info: PadInfo = PadInfo(),
) -> List[torch.Tensor]:
    """Tile each image's reference patches and strip the padding.

    Raises:
        StructuralError: If the codebook is undecoded, an index is out of
            range, or the usage does not match the grid.
    """
    if codebook.ref_patches is None:
        raise StructuralError("codebook has no reference patches; decode it first")
    if usage.K != codebook.K:
        raise StructuralError(f"usage addresses K={usage.K} Sebs, codebook holds {codebook.K}")
    if usage.n_p != rows * cols:
        raise StructuralError(f"usage has {usage.n_p} patches per image, grid is {rows}×{cols}")
    images = []
    for indices in usage.indices:
        patches = codebook.ref_patches[indices.to(codebook.ref_patches.device)]
        images.append(depatchify(PatchGrid(patches=patches, rows=rows, cols=cols, pad_info=pad_info)))
    return images


class SebStraightThrough(torch.autograd.Function):
    """Forward: each latent is replaced by its Seb. Backward: gradient copied to the latent."""

    @staticmethod
    def forward(ctx, latents: torch.Tensor, sebs: torch.Tensor, indices: torch.Tensor) -> torch.Tensor:
        return sebs.detach()[indices].clone()

    @staticmethod
    def backward(ctx, grad_output: torch.Tensor):
        return grad_output.clone(), None, None


def straight_through(latents: torch.Tensor, codebook: SebCodebook, usage: UsageMap) -> torch.Tensor:
    """Pass-through latents whose values are the assigned Sebs."""
    indices = usage.indices.reshape(-1).to(codebook.sebs.device)
    if indices.numel() != latents.shape[0]:
        raise StructuralError(f"usage covers {indices.numel()} patches, got {latents.shape[0]} latents")
    return SebStraightThrough.apply(latents, codebook.sebs, indices)
