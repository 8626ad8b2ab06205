"""Image ingestion, augmentation and patch geometry.

Owns the pixel-domain geometry the rest of the pipeline relies on: images
are float tensors shaped C×H×W with values in [0, 1], patches are emitted
row-major, and non-divisible sizes are reflect-padded on the bottom and
right edges.
"""

import logging
import math
from dataclasses import dataclass, field
from hashlib import sha256
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torchvision.transforms.functional as TF
from PIL import Image as PILImage
from torch.utils.data import Dataset

from errors import IngestError, NumericError, ParameterError, ShapeError, StructuralError

logger = logging.getLogger(__name__)

SUPPORTED_FORMATS = ("PNG", "PPM")
CHANNELS = 3


def derive_seed(*parts) -> int:
    """Return a deterministic 63-bit seed derived from arbitrary parts.

    Uses SHA-256 so results are stable across processes and platforms,
    unlike the builtin ``hash``.

    Args:
        *parts: Values whose string forms identify the random stream.

    Returns:
        int: Non-negative seed suitable for ``torch.Generator.manual_seed``.
    """
    digest = sha256("/".join(str(part) for part in parts).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") >> 1


def check_image(image: torch.Tensor) -> None:
    """Validate the Image invariants.

    Raises:
        ShapeError: If the tensor is not 3×H×W with positive H and W.
        NumericError: If it holds NaN/inf or values outside [0, 1].
    """
    if image.ndim != 3 or image.shape[0] != CHANNELS:
        raise ShapeError(f"expected a {CHANNELS}×H×W image, got shape {tuple(image.shape)}")
    if image.shape[1] <= 0 or image.shape[2] <= 0:
        raise ShapeError(f"image height and width must be positive, got {tuple(image.shape)}")
    if not torch.isfinite(image).all():
        raise NumericError("image contains NaN or infinite values")
    if image.min() < 0.0 or image.max() > 1.0:
        raise NumericError("image values must lie in [0, 1]")


@dataclass
class ImageSet:
    """Ordered collection of RGB images with optional subset partition.

    Attributes:
        images: Image tensors, each 3×H×W in [0, 1].
        subset_labels: Optional per-image subset id in 1..J.
        paths: Source file of each image, when loaded from disk.
    """
    images: List[torch.Tensor]
    subset_labels: Optional[List[int]] = None
    paths: Optional[List[str]] = None

    def __post_init__(self):
        if self.subset_labels is not None:
            self._check_labels(self.subset_labels)

    def __len__(self) -> int:
        return len(self.images)

    def __iter__(self) -> Iterator[torch.Tensor]:
        return iter(self.images)

    def __getitem__(self, index: int) -> torch.Tensor:
        return self.images[index]

    def _check_labels(self, labels: Sequence[int]) -> None:
        if len(labels) != len(self.images):
            raise StructuralError(
                f"{len(labels)} subset labels for {len(self.images)} images")
        if labels and set(labels) != set(range(1, max(labels) + 1)):
            raise StructuralError("subset labels must cover 1..J exactly")

    def with_labels(self, labels: Sequence[int]) -> "ImageSet":
        """Return a copy of the set carrying the given subset labels."""
        return ImageSet(list(self.images), list(labels), self.paths)

    def subsets(self) -> Dict[int, List[int]]:
        """Map each subset id to the indices of its images, in input order.

        A set without labels is treated as a single subset with id 1.
        """
        labels = self.subset_labels or [1] * len(self.images)
        grouped: Dict[int, List[int]] = {}
        for index, label in enumerate(labels):
            grouped.setdefault(label, []).append(index)
        return dict(sorted(grouped.items()))


@dataclass(frozen=True)
class PadInfo:
    """Per-edge reflect padding applied before patching."""
    top: int = 0
    bottom: int = 0
    left: int = 0
    right: int = 0


@dataclass
class PatchGrid:
    """Row-major patch decomposition of one image.

    Attributes:
        patches: Tensor shaped (rows·cols)×C×h×w.
        rows: Patch rows, ceil(H/h).
        cols: Patch columns, ceil(W/w).
        pad_info: Padding that was added to reach multiples of h and w.
    """
    patches: torch.Tensor
    rows: int
    cols: int
    pad_info: PadInfo = field(default_factory=PadInfo)

    @property
    def n_p(self) -> int:
        return self.rows * self.cols

    @property
    def patch_size(self) -> Tuple[int, int]:
        return int(self.patches.shape[-2]), int(self.patches.shape[-1])

    @property
    def image_size(self) -> Tuple[int, int]:
        """Height and width of the source image, padding removed."""
        h, w = self.patch_size
        pad = self.pad_info
        return (self.rows * h - pad.top - pad.bottom,
                self.cols * w - pad.left - pad.right)


def load_images(paths: Sequence, non_rgb: str = "convert") -> ImageSet:
    """Load PNG/PPM files into an ImageSet, preserving order.

    Args:
        paths: Image file paths.
        non_rgb: ``"convert"`` to convert grayscale/RGBA/palette input to RGB,
            ``"reject"`` to raise instead.

    Returns:
        ImageSet: Images scaled to [0, 1], with ``paths`` recorded.

    Raises:
        IngestError: On the first unreadable, unsupported or rejected file;
            no partial set is returned.
    """
    if non_rgb not in ("convert", "reject"):
        raise ParameterError(f"non_rgb must be 'convert' or 'reject', got {non_rgb!r}")
    images = [_read_rgb(Path(path), non_rgb) for path in paths]
    logger.debug("Loaded %d images", len(images))
    return ImageSet(images=images, paths=[str(path) for path in paths])


def _read_rgb(path: Path, non_rgb: str) -> torch.Tensor:
    try:
        with PILImage.open(path) as img:
            img.load()
            if img.format not in SUPPORTED_FORMATS:
                raise IngestError(path, f"unsupported format {img.format}")
            if img.mode != "RGB":
                if non_rgb == "reject":
                    raise IngestError(path, f"image mode {img.mode} is not RGB")
                img = img.convert("RGB")
            pixels = np.asarray(img, dtype=np.uint8)
    except IngestError:
        raise
    except (OSError, ValueError) as err:
        raise IngestError(path, f"unreadable image ({err})") from err
    tensor = torch.from_numpy(pixels.astype(np.float32) / 255.0)
    return tensor.permute(2, 0, 1).contiguous()


def save_image(image: torch.Tensor, path) -> None:
    """Write an image tensor as an 8-bit PNG (or PPM, by suffix)."""
    pixels = (image.detach().clamp(0.0, 1.0) * 255.0).round().to(torch.uint8)
    PILImage.fromarray(pixels.permute(1, 2, 0).cpu().numpy(), mode="RGB").save(path)


def augment(
    image: torch.Tensor,
    count: int,
    size: Tuple[int, int],
    seed: int,
    scale: Tuple[float, float] = (0.5, 1.0),
    max_upscale: float = 4.0,
) -> List[torch.Tensor]:
    """Produce randomly resized-and-cropped views of one image.

    Each view crops a region whose short side is ``scale`` times the
    image's short side, with the aspect ratio of ``size``, then resizes it
    to exactly ``size``.

    Args:
        image: Source image, 3×H×W.
        count: Number of views.
        size: Output (height, width).
        seed: Seed of the private random stream.
        scale: Range of the crop's fraction of the image's short side.
        max_upscale: Largest allowed output side relative to the short side.

    Returns:
        list[Tensor]: ``count`` images of shape 3×size, deterministic in seed.

    Raises:
        ParameterError: On a non-positive count or size, an invalid scale
            range, or a size beyond the resize ceiling.
    """
    if count <= 0:
        raise ParameterError(f"count must be positive, got {count}")
    out_h, out_w = int(size[0]), int(size[1])
    if out_h <= 0 or out_w <= 0:
        raise ParameterError(f"size must be positive, got {size}")
    low, high = scale
    if not 0.0 < low <= high <= 1.0:
        raise ParameterError(f"scale must satisfy 0 < low <= high <= 1, got {scale}")
    _, height, width = image.shape
    ceiling = max_upscale * min(height, width)
    if max(out_h, out_w) > ceiling:
        raise ParameterError(
            f"requested size {size} exceeds the resize ceiling {ceiling:g} "
            f"for a {height}×{width} image")

    generator = torch.Generator().manual_seed(seed)
    aspect = out_w / out_h
    views = []
    for _ in range(count):
        fraction = low + (high - low) * torch.rand(1, generator=generator).item()
        crop_h = max(1, min(height, round(fraction * min(height, width))))
        crop_w = max(1, round(crop_h * aspect))
        if crop_w > width:
            crop_w = width
            crop_h = max(1, min(height, round(crop_w / aspect)))
        top = int(torch.randint(0, height - crop_h + 1, (1,), generator=generator))
        left = int(torch.randint(0, width - crop_w + 1, (1,), generator=generator))
        if (crop_h, crop_w) == (height, width) == (out_h, out_w):
            views.append(image.clone())
            continue
        view = TF.resized_crop(image, top, left, crop_h, crop_w, [out_h, out_w], antialias=True)
        views.append(view.clamp(0.0, 1.0))
    return views


def _reflect_pad(image: torch.Tensor, pad: PadInfo) -> torch.Tensor:
    if pad == PadInfo():
        return image
    # numpy reflects repeatedly, so pads wider than the image are fine
    padded = np.pad(
        image.detach().cpu().numpy(),
        ((0, 0), (pad.top, pad.bottom), (pad.left, pad.right)),
        mode="reflect",
    )
    return torch.from_numpy(padded).to(image.device)


def patchify(image: torch.Tensor, h: int, w: int) -> PatchGrid:
    """Split an image into a row-major grid of h×w patches.

    Raises:
        ParameterError: If h or w is not positive.
    """
    if h <= 0 or w <= 0:
        raise ParameterError(f"patch size must be positive, got {h}×{w}")
    if image.ndim != 3:
        raise ShapeError(f"expected a C×H×W image, got shape {tuple(image.shape)}")
    channels, height, width = image.shape
    rows, cols = math.ceil(height / h), math.ceil(width / w)
    pad = PadInfo(bottom=rows * h - height, right=cols * w - width)
    padded = _reflect_pad(image, pad)
    patches = (
        padded.reshape(channels, rows, h, cols, w)
        .permute(1, 3, 0, 2, 4)
        .reshape(rows * cols, channels, h, w)
    )
    return PatchGrid(patches=patches, rows=rows, cols=cols, pad_info=pad)


def depatchify(grid: PatchGrid) -> torch.Tensor:
    """Reassemble an image from its patch grid, removing the padding.

    Raises:
        StructuralError: If the patch count, patch shapes or padding do not
            agree with the grid's rows and columns.
    """
    patches = grid.patches
    if patches.ndim != 4:
        raise StructuralError(f"patches must be n_p×C×h×w, got shape {tuple(patches.shape)}")
    if grid.rows <= 0 or grid.cols <= 0 or patches.shape[0] != grid.rows * grid.cols:
        raise StructuralError(
            f"{patches.shape[0]} patches do not fill a {grid.rows}×{grid.cols} grid")
    n_p, channels, h, w = patches.shape
    pad = grid.pad_info
    if min(pad.top, pad.bottom, pad.left, pad.right) < 0 \
            or pad.top + pad.bottom >= grid.rows * h or pad.left + pad.right >= grid.cols * w:
        raise StructuralError(f"padding {pad} is inconsistent with the grid")
    tiled = (
        patches.reshape(grid.rows, grid.cols, channels, h, w)
        .permute(2, 0, 3, 1, 4)
        .reshape(channels, grid.rows * h, grid.cols * w)
    )
    return tiled[:, pad.top:grid.rows * h - pad.bottom, pad.left:grid.cols * w - pad.right]


def pad_to_multiple(image: torch.Tensor, multiple: int) -> Tuple[torch.Tensor, PadInfo]:
    """Reflect-pad the last two dims of a (batched) tensor to a multiple.

    Differentiable, unlike the patch-grid padding. Falls back to edge
    replication when the image is too small to reflect.
    """
    height, width = image.shape[-2:]
    pad = PadInfo(bottom=-height % multiple, right=-width % multiple)
    if pad == PadInfo():
        return image, pad
    batched = image if image.ndim == 4 else image.unsqueeze(0)
    mode = "reflect" if pad.bottom < height and pad.right < width else "replicate"
    padded = torch.nn.functional.pad(batched, (0, pad.right, 0, pad.bottom), mode=mode)
    return (padded if image.ndim == 4 else padded.squeeze(0)), pad


def crop_padding(image: torch.Tensor, pad: PadInfo) -> torch.Tensor:
    """Undo ``pad_to_multiple``."""
    height, width = image.shape[-2:]
    return image[..., pad.top:height - pad.bottom, pad.left:width - pad.right]


class AugmentedSubsetDataset(Dataset):
    """Dataset whose items are the augmented subsets of each source image.

    Item ``i`` is a ``count``×3×H×W tensor of views of source image ``i``;
    each view set is reseeded per epoch so training sees fresh crops while
    staying deterministic in the root seed.
    """

    def __init__(self, images: ImageSet, count: int, size: Tuple[int, int], seed: int,
                 scale: Tuple[float, float] = (0.5, 1.0)):
        if len(images) == 0:
            raise ParameterError("cannot build a training set from an empty corpus")
        self.images = images
        self.count = count
        self.size = size
        self.seed = seed
        self.scale = scale
        self.epoch = 0

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch

    def __len__(self) -> int:
        return len(self.images)

    def __getitem__(self, index: int) -> torch.Tensor:
        seed = derive_seed(self.seed, self.epoch, index)
        return torch.stack(augment(self.images[index], self.count, self.size, seed, self.scale))
