"""Image-set splitting: projectors, k-means and elbow selection of J.

The corpus is embedded by a frozen projector, clustered with k-means for
every candidate subset count, and the count at the elbow of the inertia
curve is kept. ``kmeans`` is also the clustering step that turns patch
latents into Sebs.
"""

import logging
import warnings
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import requests
import torch
import torchvision
import torchvision.transforms.functional as TF
from sklearn.cluster import KMeans
from sklearn.exceptions import ConvergenceWarning
from torch import nn

from dataset_ingest import ImageSet, derive_seed
from errors import NumericError, ParameterError, ProjectorStateError, ShapeError

logger = logging.getLogger(__name__)

DEFAULT_MAX_ITER = 100
DEFAULT_TOL = 1e-6
DEFAULT_N_INIT = 10
CENTROID_TOL = 1e-6
SKLEARN_SEED_RANGE = 2 ** 32
# exact pairwise differences are materialized in chunks of this many elements
_ASSIGN_CHUNK_ELEMENTS = 1 << 22


# ---------------------------------------------------------------------------
# Projectors
# ---------------------------------------------------------------------------

class Projector(ABC):
    """Maps an image to a fixed-length embedding vector.

    Attributes:
        frozen: Embeddings are deterministic while True.
        dim: Embedding dimension d, or None until initialized.
    """

    frozen: bool = True
    dim: Optional[int] = None

    @property
    def initialized(self) -> bool:
        return True

    @abstractmethod
    def embed(self, image: torch.Tensor) -> torch.Tensor:
        """Return the d-dimensional embedding of one image."""

    def embed_images(self, images: ImageSet) -> torch.Tensor:
        return torch.stack([self.embed(image) for image in images])


class ChannelMeanProjector(Projector):
    """Per-channel mean pooling (d = 3)."""

    dim = 3

    def embed(self, image: torch.Tensor) -> torch.Tensor:
        return image.to(torch.float64).mean(dim=(1, 2))


class ConvFeatureProjector(Projector):
    """Small untrained convolutional feature extractor, seeded and frozen."""

    def __init__(self, dim: int = 32, seed: int = 0):
        generator_state = torch.random.get_rng_state()
        torch.manual_seed(seed)
        try:
            self.net = nn.Sequential(
                nn.Conv2d(3, 16, 3, stride=2, padding=1),
                nn.ReLU(),
                nn.Conv2d(16, dim, 3, stride=2, padding=1),
                nn.ReLU(),
                nn.AdaptiveAvgPool2d(1),
                nn.Flatten(),
            )
        finally:
            torch.random.set_rng_state(generator_state)
        self.net.eval().requires_grad_(False)
        self.dim = dim

    @torch.no_grad()
    def embed(self, image: torch.Tensor) -> torch.Tensor:
        return self.net(image.unsqueeze(0).to(torch.float32))[0].to(torch.float64)


class EmbeddingFileProjector(Projector):
    """Embeddings produced elsewhere, one row per image in set order.

    File format: a header line ``n d`` followed by n rows of d floats.
    """

    def __init__(self):
        self.embeddings: Optional[torch.Tensor] = None

    @property
    def initialized(self) -> bool:
        return self.embeddings is not None

    def load(self, source, cache_dir: Optional[Path] = None) -> "EmbeddingFileProjector":
        """Read an embedding file from a path or an http(s) URL."""
        path = _fetch(str(source), cache_dir) if str(source).startswith(("http://", "https://")) else Path(source)
        with open(path, "r", encoding="utf-8") as f:
            header = f.readline().split()
            if len(header) != 2:
                raise ParameterError(f"{path}: header must be 'n d', got {' '.join(header)!r}")
            n, d = int(header[0]), int(header[1])
            rows = np.loadtxt(f, dtype=np.float64, ndmin=2) if n else np.empty((0, d))
        if rows.shape != (n, d):
            raise ShapeError(f"{path}: expected {n}×{d} embeddings, found {rows.shape[0]}×{rows.shape[1]}")
        self.embeddings = torch.from_numpy(rows)
        self.dim = d
        logger.info("Loaded %d embeddings of dimension %d from %s", n, d, path)
        return self

    def embed(self, image: torch.Tensor) -> torch.Tensor:
        raise ParameterError("file embeddings are addressed by set position; use embed_set")

    def embed_images(self, images: ImageSet) -> torch.Tensor:
        if self.embeddings.shape[0] != len(images):
            raise ShapeError(
                f"embedding file has {self.embeddings.shape[0]} rows for {len(images)} images")
        return self.embeddings.clone()


class ContrastiveResNetProjector(Projector):
    """ResNet-50 backbone with a two-layer projection head, frozen.

    Weights come from a local file or an http(s) URL and must be loaded
    with ``load_weights`` before use.
    """

    INPUT_SIZE = 224
    MEAN = (0.485, 0.456, 0.406)
    STD = (0.229, 0.224, 0.225)

    def __init__(self, projection_dim: int = 128):
        backbone = torchvision.models.resnet50(weights=None)
        features = backbone.fc.in_features
        backbone.fc = nn.Identity()
        self.model = nn.ModuleDict({
            "backbone": backbone,
            "head": nn.Sequential(nn.Linear(features, features), nn.ReLU(), nn.Linear(features, projection_dim)),
        })
        self.model.eval().requires_grad_(False)
        self.dim = projection_dim
        self._loaded = False

    @property
    def initialized(self) -> bool:
        return self._loaded

    def load_weights(self, source, cache_dir: Optional[Path] = None) -> "ContrastiveResNetProjector":
        path = _fetch(str(source), cache_dir) if str(source).startswith(("http://", "https://")) else Path(source)
        state = torch.load(path, map_location="cpu")
        state = state.get("state_dict", state)
        missing, unexpected = self.model.load_state_dict(state, strict=False)
        if missing:
            logger.warning("⚠️ Projector weights missing %d tensors (e.g. %s)", len(missing), missing[0])
        if unexpected:
            logger.warning("⚠️ Ignored %d unexpected tensors in projector weights", len(unexpected))
        self._loaded = True
        return self

    @torch.no_grad()
    def embed(self, image: torch.Tensor) -> torch.Tensor:
        if not self._loaded:
            raise ProjectorStateError("ResNet projector used before load_weights()")
        x = TF.resize(image.to(torch.float32), [self.INPUT_SIZE, self.INPUT_SIZE], antialias=True)
        x = TF.normalize(x, self.MEAN, self.STD).unsqueeze(0)
        return self.model["head"](self.model["backbone"](x))[0].to(torch.float64)


def _fetch(url: str, cache_dir: Optional[Path]) -> Path:
    cache_dir = Path(cache_dir) if cache_dir else Path.cwd()
    cache_dir.mkdir(parents=True, exist_ok=True)
    target = cache_dir / url.rstrip("/").rsplit("/", 1)[-1]
    if target.exists():
        return target
    logger.info("Downloading %s", url)
    response = requests.get(url, timeout=60, stream=True)
    response.raise_for_status()
    with open(target, "wb") as f:
        for chunk in response.iter_content(chunk_size=1 << 20):
            f.write(chunk)
    return target


def embed_set(projector: Projector, images: ImageSet) -> torch.Tensor:
    """Embed every image of the set; row i belongs to image i.

    Raises:
        ProjectorStateError: If the projector has not been initialized.
    """
    if not projector.initialized:
        raise ProjectorStateError(f"{type(projector).__name__} is not initialized")
    if len(images) == 0:
        return torch.empty((0, projector.dim or 0), dtype=torch.float64)
    return projector.embed_images(images)


# ---------------------------------------------------------------------------
# k-means
# ---------------------------------------------------------------------------

@dataclass
class KMeansResult:
    """Centers (K×d), labels (m, values 0..K-1) and total inertia."""
    centers: torch.Tensor
    labels: torch.Tensor
    inertia: float
    iterations: int = 0


def _assign(points: torch.Tensor, centers: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """Nearest center per point (lowest index on ties) and its squared distance."""
    k, d = centers.shape
    rows = max(1, _ASSIGN_CHUNK_ELEMENTS // max(1, k * d))
    labels, dists = [], []
    for start in range(0, points.shape[0], rows):
        chunk = points[start:start + rows]
        sq = ((chunk[:, None, :] - centers[None, :, :]) ** 2).sum(dim=-1)
        best, idx = sq.min(dim=1)
        labels.append(idx)
        dists.append(best)
    return torch.cat(labels), torch.cat(dists)


def _settle(points: torch.Tensor, centers: torch.Tensor, max_iter: int) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Reassign exactly and move centers onto their cluster means until both agree.

    Clusters left empty by the exact reassignment keep their center.
    """
    labels, dists = _assign(points, centers)
    for _ in range(max_iter):
        sums = torch.zeros_like(centers).index_add_(0, labels, points)
        counts = torch.bincount(labels, minlength=centers.shape[0]).unsqueeze(1)
        means = torch.where(counts > 0, sums / counts.clamp(min=1).to(points.dtype), centers)
        if float((means - centers).abs().max()) <= CENTROID_TOL:
            break
        centers = means
        labels, dists = _assign(points, centers)
    return centers, labels, dists


def kmeans(
    points: torch.Tensor,
    k: int,
    seed: int,
    n_init: int = DEFAULT_N_INIT,
    max_iter: int = DEFAULT_MAX_ITER,
    tol: float = DEFAULT_TOL,
    init_centers: Optional[torch.Tensor] = None,
) -> KMeansResult:
    """Lloyd's k-means with k-means++ seeding and several restarts (scikit-learn).

    Args:
        points: m×d matrix.
        k: Number of clusters, 1 ≤ k ≤ m.
        seed: Seed for the initialization stream.
        n_init: Restarts; the lowest-inertia run wins. Ignored with init_centers.
        max_iter: Iteration cap per run.
        tol: Relative center-shift tolerance passed to scikit-learn.
        init_centers: Optional k×d warm start.

    Returns:
        KMeansResult: labels are 0-based; ties go to the lowest center index
        and every occupied center is the mean of its points within 1e-6.

    Raises:
        ParameterError: If k < 1 or m < k.
        NumericError: If points contain NaN or infinite values.
    """
    points = torch.as_tensor(points)
    if points.ndim != 2:
        raise ShapeError(f"points must be an m×d matrix, got shape {tuple(points.shape)}")
    m = points.shape[0]
    if k < 1 or m < k:
        raise ParameterError(f"k-means needs 1 <= K <= m, got K={k}, m={m}")
    if not torch.isfinite(points).all():
        raise NumericError("k-means input contains NaN or infinite values")
    points = points.detach()
    data = points.to("cpu", torch.float64).numpy()

    if init_centers is not None:
        init_centers = torch.as_tensor(init_centers).detach()
        if init_centers.shape != (k, points.shape[1]):
            raise ShapeError(f"init_centers must be {k}×{points.shape[1]}, got {tuple(init_centers.shape)}")
        init, runs = init_centers.to("cpu", torch.float64).numpy(), 1
    else:
        init, runs = "k-means++", max(1, n_init)

    estimator = KMeans(n_clusters=k, init=init, n_init=runs, max_iter=max_iter, tol=tol,
                       random_state=seed % SKLEARN_SEED_RANGE)
    with warnings.catch_warnings():
        # duplicate points leave fewer distinct clusters than K; that is allowed
        warnings.simplefilter("ignore", ConvergenceWarning)
        estimator.fit(data)

    fitted = torch.from_numpy(estimator.cluster_centers_).to(points)
    centers, labels, dists = _settle(points, fitted, max_iter)
    return KMeansResult(centers, labels, float(dists.sum()), int(estimator.n_iter_))


# ---------------------------------------------------------------------------
# Splitting
# ---------------------------------------------------------------------------

@dataclass
class SplitResult:
    """Subset labels (1..J, per image), J, and the (J_candidate, inertia) curve."""
    labels: List[int]
    J: int
    inertia_curve: List[Tuple[int, float]] = field(default_factory=list)


def elbow_index(inertias: Sequence[float]) -> int:
    """Return the 1-based candidate count at the elbow of an inertia curve.

    The curve is extended flat on the left and linearly (floored at zero)
    on the right; the elbow is the largest second difference, ties to the
    lowest count. A curve that is zero from the start yields 1.
    """
    values = [float(v) for v in inertias]
    if len(values) <= 1 or values[0] <= 0.0:
        return 1
    extended = [values[0]] + values + [max(0.0, 2 * values[-1] - values[-2])]
    second = [extended[j - 1] - 2 * extended[j] + extended[j + 1] for j in range(1, len(values) + 1)]
    return 1 + int(np.argmax(second))


def _monotone_kmeans(embeddings: torch.Tensor, j: int, seed: int, previous: Optional[KMeansResult]) -> KMeansResult:
    result = kmeans(embeddings, j, seed=derive_seed(seed, "split", j))
    if previous is not None and result.inertia > previous.inertia:
        # grow the previous solution by its worst-fitted point; Lloyd cannot increase inertia from there
        _, dists = _assign(embeddings, previous.centers)
        start = torch.cat([previous.centers, embeddings[int(torch.argmax(dists))].unsqueeze(0)])
        result = kmeans(embeddings, j, seed=seed, init_centers=start)
    return result


def split(images: ImageSet, projector: Projector, j_max: int, seed: int) -> Tuple[ImageSet, SplitResult]:
    """Partition the corpus into J subsets of correlated images.

    Args:
        images: Corpus to split.
        projector: Frozen embedding projector.
        j_max: Largest subset count considered; clamped to the corpus size.
        seed: Root seed for all k-means runs.

    Returns:
        tuple: The labelled ImageSet and the SplitResult.

    Raises:
        ParameterError: If j_max < 1 or the corpus is empty.
    """
    if j_max < 1:
        raise ParameterError(f"J_max must be at least 1, got {j_max}")
    n = len(images)
    if n == 0:
        raise ParameterError("cannot split an empty corpus")
    if n < j_max:
        logger.warning("⚠️ J_max=%d exceeds the corpus size %d; clamping to %d", j_max, n, n)
        j_max = n

    embeddings = embed_set(projector, images).to(torch.float64)
    runs: List[KMeansResult] = []
    for j in range(1, j_max + 1):
        runs.append(_monotone_kmeans(embeddings, j, seed, runs[-1] if runs else None))
    curve = [(j, run.inertia) for j, run in enumerate(runs, start=1)]

    chosen = elbow_index([inertia for _, inertia in curve])
    raw = runs[chosen - 1].labels.tolist()
    renumber = {}
    for label in raw:
        renumber.setdefault(label, len(renumber) + 1)
    labels = [renumber[label] for label in raw]
    result = SplitResult(labels=labels, J=len(renumber), inertia_curve=curve)
    logger.info("Split %d images into J=%d subsets", n, result.J)
    return images.with_labels(labels), result
