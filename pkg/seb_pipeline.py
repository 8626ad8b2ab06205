"""End-to-end Seb transmission model: transmitter and receiver.

One call to ``SebTransmissionModel.forward`` processes one subset of
images (all the same size): patch latents are clustered into Sebs, the
reference images are built from the Sebs, and the compensation and
residual codecs code the rest. ``encode``/``decode`` split the same
computation at the channel so the receiver can be run on its own.
"""

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

import torch
from torch import nn

from containers import (pack_latent, pack_sebs, pack_usage, read_container, unpack_latent, unpack_sebs,
                        unpack_usage, write_container)
from dataset_ingest import (PadInfo, PatchGrid, check_image, crop_padding, depatchify, pad_to_multiple,
                            patchify)
from entropy_models import FactorizedEntropyModel, quantize, rate
from errors import ParameterError, ShapeError
from gdn_layers import AnalysisTransform
from rate_accounting import RateBreakdown, rate_A
from residual_codec import CompensationCodec, ResidualCodec, reconstruct
from seb_core import (K_DIVISOR, RefPatchDecoder, SebCodebook, SebEncoder, UsageMap,
                      assemble_reference, build_codebook, cluster_means, decode_codebook,
                      encode_patches, straight_through)
from set_splitter import DEFAULT_MAX_ITER

logger = logging.getLogger(__name__)


@dataclass
class ModelConfig:
    """Architecture hyperparameters; stored in every checkpoint."""
    patch_size: int = 32
    latent_channels: int = 192
    hidden_channels: int = 192
    motion_channels: int = 128
    hyper_channels: int = 128
    residual_channels: int = 192
    k_divisor: int = K_DIVISOR

    def __post_init__(self):
        if self.patch_size <= 0 or self.patch_size % AnalysisTransform.DOWNSAMPLING:
            raise ParameterError(
                f"patch size must be a positive multiple of {AnalysisTransform.DOWNSAMPLING}, got {self.patch_size}")
        if self.k_divisor < 1:
            raise ParameterError(f"K divisor must be at least 1, got {self.k_divisor}")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class TransmitPayload:
    """Everything the receiver gets: quantized Sebs, usage, Z^m and Z^r."""
    sebs: torch.Tensor
    usage: UsageMap
    compensation_latent: torch.Tensor
    compensation_hyper: torch.Tensor
    residual_latent: torch.Tensor
    rows: int
    cols: int
    grid_pad: PadInfo
    image_size: tuple


@dataclass
class PipelineOutput:
    """Result of one forward pass over a subset."""
    reconstruction: torch.Tensor
    reference: torch.Tensor
    prediction: torch.Tensor
    rates: RateBreakdown
    latents: torch.Tensor
    assigned_sebs: torch.Tensor
    codebook: SebCodebook
    usage: UsageMap
    floored: int = 0
    payload: Optional[TransmitPayload] = field(default=None, repr=False)


class SebTransmissionModel(nn.Module):
    """Seb generator, reference patch generator, entropy models and both codecs."""

    def __init__(self, config: Optional[ModelConfig] = None):
        super().__init__()
        self.config = config or ModelConfig()
        cfg = self.config
        self.seb_encoder = SebEncoder(cfg.latent_channels, cfg.hidden_channels)
        self.ref_decoder = RefPatchDecoder(cfg.latent_channels, cfg.hidden_channels)
        self.seb_entropy = FactorizedEntropyModel(cfg.latent_channels)
        self.compensation = CompensationCodec(cfg.motion_channels, cfg.hyper_channels)
        self.residual = ResidualCodec(cfg.residual_channels, cfg.hidden_channels)

    def _check_batch(self, images: torch.Tensor) -> None:
        if images.ndim != 4 or images.shape[1] != 3 or images.shape[0] == 0:
            raise ShapeError(f"expected a non-empty N×3×H×W batch, got shape {tuple(images.shape)}")
        for image in images:
            check_image(image)

    def _references(self, latents, sebs_hat, usage, grids, mode):
        n = len(grids)
        rows, cols, pad = grids[0].rows, grids[0].cols, grids[0].pad_info
        if mode == "train":
            # decode per patch so the straight-through gradient reaches every latent
            passed = straight_through(latents, SebCodebook(sebs_hat), usage)
            patches = self.ref_decoder(passed).clamp(0.0, 1.0)
            codebook = SebCodebook(sebs_hat.detach())
            per_image = patches.reshape((n, rows * cols) + patches.shape[1:])
            refs = [depatchify(PatchGrid(p, rows, cols, pad)) for p in per_image]
        else:
            codebook = decode_codebook(self.ref_decoder, SebCodebook(sebs_hat))
            refs = assemble_reference(codebook, usage, rows, cols, pad)
        return torch.stack(refs), codebook

    def forward(
        self,
        images: torch.Tensor,
        mode: str = "train",
        seed: int = 0,
        init_centers: Optional[torch.Tensor] = None,
        kmeans_iterations: int = DEFAULT_MAX_ITER,
    ) -> PipelineOutput:
        """Run transmitter and receiver on one subset.

        Args:
            images: N×3×H×W batch forming one subset.
            mode: ``train`` (noise quantization, straight-through) or ``eval``
                (rounding, decoded codebook).
            seed: k-means seed.
            init_centers: Previous Sebs to warm-start k-means.
            kmeans_iterations: k-means iteration cap.
        """
        self._check_batch(images)
        cfg = self.config
        n = images.shape[0]
        grids = [patchify(image, cfg.patch_size, cfg.patch_size) for image in images]
        n_p = grids[0].n_p

        latents = encode_patches(self.seb_encoder, grids)
        codebook, usage = build_codebook(latents, n, n_p, seed, cfg.k_divisor, init_centers, kmeans_iterations)
        sebs = cluster_means(latents, usage, codebook.sebs)
        sebs_hat = quantize(sebs, mode)
        seb_rate = rate(self.seb_entropy, sebs_hat)
        assigned = sebs[usage.indices.reshape(-1).to(sebs.device)]

        references, decoded = self._references(latents, sebs_hat, usage, grids, mode)

        target, pad = pad_to_multiple(images, AnalysisTransform.DOWNSAMPLING)
        reference_p, _ = pad_to_multiple(references, AnalysisTransform.DOWNSAMPLING)
        comp = self.compensation(target, reference_p, mode)
        decoded_residual, residual_hat, residual_rate = self.residual(target - comp.prediction, mode)
        recon = reconstruct(comp.prediction, decoded_residual)

        rates = RateBreakdown(
            bits_S=seb_rate.bits,
            bits_A=rate_A(n, n_p, usage.K),
            bits_Zm=comp.rate.bits,
            bits_Zr=residual_rate.bits,
            image_count=n,
        )
        payload = None
        if mode == "eval":
            payload = TransmitPayload(
                sebs=sebs_hat.detach(), usage=usage,
                compensation_latent=comp.latent.detach(), compensation_hyper=comp.hyper_latent.detach(),
                residual_latent=residual_hat.detach(), rows=grids[0].rows, cols=grids[0].cols,
                grid_pad=grids[0].pad_info, image_size=tuple(images.shape[-2:]),
            )
        return PipelineOutput(
            reconstruction=crop_padding(recon, pad),
            reference=references,
            prediction=crop_padding(comp.prediction, pad),
            rates=rates,
            latents=latents,
            assigned_sebs=assigned,
            codebook=SebCodebook(codebook.sebs.detach(), decoded.ref_patches),
            usage=usage,
            floored=seb_rate.floored + comp.rate.floored + residual_rate.floored,
            payload=payload,
        )

    @torch.no_grad()
    def encode(self, images: torch.Tensor, seed: int = 0) -> PipelineOutput:
        """Transmitter side in eval mode; ``payload`` holds what goes on the channel."""
        return self.forward(images, mode="eval", seed=seed)

    @torch.no_grad()
    def decode(self, payload: TransmitPayload) -> Dict[str, torch.Tensor]:
        """Receiver side: rebuild references, predictions and reconstructions."""
        codebook = decode_codebook(self.ref_decoder, SebCodebook(payload.sebs))
        references = torch.stack(
            assemble_reference(codebook, payload.usage, payload.rows, payload.cols, payload.grid_pad))
        reference_p, pad = pad_to_multiple(references, AnalysisTransform.DOWNSAMPLING)
        prediction, _ = self.compensation.synthesize(payload.compensation_latent, reference_p)
        residual = self.residual.decode(payload.residual_latent)
        recon = reconstruct(prediction, residual)
        return {
            "reconstruction": crop_padding(recon, pad),
            "reference": references,
            "prediction": crop_padding(prediction, pad),
        }


def group_by_size(images: List[torch.Tensor]) -> List[List[int]]:
    """Indices of same-sized images, in first-seen order; each group can be batched."""
    groups: Dict[tuple, List[int]] = {}
    for index, image in enumerate(images):
        groups.setdefault(tuple(image.shape), []).append(index)
    return list(groups.values())


def write_payload(directory: Path, payload: TransmitPayload) -> Dict[str, int]:
    """Serialize a payload as SEB1/SEBA/SEBZ files plus a JSON geometry manifest.

    Returns:
        dict: Bytes written per component (S, A, Zm, Zr).
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    sizes = {"S": 0, "A": 0, "Zm": 0, "Zr": 0}
    blobs = [("sebs.seb1", "S", pack_sebs(payload.sebs)),
             ("usage.seba", "A", pack_usage(payload.usage.indices, payload.usage.K))]
    for i in range(payload.usage.n_images):
        blobs.append((f"zm_{i:04d}.sebz", "Zm", pack_latent(payload.compensation_latent[i])))
        blobs.append((f"zm_hyper_{i:04d}.sebz", "Zm", pack_latent(payload.compensation_hyper[i])))
        blobs.append((f"zr_{i:04d}.sebz", "Zr", pack_latent(payload.residual_latent[i])))
    for name, component, data in blobs:
        write_container(directory / name, data)
        sizes[component] += len(data)
    manifest = {
        "rows": payload.rows,
        "cols": payload.cols,
        "grid_pad": asdict(payload.grid_pad),
        "image_size": list(payload.image_size),
    }
    with open(directory / "payload.json", "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2)
    return sizes


def read_payload(directory: Path) -> TransmitPayload:
    """Inverse of ``write_payload``."""
    directory = Path(directory)
    with open(directory / "payload.json", "r", encoding="utf-8") as f:
        manifest = json.load(f)
    indices, k = unpack_usage(read_container(directory / "usage.seba"))
    n = indices.shape[0]

    def stack(prefix: str) -> torch.Tensor:
        return torch.stack([unpack_latent(read_container(directory / f"{prefix}_{i:04d}.sebz")) for i in range(n)])

    return TransmitPayload(
        sebs=unpack_sebs(read_container(directory / "sebs.seb1")),
        usage=UsageMap(indices, k),
        compensation_latent=stack("zm"),
        compensation_hyper=stack("zm_hyper"),
        residual_latent=stack("zr"),
        rows=manifest["rows"],
        cols=manifest["cols"],
        grid_pad=PadInfo(**manifest["grid_pad"]),
        image_size=tuple(manifest["image_size"]),
    )
