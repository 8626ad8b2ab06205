"""Compensation and residual coding around the Seb reference image.

The reference image is aligned to the raw image by a learned flow field;
the flow is coded into the compensation latent Z^m (hyperprior entropy
model), the warped reference is refined into a prediction, and what the
prediction misses is coded into the residual latent Z^r (factorized
entropy model).
"""

import logging
from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import nn

from entropy_models import (FactorizedEntropyModel, GaussianConditionalModel,
                            RateEstimate, quantize, rate)
from errors import NumericError, ShapeError
from gdn_layers import AnalysisTransform, HyperAnalysis, HyperSynthesis, SynthesisTransform

logger = logging.getLogger(__name__)


def _batched(tensor: torch.Tensor) -> torch.Tensor:
    return tensor if tensor.ndim == 4 else tensor.unsqueeze(0)


def warp(reference: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    """Bilinearly sample ``reference`` at positions displaced by ``flow``.

    ``flow`` holds (dy, dx) per pixel; output[y, x] = reference[y + dy, x + dx]
    with coordinates clamped to the border. Works on C×H×W with 2×H×W, or on
    batches of both. Zero flow returns the reference exactly.
    """
    single = reference.ndim == 3
    ref, flo = _batched(reference), _batched(flow)
    if flo.shape[1] != 2 or flo.shape[0] != ref.shape[0] or flo.shape[-2:] != ref.shape[-2:]:
        raise ShapeError(f"flow {tuple(flow.shape)} does not match reference {tuple(reference.shape)}")
    n, c, h, w = ref.shape
    grid_y = torch.arange(h, device=ref.device, dtype=flo.dtype).reshape(1, h, 1)
    grid_x = torch.arange(w, device=ref.device, dtype=flo.dtype).reshape(1, 1, w)
    ys = (grid_y + flo[:, 0]).clamp(0, h - 1)
    xs = (grid_x + flo[:, 1]).clamp(0, w - 1)
    y0, x0 = ys.floor(), xs.floor()
    wy, wx = (ys - y0).unsqueeze(1), (xs - x0).unsqueeze(1)
    y0, x0 = y0.long(), x0.long()
    y1, x1 = (y0 + 1).clamp(max=h - 1), (x0 + 1).clamp(max=w - 1)

    flat = ref.reshape(n, c, h * w)

    def gather(yy: torch.Tensor, xx: torch.Tensor) -> torch.Tensor:
        index = (yy * w + xx).reshape(n, 1, h * w).expand(n, c, h * w)
        return flat.gather(2, index).reshape(n, c, h, w)

    out = ((1 - wy) * (1 - wx) * gather(y0, x0) + (1 - wy) * wx * gather(y0, x1)
           + wy * (1 - wx) * gather(y1, x0) + wy * wx * gather(y1, x1))
    return out[0] if single else out


class FlowEstimator(nn.Module):
    """Coarse-to-fine flow network; each level refines the upsampled flow.

    The last convolution of every level is zero-initialized, so an untrained
    estimator predicts zero flow.
    """

    def __init__(self, levels: int = 2, filter_counts: Sequence[int] = (32, 64, 32, 16, 2), kernel_size: int = 5):
        super().__init__()
        self.levels = nn.ModuleList()
        for _ in range(levels):
            layers = []
            channels = 8
            for i, count in enumerate(filter_counts):
                layers.append(nn.Conv2d(channels, count, kernel_size, padding=kernel_size // 2))
                if i < len(filter_counts) - 1:
                    layers.append(nn.ReLU())
                channels = count
            nn.init.zeros_(layers[-1].weight)
            nn.init.zeros_(layers[-1].bias)
            self.levels.append(nn.Sequential(*layers))

    def forward(self, target: torch.Tensor, reference: torch.Tensor) -> torch.Tensor:
        targets, references = [target], [reference]
        for _ in range(1, len(self.levels)):
            targets.append(F.avg_pool2d(targets[-1], 2, ceil_mode=True))
            references.append(F.avg_pool2d(references[-1], 2, ceil_mode=True))
        flow = torch.zeros_like(references[-1][:, :2])
        for level in self.levels:
            tgt, ref = targets.pop(), references.pop()
            if flow.shape[-2:] != ref.shape[-2:]:
                scale = ref.shape[-1] / flow.shape[-1]
                flow = F.interpolate(flow, size=ref.shape[-2:], mode="bilinear", align_corners=False) * scale
            flow = flow + level(torch.cat((warp(ref, flow), tgt, flow), dim=1))
        return flow


def estimate_flow(estimator: FlowEstimator, target: torch.Tensor, reference: torch.Tensor) -> torch.Tensor:
    """Flow (dy, dx) such that warp(reference, flow) approximates target."""
    if target.shape != reference.shape:
        raise ShapeError(f"target {tuple(target.shape)} and reference {tuple(reference.shape)} differ")
    flow = estimator(_batched(target), _batched(reference))
    return flow[0] if target.ndim == 3 else flow


@dataclass
class CompensationOutput:
    """Prediction of the raw image plus everything needed to price and ship it."""
    prediction: torch.Tensor
    flow: torch.Tensor
    latent: torch.Tensor
    hyper_latent: torch.Tensor
    rate: RateEstimate


class MotionRefinement(nn.Module):
    """Corrects the warped reference; zero-initialized output, so it starts as identity."""

    def __init__(self, channels: int = 64):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(8, channels, 3, padding=1),
            nn.ReLU(),
            nn.Conv2d(channels, channels, 3, padding=1),
            nn.ReLU(),
            nn.Conv2d(channels, 3, 3, padding=1),
        )
        nn.init.zeros_(self.net[-1].weight)
        nn.init.zeros_(self.net[-1].bias)

    def forward(self, warped: torch.Tensor, reference: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
        return warped + self.net(torch.cat((warped, reference, flow), dim=1))


class CompensationCodec(nn.Module):
    """Flow estimation, flow coding (Z^m with hyperprior) and motion compensation.

    The encoder sees the flow only; the decoder rebuilds the flow from Z^m
    and warps the reference itself.
    """

    def __init__(self, motion_channels: int = 128, hyper_channels: int = 128):
        super().__init__()
        self.flow_estimator = FlowEstimator()
        self.flow_analysis = AnalysisTransform(2, motion_channels, motion_channels)
        self.flow_synthesis = SynthesisTransform(motion_channels, motion_channels, 2)
        self.hyper_analysis = HyperAnalysis(motion_channels, hyper_channels)
        self.hyper_synthesis = HyperSynthesis(hyper_channels, motion_channels)
        self.hyper_model = FactorizedEntropyModel(hyper_channels)
        self.latent_model = GaussianConditionalModel()
        self.refinement = MotionRefinement()

    def _scales(self, hyper_hat: torch.Tensor, latent_shape: torch.Size) -> torch.Tensor:
        scales = self.hyper_synthesis(hyper_hat)
        return scales[..., :latent_shape[-2], :latent_shape[-1]]

    def price(self, latent_hat: torch.Tensor, hyper_hat: torch.Tensor) -> RateEstimate:
        """Bits of Z^m: the latent under its Gaussian prior plus the hyper-latent."""
        main = rate(self.latent_model, latent_hat, self._scales(hyper_hat, latent_hat.shape))
        side = rate(self.hyper_model, hyper_hat)
        return RateEstimate(main.bits + side.bits, main.floored + side.floored)

    def extract(self, target: torch.Tensor, reference: torch.Tensor, mode: str):
        """Compensation features of ``target`` relative to ``reference``.

        Returns:
            tuple: quantized latent and quantized hyper-latent.
        """
        latent = self.flow_analysis(estimate_flow(self.flow_estimator, target, reference))
        hyper = self.hyper_analysis(latent)
        return quantize(latent, mode), quantize(hyper, mode)

    def synthesize(self, latent_hat: torch.Tensor, reference: torch.Tensor):
        """Prediction and decoded flow from the compensation latent."""
        flow = self.flow_synthesis(latent_hat)[..., :reference.shape[-2], :reference.shape[-1]]
        prediction = self.refinement(warp(reference, flow), reference, flow)
        return prediction, flow

    def forward(self, target: torch.Tensor, reference: torch.Tensor, mode: str = "train") -> CompensationOutput:
        latent_hat, hyper_hat = self.extract(target, reference, mode)
        prediction, flow = self.synthesize(latent_hat, reference)
        return CompensationOutput(prediction, flow, latent_hat, hyper_hat, self.price(latent_hat, hyper_hat))


class ResidualCodec(nn.Module):
    """Residual analysis/synthesis pair with a factorized entropy model."""

    def __init__(self, residual_channels: int = 192, hidden_channels: int = 192):
        super().__init__()
        self.analysis = AnalysisTransform(3, hidden_channels, residual_channels)
        self.synthesis = SynthesisTransform(residual_channels, hidden_channels, 3)
        self.entropy_model = FactorizedEntropyModel(residual_channels)

    def decode(self, latent_hat: torch.Tensor) -> torch.Tensor:
        return self.synthesis(latent_hat)

    def forward(self, residual: torch.Tensor, mode: str = "train"):
        """Returns (decoded residual, quantized latent, RateEstimate)."""
        latent_hat = quantize(encode_residual(self, residual), mode)
        return self.decode(latent_hat), latent_hat, rate(self.entropy_model, latent_hat)


def encode_residual(codec: ResidualCodec, residual: torch.Tensor) -> torch.Tensor:
    """Unquantized residual latent Z^r (16× spatial downsampling).

    Raises:
        NumericError: If the residual contains NaN or infinite values.
    """
    if not torch.isfinite(residual).all():
        raise NumericError("residual contains NaN or infinite values")
    latent = codec.analysis(_batched(residual))
    return latent[0] if residual.ndim == 3 else latent


def reconstruct(prediction: torch.Tensor, residual: torch.Tensor,
                clamp: bool = True) -> torch.Tensor:
    """prediction + residual, clamped to [0, 1] unless ``clamp`` is False."""
    if prediction.shape != residual.shape:
        raise ShapeError(f"prediction {tuple(prediction.shape)} and residual {tuple(residual.shape)} differ")
    total = prediction + residual
    return total.clamp(0.0, 1.0) if clamp else total
