"""Entropy models used to price quantized latents in bits.

Rates are ideal code lengths, ``-log2 p`` summed over elements; no actual
arithmetic coder is run. Probabilities are floored at 2**-32 per element
and the number of floored elements is reported with every estimate.
"""

import logging
from typing import NamedTuple, Optional, Tuple

from compressai.entropy_models import EntropyBottleneck, GaussianConditional
import torch
from torch import nn

from errors import NumericError, ParameterError

logger = logging.getLogger(__name__)

PROB_FLOOR = 2.0 ** -32
QUANTIZE_MODES = ("train", "eval")


class RateEstimate(NamedTuple):
    """Bits of one latent and how many elements hit the probability floor."""
    bits: torch.Tensor
    floored: int


def quantize(latent: torch.Tensor, mode: str) -> torch.Tensor:
    """Quantize a latent for training or evaluation.

    ``train`` adds uniform noise in [-0.5, 0.5) as a differentiable proxy;
    ``eval`` rounds to the nearest integer with ties to even.
    """
    if mode == "train":
        return latent + (torch.rand_like(latent) - 0.5)
    if mode == "eval":
        return torch.round(latent)
    raise ParameterError(f"quantize mode must be one of {QUANTIZE_MODES}, got {mode!r}")


class EntropyModel(nn.Module):
    """Base class: subclasses return per-element probability masses."""

    def likelihood(self, values: torch.Tensor, context: Optional[torch.Tensor] = None) -> torch.Tensor:
        raise NotImplementedError


def rate(model: EntropyModel, values: torch.Tensor, context: Optional[torch.Tensor] = None) -> RateEstimate:
    """Sum of ``-log2 p`` over all elements of ``values`` under ``model``.

    Args:
        model: Entropy model providing per-element probability masses.
        values: Quantized (or noise-proxied) latent.
        context: Conditioning input for parametric models (Gaussian scales).

    Returns:
        RateEstimate: Differentiable bit count and the number of floored elements.
    """
    if not torch.isfinite(values).all():
        raise NumericError("cannot price a latent containing NaN or infinite values")
    probs = model.likelihood(values, context)
    floored = int((probs < PROB_FLOOR).sum().item())
    if floored:
        logger.debug("%d of %d probabilities floored at 2^-32", floored, probs.numel())
    bits = -torch.log2(probs.clamp(min=PROB_FLOOR)).sum()
    return RateEstimate(bits, floored)


class FactorizedEntropyModel(EntropyModel):
    """Non-parametric, fully factorized density, one per channel.

    Wraps compressai's ``EntropyBottleneck``: each channel's cumulative is
    a small monotone network and the mass of an integer bin is the
    cumulative difference across it. Inputs are shaped (batch, channels, ...).
    Values are priced as given, without the bottleneck's median-shifted
    rounding.
    """

    def __init__(self, channels: int, filters: Tuple[int, ...] = (3, 3, 3, 3), init_scale: float = 10.0):
        super().__init__()
        self.channels = int(channels)
        self.bottleneck = EntropyBottleneck(
            self.channels, filters=tuple(int(f) for f in filters), init_scale=init_scale,
            likelihood_bound=PROB_FLOOR,
        )

    def likelihood(self, values: torch.Tensor, context: Optional[torch.Tensor] = None) -> torch.Tensor:
        if values.ndim < 2 or values.shape[1] != self.channels:
            raise ParameterError(
                f"expected (batch, {self.channels}, ...) input, got shape {tuple(values.shape)}")
        perm = (1, 0) + tuple(range(2, values.ndim))
        moved = values.permute(*perm).contiguous()
        flat = moved.reshape(self.channels, 1, -1)
        probs, _, _ = self.bottleneck._likelihood(flat)  # pylint: disable=protected-access
        return probs.reshape(moved.shape).permute(*perm)


class GaussianConditionalModel(EntropyModel):
    """Zero-mean (or given-mean) Gaussian convolved with a unit box.

    ``context`` carries the scales predicted from the hyper-latent; scales
    below ``scale_bound`` are raised to it by compressai's lower bound.
    """

    def __init__(self, scale_bound: float = 0.11):
        super().__init__()
        if scale_bound <= 0:
            raise ParameterError(f"scale_bound must be positive, got {scale_bound}")
        self.scale_bound = float(scale_bound)
        self.conditional = GaussianConditional(None, scale_bound=self.scale_bound, likelihood_bound=PROB_FLOOR)

    def likelihood(self, values: torch.Tensor, context: Optional[torch.Tensor] = None,
                   means: Optional[torch.Tensor] = None) -> torch.Tensor:
        if context is None:
            raise ParameterError("the Gaussian conditional model needs predicted scales")
        if context.shape != values.shape:
            raise ParameterError(
                f"scales shape {tuple(context.shape)} does not match values {tuple(values.shape)}")
        return self.conditional._likelihood(values, context, means=means)  # pylint: disable=protected-access


class EmpiricalPmfModel(EntropyModel):
    """Fixed probability mass function over consecutive integers.

    ``pmf[i]`` is the probability of symbol ``offset + i``; symbols outside
    the support get probability zero and are floored by ``rate``.
    """

    def __init__(self, pmf: torch.Tensor, offset: int = 0):
        super().__init__()
        pmf = torch.as_tensor(pmf, dtype=torch.float64)
        if pmf.ndim != 1 or pmf.numel() == 0 or (pmf < 0).any():
            raise ParameterError("pmf must be a non-empty vector of non-negative masses")
        total = pmf.sum()
        if total <= 0:
            raise ParameterError("pmf must have positive total mass")
        self.register_buffer("pmf", pmf / total)
        self.offset = int(offset)

    @classmethod
    def from_symbols(cls, symbols: torch.Tensor) -> "EmpiricalPmfModel":
        """Histogram model fitted to the observed integer symbols."""
        flat = torch.as_tensor(symbols).reshape(-1).to(torch.int64)
        if flat.numel() == 0:
            raise ParameterError("cannot fit a pmf to an empty symbol set")
        low = int(flat.min())
        counts = torch.bincount(flat - low).to(torch.float64)
        return cls(counts, offset=low)

    def likelihood(self, values: torch.Tensor, context: Optional[torch.Tensor] = None) -> torch.Tensor:
        index = torch.round(values).to(torch.int64) - self.offset
        inside = (index >= 0) & (index < self.pmf.numel())
        probs = self.pmf[index.clamp(0, self.pmf.numel() - 1)]
        return torch.where(inside, probs, torch.zeros_like(probs))
