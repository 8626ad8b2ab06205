"""Rate bookkeeping: bits per component, usage cost and channel bandwidth ratio."""

import logging
import math
from dataclasses import dataclass, fields
from typing import Dict, Sequence, Tuple, Union

import torch

from channel import budget, source_symbols
from containers import bit_width
from entropy_models import EmpiricalPmfModel, EntropyModel, quantize, rate
from errors import ParameterError

logger = logging.getLogger(__name__)

Bits = Union[float, torch.Tensor]
COMPONENTS = ("S", "A", "Zm", "Zr")


@dataclass
class RateBreakdown:
    """Bits attributed to Sebs (S), usage (A), compensation (Zm) and residual (Zr).

    Fields may be floats or scalar tensors; tensors keep the loss
    differentiable. ``image_count`` is how many images the bits cover.
    """
    bits_S: Bits = 0.0
    bits_A: Bits = 0.0
    bits_Zm: Bits = 0.0
    bits_Zr: Bits = 0.0
    image_count: int = 1

    @property
    def total(self) -> Bits:
        return self.bits_S + self.bits_A + self.bits_Zm + self.bits_Zr

    def parts(self) -> Dict[str, float]:
        return {name: float(getattr(self, f"bits_{name}")) for name in COMPONENTS}

    def shares(self) -> Dict[str, float]:
        """Fraction of the total carried by each component."""
        parts = self.parts()
        total = sum(parts.values())
        return {name: (value / total if total > 0 else 0.0) for name, value in parts.items()}

    def scaled(self, factor: float) -> "RateBreakdown":
        return RateBreakdown(self.bits_S * factor, self.bits_A * factor, self.bits_Zm * factor,
                             self.bits_Zr * factor, self.image_count)

    def per_image(self) -> "RateBreakdown":
        """Average bits per image; Seb bits of a subset are split evenly."""
        if self.image_count <= 0:
            raise ParameterError("rate breakdown covers no images")
        view = self.scaled(1.0 / self.image_count)
        view.image_count = 1
        return view

    def detached(self) -> "RateBreakdown":
        values = [float(getattr(self, f.name)) for f in fields(self) if f.name.startswith("bits_")]
        return RateBreakdown(*values, image_count=self.image_count)

    def __add__(self, other: "RateBreakdown") -> "RateBreakdown":
        return RateBreakdown(self.bits_S + other.bits_S, self.bits_A + other.bits_A,
                             self.bits_Zm + other.bits_Zm, self.bits_Zr + other.bits_Zr,
                             self.image_count + other.image_count)


def rate_S(sebs: torch.Tensor, entropy_model: EntropyModel, mode: str = "eval") -> torch.Tensor:
    """Bits to convey the K quantized Seb latents under ``entropy_model``."""
    return rate(entropy_model, quantize(sebs, mode)).bits


def rate_A(n: int, n_p: int, k: int) -> float:
    """Ideal usage cost n·n_p·log2 K."""
    if k < 1:
        raise ParameterError(f"K must be at least 1, got {k}")
    return n * n_p * math.log2(k)


def usage_payload_bits(n: int, n_p: int, k: int) -> int:
    """Bits the serialized usage map spends on indices (ceil(log2 K) each)."""
    return n * n_p * bit_width(k)


def usage_entropy_bits(indices: torch.Tensor) -> float:
    """Usage cost under an ideal coder fitted to the observed index histogram."""
    if indices.numel() == 0:
        return 0.0
    return float(rate(EmpiricalPmfModel.from_symbols(indices), indices.to(torch.float64)).bits)


def _dims_list(image_dims) -> Sequence[Tuple[int, int, int]]:
    return [tuple(image_dims)] if isinstance(image_dims[0], int) else [tuple(d) for d in image_dims]


def _source_total(image_dims: Union[Tuple[int, int, int], Sequence[Tuple[int, int, int]]]) -> int:
    total = sum(source_symbols(h, w, c) for c, h, w in _dims_list(image_dims))
    if total <= 0:
        raise ParameterError("image dimensions give no source symbols")
    return total


def cbr(bits: float, snr_db: float, image_dims) -> float:
    """Channel symbols over source symbols for ``bits`` sent at ``snr_db``.

    ``image_dims`` is one (C, H, W) triple or a sequence of them; the ratio
    is taken over the whole set.
    """
    return budget(float(bits), snr_db).symbols / _source_total(image_dims)


def cbr_breakdown(rates: RateBreakdown, snr_db: float, image_dims) -> Dict[str, float]:
    """Component CBRs plus ``total``, which is their exact sum."""
    parts = {f"cbr_{name}": cbr(value, snr_db, image_dims) for name, value in rates.parts().items()}
    parts["cbr_total"] = sum(parts.values())
    return parts


def bits_per_pixel(bits: float, image_dims) -> float:
    """Bits over pixel count (H·W summed over the set)."""
    pixels = sum(h * w for _, h, w in _dims_list(image_dims))
    if pixels <= 0:
        raise ParameterError("image dimensions give no pixels")
    return float(bits) / pixels
