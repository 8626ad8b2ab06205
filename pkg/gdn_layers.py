"""Strided analysis/synthesis transforms built from compressai layers.

The same four-stage family (5×5 kernels, stride 2, GDN between stages) is
used by the Seb encoder, the reference patch decoder, the compensation
codec and the residual codec, so it lives here once.
"""

from compressai.layers import GDN
from compressai.models.utils import conv, deconv
from torch import nn

__all__ = ["GDN", "AnalysisTransform", "SynthesisTransform", "HyperAnalysis", "HyperSynthesis"]


class AnalysisTransform(nn.Sequential):
    """Four stride-2 convolutions with GDN in between: 16× downsampling."""

    DOWNSAMPLING = 16

    def __init__(self, in_channels: int, hidden_channels: int, out_channels: int):
        super().__init__(
            conv(in_channels, hidden_channels),
            GDN(hidden_channels),
            conv(hidden_channels, hidden_channels),
            GDN(hidden_channels),
            conv(hidden_channels, hidden_channels),
            GDN(hidden_channels),
            conv(hidden_channels, out_channels),
        )


class SynthesisTransform(nn.Sequential):
    """Mirror of AnalysisTransform: four stride-2 deconvolutions with IGDN."""

    def __init__(self, in_channels: int, hidden_channels: int, out_channels: int):
        super().__init__(
            deconv(in_channels, hidden_channels),
            GDN(hidden_channels, inverse=True),
            deconv(hidden_channels, hidden_channels),
            GDN(hidden_channels, inverse=True),
            deconv(hidden_channels, hidden_channels),
            GDN(hidden_channels, inverse=True),
            deconv(hidden_channels, out_channels),
        )


class HyperAnalysis(nn.Sequential):
    """Side-information transform producing the hyper-latent (4× further down)."""

    def __init__(self, in_channels: int, hidden_channels: int):
        super().__init__(
            conv(in_channels, hidden_channels, kernel_size=3, stride=1),
            nn.ReLU(inplace=True),
            conv(hidden_channels, hidden_channels),
            nn.ReLU(inplace=True),
            conv(hidden_channels, hidden_channels),
        )


class HyperSynthesis(nn.Sequential):
    """Maps the decoded hyper-latent to positive Gaussian scales."""

    def __init__(self, hidden_channels: int, out_channels: int):
        super().__init__(
            deconv(hidden_channels, hidden_channels),
            nn.ReLU(inplace=True),
            deconv(hidden_channels, hidden_channels),
            nn.ReLU(inplace=True),
            conv(hidden_channels, out_channels, kernel_size=3, stride=1),
            nn.Softplus(),
        )
