"""Wireless link simulation and ideal capacity-achieving code accounting.

Two independent paths live here: a complex AWGN symbol channel with known
gain (y = h·x + z, equalized by division), and the ideal-code abstraction
that delivers any bit payload error-free at log2(1 + SNR) bits per channel
symbol. Evaluations use one or the other, never both.
"""

import logging
import math
from dataclasses import dataclass

import numpy as np

from errors import NumericError, ParameterError, SingularChannelError

logger = logging.getLogger(__name__)

COLOR_CHANNELS = 3


@dataclass(frozen=True)
class ChannelSpec:
    """Link parameters.

    Attributes:
        snr_db: Signal-to-noise ratio in dB; ``inf`` disables the noise.
        gain: Complex channel gain h, known at the receiver.
        signal_power: Average transmit symbol power.
        seed: Seed of the noise stream.
    """
    snr_db: float = 10.0
    gain: complex = 1.0 + 0.0j
    signal_power: float = 1.0
    seed: int = 0

    @property
    def noise_power(self) -> float:
        """σ² = signal_power / 10^(snr_db/10)."""
        if math.isinf(self.snr_db) and self.snr_db > 0:
            return 0.0
        return self.signal_power / 10.0 ** (self.snr_db / 10.0)

    @property
    def effective_snr_db(self) -> float:
        """SNR after zero-forcing equalization with this gain."""
        return effective_snr_db(self.snr_db, self.gain)


@dataclass(frozen=True)
class LinkBudget:
    """Channel symbols needed to carry ``bits`` at a given capacity."""
    bits: float
    capacity_bits_per_symbol: float
    symbols: float

    def __add__(self, other: "LinkBudget") -> "LinkBudget":
        if not math.isclose(self.capacity_bits_per_symbol, other.capacity_bits_per_symbol):
            raise ParameterError("cannot add link budgets computed at different capacities")
        return LinkBudget(self.bits + other.bits, self.capacity_bits_per_symbol, self.symbols + other.symbols)


def transmit(x, spec: ChannelSpec) -> np.ndarray:
    """Pass complex symbols through y = h·x + z.

    z is circular complex Gaussian with total variance σ², drawn from a
    stream seeded by ``spec.seed``.
    """
    symbols = np.asarray(x, dtype=np.complex128)
    if not np.all(np.isfinite(symbols)):
        raise NumericError("channel input contains NaN or infinite values")
    received = spec.gain * symbols
    sigma2 = spec.noise_power
    if sigma2 == 0.0:
        return received
    rng = np.random.default_rng(spec.seed)
    scale = math.sqrt(sigma2 / 2.0)
    noise = scale * (rng.standard_normal(symbols.shape) + 1j * rng.standard_normal(symbols.shape))
    return received + noise


def equalize(y, h: complex) -> np.ndarray:
    """Zero-forcing equalization x̂ = y / h with known CSI."""
    if h == 0:
        raise SingularChannelError("cannot equalize a channel with zero gain")
    return np.asarray(y, dtype=np.complex128) / h


def effective_snr_db(snr_db: float, gain: complex = 1.0) -> float:
    """Post-equalization SNR, snr_db + 10·log10(|h|²).

    Dividing y = h·x + z by a known h leaves noise of variance σ²/|h|², so an
    ideal code sees |h|² times the transmit SNR.

    Raises:
        SingularChannelError: If the gain is zero.
    """
    power = abs(complex(gain)) ** 2
    if power == 0.0:
        raise SingularChannelError("a channel with zero gain delivers nothing")
    return float(snr_db) + 10.0 * math.log10(power)


def capacity_from_snr(snr_db: float) -> float:
    """Shannon capacity log2(1 + SNR) in bits per channel symbol."""
    if math.isnan(snr_db):
        raise ParameterError("SNR must be a number")
    return float(np.log2(1.0 + 10.0 ** (snr_db / 10.0)))


def snr_from_bpp(bpp: float, cbr: float) -> float:
    """SNR in dB at which ``bpp`` fits into a channel bandwidth ratio ``cbr``.

    C = bpp / (3·cbr) bits per symbol, then SNR = 2^C − 1. A zero rate needs
    no SNR at all and returns ``-inf``.
    """
    if bpp < 0:
        raise ParameterError(f"bpp must be non-negative, got {bpp}")
    if cbr <= 0:
        raise ParameterError(f"cbr must be positive, got {cbr}")
    capacity = bpp / (COLOR_CHANNELS * cbr)
    if capacity == 0.0:
        logger.info("Zero rate needs no channel: SNR is -inf dB")
        return float("-inf")
    return float(10.0 * np.log10(np.expm1(capacity * np.log(2.0))))


def bpp_from_snr(snr_db: float, cbr: float) -> float:
    """Bits per pixel an ideal code carries at ``snr_db`` and ``cbr``."""
    if cbr <= 0:
        raise ParameterError(f"cbr must be positive, got {cbr}")
    return COLOR_CHANNELS * cbr * capacity_from_snr(snr_db)


def budget(bits: float, snr_db: float) -> LinkBudget:
    """Symbols needed to deliver ``bits`` error-free at ``snr_db``.

    Raises:
        ParameterError: On negative bits or a non-positive capacity.
    """
    if bits < 0:
        raise ParameterError(f"bits must be non-negative, got {bits}")
    capacity = capacity_from_snr(snr_db)
    if not capacity > 0 or math.isinf(capacity):
        raise ParameterError(f"capacity at {snr_db} dB is {capacity}; a finite positive capacity is required")
    return LinkBudget(float(bits), capacity, float(bits) / capacity)


def source_symbols(height: int, width: int, channels: int = COLOR_CHANNELS) -> int:
    """Source symbol count C·H·W of one image."""
    return channels * height * width
