"""Bit-exact byte containers for Sebs, usage maps and quantized latents.

    SEB1  magic, u32 K, c', h', w', then K·c'·h'·w' float32 Seb values
    SEBA  magic, u32 n_images, n_p, K, then every index in bit_width(K)
          bits, MSB first, zero-padded to a byte boundary
    SEBZ  magic, u32 c, hh, ww, then c·hh·ww int32 rounded values

All integers and floats are little-endian. Checkpoints are torch archives
holding named parameter tensors plus the configuration they were trained
with.
"""

import logging
import pickle
import struct
from pathlib import Path
from typing import Any, Dict, Tuple

import numpy as np
import torch

from errors import ContainerFormatError, IncompatibleCheckpointError, ParameterError

logger = logging.getLogger(__name__)

SEB_MAGIC = b"SEB1"
USAGE_MAGIC = b"SEBA"
LATENT_MAGIC = b"SEBZ"
CHECKPOINT_FORMAT = 1


def bit_width(k: int) -> int:
    """Bits per usage index, ceil(log2 K); zero when K = 1."""
    if k < 1:
        raise ParameterError(f"K must be at least 1, got {k}")
    return (k - 1).bit_length()


def _read_header(data: bytes, magic: bytes, count: int) -> Tuple[Tuple[int, ...], memoryview]:
    size = len(magic) + 4 * count
    if len(data) < size:
        raise ContainerFormatError(f"{magic.decode()} container truncated: {len(data)} bytes")
    if data[:len(magic)] != magic:
        raise ContainerFormatError(f"bad magic {bytes(data[:len(magic)])!r}, expected {magic!r}")
    fields = struct.unpack_from(f"<{count}I", data, len(magic))
    return fields, memoryview(data)[size:]


def pack_sebs(sebs: torch.Tensor) -> bytes:
    """Serialize K×c'×h'×w' Sebs into a SEB1 container."""
    if sebs.ndim != 4:
        raise ParameterError(f"Sebs must be K×c'×h'×w', got shape {tuple(sebs.shape)}")
    payload = sebs.detach().cpu().numpy().astype("<f4", copy=False).tobytes()
    return SEB_MAGIC + struct.pack("<4I", *sebs.shape) + payload


def unpack_sebs(data: bytes) -> torch.Tensor:
    (k, c, h, w), payload = _read_header(data, SEB_MAGIC, 4)
    expected = 4 * k * c * h * w
    if len(payload) != expected:
        raise ContainerFormatError(f"SEB1 payload has {len(payload)} bytes, expected {expected}")
    values = np.frombuffer(payload, dtype="<f4").reshape(k, c, h, w)
    return torch.from_numpy(values.astype(np.float32))


def pack_usage(indices: torch.Tensor, k: int) -> bytes:
    """Serialize an n×n_p index matrix (values 0..K-1) into a SEBA container."""
    if indices.ndim != 2:
        raise ParameterError(f"usage must be n×n_p, got shape {tuple(indices.shape)}")
    flat = indices.detach().cpu().numpy().astype(np.int64).reshape(-1)
    if flat.size and (flat.min() < 0 or flat.max() >= k):
        raise ParameterError(f"usage indices must lie in 0..{k - 1}")
    width = bit_width(k)
    header = USAGE_MAGIC + struct.pack("<3I", indices.shape[0], indices.shape[1], k)
    if width == 0 or flat.size == 0:
        return header
    shifts = np.arange(width - 1, -1, -1, dtype=np.int64)
    bits = ((flat[:, None] >> shifts) & 1).astype(np.uint8)
    return header + np.packbits(bits.reshape(-1)).tobytes()


def unpack_usage(data: bytes) -> Tuple[torch.Tensor, int]:
    """Returns the n×n_p index matrix and K."""
    (n, n_p, k), payload = _read_header(data, USAGE_MAGIC, 3)
    if k < 1:
        raise ContainerFormatError("SEBA container declares K = 0")
    width = bit_width(k)
    count = n * n_p
    expected = (count * width + 7) // 8
    if len(payload) != expected:
        raise ContainerFormatError(f"SEBA payload has {len(payload)} bytes, expected {expected}")
    if width == 0:
        return torch.zeros((n, n_p), dtype=torch.int64), k
    bits = np.unpackbits(np.frombuffer(payload, dtype=np.uint8))[:count * width]
    weights = 1 << np.arange(width - 1, -1, -1, dtype=np.int64)
    flat = bits.reshape(count, width).astype(np.int64) @ weights
    if flat.size and flat.max() >= k:
        raise ContainerFormatError(f"SEBA index {int(flat.max())} out of range for K={k}")
    return torch.from_numpy(flat.reshape(n, n_p)), k


def pack_latent(latent: torch.Tensor) -> bytes:
    """Serialize one rounded c×hh×ww latent into a SEBZ container."""
    if latent.ndim != 3:
        raise ParameterError(f"latent must be c×hh×ww, got shape {tuple(latent.shape)}")
    values = torch.round(latent.detach()).cpu().numpy().astype("<i4")
    return LATENT_MAGIC + struct.pack("<3I", *latent.shape) + values.tobytes()


def unpack_latent(data: bytes) -> torch.Tensor:
    (c, h, w), payload = _read_header(data, LATENT_MAGIC, 3)
    expected = 4 * c * h * w
    if len(payload) != expected:
        raise ContainerFormatError(f"SEBZ payload has {len(payload)} bytes, expected {expected}")
    values = np.frombuffer(payload, dtype="<i4").reshape(c, h, w)
    return torch.from_numpy(values.astype(np.float32))


def write_container(path: Path, data: bytes) -> None:
    Path(path).write_bytes(data)


def read_container(path: Path) -> bytes:
    return Path(path).read_bytes()


def save_checkpoint(path: Path, model: torch.nn.Module, metadata: Dict[str, Any]) -> None:
    """Store float32 parameters by name together with run metadata."""
    state = {name: tensor.detach().to("cpu", torch.float32) if tensor.is_floating_point() else tensor.cpu()
             for name, tensor in model.state_dict().items()}
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save({"format": CHECKPOINT_FORMAT, "state_dict": state, "metadata": metadata}, path)
    logger.debug("Saved checkpoint %s (%d tensors)", path, len(state))


def _read_archive(path: Path) -> Dict[str, Any]:
    try:
        archive = torch.load(path, map_location="cpu")
    except (OSError, RuntimeError, EOFError, pickle.UnpicklingError) as err:
        raise IncompatibleCheckpointError(f"{path}: cannot read checkpoint ({err})") from err
    if not isinstance(archive, dict) or archive.get("format") != CHECKPOINT_FORMAT:
        raise IncompatibleCheckpointError(f"{path}: not a checkpoint of format {CHECKPOINT_FORMAT}")
    return archive


def checkpoint_metadata(path: Path) -> Dict[str, Any]:
    """Metadata of a checkpoint without loading it into a model."""
    return _read_archive(path).get("metadata", {})


def load_checkpoint(path: Path, model: torch.nn.Module) -> Dict[str, Any]:
    """Load parameters into ``model`` and return the stored metadata.

    Raises:
        IncompatibleCheckpointError: If the archive is unreadable or its
            tensor names or shapes do not match the model.
    """
    archive = _read_archive(path)
    state = archive["state_dict"]
    expected = model.state_dict()
    missing = sorted(set(expected) - set(state))
    unexpected = sorted(set(state) - set(expected))
    mismatched = [name for name in expected.keys() & state.keys() if expected[name].shape != state[name].shape]
    if missing or unexpected or mismatched:
        detail = (missing or unexpected or mismatched)[0]
        raise IncompatibleCheckpointError(
            f"{path}: checkpoint does not match the model ({len(missing)} missing, "
            f"{len(unexpected)} unexpected, {len(mismatched)} reshaped; e.g. {detail})")
    model.load_state_dict(state)
    return archive.get("metadata", {})
