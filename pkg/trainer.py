"""Joint rate-distortion training of the Seb transmission model.

Every step takes the augmented views of one source image as a subset,
clusters their patch latents into Sebs (warm-started from the previous
step), and minimizes

    L = λ·MSE + (R(S) + R(A) + R(Zm) + R(Zr)) / pixels + β·L_Reg / pixels

with Adam on an epoch-based learning-rate schedule.
"""

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F
from torch.utils.data import DataLoader

from containers import save_checkpoint
from dataset_ingest import AugmentedSubsetDataset, ImageSet, derive_seed
from errors import ParameterError, ShapeError, StructuralError, TrainingDivergedError
from rate_accounting import RateBreakdown
from seb_pipeline import ModelConfig, SebTransmissionModel

logger = logging.getLogger(__name__)

# (learning rate, epochs) pairs
DEFAULT_LR_SCHEDULE: Tuple[Tuple[float, int], ...] = ((1e-4, 1), (1e-5, 1), (1e-6, 3))
DEFAULT_LAMBDAS = (256.0, 512.0, 1024.0, 2048.0)
LOG_FIELDS = ("step", "lr", "loss", "loss_rd", "loss_reg", "bits_S", "bits_A", "bits_Zm", "bits_Zr", "mse")


@dataclass
class LossConfig:
    """Rate-distortion weight λ and regularization weight β."""
    lam: float = 1024.0
    beta: float = 1.0

    def __post_init__(self):
        if self.lam <= 0:
            raise ParameterError(f"lambda must be positive, got {self.lam}")
        if self.beta < 0:
            raise ParameterError(f"beta must be non-negative, got {self.beta}")


@dataclass
class TrainConfig:
    """Optimization settings.

    Attributes:
        seed: Root seed; every random stream is derived from it.
        augment_count: Views per source image (the batch size).
        crop_size: (height, width) of each view.
        crop_scale: Crop fraction range of the short side.
        lr_schedule: (learning rate, epochs) stages run in order.
        max_steps: Stop after this many steps; the last rate is kept if the
            schedule runs out first.
        kmeans_iterations: Lloyd iterations per step.
        log_path: JSON-lines training log.
        checkpoint_path: Where the final parameters are saved.
        snapshot_dir: Where a diagnostic snapshot goes if the loss diverges.
        num_workers: DataLoader workers producing augmentations.
        log_every: Progress line cadence in steps.
    """
    seed: int = 0
    augment_count: int = 16
    crop_size: Tuple[int, int] = (256, 256)
    crop_scale: Tuple[float, float] = (0.5, 1.0)
    lr_schedule: Sequence[Tuple[float, int]] = DEFAULT_LR_SCHEDULE
    max_steps: Optional[int] = None
    kmeans_iterations: int = 10
    log_path: Optional[Path] = None
    checkpoint_path: Optional[Path] = None
    snapshot_dir: Optional[Path] = None
    num_workers: int = 0
    log_every: int = 50

    def __post_init__(self):
        if not self.lr_schedule or any(lr <= 0 or epochs < 1 for lr, epochs in self.lr_schedule):
            raise ParameterError(f"invalid learning-rate schedule {self.lr_schedule}")
        if self.max_steps is not None and self.max_steps < 1:
            raise ParameterError(f"max_steps must be positive, got {self.max_steps}")

    @property
    def total_epochs(self) -> int:
        return sum(epochs for _, epochs in self.lr_schedule)


@dataclass
class TrainState:
    """Mutable progress of a training run."""
    step: int = 0
    epoch: int = 0
    lr: float = 0.0
    centers: Optional[torch.Tensor] = None
    optimizer: Optional[torch.optim.Optimizer] = field(default=None, repr=False)


@dataclass
class TrainResult:
    model: SebTransmissionModel
    state: TrainState
    log: List[Dict[str, float]]


def lr_at_epoch(schedule: Sequence[Tuple[float, int]], epoch: int) -> float:
    """Learning rate in effect during ``epoch`` (0-based); the last stage persists."""
    boundary = 0
    for lr, epochs in schedule:
        boundary += epochs
        if epoch < boundary:
            return lr
    return schedule[-1][0]


def loss_rd(original: torch.Tensor, reconstructed: torch.Tensor, rates: RateBreakdown, lam: float) -> torch.Tensor:
    """λ·MSE + total rate of ``rates`` (in whatever unit the caller chose)."""
    if original.shape != reconstructed.shape:
        raise ShapeError(f"original {tuple(original.shape)} and reconstruction {tuple(reconstructed.shape)} differ")
    return lam * F.mse_loss(reconstructed, original) + rates.total


def loss_reg(latents: torch.Tensor, assigned_sebs: torch.Tensor) -> torch.Tensor:
    """Σ ||F − sg(S)||²: pulls latents toward their Sebs, never the reverse."""
    if latents.shape != assigned_sebs.shape:
        raise StructuralError(
            f"{tuple(assigned_sebs.shape)} assigned Sebs for latents of shape {tuple(latents.shape)}")
    return ((latents - assigned_sebs.detach()) ** 2).sum()


def total_loss(rd: torch.Tensor, reg: torch.Tensor, beta: float) -> torch.Tensor:
    return rd + beta * reg


def _snapshot(config: TrainConfig, model: SebTransmissionModel, state: TrainState,
              batch: torch.Tensor) -> Optional[Path]:
    if config.snapshot_dir is None:
        return None
    path = Path(config.snapshot_dir) / f"diverged_step{state.step:06d}.pt"
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({"step": state.step, "epoch": state.epoch, "lr": state.lr,
                "state_dict": model.state_dict(), "batch": batch.detach().cpu()}, path)
    return path


def _checkpoint_metadata(model_config: ModelConfig, loss_config: LossConfig, train_config: TrainConfig,
                         state: TrainState) -> Dict[str, Any]:
    return {
        "model_config": model_config.to_dict(),
        "loss_config": asdict(loss_config),
        "seed": train_config.seed,
        "step": state.step,
        "epoch": state.epoch,
    }


def train_step(model: SebTransmissionModel, batch: torch.Tensor, loss_config: LossConfig,
               state: TrainState, seed: int, kmeans_iterations: int) -> Dict[str, float]:
    """One optimization step on one subset; returns the log record."""
    out = model(batch, mode="train", seed=derive_seed(seed, "kmeans", state.step),
                init_centers=state.centers, kmeans_iterations=kmeans_iterations)
    pixels = batch.shape[0] * batch.shape[-2] * batch.shape[-1]
    rd = loss_rd(batch, out.reconstruction, out.rates.scaled(1.0 / pixels), loss_config.lam)
    reg = loss_reg(out.latents, out.assigned_sebs) / pixels
    loss = total_loss(rd, reg, loss_config.beta)
    if not torch.isfinite(loss):
        raise FloatingPointError(f"non-finite loss {float(loss)}")

    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    state.optimizer.step()
    state.centers = out.codebook.sebs.detach()

    parts = out.rates.detached()
    return {
        "step": state.step,
        "lr": state.lr,
        "loss": float(loss),
        "loss_rd": float(rd),
        "loss_reg": float(reg),
        "bits_S": parts.bits_S,
        "bits_A": parts.bits_A,
        "bits_Zm": parts.bits_Zm,
        "bits_Zr": parts.bits_Zr,
        "mse": float(F.mse_loss(out.reconstruction.detach(), batch)),
    }


def train(corpus: ImageSet, model_config: Optional[ModelConfig] = None, loss_config: Optional[LossConfig] = None,
          train_config: Optional[TrainConfig] = None) -> TrainResult:
    """Train a model on ``corpus`` and return it with its per-step log.

    Raises:
        ParameterError: If the corpus is empty.
        TrainingDivergedError: If the loss becomes NaN; a snapshot of the
            parameters and the offending batch is written first.
    """
    model_config = model_config or ModelConfig()
    loss_config = loss_config or LossConfig()
    train_config = train_config or TrainConfig()
    if len(corpus) == 0:
        raise ParameterError("cannot train on an empty corpus")

    torch.manual_seed(train_config.seed)
    model = SebTransmissionModel(model_config)
    model.train()
    state = TrainState()
    state.optimizer = torch.optim.Adam(model.parameters(), lr=train_config.lr_schedule[0][0], betas=(0.9, 0.999))

    dataset = AugmentedSubsetDataset(corpus, train_config.augment_count, train_config.crop_size,
                                     train_config.seed, train_config.crop_scale)
    loader = DataLoader(dataset, batch_size=None, shuffle=True, num_workers=train_config.num_workers,
                        generator=torch.Generator().manual_seed(train_config.seed))

    log: List[Dict[str, float]] = []
    log_file = None
    if train_config.log_path:
        Path(train_config.log_path).parent.mkdir(parents=True, exist_ok=True)
        log_file = open(train_config.log_path, "w", encoding="utf-8")

    epochs = train_config.total_epochs
    if train_config.max_steps is not None:
        epochs = max(epochs, -(-train_config.max_steps // len(dataset)))

    logger.info("=" * 70)
    logger.info("🚀 Training on %d source images, λ=%g, β=%g, %d epoch(s)",
                len(corpus), loss_config.lam, loss_config.beta, epochs)
    logger.info("=" * 70)
    try:
        for epoch in range(epochs):
            state.epoch = epoch
            state.lr = lr_at_epoch(train_config.lr_schedule, epoch)
            for group in state.optimizer.param_groups:
                group["lr"] = state.lr
            dataset.set_epoch(epoch)
            for batch in loader:
                try:
                    record = train_step(model, batch, loss_config, state, train_config.seed,
                                        train_config.kmeans_iterations)
                except FloatingPointError as err:
                    snapshot = _snapshot(train_config, model, state, batch)
                    logger.error("❌ Training diverged at step %d: %s", state.step, err)
                    raise TrainingDivergedError(state.step, snapshot) from err
                log.append(record)
                if log_file:
                    log_file.write(json.dumps(record) + "\n")
                if state.step % train_config.log_every == 0:
                    logger.info("📊 step %d epoch %d lr %.0e loss %.4f mse %.5f",
                                state.step, epoch, state.lr, record["loss"], record["mse"])
                state.step += 1
                if train_config.max_steps is not None and state.step >= train_config.max_steps:
                    break
            if train_config.max_steps is not None and state.step >= train_config.max_steps:
                break
    except KeyboardInterrupt:
        logger.warning("⚠️ Training interrupted at step %d", state.step)
        if train_config.checkpoint_path:
            save_checkpoint(train_config.checkpoint_path, model,
                            _checkpoint_metadata(model_config, loss_config, train_config, state))
            logger.info("💾 Progress saved to %s", train_config.checkpoint_path)
        raise
    finally:
        if log_file:
            log_file.close()

    if train_config.checkpoint_path:
        save_checkpoint(train_config.checkpoint_path, model,
                        _checkpoint_metadata(model_config, loss_config, train_config, state))
        logger.info("💾 Checkpoint saved to %s", train_config.checkpoint_path)
    logger.info("✅ Training finished after %d steps", state.step)
    model.eval()
    return TrainResult(model=model, state=state, log=log)
