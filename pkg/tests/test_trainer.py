"""Tests for loss functions, the learning-rate schedule and the training loop."""

import json
from unittest.mock import patch

import pytest
import torch

from containers import checkpoint_metadata, load_checkpoint
from dataset_ingest import ImageSet
from errors import ParameterError, ShapeError, StructuralError, TrainingDivergedError
from eval_harness import ms_ssim, psnr
from rate_accounting import RateBreakdown
from seb_pipeline import ModelConfig, SebTransmissionModel
from tests.conftest import make_smooth_image
from trainer import (DEFAULT_LR_SCHEDULE, LOG_FIELDS, LossConfig, TrainConfig, lr_at_epoch, loss_reg, loss_rd,
                     total_loss, train)


def quick_config(temp_dir, **overrides) -> TrainConfig:
    """A few CPU-sized steps writing into ``temp_dir``."""
    settings = dict(
        seed=0,
        augment_count=2,
        crop_size=(32, 32),
        lr_schedule=((1e-3, 1),),
        max_steps=3,
        kmeans_iterations=3,
        log_path=temp_dir / "train.jsonl",
        checkpoint_path=temp_dir / "model.pt",
        snapshot_dir=temp_dir / "snapshots",
        log_every=1,
    )
    settings.update(overrides)
    return TrainConfig(**settings)


class TestLearningRate:
    """Tests for the epoch schedule."""

    @pytest.mark.parametrize("epoch,lr", [(0, 1e-4), (1, 1e-5), (2, 1e-6), (4, 1e-6), (10, 1e-6)])
    def test_default_schedule(self, epoch, lr):
        """Test the rate in effect at each epoch, with the last stage persisting."""
        assert lr_at_epoch(DEFAULT_LR_SCHEDULE, epoch) == lr

    def test_total_epochs(self):
        """Test that the default schedule spans five epochs."""
        assert TrainConfig().total_epochs == 5

    def test_invalid_schedule(self):
        """Test that empty or non-positive stages are refused."""
        with pytest.raises(ParameterError):
            TrainConfig(lr_schedule=())
        with pytest.raises(ParameterError):
            TrainConfig(lr_schedule=((0.0, 1),))
        with pytest.raises(ParameterError):
            TrainConfig(lr_schedule=((1e-4, 0),))

    def test_invalid_max_steps(self):
        """Test that max_steps must be positive."""
        with pytest.raises(ParameterError):
            TrainConfig(max_steps=0)


class TestLosses:
    """Tests for the rate-distortion and regularization terms."""

    def test_loss_rd_value(self):
        """Test λ·MSE plus the total rate."""
        original = torch.zeros(1, 3, 4, 4)
        reconstructed = torch.full((1, 3, 4, 4), 0.1)
        rates = RateBreakdown(40.0, 20.0, 30.0, 10.0)
        assert float(loss_rd(original, reconstructed, rates, 256.0)) == pytest.approx(102.56, rel=1e-5)

    def test_loss_rd_zero(self):
        """Test that a perfect free reconstruction costs nothing."""
        image = torch.rand(1, 3, 8, 8)
        assert float(loss_rd(image, image.clone(), RateBreakdown(), 1024.0)) == 0.0

    def test_loss_rd_shape_mismatch(self):
        """Test that differently shaped images are a shape error."""
        with pytest.raises(ShapeError):
            loss_rd(torch.zeros(1, 3, 4, 4), torch.zeros(1, 3, 4, 8), RateBreakdown(), 1.0)

    def test_loss_reg_value_and_gradient(self):
        """Test the squared distance and that only latents receive gradient."""
        latents = torch.full((1, 1, 1, 1), 3.0, requires_grad=True)
        sebs = torch.full((1, 1, 1, 1), 1.0, requires_grad=True)
        reg = loss_reg(latents, sebs)
        reg.backward()
        assert float(reg) == pytest.approx(4.0)
        assert float(latents.grad) == pytest.approx(4.0)
        assert sebs.grad is None

    def test_loss_reg_scales_quadratically(self):
        """Test that doubling every distance quadruples the term."""
        latents = torch.randn(2, 4, 2, 2, generator=torch.Generator().manual_seed(0))
        sebs = torch.zeros_like(latents)
        assert float(loss_reg(2 * latents, sebs)) == pytest.approx(4 * float(loss_reg(latents, sebs)), rel=1e-5)

    def test_loss_reg_mismatch(self):
        """Test that Sebs not matching the latents are a structural error."""
        with pytest.raises(StructuralError):
            loss_reg(torch.zeros(2, 4, 1, 1), torch.zeros(1, 4, 1, 1))

    def test_total_loss(self):
        """Test the weighted sum and that β=0 leaves the rate-distortion term."""
        assert float(total_loss(torch.tensor(10.0), torch.tensor(2.0), 1.0)) == pytest.approx(12.0)
        assert float(total_loss(torch.tensor(10.0), torch.tensor(2.0), 0.0)) == pytest.approx(10.0)

    def test_loss_config_validation(self):
        """Test that λ must be positive and β non-negative."""
        with pytest.raises(ParameterError):
            LossConfig(lam=0.0)
        with pytest.raises(ParameterError):
            LossConfig(beta=-0.5)


class TestTrain:
    """Tests for short training runs."""

    def test_short_run(self, smooth_corpus, tiny_model_config, temp_dir):
        """Test the log, JSON lines and a loadable checkpoint after three steps."""
        config = quick_config(temp_dir)
        result = train(smooth_corpus, tiny_model_config, LossConfig(lam=256.0), config)

        assert len(result.log) == 3
        assert set(result.log[0]) == set(LOG_FIELDS)
        assert [record["step"] for record in result.log] == [0, 1, 2]
        lines = config.log_path.read_text().splitlines()
        assert len(lines) == 3
        assert json.loads(lines[-1])["step"] == 2
        assert not result.model.training

        metadata = checkpoint_metadata(config.checkpoint_path)
        assert metadata["step"] == 3
        assert metadata["loss_config"]["lam"] == 256.0
        fresh = SebTransmissionModel(ModelConfig(**metadata["model_config"]))
        load_checkpoint(config.checkpoint_path, fresh)

    def test_rate_changes_at_epoch_boundary(self, smooth_corpus, tiny_model_config, temp_dir):
        """Test that the second stage starts once every source image was seen."""
        config = quick_config(temp_dir, lr_schedule=((1e-3, 1), (1e-4, 1)), max_steps=None)
        result = train(smooth_corpus, tiny_model_config, LossConfig(), config)
        assert [record["lr"] for record in result.log] == [1e-3, 1e-3, 1e-4, 1e-4]

    def test_max_steps_extends_last_rate(self, smooth_corpus, tiny_model_config, temp_dir):
        """Test that a step budget beyond the schedule keeps the last rate."""
        config = quick_config(temp_dir, max_steps=5)
        result = train(smooth_corpus, tiny_model_config, LossConfig(), config)
        assert len(result.log) == 5
        assert result.log[-1]["lr"] == 1e-3

    def test_deterministic(self, smooth_corpus, tiny_model_config, temp_dir):
        """Test that two runs with one seed log the same losses."""
        first = train(smooth_corpus, tiny_model_config, LossConfig(), quick_config(temp_dir / "a"))
        second = train(smooth_corpus, tiny_model_config, LossConfig(), quick_config(temp_dir / "b"))
        assert [r["loss"] for r in first.log] == [r["loss"] for r in second.log]

    def test_divergence_snapshot(self, smooth_corpus, tiny_model_config, temp_dir):
        """Test that a NaN loss stops training and leaves a snapshot."""
        config = quick_config(temp_dir)
        with patch("trainer.loss_rd", return_value=torch.tensor(float("nan"))):
            with pytest.raises(TrainingDivergedError) as excinfo:
                train(smooth_corpus, tiny_model_config, LossConfig(), config)
        assert excinfo.value.step == 0
        assert excinfo.value.snapshot_path == config.snapshot_dir / "diverged_step000000.pt"
        assert excinfo.value.snapshot_path.exists()
        assert not config.checkpoint_path.exists()

    def test_interrupt_saves_checkpoint(self, smooth_corpus, tiny_model_config, temp_dir):
        """Test that Ctrl-C saves progress before propagating."""
        config = quick_config(temp_dir)
        with patch("trainer.train_step", side_effect=KeyboardInterrupt):
            with pytest.raises(KeyboardInterrupt):
                train(smooth_corpus, tiny_model_config, LossConfig(), config)
        assert checkpoint_metadata(config.checkpoint_path)["step"] == 0

    def test_empty_corpus(self, tiny_model_config):
        """Test that an empty corpus is a parameter error."""
        with pytest.raises(ParameterError):
            train(ImageSet([]), tiny_model_config, LossConfig(), TrainConfig(max_steps=1))


def toy_corpus() -> ImageSet:
    return ImageSet([make_smooth_image(64, 64, seed=s) for s in range(4)])


def toy_model_config() -> ModelConfig:
    return ModelConfig(patch_size=32, latent_channels=64, hidden_channels=64, motion_channels=64,
                       hyper_channels=64, residual_channels=64)


def encode_corpus(model: SebTransmissionModel, corpus: ImageSet):
    batch = torch.stack(list(corpus))
    return batch, model.encode(batch, seed=0)


@pytest.mark.slow
class TestConvergence:
    """Longer CPU runs on a toy corpus."""

    def test_toy_overfit(self, temp_dir):
        """Test that four smooth images are learned to 30 dB and MS-SSIM 0.95."""
        config = quick_config(temp_dir, augment_count=16, crop_size=(64, 64), crop_scale=(1.0, 1.0),
                              lr_schedule=((1e-3, 400), (1e-4, 100)), max_steps=2000, kmeans_iterations=10,
                              log_every=200)
        result = train(toy_corpus(), toy_model_config(), LossConfig(lam=1024.0), config)
        batch, out = encode_corpus(result.model, toy_corpus())
        assert psnr(batch, out.reconstruction) >= 30.0
        assert ms_ssim(batch, out.reconstruction) >= 0.95

    def test_lambda_trades_rate_for_distortion(self, temp_dir):
        """Test that a larger λ buys lower distortion with residual bits while Seb bits hold steady."""
        outcomes = {}
        for lam in (256.0, 2048.0):
            config = quick_config(temp_dir / f"lam{lam:g}", augment_count=8, crop_size=(64, 64),
                                  crop_scale=(1.0, 1.0), lr_schedule=((1e-3, 150),), max_steps=600,
                                  log_every=200)
            result = train(toy_corpus(), toy_model_config(), LossConfig(lam=lam), config)
            batch, out = encode_corpus(result.model, toy_corpus())
            outcomes[lam] = (out.rates.detached(), float(torch.mean((out.reconstruction - batch) ** 2)))
        (low_rates, low_mse), (high_rates, high_mse) = outcomes[256.0], outcomes[2048.0]
        assert high_rates.total >= low_rates.total
        assert high_mse <= low_mse
        assert high_rates.shares()["Zr"] >= low_rates.shares()["Zr"]
        assert high_rates.bits_S == pytest.approx(low_rates.bits_S, rel=0.25)
