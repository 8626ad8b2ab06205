"""Tests for warping, flow estimation and the compensation/residual codecs."""

import math

import pytest
import torch
from torch.autograd import gradcheck

from errors import NumericError, ShapeError
from residual_codec import (CompensationCodec, FlowEstimator, MotionRefinement, ResidualCodec, encode_residual,
                            estimate_flow, reconstruct, warp)
from tests.conftest import make_image, make_smooth_image


def shifted_pair(size: int):
    """A textured target and a reference holding the same content one column to the right."""
    ys = torch.arange(size, dtype=torch.float32).reshape(1, size, 1)
    xs = torch.arange(size, dtype=torch.float32).reshape(1, 1, size)
    phase = torch.tensor([0.0, 1.0, 2.0]).reshape(3, 1, 1)
    target = 0.5 + 0.4 * torch.sin(2 * math.pi * xs / 8 + phase) * torch.cos(2 * math.pi * ys / 11)
    return target, torch.roll(target, shifts=1, dims=-1)


class TestWarp:
    """Tests for bilinear backward warping."""

    def test_zero_flow_identity(self, random_image):
        """Test that zero flow returns the reference exactly."""
        assert torch.equal(warp(random_image, torch.zeros(2, 40, 56)), random_image)

    def test_one_column_shift(self, random_image):
        """Test that flow (0, 1) samples one column to the right, clamped at the border."""
        flow = torch.zeros(2, 40, 56)
        flow[1] = 1.0
        out = warp(random_image, flow)
        assert torch.allclose(out[:, :, :-1], random_image[:, :, 1:])
        assert torch.allclose(out[:, :, -1], random_image[:, :, -1])

    def test_one_row_shift(self, random_image):
        """Test that flow (1, 0) samples one row down."""
        flow = torch.zeros(2, 40, 56)
        flow[0] = 1.0
        assert torch.allclose(warp(random_image, flow)[:, :-1], random_image[:, 1:])

    def test_half_pixel_average(self):
        """Test that half-pixel flow averages neighbours."""
        reference = torch.tensor([[[0.0, 1.0, 3.0]]])
        flow = torch.zeros(2, 1, 3)
        flow[1] = 0.5
        assert torch.allclose(warp(reference, flow), torch.tensor([[[0.5, 2.0, 3.0]]]))

    def test_batched(self, random_image):
        """Test batches of references and flows."""
        batch = random_image.unsqueeze(0).repeat(2, 1, 1, 1)
        assert warp(batch, torch.zeros(2, 2, 40, 56)).shape == batch.shape

    def test_shape_mismatch(self, random_image):
        """Test that a flow of another size is a shape error."""
        with pytest.raises(ShapeError):
            warp(random_image, torch.zeros(2, 8, 8))

    def test_gradcheck(self):
        """Test gradients with respect to reference and flow in float64."""
        generator = torch.Generator().manual_seed(0)
        reference = torch.rand((1, 2, 5, 5), generator=generator, dtype=torch.float64, requires_grad=True)
        flow = (0.25 + 0.1 * torch.rand((1, 2, 5, 5), generator=generator, dtype=torch.float64))
        flow.requires_grad_()
        assert gradcheck(warp, (reference, flow), eps=1e-6, atol=1e-5)


class TestFlowEstimator:
    """Tests for the coarse-to-fine flow network."""

    def test_untrained_predicts_zero(self):
        """Test that zero-initialized output layers give zero flow."""
        target, reference = make_image(32, 32, 0), make_image(32, 32, 1)
        flow = estimate_flow(FlowEstimator(), target, reference)
        assert flow.shape == (2, 32, 32)
        assert torch.count_nonzero(flow) == 0

    def test_odd_size(self):
        """Test that sizes not divisible by two still produce full-size flow."""
        flow = estimate_flow(FlowEstimator(), make_image(17, 23, 0), make_image(17, 23, 1))
        assert flow.shape == (2, 17, 23)

    def test_shape_mismatch(self):
        """Test that target and reference must agree."""
        with pytest.raises(ShapeError):
            estimate_flow(FlowEstimator(), make_image(16, 16), make_image(16, 32))

    @pytest.mark.slow
    def test_learns_one_pixel_shift(self):
        """Test that training on a pair shifted by one column finds a displacement of one pixel."""
        target, reference = shifted_pair(32)
        torch.manual_seed(0)
        estimator = FlowEstimator(levels=1, filter_counts=(16, 16, 2))
        optimizer = torch.optim.Adam(estimator.parameters(), lr=1e-2)
        for _ in range(500):
            optimizer.zero_grad()
            flow = estimate_flow(estimator, target, reference)
            loss = torch.mean((warp(reference, flow) - target) ** 2)
            loss.backward()
            optimizer.step()
        with torch.no_grad():
            flow = estimate_flow(estimator, target, reference)[:, 4:-4, 4:-4]
        assert float(flow[1].median()) == pytest.approx(1.0, abs=0.2)
        assert float(flow[0].median()) == pytest.approx(0.0, abs=0.2)


class TestMotionRefinement:
    """Tests for the refinement network."""

    def test_identity_at_init(self):
        """Test that the untrained refinement returns the warped reference."""
        warped = make_image(16, 16, 0).unsqueeze(0)
        reference = make_image(16, 16, 1).unsqueeze(0)
        out = MotionRefinement()(warped, reference, torch.zeros(1, 2, 16, 16))
        assert torch.equal(out, warped)


class TestCompensationCodec:
    """Tests for flow coding and motion compensation."""

    def test_forward_shapes_and_rate(self):
        """Test prediction size, latent sizes and a positive finite rate."""
        codec = CompensationCodec(8, 8)
        target = make_smooth_image(32, 32, 0).unsqueeze(0)
        reference = make_smooth_image(32, 32, 1).unsqueeze(0)
        with torch.no_grad():
            out = codec(target, reference, mode="eval")
        assert out.prediction.shape == (1, 3, 32, 32)
        assert out.flow.shape == (1, 2, 32, 32)
        assert out.latent.shape == (1, 8, 2, 2)
        assert torch.equal(out.latent, torch.round(out.latent))
        assert torch.isfinite(out.rate.bits) and float(out.rate.bits) > 0

    def test_receiver_matches_transmitter(self):
        """Test that synthesizing from the latent reproduces the forward prediction."""
        codec = CompensationCodec(8, 8).eval()
        target = make_smooth_image(32, 32, 0).unsqueeze(0)
        reference = make_smooth_image(32, 32, 1).unsqueeze(0)
        with torch.no_grad():
            out = codec(target, reference, mode="eval")
            prediction, flow = codec.synthesize(out.latent, reference)
        assert torch.equal(prediction, out.prediction)
        assert torch.equal(flow, out.flow)


class TestResidualCodec:
    """Tests for residual coding and reconstruction."""

    def test_forward(self):
        """Test decoded residual size, integer latent and rate."""
        codec = ResidualCodec(8, 8)
        residual = make_image(32, 48, 0).unsqueeze(0) - 0.5
        with torch.no_grad():
            decoded, latent, estimate = codec(residual, mode="eval")
        assert decoded.shape == residual.shape
        assert latent.shape == (1, 8, 2, 3)
        assert torch.equal(latent, torch.round(latent))
        assert float(estimate.bits) > 0

    def test_encode_single_image(self):
        """Test that an unbatched residual gives an unbatched latent."""
        latent = encode_residual(ResidualCodec(8, 8), torch.zeros(3, 32, 32))
        assert latent.shape == (8, 2, 2)

    def test_nan_residual(self):
        """Test that NaN residuals are numeric errors."""
        with pytest.raises(NumericError):
            encode_residual(ResidualCodec(8, 8), torch.full((3, 16, 16), float("nan")))

    @pytest.mark.slow
    def test_overfits_one_residual(self):
        """Test that decode(encode(r)) fits a single smooth residual to MSE 1e-3."""
        torch.manual_seed(0)
        codec = ResidualCodec(residual_channels=16, hidden_channels=32)
        residual = make_smooth_image(64, 64, seed=3).unsqueeze(0) - 0.5
        optimizer = torch.optim.Adam(codec.parameters(), lr=1e-3)
        for _ in range(2000):
            optimizer.zero_grad()
            loss = torch.mean((codec.decode(encode_residual(codec, residual)) - residual) ** 2)
            loss.backward()
            optimizer.step()
        with torch.no_grad():
            mse = float(torch.mean((codec.decode(encode_residual(codec, residual)) - residual) ** 2))
        assert mse <= 1e-3

    def test_reconstruct_clamps(self):
        """Test that reconstructions are clamped unless asked otherwise."""
        prediction = torch.full((3, 2, 2), 0.8)
        residual = torch.full((3, 2, 2), 0.5)
        assert torch.all(reconstruct(prediction, residual) == 1.0)
        assert torch.allclose(reconstruct(prediction, residual, clamp=False), torch.full((3, 2, 2), 1.3))

    def test_reconstruct_shape_mismatch(self):
        """Test that prediction and residual must agree."""
        with pytest.raises(ShapeError):
            reconstruct(torch.zeros(3, 2, 2), torch.zeros(3, 2, 3))
