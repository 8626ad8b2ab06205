"""Tests for image loading, augmentation and patch geometry.

Tests decoding of PNG/PPM files, the ImageSet container, seeded
augmentation, patchify/depatchify round trips and padding helpers.
"""

import pytest
import torch
from PIL import Image as PILImage

from dataset_ingest import (AugmentedSubsetDataset, ImageSet, PadInfo, PatchGrid, augment, check_image,
                            crop_padding, depatchify, derive_seed, load_images, pad_to_multiple, patchify,
                            save_image)
from errors import IngestError, NumericError, ParameterError, ShapeError, StructuralError
from tests.conftest import make_image


class TestDeriveSeed:
    """Tests for deterministic seed derivation."""

    def test_same_parts_same_seed(self):
        """Test that identical parts always give the same seed."""
        assert derive_seed(7, "kmeans", 3) == derive_seed(7, "kmeans", 3)

    def test_different_parts_differ(self):
        """Test that changing any part changes the seed."""
        assert derive_seed(7, "kmeans", 3) != derive_seed(7, "kmeans", 4)

    def test_seed_range(self):
        """Test that seeds fit a 63-bit non-negative integer."""
        seed = derive_seed("anything")
        assert 0 <= seed < 2 ** 63


class TestLoadImages:
    """Tests for decoding images from disk."""

    def test_png_round_trip(self, temp_dir):
        """Test that a saved PNG loads back within 8-bit quantization."""
        image = make_image(12, 20, seed=3)
        path = temp_dir / "a.png"
        save_image(image, path)
        loaded = load_images([path])
        assert len(loaded) == 1
        assert loaded[0].shape == (3, 12, 20)
        assert torch.allclose(loaded[0], image, atol=0.5 / 255 + 1e-6)
        assert loaded.paths == [str(path)]

    def test_ppm_supported(self, temp_dir):
        """Test that PPM files are accepted."""
        path = temp_dir / "a.ppm"
        PILImage.new("RGB", (4, 3), (255, 0, 0)).save(path)
        loaded = load_images([path])
        assert loaded[0].shape == (3, 3, 4)
        assert torch.all(loaded[0][0] == 1.0)

    def test_grayscale_converted(self, temp_dir):
        """Test that grayscale input is converted to three equal channels."""
        path = temp_dir / "gray.png"
        PILImage.new("L", (8, 8), 51).save(path)
        image = load_images([path])[0]
        assert image.shape == (3, 8, 8)
        assert torch.allclose(image, torch.full((3, 8, 8), 51 / 255))

    def test_grayscale_rejected(self, temp_dir):
        """Test that reject mode refuses non-RGB input."""
        path = temp_dir / "gray.png"
        PILImage.new("L", (8, 8), 51).save(path)
        with pytest.raises(IngestError, match="gray.png"):
            load_images([path], non_rgb="reject")

    def test_missing_file_names_path(self, temp_dir):
        """Test that a missing file raises an IngestError naming it."""
        missing = temp_dir / "nope.png"
        with pytest.raises(IngestError) as excinfo:
            load_images([missing])
        assert excinfo.value.path == str(missing)

    def test_unsupported_format(self, temp_dir):
        """Test that JPEG input is refused."""
        path = temp_dir / "photo.jpg"
        PILImage.new("RGB", (8, 8), (10, 20, 30)).save(path, format="JPEG")
        with pytest.raises(IngestError, match="unsupported format"):
            load_images([path])

    def test_no_partial_set(self, temp_dir):
        """Test that one bad file fails the whole load."""
        good = temp_dir / "good.png"
        save_image(make_image(4, 4), good)
        with pytest.raises(IngestError):
            load_images([good, temp_dir / "bad.png"])

    def test_invalid_non_rgb_mode(self):
        """Test that an unknown non_rgb policy is a parameter error."""
        with pytest.raises(ParameterError):
            load_images([], non_rgb="ignore")


class TestCheckImage:
    """Tests for image invariants."""

    def test_nan_rejected(self):
        """Test that NaN pixels are a numeric error."""
        image = torch.zeros(3, 4, 4)
        image[0, 0, 0] = float("nan")
        with pytest.raises(NumericError):
            check_image(image)

    def test_wrong_channels(self):
        """Test that four-channel tensors are a shape error."""
        with pytest.raises(ShapeError):
            check_image(torch.zeros(4, 4, 4))

    def test_out_of_range(self):
        """Test that values above one are rejected."""
        with pytest.raises(NumericError):
            check_image(torch.full((3, 2, 2), 1.5))


class TestImageSet:
    """Tests for the ImageSet container."""

    def test_unlabelled_is_one_subset(self):
        """Test that a set without labels forms subset 1."""
        images = ImageSet([make_image(4, 4, s) for s in range(3)])
        assert images.subsets() == {1: [0, 1, 2]}

    def test_subsets_by_label(self):
        """Test grouping of indices by label in input order."""
        images = ImageSet([make_image(4, 4, s) for s in range(3)], subset_labels=[2, 1, 2])
        assert images.subsets() == {1: [1], 2: [0, 2]}

    def test_labels_must_cover_range(self):
        """Test that labels skipping an id are structural errors."""
        with pytest.raises(StructuralError):
            ImageSet([make_image(4, 4), make_image(4, 4, 1)], subset_labels=[1, 3])

    def test_label_count_must_match(self):
        """Test that the label count must equal the image count."""
        with pytest.raises(StructuralError):
            ImageSet([make_image(4, 4)], subset_labels=[1, 1])

    def test_with_labels_keeps_paths(self):
        """Test that relabelling keeps images and paths."""
        images = ImageSet([make_image(4, 4)], paths=["x.png"])
        labelled = images.with_labels([1])
        assert labelled.paths == ["x.png"]
        assert labelled.subset_labels == [1]


class TestPatchify:
    """Tests for patch grid geometry."""

    def test_divisible_image(self):
        """Test row-major patch order on an exactly divisible image."""
        image = make_image(32, 32)
        grid = patchify(image, 16, 16)
        assert (grid.rows, grid.cols, grid.n_p) == (2, 2, 4)
        assert grid.pad_info == PadInfo()
        assert torch.equal(grid.patches[1], image[:, :16, 16:32])
        assert torch.equal(grid.patches[2], image[:, 16:32, :16])

    def test_non_divisible_padding(self, random_image):
        """Test that bottom/right padding completes the last row and column."""
        grid = patchify(random_image, 16, 16)
        assert (grid.rows, grid.cols) == (3, 4)
        assert grid.pad_info == PadInfo(bottom=8, right=8)
        assert grid.image_size == (40, 56)

    def test_reflect_padding_values(self, random_image):
        """Test that the padded rows mirror the image without repeating the edge."""
        grid = patchify(random_image, 32, 32)
        # padded row 40 lives in patch (1, 0) at row 8 and mirrors image row 38
        assert torch.equal(grid.patches[2][:, 8, :], random_image[:, 38, :32])

    def test_round_trip_exact(self, random_image):
        """Test that depatchify inverts patchify bit-exactly."""
        assert torch.equal(depatchify(patchify(random_image, 16, 16)), random_image)

    def test_round_trip_many_sizes(self):
        """Test bit-exact round trips over random sizes, including tiny images."""
        generator = torch.Generator().manual_seed(0)
        for i in range(100):
            h, w = (int(v) for v in torch.randint(1, 70, (2,), generator=generator))
            patch = (8, 16, 32)[i % 3]
            image = make_image(h, w, seed=i)
            assert torch.equal(depatchify(patchify(image, patch, patch)), image)

    def test_invalid_patch_size(self, random_image):
        """Test that non-positive patch sizes are parameter errors."""
        with pytest.raises(ParameterError):
            patchify(random_image, 0, 16)

    def test_depatchify_wrong_count(self, random_image):
        """Test that a grid with missing patches is a structural error."""
        grid = patchify(random_image, 16, 16)
        broken = PatchGrid(grid.patches[:-1], grid.rows, grid.cols, grid.pad_info)
        with pytest.raises(StructuralError):
            depatchify(broken)


class TestPadToMultiple:
    """Tests for analysis-transform padding."""

    def test_pad_and_crop(self, random_image):
        """Test padding to a multiple of 16 and cropping back."""
        padded, pad = pad_to_multiple(random_image, 16)
        assert padded.shape == (3, 48, 64)
        assert torch.equal(crop_padding(padded, pad), random_image)

    def test_already_multiple(self):
        """Test that an aligned image is returned unchanged."""
        image = make_image(32, 16)
        padded, pad = pad_to_multiple(image, 16)
        assert padded is image
        assert pad == PadInfo()

    def test_tiny_image_replicates(self):
        """Test that images smaller than the pad fall back to edge replication."""
        image = make_image(5, 5)
        padded, pad = pad_to_multiple(image, 16)
        assert padded.shape == (3, 16, 16)
        assert torch.equal(padded[:, 15, 15], image[:, 4, 4])
        assert torch.equal(crop_padding(padded, pad), image)

    def test_batched(self, random_image):
        """Test that batched input keeps its batch dimension."""
        padded, _ = pad_to_multiple(random_image.unsqueeze(0).repeat(2, 1, 1, 1), 16)
        assert padded.shape == (2, 3, 48, 64)


class TestAugment:
    """Tests for seeded resized-crop augmentation."""

    def test_shapes_and_range(self, random_image):
        """Test that views have the requested size and stay in [0, 1]."""
        views = augment(random_image, 4, (24, 24), seed=5)
        assert len(views) == 4
        for view in views:
            assert view.shape == (3, 24, 24)
            assert view.min() >= 0.0 and view.max() <= 1.0

    def test_deterministic(self, random_image):
        """Test that the same seed reproduces the same views."""
        first = augment(random_image, 3, (24, 24), seed=5)
        second = augment(random_image, 3, (24, 24), seed=5)
        assert all(torch.equal(a, b) for a, b in zip(first, second))

    def test_seed_changes_views(self, random_image):
        """Test that another seed gives other views."""
        first = augment(random_image, 3, (24, 24), seed=5)
        second = augment(random_image, 3, (24, 24), seed=6)
        assert not all(torch.equal(a, b) for a, b in zip(first, second))

    def test_full_crop_identity(self):
        """Test that a full-image crop at the native size returns the image."""
        image = make_image(32, 32)
        views = augment(image, 2, (32, 32), seed=0, scale=(1.0, 1.0))
        assert all(torch.equal(view, image) for view in views)

    def test_resize_ceiling(self):
        """Test that excessive upscaling is refused."""
        with pytest.raises(ParameterError):
            augment(make_image(8, 8), 1, (64, 64), seed=0)

    def test_invalid_count(self, random_image):
        """Test that a zero count is a parameter error."""
        with pytest.raises(ParameterError):
            augment(random_image, 0, (16, 16), seed=0)


class TestAugmentedSubsetDataset:
    """Tests for the training dataset of augmented subsets."""

    def test_item_is_subset(self, smooth_corpus):
        """Test that each item stacks the views of one source image."""
        dataset = AugmentedSubsetDataset(smooth_corpus, count=3, size=(16, 16), seed=0)
        assert len(dataset) == 2
        assert dataset[0].shape == (3, 3, 16, 16)

    def test_epoch_reseeds(self, smooth_corpus):
        """Test that a new epoch draws new crops."""
        dataset = AugmentedSubsetDataset(smooth_corpus, count=3, size=(16, 16), seed=0)
        first = dataset[0]
        dataset.set_epoch(1)
        assert not torch.equal(first, dataset[0])
        dataset.set_epoch(0)
        assert torch.equal(first, dataset[0])

    def test_empty_corpus(self):
        """Test that an empty corpus cannot form a dataset."""
        with pytest.raises(ParameterError):
            AugmentedSubsetDataset(ImageSet([]), count=1, size=(8, 8), seed=0)
