import numpy as np
import pytest
from PIL import Image

from oracles import best_two_means_sse, naive_close, naive_dilate
from pcoseg.dataset import RetroImage, Roi, SynthSpec, synthesize_sample
from pcoseg.groundtruth import (
    GT1,
    GT2,
    DegenerateIntensityError,
    KMeansConvergenceError,
    Mask,
    MaskFormatError,
    StructuringElement,
    _kmeans_1d,
    dilate,
    generate_gt2,
    kmeans_segment,
    load_manual_mask,
    morph_close,
)

SE3 = StructuringElement.square(3)


def two_level_image(blob_value=0.8, background=0.1):
    roi = Roi(32, 32, 32)
    pixels = np.full((64, 64), background, dtype=np.float32)
    disk = roi.disk_mask(pixels.shape)
    blob = np.zeros_like(disk)
    blob[20:36, 18:34] = True
    blob &= disk
    pixels[blob] = blob_value
    pixels[~disk] = 0.0
    return RetroImage("two-level", pixels, roi), blob


def three_level_image():
    image, blob = two_level_image()
    patch = np.zeros_like(blob)
    patch[44:52, 30:42] = True
    patch &= image.roi.disk_mask(image.pixels.shape) & ~blob
    image.pixels[patch] = 0.3
    return image, blob


def random_mask(rng, shape=(12, 12), density=0.3):
    return (rng.random(shape) < density).astype(np.uint8)


class TestLoadManualMask:
    def _paired(self):
        return RetroImage("p", np.full((40, 40), 0.5, dtype=np.float32), Roi(20, 20, 20))

    def test_binary_file(self, tmp_path):
        arr = np.zeros((40, 40), dtype=np.uint8)
        arr[5:9, 5:9] = 255
        Image.fromarray(arr, mode="L").save(tmp_path / "m.png")
        mask = load_manual_mask(tmp_path / "m.png", self._paired())
        assert mask.source == GT1
        assert set(np.unique(mask.pixels)) <= {0, 1}
        assert mask.pixels.sum() == 16

    def test_all_zero_accepted(self, tmp_path):
        Image.fromarray(np.zeros((40, 40), dtype=np.uint8), mode="L").save(tmp_path / "z.png")
        mask = load_manual_mask(tmp_path / "z.png", self._paired())
        assert mask.pixels.sum() == 0

    def test_shape_mismatch(self, tmp_path):
        Image.fromarray(np.zeros((30, 30), dtype=np.uint8), mode="L").save(tmp_path / "s.png")
        with pytest.raises(MaskFormatError, match="30x30"):
            load_manual_mask(tmp_path / "s.png", self._paired())

    def test_non_binary_values_with_histogram(self, tmp_path):
        arr = np.zeros((40, 40), dtype=np.uint8)
        arr[0, 0] = 127
        arr[0, 1] = 127
        arr[1, 0] = 64
        Image.fromarray(arr, mode="L").save(tmp_path / "g.png")
        with pytest.raises(MaskFormatError) as err:
            load_manual_mask(tmp_path / "g.png", self._paired())
        assert "127: 2 px" in str(err.value)
        assert "64: 1 px" in str(err.value)


class TestKMeans:
    def test_two_level_exact(self):
        image, blob = two_level_image()
        mask = kmeans_segment(image, clusters=2, seed=3)
        assert mask.source == GT2
        assert np.array_equal(mask.pixels.astype(bool), blob)

    def test_uniform_degenerate(self):
        image = RetroImage("u", np.full((64, 64), 0.5, dtype=np.float32), Roi(32, 32, 32))
        with pytest.raises(DegenerateIntensityError):
            kmeans_segment(image, clusters=2, seed=0)

    def test_deterministic(self):
        image, _ = three_level_image()
        a = kmeans_segment(image, clusters=3, seed=11)
        b = kmeans_segment(image, clusters=3, seed=11)
        assert np.array_equal(a.pixels, b.pixels)

    def test_k2_matches_optimal_threshold(self):
        # 1-D 2-means is an optimal single threshold; compare SSE against
        # the exhaustive contiguous-split search
        rng = np.random.default_rng(5)
        for _ in range(20):
            values = np.concatenate(
                [rng.normal(0.2, 0.05, 120), rng.normal(0.7, 0.08, 80)]
            )
            centers, labels = _kmeans_1d(values, 2, np.random.default_rng(1))
            sse = sum(
                ((values[labels == j] - centers[j]) ** 2).sum() for j in range(2)
            )
            assert sse == pytest.approx(best_two_means_sse(values), abs=1e-9)


class TestMorphology:
    def test_dilate_center_pixel(self):
        mask = np.zeros((5, 5), dtype=np.uint8)
        mask[2, 2] = 1
        out = dilate(mask, SE3)
        assert np.array_equal(out.pixels, naive_dilate(mask, SE3.array()))
        assert out.pixels.sum() == 9
        assert out.pixels[1:4, 1:4].all()

    def test_dilate_empty_and_full(self):
        empty = np.zeros((6, 6), dtype=np.uint8)
        assert dilate(empty, SE3).pixels.sum() == 0
        full = np.ones((6, 6), dtype=np.uint8)
        assert dilate(full, SE3).pixels.all()

    def test_close_fills_gap(self):
        mask = np.zeros((5, 5), dtype=np.uint8)
        mask[2, 1] = mask[2, 3] = 1
        out = morph_close(mask, SE3)
        assert np.array_equal(out.pixels, naive_close(mask, SE3.array()))
        assert out.pixels[2, 1] == out.pixels[2, 2] == out.pixels[2, 3] == 1

    def test_close_solid_block_unchanged(self):
        mask = np.zeros((8, 8), dtype=np.uint8)
        mask[2:6, 2:6] = 1
        assert np.array_equal(morph_close(mask, SE3).pixels, mask)

    def test_close_empty(self):
        assert morph_close(np.zeros((6, 6), dtype=np.uint8), SE3).pixels.sum() == 0

    def test_oracle_equivalence_random(self):
        rng = np.random.default_rng(7)
        se_arr = SE3.array()
        for _ in range(60):
            mask = random_mask(rng)
            assert np.array_equal(dilate(mask, SE3).pixels, naive_dilate(mask, se_arr))
            assert np.array_equal(morph_close(mask, SE3).pixels, naive_close(mask, se_arr))

    def test_closing_extensive_and_idempotent(self):
        rng = np.random.default_rng(8)
        for _ in range(60):
            mask = random_mask(rng)
            closed = morph_close(mask, SE3).pixels
            assert np.all(mask <= closed)
            assert np.array_equal(morph_close(closed, SE3).pixels, closed)

    def test_dilation_monotone(self):
        rng = np.random.default_rng(9)
        for _ in range(30):
            small = random_mask(rng, density=0.2)
            extra = random_mask(rng, density=0.2)
            big = (small | extra).astype(np.uint8)
            assert np.all(dilate(small, SE3).pixels <= dilate(big, SE3).pixels)

    def test_structuring_element_validation(self):
        with pytest.raises(ValueError):
            StructuringElement(((1, 1), (1, 1)))  # even sides
        with pytest.raises(ValueError):
            StructuringElement(((1, 1, 1), (1, 0, 1), (1, 1, 1)))  # anchor unset


class TestGenerateGt2:
    def test_two_level_compose(self):
        image, _ = three_level_image()
        raw = kmeans_segment(image, clusters=3, seed=2).pixels
        gt2 = generate_gt2(image, seed=2, clusters=3)
        expected = naive_close(naive_dilate(raw, SE3.array()), SE3.array())
        assert np.array_equal(gt2.pixels, expected)
        assert np.all(raw <= gt2.pixels)  # one-pixel boundary growth
        assert gt2.pixels.sum() > raw.sum()

    def test_negative_eye_small_mask(self):
        image, _, label = synthesize_sample(SynthSpec(area_fraction=0.0), seed=13)
        assert label == "negative"
        gt2 = generate_gt2(image, seed=0)
        disk = image.roi.disk_mask(gt2.pixels.shape)
        assert 100.0 * gt2.pixels.sum() / disk.sum() < 2.0

    def test_morphology_covers_clustering_gaps(self):
        roi = Roi(32, 32, 32)
        pixels = np.full((64, 64), 0.15, dtype=np.float32)
        disk = roi.disk_mask(pixels.shape)
        pixels[24:40, 24:40] = 0.8
        pixels[24:40, 31] = 0.15  # one-pixel dark seam inside the bright region
        pixels[~disk] = 0.0
        image = RetroImage("gap", pixels, roi)
        raw = kmeans_segment(image, clusters=2, seed=0).pixels
        assert raw[30, 31] == 0
        gt2 = generate_gt2(image, seed=0, clusters=2)
        assert gt2.pixels[26:38, 31].all()


class TestMaskType:
    def test_value_and_source_validation(self):
        with pytest.raises(ValueError):
            Mask(np.array([[0, 2]], dtype=np.uint8), source=GT1)
        with pytest.raises(ValueError):
            Mask(np.zeros((2, 2), dtype=np.uint8), source="GUESS")


def test_kmeans_nonconvergence_reports_iterations():
    rng = np.random.default_rng(0)
    values = rng.random(50)
    with pytest.raises(KMeansConvergenceError) as err:
        _kmeans_1d(values, 2, np.random.default_rng(1), max_iter=0)
    assert err.value.iterations == 0
