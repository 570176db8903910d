from __future__ import annotations

import numpy as np
import pytest
from scipy import ndimage

from temphase.core.errors import DimensionMismatchError
from temphase.services.image_io import Image2D, write_netpbm_bytes
from temphase.services.pipeline import PipelineConfig, prepare_fft
from temphase.services.spot_detection import (
    BinaryMask,
    ConfusionCounts,
    DetectParams,
    confusion,
    crop_half,
    detect_spots,
    dice,
    import_mask,
    import_probability_map,
    radial_robust_sigma,
    radius_grid,
    reconstruct_full,
    soft_dice,
    subtract_radial_median,
    threshold_mask,
    write_mask,
)
from temphase.services.synthgen import SpotSpec, synth_fft_spots


def test_threshold_is_inclusive():
    prob = Image2D(np.array([[0.49, 0.5], [0.51, 0.0]]))
    np.testing.assert_array_equal(threshold_mask(prob, 0.5).bits, [[False, True], [True, False]])
    with pytest.raises(ValueError):
        threshold_mask(prob, 1.0)


def test_import_mask_foreground_at_128(tmp_path):
    path = tmp_path / "mask.pgm"
    write_netpbm_bytes(path, np.array([[0, 127], [128, 255]], dtype=np.uint8))
    mask = import_mask(path, 2, 2)
    np.testing.assert_array_equal(mask.bits, [[False, False], [True, True]])
    with pytest.raises(DimensionMismatchError):
        import_mask(path, 4, 2)


def test_imported_mask_reproduces_itself(tmp_path, make_disk_mask):
    mask = make_disk_mask(64, 64, (20, 20, 5), (43, 43, 5))
    path = tmp_path / "mask.pgm"
    write_mask(mask, path)
    assert dice(import_mask(path, 64, 64), mask) == 1.0


def test_probability_map_scaled_by_maxval(tmp_path):
    path = tmp_path / "prob.pgm"
    write_netpbm_bytes(path, np.array([[0, 255], [51, 204]], dtype=np.uint8))
    prob = import_probability_map(path, 2, 2)
    np.testing.assert_allclose(prob.pixels, [[0.0, 1.0], [0.2, 0.8]])


def test_half_crop_reconstructs_point_symmetric_masks(rng):
    for _ in range(100):
        height = 2 * int(rng.integers(2, 33))
        width = int(rng.integers(2, 65))
        raw = rng.random((height, width)) < 0.2
        symmetric = BinaryMask(raw | raw[::-1, ::-1])
        half = crop_half(symmetric)
        assert half.dims == (width, height // 2)
        np.testing.assert_array_equal(reconstruct_full(half).bits, symmetric.bits)


def test_crop_half_of_image_and_odd_height():
    image = Image2D(np.arange(24, dtype=np.float64).reshape(6, 4))
    np.testing.assert_array_equal(crop_half(image).pixels, image.pixels[:3])
    with pytest.raises(ValueError):
        crop_half(BinaryMask(np.zeros((5, 4), dtype=bool)))


def test_dice_edge_cases(make_disk_mask):
    a = make_disk_mask(32, 32, (10, 10, 4))
    b = make_disk_mask(32, 32, (22, 22, 4))
    empty = BinaryMask.empty(32, 32)
    assert dice(a, a) == 1.0
    assert dice(a, b) == 0.0
    assert dice(empty, empty) == 1.0
    with pytest.raises(DimensionMismatchError):
        dice(a, BinaryMask.empty(16, 32))


def test_soft_dice_matches_hard_dice_on_binary_maps(make_disk_mask):
    truth = make_disk_mask(32, 32, (10, 10, 4))
    other = make_disk_mask(32, 32, (12, 10, 4))
    assert soft_dice(Image2D(truth.bits.astype(float)), truth) == pytest.approx(1.0)
    assert soft_dice(Image2D(other.bits.astype(float)), truth) == pytest.approx(dice(other, truth))
    assert soft_dice(Image2D(np.full((32, 32), 0.5)), truth) < 1.0


def test_confusion_counts():
    pred = BinaryMask(np.array([[1, 1], [0, 0]], dtype=bool))
    truth = BinaryMask(np.array([[1, 0], [1, 0]], dtype=bool))
    assert confusion(pred, truth) == ConfusionCounts(tp=1, fp=1, fn=1, tn=1)


def test_radial_median_removes_rotationally_symmetric_background():
    background = np.floor(radius_grid(33, 33)) * 0.1
    np.testing.assert_allclose(subtract_radial_median(background), 0.0, atol=1e-12)


def test_detector_rejects_images_smaller_than_dc_exclusion():
    with pytest.raises(ValueError):
        detect_spots(Image2D(np.zeros((30, 30))), DetectParams(dc_exclusion_radius=20.0))


def test_detector_on_flat_image_finds_nothing():
    assert detect_spots(Image2D(np.full((64, 64), 0.3)), DetectParams()).is_empty()


def test_detector_drops_unpaired_spots():
    yy, xx = np.mgrid[0:256, 0:256]

    def bump(cx: float, cy: float) -> np.ndarray:
        return 0.5 * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / 8.0)

    lonely = Image2D(0.1 + bump(190.0, 128.0))
    assert detect_spots(lonely, DetectParams()).is_empty()

    # partner reflected through ((W - 1) / 2, (H - 1) / 2)
    paired = detect_spots(Image2D(0.1 + bump(190.0, 128.0) + bump(65.0, 127.0)), DetectParams())
    assert not paired.is_empty()
    assert paired.bits[128, 190] and paired.bits[127, 65]


def test_detector_dice_at_snr_8():
    spots = [SpotSpec(180.0, 128.0), SpotSpec(128.0, 70.0), SpotSpec(170.0, 170.0)]
    scores = []
    for seed in range(20):
        image, truth = synth_fft_spots(spots, (256, 256), background_noise=0.05, seed=seed)
        assert spots[0].amplitude / 0.05 == 8.0
        scores.append(dice(detect_spots(image, DetectParams()), truth))
    assert min(scores) >= 0.6


PLANTED = [SpotSpec(180.0, 128.0), SpotSpec(128.0, 70.0), SpotSpec(170.0, 170.0)]


def _blob_centroids(mask: BinaryMask) -> np.ndarray:
    labels, count = ndimage.label(mask.bits, structure=np.ones((3, 3)))
    centers = ndimage.center_of_mass(mask.bits, labels, range(1, count + 1))
    return np.asarray([(x, y) for y, x in centers], dtype=np.float64).reshape(-1, 2)


def test_detector_finds_exactly_the_planted_pairs():
    planted = [(spot.x, spot.y) for spot in PLANTED] + [(255.0 - spot.x, 255.0 - spot.y) for spot in PLANTED]
    for seed in range(5):
        image, _ = synth_fft_spots(PLANTED, (256, 256), background_noise=0.05, seed=seed)
        centroids = _blob_centroids(detect_spots(image, DetectParams()))
        assert len(centroids) == 6
        for x, y in planted:
            assert np.min(np.hypot(centroids[:, 0] - x, centroids[:, 1] - y)) <= 2.0


def test_every_detected_blob_has_a_reflected_partner():
    params = DetectParams()
    for seed in range(5):
        image, _ = synth_fft_spots(PLANTED, (256, 256), background_noise=0.05, seed=100 + seed)
        centroids = _blob_centroids(detect_spots(image, params))
        for index, (x, y) in enumerate(centroids):
            distances = np.hypot(centroids[:, 0] - (255.0 - x), centroids[:, 1] - (255.0 - y))
            distances[index] = np.inf
            assert distances.min() <= params.symmetry_tolerance


def test_detector_ignores_constant_offsets():
    image, _ = synth_fft_spots(PLANTED, (256, 256), background_noise=0.05, seed=3)
    base = detect_spots(image, DetectParams())
    shifted = detect_spots(image.with_pixels(image.pixels + 0.25), DetectParams())
    assert not base.is_empty()
    np.testing.assert_array_equal(base.bits, shifted.bits)


def test_robust_sigma_is_constant_per_annulus(rng):
    residual = subtract_radial_median(rng.normal(size=(64, 64)))
    sigma = radial_robust_sigma(residual)
    radius = np.floor(radius_grid(64, 64)).astype(int)
    for band in (10, 20, 30):
        values = sigma[radius == band]
        assert np.all(values == values[0])
    # a unit normal field has a robust sigma near 1 in the wide annuli
    assert 0.7 < np.median(sigma[radius >= 20]) < 1.3


def test_detector_on_fft_of_noise_is_almost_always_empty():
    cfg = PipelineConfig(pixel_size=0.05)
    nonempty = 0
    for seed in range(100):
        noise = np.random.default_rng(seed).normal(size=(256, 256))
        enhanced = prepare_fft(Image2D(noise), cfg).enhanced
        nonempty += not detect_spots(enhanced, DetectParams()).is_empty()
    assert nonempty <= 1
