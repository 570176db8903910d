from __future__ import annotations

import csv
import math

import numpy as np
import pytest

from temphase.services.fft_core import forward_fft
from temphase.services.image_io import Image2D, read_pgm
from temphase.services.spot_detection import BinaryMask
from temphase.services.synthgen import (
    MANIFEST_COLUMNS,
    AffineDraw,
    AugmentParams,
    FringeSpec,
    SpotSpec,
    StackFringe,
    affine_matrix,
    apply_affine,
    augment,
    derive_seed,
    draw_affine,
    export_training_set,
    synth_fft_spots,
    synth_lattice,
    synth_stack,
)


def test_snapped_fringe_lands_on_its_bin():
    image, (truth,) = synth_lattice([FringeSpec(2.416, 0.0)], (256, 256), 0.05)
    assert truth.radius_px == 53.0
    assert truth.spots == ((181, 128), (75, 128))
    assert truth.d_realized == pytest.approx(256 / 53 * 0.5)
    spectrum = np.abs(forward_fft(image).shifted())
    assert spectrum[128, 181] == pytest.approx(0.5)
    assert spectrum[128, 75] == pytest.approx(0.5)
    assert spectrum.sum() == pytest.approx(1.0)


def test_unsnapped_fringe_keeps_requested_spacing():
    _, (truth,) = synth_lattice([FringeSpec(2.416, 0.3)], (256, 256), 0.05, snap=False)
    assert truth.d_realized == pytest.approx(2.416)


def test_fringe_period_bounds():
    with pytest.raises(ValueError):
        synth_lattice([FringeSpec(0.5)], (256, 256), 0.05)
    with pytest.raises(ValueError):
        synth_lattice([FringeSpec(80.0)], (256, 256), 0.05)
    with pytest.raises(ValueError):
        FringeSpec(-1.0)


def test_disk_region_and_seeded_noise():
    spec = FringeSpec(2.416, math.pi / 4, region="disk", region_center=(64.0, 64.0), region_radius=20.0)
    first, _ = synth_lattice([spec], (128, 128), 0.05, 0.1, seed=3)
    second, _ = synth_lattice([spec], (128, 128), 0.05, 0.1, seed=3)
    np.testing.assert_array_equal(first.pixels, second.pixels)
    clean, _ = synth_lattice([spec], (128, 128), 0.05)
    assert not clean.pixels[:10, :10].any()
    assert clean.pixels[54:74, 54:74].any()


def test_fft_spot_fixture_is_point_symmetric():
    image, truth = synth_fft_spots([SpotSpec(90.0, 40.0)], (128, 128), 0.05, seed=5)
    assert 0.0 <= image.pixels.min() and image.pixels.max() <= 1.0
    np.testing.assert_array_equal(truth.bits, truth.bits[::-1, ::-1])
    assert truth.bits[40, 90] and truth.bits[87, 37]
    with pytest.raises(ValueError):
        synth_fft_spots([SpotSpec(64.0, 70.0)], (128, 128))


def test_stack_fringe_amplitude_schedule():
    item = StackFringe(FringeSpec(2.416, amplitude=2.0), onset_frame=6, growth=0.5)
    assert [item.amplitude_at(k) for k in (1, 5, 6, 7, 8)] == [0.0, 0.0, 2.0, 3.0, 4.0]


def test_synth_stack_onset_frames_are_blank():
    stack, truth = synth_stack(
        [StackFringe(FringeSpec(2.416), onset_frame=3)], frames=4, size=64, pixel_size=0.05, frame_period_s=1.0
    )
    assert len(stack) == 4
    assert stack.frame_period_s == 1.0
    assert stack.pixel_size == 0.05
    assert not stack.frames[0].pixels.any()
    assert not stack.frames[1].pixels.any()
    assert stack.frames[2].pixels.any()
    assert len(truth) == 1
    with pytest.raises(ValueError):
        synth_stack([], frames=0, size=64, pixel_size=0.05)


def test_identity_augmentation_returns_input():
    image = Image2D(np.random.default_rng(0).uniform(size=(32, 32)))
    assert augment(image, AugmentParams.identity(seed=1)) is image


def test_affine_draw_bounds_and_horizontal_shift():
    params = AugmentParams(seed=0)
    rng = np.random.default_rng(0)
    for _ in range(50):
        draw = draw_affine(params, 200, rng)
        assert abs(draw.rotation_deg) <= 0.2
        assert abs(draw.shift_px) <= 10.0
        assert abs(draw.shear_deg) <= 0.05
        assert abs(draw.zoom - 1.0) <= 0.05
    matrix = affine_matrix(AffineDraw(shift_px=3.0), 32, 32)
    np.testing.assert_allclose(matrix, [[1, 0, 3], [0, 1, 0], [0, 0, 1]], atol=1e-12)


def test_shift_moves_content_horizontally():
    pixels = np.zeros((16, 32))
    pixels[:, 10] = 1.0
    shifted = apply_affine(Image2D(pixels), AffineDraw(shift_px=3.0)).pixels
    np.testing.assert_allclose(shifted[:, 13], 1.0, atol=1e-6)
    np.testing.assert_allclose(shifted[:, 10], 0.0, atol=1e-6)


def test_zoom_keeps_centre_fixed():
    pixels = np.zeros((33, 33))
    pixels[16, 16] = 1.0
    zoomed = apply_affine(Image2D(pixels), AffineDraw(zoom=1.04)).pixels
    assert np.unravel_index(np.argmax(zoomed), zoomed.shape) == (16, 16)


def _source() -> tuple[Image2D, BinaryMask]:
    return synth_fft_spots([SpotSpec(54.0, 12.0), SpotSpec(58.0, 40.0)], (64, 64), seed=2)


def test_export_writes_half_pairs_and_manifest(tmp_path):
    manifest = export_training_set([_source()], 3, tmp_path / "set", AugmentParams(seed=11), target_size=32)

    with manifest.open(encoding="utf-8", newline="") as handle:
        rows = list(csv.reader(handle))
    assert tuple(rows[0]) == MANIFEST_COLUMNS
    assert [row[1] for row in rows[1:]] == ["image_00000.pgm", "image_00001.pgm", "image_00002.pgm"]
    image = read_pgm(tmp_path / "set" / "image_00001.pgm")
    mask = read_pgm(tmp_path / "set" / "mask_00001.pgm")
    assert image.dims == (32, 16)
    assert mask.dims == (32, 16)
    assert set(np.unique(np.rint(mask.pixels * 255))) <= {0.0, 255.0}


def test_export_is_independent_of_worker_count(tmp_path):
    params = AugmentParams(seed=4)
    serial = export_training_set([_source()], 4, tmp_path / "serial", params, target_size=32, workers=1)
    parallel = export_training_set([_source()], 4, tmp_path / "parallel", params, target_size=32, workers=2)
    assert serial.read_bytes() == parallel.read_bytes()
    for index in range(4):
        name = f"image_{index:05d}.pgm"
        assert (serial.parent / name).read_bytes() == (parallel.parent / name).read_bytes()


def test_export_validation(tmp_path):
    with pytest.raises(ValueError):
        export_training_set([], 1, tmp_path, AugmentParams())
    with pytest.raises(ValueError):
        export_training_set([_source()], 1, tmp_path, AugmentParams(), target_size=33)
    manifest = export_training_set([_source()], 0, tmp_path / "none", AugmentParams())
    assert manifest.read_text(encoding="utf-8").splitlines() == [",".join(MANIFEST_COLUMNS)]


def test_derive_seed_is_stable_and_distinct():
    assert derive_seed(1, 0) == derive_seed(1, 0)
    assert derive_seed(1, 0) != derive_seed(1, 1)
    assert derive_seed(None, 3) != derive_seed(2, 3)
