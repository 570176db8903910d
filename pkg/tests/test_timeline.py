from __future__ import annotations

import logging
import math

import numpy as np
import pytest

from temphase.services.pipeline import PipelineConfig, analyze_image
from temphase.services.synthgen import FringeSpec, StackFringe, synth_stack
from temphase.services.timeline import IntensityProfile, first_detection, frame_time, process_stack

PIXEL_SIZE = 0.05
LI = ("Li", "011")
LI2O = ("Li2O", "111")


def _onset_stack(frames: int, size: int, onset: int):
    fringes = [
        StackFringe(FringeSpec(2.416, 0.0)),
        StackFringe(FringeSpec(2.6528, math.pi / 2), onset_frame=onset, growth=0.1),
    ]
    stack, _ = synth_stack(fringes, frames, size, PIXEL_SIZE, seed=7)
    return stack


@pytest.mark.parametrize(("k", "expected"), [(1, 2.46), (6, 14.76), (22, 54.12)])
def test_frame_time(k, expected):
    assert frame_time(k, 2.46) == pytest.approx(expected)


def test_frame_time_validation():
    with pytest.raises(ValueError):
        frame_time(0, 2.46)
    with pytest.raises(ValueError):
        frame_time(1, 0.0)


def _profile(intensity, match_pct) -> IntensityProfile:
    return IntensityProfile(
        component_keys=(LI,),
        intensity=np.asarray(intensity, dtype=float)[:, None],
        match_pct=np.asarray(match_pct, dtype=float)[:, None],
        frame_period_s=2.46,
        first_detection_frame={},
    )


def test_first_detection_respects_match_and_intensity():
    profile = _profile([0, 0, 0, 0, 0, 5, 6, 7], [0, 0, 0, 0, 0, 99.5, 99.5, 99.5])
    assert first_detection(profile, LI, 98.0, 0.02) == 6

    weak_start = _profile([0.01, 0.01, 5, 6], [99.0, 99.0, 99.0, 99.0])
    assert first_detection(weak_start, LI, 98.0, 0.02) == 3

    poor_match = _profile([5, 5, 5], [90.0, 99.0, 99.0])
    assert first_detection(poor_match, LI, 98.0, 0.02) == 2


def test_first_detection_never():
    assert first_detection(_profile([0, 0, 0], [0, 0, 0]), LI, 98.0, 0.02) is None
    with pytest.raises(ValueError):
        first_detection(_profile([1], [100]), LI2O)


def test_profile_frame_times():
    profile = _profile([1, 2, 3], [100, 100, 100])
    np.testing.assert_allclose(profile.frame_times(), [2.46, 4.92, 7.38])
    np.testing.assert_array_equal(profile.column(LI), [1, 2, 3])


def test_stack_onset_and_zero_floor(sample_db, tmp_path):
    stack = _onset_stack(frames=6, size=256, onset=3)
    profile = process_stack(stack, PipelineConfig(pixel_size=PIXEL_SIZE), sample_db, workers=1, out_dir=tmp_path)

    assert profile.component_keys == (LI2O, LI)
    assert profile.frame_count == 6
    assert profile.first_detection_frame == {LI2O: 3, LI: 1}
    np.testing.assert_array_equal(profile.column(LI2O)[:2], 0.0)
    assert np.all(profile.column(LI2O)[2:] > 0)
    assert np.all(profile.column(LI) > 0)
    assert profile.failed_frames == ()
    assert {match.key for match in profile.components} == {LI, LI2O}
    assert (tmp_path / "frames" / "overlay_frame1.ppm").exists()
    assert (tmp_path / "frames" / "overlay_frame6.ppm").exists()


def test_stack_results_independent_of_worker_count(sample_db):
    stack = _onset_stack(frames=4, size=128, onset=2)
    cfg = PipelineConfig(pixel_size=PIXEL_SIZE)
    serial = process_stack(stack, cfg, sample_db, workers=1)
    parallel = process_stack(stack, cfg, sample_db, workers=2)
    assert serial.component_keys == parallel.component_keys
    np.testing.assert_array_equal(serial.intensity, parallel.intensity)
    np.testing.assert_array_equal(serial.match_pct, parallel.match_pct)
    assert serial.first_detection_frame == parallel.first_detection_frame


def test_failed_frames_become_zero_rows(sample_db, tmp_path, caplog):
    stack = _onset_stack(frames=3, size=128, onset=1)
    cfg = PipelineConfig(pixel_size=PIXEL_SIZE, mask_path=tmp_path / "missing.pgm")
    with caplog.at_level(logging.WARNING, logger="temphase.services.timeline"):
        profile = process_stack(stack, cfg, sample_db)
    assert profile.failed_frames == (1, 2, 3)
    assert profile.component_keys == ()
    assert profile.intensity.shape == (3, 0)
    assert "Frame 1 failed" in caplog.text


def test_pixel_count_metric(sample_db):
    stack = _onset_stack(frames=2, size=128, onset=1)
    profile = process_stack(stack, PipelineConfig(pixel_size=PIXEL_SIZE, intensity_metric="pixel-count"), sample_db)
    values = profile.intensity
    assert np.all(values > 0)
    assert np.all(values == np.round(values))


def test_workers_must_be_positive(sample_db):
    with pytest.raises(ValueError):
        process_stack(_onset_stack(1, 128, 1), PipelineConfig(pixel_size=PIXEL_SIZE), sample_db, workers=0)


@pytest.mark.slow
def test_hundred_frame_stack_is_deterministic_across_workers(sample_db):
    stack = _onset_stack(frames=100, size=1024, onset=6)
    cfg = PipelineConfig(pixel_size=PIXEL_SIZE)
    serial = process_stack(stack, cfg, sample_db, workers=1)
    parallel = process_stack(stack, cfg, sample_db, workers=8)
    np.testing.assert_array_equal(serial.intensity, parallel.intensity)
    assert serial.first_detection_frame[LI2O] == 6
    assert parallel.first_detection_frame[LI2O] == 6


def test_growing_fringe_gives_nondecreasing_intensity(sample_db):
    fringes = [
        StackFringe(FringeSpec(2.416, 0.0)),
        StackFringe(FringeSpec(2.6528, math.pi / 2), onset_frame=1, growth=0.5),
    ]
    stack, _ = synth_stack(fringes, 5, 256, PIXEL_SIZE, seed=11)
    profile = process_stack(stack, PipelineConfig(pixel_size=PIXEL_SIZE), sample_db)
    column = profile.column(LI2O)
    assert np.all(column > 0)
    assert np.all(np.diff(column) >= 0)


def test_single_frame_stack_matches_single_image_analysis(sample_db):
    stack = _onset_stack(frames=1, size=128, onset=1)
    cfg = PipelineConfig(pixel_size=PIXEL_SIZE)
    profile = process_stack(stack, cfg, sample_db)
    single = analyze_image(stack.frames[0], cfg, sample_db)

    assert set(profile.component_keys) == set(single.component_intensity)
    for key in profile.component_keys:
        assert profile.column(key)[0] == single.component_intensity[key]
    assert profile.match_pct[0].tolist() == [
        next(match.match_pct for match in single.matches if match.key == key) for key in profile.component_keys
    ]
