from __future__ import annotations

import math

import numpy as np
import pytest

from temphase.core.errors import UndefinedSpacingError
from temphase.services.image_io import DSpacingDB, Image2D
from temphase.services.instances import Feature, equivalent_diameter
from temphase.services.phase_matching import (
    ScaleChain,
    ScaleMode,
    d_spacing,
    find_peaks,
    match_components,
    match_percent,
    radial_profile,
)
from temphase.services.spot_detection import BinaryMask


def _feature(label: int, x: float, y: float, area: int = 100) -> Feature:
    return Feature(label, x, y, area, equivalent_diameter(area), 255 * area, 1.0)


def _ring_image(size: int, chain: ScaleChain, *radii: int) -> Image2D:
    cx, cy = chain.center
    yy, xx = np.mgrid[0:size, 0:size]
    bands = np.floor(np.hypot(xx - cx, yy - cy))
    return Image2D(np.isin(bands, radii).astype(np.float64))


@pytest.mark.parametrize(
    ("d_calc", "d_ref", "decimals", "expected"),
    [
        (2.41641, 2.416, 3, 100.00),
        (2.62746, 2.6528, 4, 99.04),
        (1.59336, 1.593, 3, 100.00),
    ],
)
def test_match_percent_reference_rows(d_calc, d_ref, decimals, expected):
    assert round(match_percent(d_calc, d_ref, decimals), 2) == expected


def test_match_percent_formula_without_precision():
    assert match_percent(2.62746, 2.6528) == pytest.approx((1 - abs(2.62746 - 2.6528) / 2.6528) * 100)
    assert match_percent(2.416, 2.416) == 100.0
    assert match_percent(3.0, 2.0) == pytest.approx(50.0)


def test_compat_mode_uses_fixed_numerator():
    chain = ScaleChain(4096, 0.037, 2048, 1024, ScaleMode.COMPAT)
    assert chain.center == (511.5, 511.5)
    assert chain.d_at_radius(627.2) == pytest.approx(4096 * 0.37 / 627.2)
    assert chain.d_at_radius(627.2) == pytest.approx(2.4164, abs=1e-3)
    assert d_spacing(511.5 + 627.2, 511.5, chain) == pytest.approx(chain.d_at_radius(627.2))
    assert chain.d_at_radius(2 * 627.2) == pytest.approx(chain.d_at_radius(627.2) / 2)


@pytest.mark.parametrize("name", ["paper_compat", "compat", "PAPER_COMPAT"])
def test_scale_mode_accepts_paper_compat_and_alias(name):
    assert ScaleMode(name.lower()) is ScaleMode.COMPAT
    assert ScaleMode.COMPAT.value == "paper_compat"
    with pytest.raises(ValueError):
        ScaleMode("legacy")


def test_generalized_mode_native_chain():
    chain = ScaleChain.native(1024, 0.02)
    assert chain.mode is ScaleMode.GENERALIZED
    assert chain.center == (512.0, 512.0)
    assert d_spacing(512 + 128, 512, chain) == pytest.approx(1.6)
    assert chain.radius_for_d(1.6) == pytest.approx(128.0)


def test_generalized_center_follows_dc_bin_through_resize():
    chain = ScaleChain(4096, 0.037, 2048, 1024)
    assert chain.resize_factor == 2.0
    assert chain.center == (511.75, 511.75)
    assert chain.to_spectrum(*chain.center) == pytest.approx((2048.0, 2048.0))


def test_dc_position_is_undefined():
    chain = ScaleChain.native(256, 0.05)
    with pytest.raises(UndefinedSpacingError):
        d_spacing(*chain.center, chain)


def test_spacing_decreases_with_radius():
    chain = ScaleChain.native(512, 0.03)
    spacings = [chain.d_at_radius(r) for r in np.linspace(1, 300, 50)]
    assert all(a > b for a, b in zip(spacings, spacings[1:]))


def test_chain_validation():
    with pytest.raises(ValueError):
        ScaleChain(1024, 0.05, 2048, 1024)
    with pytest.raises(ValueError):
        ScaleChain(1024, 0.0, 1024, 1024)


def test_radial_profile_single_ring():
    chain = ScaleChain.native(512, 0.01)
    profile = radial_profile(_ring_image(512, chain, 100), chain)
    assert int(np.argmax(profile.intensity)) == 100
    assert profile.radius_px[100] == 100.5
    assert np.count_nonzero(profile.intensity) == 1
    assert np.all(np.diff(profile.radius_px) > 0)
    assert np.all(np.diff(profile.d_angstrom) < 0)


def test_radial_profile_constant_image_counts_band_pixels():
    chain = ScaleChain.native(256, 0.01)
    profile = radial_profile(Image2D(np.ones((256, 256))), chain)
    cx, cy = chain.center
    yy, xx = np.mgrid[0:256, 0:256]
    inside = np.floor(np.hypot(xx - cx, yy - cy)) < len(profile)
    assert profile.intensity.sum() == np.count_nonzero(inside)
    k = np.arange(20, len(profile))
    np.testing.assert_allclose(profile.intensity[k], 2 * np.pi * (k + 0.5), rtol=0.2)


def test_radial_profile_with_mask():
    chain = ScaleChain.native(128, 0.01)
    image = Image2D(np.ones((128, 128)))
    assert not radial_profile(image, chain, BinaryMask.empty(128, 128)).intensity.any()
    with pytest.raises(ValueError):
        radial_profile(Image2D(np.ones((128, 96))), chain)


def test_find_peaks_single_ring():
    chain = ScaleChain.native(512, 0.01)
    profile = radial_profile(_ring_image(512, chain, 100), chain)
    (peak,) = find_peaks(profile, 0.05)
    assert peak.radius_px == 100.5
    assert peak.d_angstrom == pytest.approx(chain.d_at_radius(100.5))


def test_find_peaks_two_rings_inverse_proportional():
    chain = ScaleChain.native(512, 0.01)
    peaks = find_peaks(radial_profile(_ring_image(512, chain, 80, 160), chain), 0.05)
    assert len(peaks) == 2
    outer, inner = peaks
    assert outer.radius_px == 160.5
    assert inner.d_angstrom == pytest.approx(2 * outer.d_angstrom, rel=0.01)


def test_find_peaks_flat_profile():
    chain = ScaleChain.native(128, 0.01)
    profile = radial_profile(Image2D(np.zeros((128, 128))), chain)
    assert find_peaks(profile, 0.05) == []


def test_find_peaks_ignores_dc_bands():
    chain = ScaleChain.native(256, 0.01)
    profile = radial_profile(_ring_image(256, chain, 10, 60), chain)
    assert [peak.radius_px for peak in find_peaks(profile, 0.05)] == [60.5]


def _feature_at_d(label: int, d: float, chain: ScaleChain, angle: float = 0.0) -> Feature:
    r = chain.radius_for_d(d)
    cx, cy = chain.center
    return _feature(label, cx + r * math.cos(angle), cy + r * math.sin(angle))


def test_match_components_groups_by_component(sample_db):
    chain = ScaleChain.native(1024, 0.02)
    features = [
        _feature_at_d(1, 2.416, chain),
        _feature_at_d(2, 2.416, chain, math.pi),
        _feature_at_d(3, 2.62746, chain, math.pi / 2),
        _feature_at_d(4, 3.5, chain, math.pi / 4),
    ]
    result = match_components(features, chain, sample_db, 0.02)

    by_key = result.by_key()
    assert set(by_key) == {("Li", "011"), ("Li2O", "111")}
    assert by_key[("Li", "011")].feature_ids == (1, 2)
    assert by_key[("Li", "011")].match_pct == 100.0
    assert round(by_key[("Li2O", "111")].match_pct, 2) == 99.04
    assert [match.d_calc for match in result] == sorted((match.d_calc for match in result), reverse=True)

    (unassigned,) = result.unassigned
    assert unassigned.label == 4
    assert unassigned.d_calc == pytest.approx(3.5)
    assert unassigned.nearest == ("Li2O", "111")
    assert result.assignments == {1: ("Li", "011"), 2: ("Li", "011"), 3: ("Li2O", "111")}


def test_match_components_averages_group_spacing(sample_db):
    chain = ScaleChain.native(1024, 0.02)
    result = match_components(
        [_feature_at_d(1, 2.40, chain), _feature_at_d(2, 2.44, chain, math.pi)], chain, sample_db, 0.02
    )
    (match,) = result.matches
    assert match.d_calc == pytest.approx(2.42)
    assert match.match_pct == pytest.approx(match_percent(2.42, 2.416, 3))


def test_match_components_scale_consistency(sample_db):
    chain = ScaleChain.native(1024, 0.02)
    features = [_feature_at_d(1, 2.416, chain), _feature_at_d(2, 1.6, chain, 1.0), _feature_at_d(3, 2.65, chain, 2.0)]
    base = match_components(features, chain, sample_db, 0.02)
    doubled = match_components(features, chain.scaled(0.04), sample_db.scaled(2.0), 0.02)

    assert base.assignments == doubled.assignments
    for label, d in base.feature_d.items():
        assert doubled.feature_d[label] == pytest.approx(2 * d)


def test_match_components_needs_database(sample_db):
    chain = ScaleChain.native(64, 0.02)
    with pytest.raises(ValueError):
        match_components([], chain, DSpacingDB(), 0.02)
    assert len(match_components([], chain, sample_db, 0.02)) == 0
