"""FFT geometry to d-spacing conversion, circular integration and database matching."""

from __future__ import annotations

import enum
import logging
import math
from collections import defaultdict
from collections.abc import Iterable
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy import signal

from temphase.core.errors import UndefinedSpacingError
from temphase.services.analysis_config import match_rel_tolerance, peak_min_prominence_fraction
from temphase.services.image_io import DSpacingDB, DSpacingEntry, Image2D
from temphase.services.instances import Feature
from temphase.services.spot_detection import BinaryMask

logger = logging.getLogger(__name__)

NM_TO_ANGSTROM = 10.0
DEFAULT_DC_EXCLUSION_BANDS = 20


class ScaleMode(str, enum.Enum):
    # d = original * pixel_size / r about ((final - 1) / 2, (final - 1) / 2)
    COMPAT = "paper_compat"
    # d = 1 / (r * dk) about the DC bin as displaced by crop and resize
    GENERALIZED = "generalized"

    @classmethod
    def _missing_(cls, value: object) -> ScaleMode | None:
        if isinstance(value, str) and value.strip().lower() in SCALE_MODE_ALIASES:
            return cls(SCALE_MODE_ALIASES[value.strip().lower()])
        return None


SCALE_MODE_ALIASES = {"compat": "paper_compat"}
SCALE_MODE_CHOICES = ("paper_compat", "compat", "generalized")


@dataclass(frozen=True)
class ScaleChain:
    """Bookkeeping from the original image through crop and resize to the FFT image."""

    original_size: int
    pixel_size: float
    crop_size: int
    final_size: int
    mode: ScaleMode = ScaleMode.GENERALIZED

    def __post_init__(self) -> None:
        object.__setattr__(self, "mode", ScaleMode(self.mode))
        if not self.pixel_size > 0:
            raise ValueError(f"pixel_size must be positive, got {self.pixel_size}")
        if not 0 < self.final_size <= self.crop_size <= self.original_size:
            raise ValueError(
                "ScaleChain needs 0 < final_size <= crop_size <= original_size, got "
                f"{self.final_size}/{self.crop_size}/{self.original_size}"
            )

    @classmethod
    def native(cls, size: int, pixel_size: float, mode: ScaleMode | str = ScaleMode.GENERALIZED) -> ScaleChain:
        return cls(size, pixel_size, size, size, ScaleMode(mode))

    @property
    def resize_factor(self) -> float:
        """Spectrum bins per FFT-image pixel."""
        return self.crop_size / self.final_size

    @property
    def delta_k(self) -> float:
        """Spatial-frequency pitch of one FFT-image pixel, nm^-1."""
        return self.resize_factor / (self.original_size * self.pixel_size)

    @property
    def center(self) -> tuple[float, float]:
        if self.mode is ScaleMode.COMPAT:
            c = (self.final_size - 1) / 2.0
        else:
            c = (self.crop_size // 2 + 0.5) / self.resize_factor - 0.5
        return c, c

    def radius(self, x: float, y: float) -> float:
        cx, cy = self.center
        return math.hypot(x - cx, y - cy)

    def d_at_radius(self, r: float) -> float:
        if r <= 0:
            raise UndefinedSpacingError(f"d-spacing is undefined at radius {r} (DC position)")
        if self.mode is ScaleMode.COMPAT:
            return self.original_size * self.pixel_size * NM_TO_ANGSTROM / r
        return NM_TO_ANGSTROM / (r * self.delta_k)

    def radius_for_d(self, d_angstrom: float) -> float:
        if not d_angstrom > 0:
            raise ValueError(f"d_angstrom must be positive, got {d_angstrom}")
        if self.mode is ScaleMode.COMPAT:
            return self.original_size * self.pixel_size * NM_TO_ANGSTROM / d_angstrom
        return NM_TO_ANGSTROM / (d_angstrom * self.delta_k)

    def to_spectrum(self, x: float, y: float) -> tuple[float, float]:
        """FFT-image pixel to the shifted full-resolution spectrum index it was resampled from."""
        offset = self.original_size // 2 - self.crop_size // 2
        scale = self.resize_factor
        return (x + 0.5) * scale - 0.5 + offset, (y + 0.5) * scale - 0.5 + offset

    def scaled(self, pixel_size: float) -> ScaleChain:
        return ScaleChain(self.original_size, pixel_size, self.crop_size, self.final_size, self.mode)


def d_spacing(x: float, y: float, chain: ScaleChain) -> float:
    """d-spacing in angstrom of the FFT-image position (x, y)."""
    return chain.d_at_radius(chain.radius(x, y))


@dataclass(frozen=True)
class DiffractionProfile:
    radius_px: np.ndarray
    d_angstrom: np.ndarray
    intensity: np.ndarray

    def __len__(self) -> int:
        return int(self.radius_px.size)


class RadialPeak(NamedTuple):
    d_angstrom: float
    intensity: float
    radius_px: float


def radial_profile(fft_img: Image2D, chain: ScaleChain, mask: BinaryMask | None = None) -> DiffractionProfile:
    """Sum pixel values in 1-px annuli about the chain centre, out to the inscribed circle.

    Band k holds radii [k, k + 1) and is reported at radius k + 0.5.
    """
    width, height = fft_img.dims
    if width != height:
        raise ValueError(f"radial_profile needs a square FFT image, got {width}x{height}")
    cx, cy = chain.center
    yy, xx = np.mgrid[0:height, 0:width]
    bands = np.floor(np.hypot(xx - cx, yy - cy)).astype(np.int64)
    n_bands = int(math.floor(min(cx, cy, width - 1 - cx, height - 1 - cy))) + 1

    values = fft_img.pixels
    if mask is not None:
        if mask.dims != fft_img.dims:
            raise ValueError(f"mask dims {mask.dims} differ from FFT image dims {fft_img.dims}")
        values = np.where(mask.bits, values, 0.0)
    inside = bands < n_bands
    intensity = np.bincount(bands[inside], weights=values[inside], minlength=n_bands)[:n_bands]

    radii = np.arange(n_bands, dtype=np.float64) + 0.5
    d_column = np.asarray([chain.d_at_radius(r) for r in radii])
    return DiffractionProfile(radius_px=radii, d_angstrom=d_column, intensity=intensity.astype(np.float64))


def find_peaks(
    profile: DiffractionProfile,
    min_prominence_fraction: float | None = None,
    dc_exclusion_bands: int = DEFAULT_DC_EXCLUSION_BANDS,
) -> list[RadialPeak]:
    """Prominent local maxima beyond the DC bands, strongest first."""
    if len(profile) == 0:
        raise ValueError("find_peaks needs a nonempty profile")
    fraction = peak_min_prominence_fraction() if min_prominence_fraction is None else min_prominence_fraction
    retained = profile.intensity[dc_exclusion_bands:]
    if retained.size < 3:
        return []
    spread = float(retained.max() - retained.min())
    if spread <= 0.0:
        return []
    indices, _ = signal.find_peaks(retained, prominence=max(fraction * spread, np.finfo(float).tiny))
    peaks = [
        RadialPeak(
            float(profile.d_angstrom[i + dc_exclusion_bands]),
            float(profile.intensity[i + dc_exclusion_bands]),
            float(profile.radius_px[i + dc_exclusion_bands]),
        )
        for i in indices
    ]
    peaks.sort(key=lambda peak: (-peak.intensity, peak.radius_px))
    return peaks


def match_percent(d_calc: float, d_ref: float, decimals: int | None = None) -> float:
    """(1 - |d_calc - d_ref| / d_ref) * 100.

    A deviation below half a unit in the last decimal quoted for ``d_ref``
    is beyond the reference precision and scores 100.
    """
    deviation = abs(d_calc - d_ref)
    if decimals is not None and deviation <= 0.5 * 10.0 ** (-decimals) + 1e-12:
        return 100.0
    return (1.0 - deviation / d_ref) * 100.0


@dataclass(frozen=True)
class ComponentMatch:
    name: str
    hkl: str
    d_calc: float
    d_ref: float
    match_pct: float
    feature_ids: tuple[int, ...]
    feature_size_px: float
    pixel_value_count: int

    @property
    def key(self) -> tuple[str, str]:
        return self.name, self.hkl


@dataclass(frozen=True)
class UnassignedFeature:
    label: int
    d_calc: float | None
    nearest: tuple[str, str] | None
    rel_deviation: float | None


@dataclass(frozen=True)
class MatchResult:
    matches: tuple[ComponentMatch, ...] = field(default_factory=tuple)
    unassigned: tuple[UnassignedFeature, ...] = field(default_factory=tuple)
    feature_d: dict[int, float] = field(default_factory=dict)
    assignments: dict[int, tuple[str, str]] = field(default_factory=dict)

    def __iter__(self):
        return iter(self.matches)

    def __len__(self) -> int:
        return len(self.matches)

    def by_key(self) -> dict[tuple[str, str], ComponentMatch]:
        return {match.key: match for match in self.matches}


def match_components(
    features: Iterable[Feature],
    chain: ScaleChain,
    db: DSpacingDB,
    rel_tolerance: float | None = None,
) -> MatchResult:
    """Assign each feature to its nearest database entry and average per component."""
    if len(db) == 0:
        raise ValueError("match_components needs a nonempty database")
    tolerance = match_rel_tolerance() if rel_tolerance is None else rel_tolerance

    groups: dict[tuple[str, str], list[tuple[Feature, float]]] = defaultdict(list)
    entries: dict[tuple[str, str], DSpacingEntry] = {}
    unassigned: list[UnassignedFeature] = []
    feature_d: dict[int, float] = {}
    assignments: dict[int, tuple[str, str]] = {}

    for feature in features:
        try:
            d_calc = d_spacing(feature.centroid_x, feature.centroid_y, chain)
        except UndefinedSpacingError:
            logger.debug("Feature %d sits on the DC position; skipped", feature.label)
            unassigned.append(UnassignedFeature(feature.label, None, None, None))
            continue
        feature_d[feature.label] = d_calc
        entry, deviation = db.nearest(d_calc)
        if deviation > tolerance:
            unassigned.append(UnassignedFeature(feature.label, d_calc, entry.key, deviation))
            continue
        groups[entry.key].append((feature, d_calc))
        entries[entry.key] = entry
        assignments[feature.label] = entry.key

    matches = []
    for key, members in groups.items():
        entry = entries[key]
        d_mean = float(np.mean([d for _, d in members]))
        matches.append(
            ComponentMatch(
                name=entry.name,
                hkl=entry.hkl,
                d_calc=d_mean,
                d_ref=entry.d_ref,
                match_pct=match_percent(d_mean, entry.d_ref, entry.decimals),
                feature_ids=tuple(sorted(feature.label for feature, _ in members)),
                feature_size_px=float(np.mean([feature.equivalent_diameter for feature, _ in members])),
                pixel_value_count=int(round(np.mean([feature.pixel_value_count for feature, _ in members]))),
            )
        )
    matches.sort(key=lambda match: (-match.d_calc, match.name, match.hkl))
    logger.debug("match_components: %d components, %d unassigned features", len(matches), len(unassigned))
    return MatchResult(tuple(matches), tuple(unassigned), feature_d, assignments)
