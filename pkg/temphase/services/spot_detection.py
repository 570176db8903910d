"""Binary FFT feature masks: classical spot detector, mask import and mask metrics."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, TypeVar

import cv2
import numpy as np
from scipy import ndimage

from temphase.core.errors import DimensionMismatchError
from temphase.services.analysis_config import (
    detect_blur_sigma,
    detect_dc_exclusion_radius,
    detect_k_sigma,
    detect_min_blob_area,
    detect_symmetry_tolerance,
    prob_threshold,
)
from temphase.services.fft_core import center_convention, gaussian_blur
from temphase.services.image_io import Image2D, read_pgm, write_netpbm_bytes

logger = logging.getLogger(__name__)

MASK_FOREGROUND_LEVEL = 128
MAD_TO_SIGMA = 1.4826
# blobs must peak this many sigmas above the candidate level
SEED_MARGIN_SIGMA = 1.0


@dataclass(frozen=True)
class BinaryMask:
    bits: np.ndarray

    def __post_init__(self) -> None:
        bits = np.asarray(self.bits, dtype=bool)
        if bits is self.bits and bits.flags.writeable:
            bits = bits.copy()
        if bits.ndim != 2:
            raise ValueError(f"Mask must be 2D, got shape {bits.shape}")
        bits.setflags(write=False)
        object.__setattr__(self, "bits", bits)

    @property
    def width(self) -> int:
        return int(self.bits.shape[1])

    @property
    def height(self) -> int:
        return int(self.bits.shape[0])

    @property
    def dims(self) -> tuple[int, int]:
        return self.width, self.height

    @property
    def count(self) -> int:
        return int(np.count_nonzero(self.bits))

    def is_empty(self) -> bool:
        return not bool(self.bits.any())

    @classmethod
    def empty(cls, width: int, height: int) -> BinaryMask:
        return cls(np.zeros((height, width), dtype=bool))


@dataclass(frozen=True)
class DetectParams:
    blur_sigma: float = 3.0
    dc_exclusion_radius: float = 20.0
    k_sigma: float = 4.0
    symmetry_tolerance: float = 5.0
    min_blob_area: int = 4

    def __post_init__(self) -> None:
        for name in ("blur_sigma", "dc_exclusion_radius", "k_sigma", "symmetry_tolerance", "min_blob_area"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative, got {getattr(self, name)}")

    @classmethod
    def from_env(cls) -> DetectParams:
        return cls(
            blur_sigma=detect_blur_sigma(),
            dc_exclusion_radius=detect_dc_exclusion_radius(),
            k_sigma=detect_k_sigma(),
            symmetry_tolerance=detect_symmetry_tolerance(),
            min_blob_area=detect_min_blob_area(),
        )


class ConfusionCounts(NamedTuple):
    tp: int
    fp: int
    fn: int
    tn: int


def _require_same_dims(expected: tuple[int, int], actual: tuple[int, int], what: str = "mask") -> None:
    if expected != actual:
        raise DimensionMismatchError(expected, actual, what=what)


def threshold_mask(prob_map: Image2D, t: float | None = None) -> BinaryMask:
    """Foreground where the probability is >= t (default 0.5)."""
    t = prob_threshold() if t is None else t
    if not 0.0 < t < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {t}")
    return BinaryMask(prob_map.pixels >= t)


def _read_checked(path: str | Path, expected_w: int, expected_h: int, what: str) -> Image2D:
    image = read_pgm(path)
    _require_same_dims((expected_w, expected_h), image.dims, what=what)
    return image


def import_mask(path: str | Path, expected_w: int, expected_h: int) -> BinaryMask:
    """Binary mask from an 8-bit P5 file: foreground where the sample is >= 128."""
    image = _read_checked(path, expected_w, expected_h, what=f"mask {path}")
    return BinaryMask(np.rint(image.pixels * 255.0) >= MASK_FOREGROUND_LEVEL)


def import_probability_map(path: str | Path, expected_w: int, expected_h: int) -> Image2D:
    """Probability map from a P5 file, sample / maxval."""
    return _read_checked(path, expected_w, expected_h, what=f"probability map {path}")


def write_mask(mask: BinaryMask, path: str | Path) -> None:
    write_netpbm_bytes(path, mask.bits.astype(np.uint8) * 255)


def radius_grid(width: int, height: int) -> np.ndarray:
    cx, cy = center_convention(width, height)
    yy, xx = np.mgrid[0:height, 0:width]
    return np.hypot(xx - cx, yy - cy)


def _radial_bands(width: int, height: int) -> tuple[np.ndarray, np.ndarray]:
    """1-px annulus label per pixel (starting at 1) and the label index."""
    bands = np.floor(radius_grid(width, height)).astype(np.int64) + 1
    return bands, np.arange(1, int(bands.max()) + 1)


def subtract_radial_median(values: np.ndarray) -> np.ndarray:
    """Remove the median of every 1-px annulus about the centre convention."""
    height, width = values.shape
    bands, index = _radial_bands(width, height)
    medians = np.asarray(ndimage.median(values, labels=bands, index=index), dtype=np.float64)
    return values - medians[bands - 1]


def radial_robust_sigma(residual: np.ndarray) -> np.ndarray:
    """Per-pixel 1.4826 * MAD of the pixel's 1-px annulus (residual already median-centred)."""
    height, width = residual.shape
    bands, index = _radial_bands(width, height)
    mad = np.asarray(ndimage.median(np.abs(residual), labels=bands, index=index), dtype=np.float64)
    return MAD_TO_SIGMA * mad[bands - 1]


def _symmetric_blob_ids(centroids: np.ndarray, width: int, height: int, tolerance: float) -> set[int]:
    """Indices of blobs whose point reflection lands within tolerance of another blob."""
    if len(centroids) < 2:
        return set()
    reflected = np.column_stack((width - 1 - centroids[:, 0], height - 1 - centroids[:, 1]))
    distances = np.hypot(
        reflected[:, np.newaxis, 0] - centroids[np.newaxis, :, 0],
        reflected[:, np.newaxis, 1] - centroids[np.newaxis, :, 1],
    )
    np.fill_diagonal(distances, np.inf)
    return {int(i) for i in np.flatnonzero(distances.min(axis=1) <= tolerance)}


def detect_spots(fft_img: Image2D, params: DetectParams | None = None) -> BinaryMask:
    """Classical symmetric-spot detector on an enhanced log-magnitude FFT image.

    A pixel is a candidate when its residual exceeds both the global
    mean + k_sigma * std and k_sigma robust sigmas of its own annulus. A blob
    survives when it reaches ``k_sigma + SEED_MARGIN_SIGMA`` somewhere, covers
    ``min_blob_area`` pixels and has a point-reflected partner.
    """
    params = params or DetectParams.from_env()
    width, height = fft_img.dims
    if min(width, height) < 2 * params.dc_exclusion_radius:
        raise ValueError(
            f"Image {width}x{height} is smaller than twice the DC exclusion radius {params.dc_exclusion_radius}"
        )

    blurred = gaussian_blur(fft_img, params.blur_sigma).pixels
    residual = subtract_radial_median(blurred)
    outside_dc = radius_grid(width, height) > params.dc_exclusion_radius
    samples = residual[outside_dc]
    if samples.size == 0:
        return BinaryMask.empty(width, height)
    mean, std = float(samples.mean()), float(samples.std())
    band_sigma = radial_robust_sigma(residual)

    def _level(k: float) -> np.ndarray:
        return np.maximum(mean + k * std, k * band_sigma)

    seed_k = params.k_sigma + SEED_MARGIN_SIGMA
    candidates = (residual > _level(params.k_sigma)) & outside_dc
    seeds = (residual > _level(seed_k)) & candidates

    count, labels, stats, centroids = cv2.connectedComponentsWithStats(
        candidates.astype(np.uint8), connectivity=8, ltype=cv2.CV_32S
    )
    seeded = set(np.unique(labels[seeds]).tolist())
    blob_ids = [i for i in range(1, count) if stats[i, cv2.CC_STAT_AREA] >= params.min_blob_area and i in seeded]
    if not blob_ids:
        return BinaryMask.empty(width, height)

    blob_centroids = np.asarray([centroids[i] for i in blob_ids], dtype=np.float64)
    paired = _symmetric_blob_ids(blob_centroids, width, height, params.symmetry_tolerance)
    kept = [blob_ids[i] for i in sorted(paired)]
    logger.debug(
        "detect_spots: %d candidate blobs, %d seeded and area-filtered, %d symmetric",
        count - 1,
        len(blob_ids),
        len(kept),
    )
    return BinaryMask(np.isin(labels, kept))


MaskOrImage = TypeVar("MaskOrImage", BinaryMask, Image2D)


def crop_half(mask_or_img: MaskOrImage) -> MaskOrImage:
    """Top half (rows 0 .. H/2 - 1)."""
    if isinstance(mask_or_img, BinaryMask):
        data = mask_or_img.bits
    else:
        data = mask_or_img.pixels
    height = data.shape[0]
    if height % 2:
        raise ValueError(f"crop_half needs an even height, got {height}")
    top = np.ascontiguousarray(data[: height // 2])
    if isinstance(mask_or_img, BinaryMask):
        return BinaryMask(top)
    return mask_or_img.with_pixels(top)


def reconstruct_full(half: BinaryMask) -> BinaryMask:
    """Complete a top-half mask by point reflection about ((W - 1) / 2, (H - 1) / 2)."""
    top = half.bits
    bottom = top[::-1, ::-1]
    return BinaryMask(np.vstack((top, bottom)))


def dice(a: BinaryMask, b: BinaryMask) -> float:
    _require_same_dims(a.dims, b.dims)
    total = a.count + b.count
    if total == 0:
        return 1.0
    return 2.0 * int(np.count_nonzero(a.bits & b.bits)) / total


def soft_dice(prob_map: Image2D, truth: BinaryMask) -> float:
    """Threshold-free dice: 2 * sum(p * t) / (sum(p) + sum(t))."""
    _require_same_dims(truth.dims, prob_map.dims, what="probability map")
    p = np.clip(prob_map.pixels, 0.0, 1.0)
    t = truth.bits.astype(np.float64)
    total = float(p.sum() + t.sum())
    if total == 0.0:
        return 1.0
    return 2.0 * float((p * t).sum()) / total


def confusion(pred: BinaryMask, truth: BinaryMask) -> ConfusionCounts:
    _require_same_dims(truth.dims, pred.dims)
    p = pred.bits
    t = truth.bits
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    tn = int(p.size - tp - fp - fn)
    return ConfusionCounts(tp, fp, fn, tn)
