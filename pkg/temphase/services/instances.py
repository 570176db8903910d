"""Watershed instance segmentation of FFT feature masks and per-feature statistics."""

from __future__ import annotations

import logging
import math
from collections.abc import Iterator
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np
from scipy import ndimage
from skimage.segmentation import watershed

from temphase.core.errors import DimensionMismatchError
from temphase.services.analysis_config import (
    watershed_dilate_iters,
    watershed_fg_fraction,
    watershed_open_iters,
)
from temphase.services.image_io import Image2D, write_netpbm_bytes
from temphase.services.spot_detection import BinaryMask

logger = logging.getLogger(__name__)

_CROSS_3X3 = cv2.getStructuringElement(cv2.MORPH_CROSS, (3, 3))
_SQUARE_3X3 = np.ones((3, 3), dtype=np.uint8)


@dataclass(frozen=True)
class LabelMap:
    labels: np.ndarray
    count: int

    def __post_init__(self) -> None:
        labels = np.asarray(self.labels, dtype=np.int32)
        if labels is self.labels and labels.flags.writeable:
            labels = labels.copy()
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)

    @property
    def width(self) -> int:
        return int(self.labels.shape[1])

    @property
    def height(self) -> int:
        return int(self.labels.shape[0])

    @property
    def dims(self) -> tuple[int, int]:
        return self.width, self.height


@dataclass(frozen=True)
class Feature:
    label: int
    centroid_x: float
    centroid_y: float
    area: int
    equivalent_diameter: float
    pixel_value_count: int
    mean_intensity: float


@dataclass(frozen=True)
class FeatureSet:
    features: tuple[Feature, ...] = field(default_factory=tuple)

    def __len__(self) -> int:
        return len(self.features)

    def __iter__(self) -> Iterator[Feature]:
        return iter(self.features)

    def by_label(self) -> dict[int, Feature]:
        return {feature.label: feature for feature in self.features}


def equivalent_diameter(area: float) -> float:
    return 2.0 * math.sqrt(area / math.pi)


def distance_transform(mask: BinaryMask) -> Image2D:
    """Exact Euclidean distance to the nearest background pixel; outside the frame counts as background."""
    padded = np.pad(mask.bits, 1, mode="constant", constant_values=False)
    distances = ndimage.distance_transform_edt(padded)[1:-1, 1:-1]
    return Image2D(np.ascontiguousarray(distances))


def _component_relative_foreground(distances: np.ndarray, components: np.ndarray, count: int, fraction: float) -> np.ndarray:
    """Pixels whose distance is >= fraction of their own component's maximum."""
    if count <= 1:
        return np.zeros_like(distances, dtype=bool)
    maxima = ndimage.maximum(distances, labels=components, index=np.arange(1, count))
    per_pixel_max = np.concatenate(([np.inf], np.asarray(maxima, dtype=np.float64)))[components]
    return (components > 0) & (distances > 0) & (distances >= fraction * per_pixel_max)


def watershed_instances(
    mask: BinaryMask,
    fg_fraction: float | None = None,
    open_iters: int | None = None,
    dilate_iters: int | None = None,
) -> LabelMap:
    """Marker-controlled watershed on the negative distance transform.

    Opening denoises, sure foreground is taken per connected component at
    ``fg_fraction`` of its maximum distance, and flooding assigns every
    foreground pixel of ``mask`` to exactly one marker.
    """
    fg_fraction = watershed_fg_fraction() if fg_fraction is None else fg_fraction
    open_iters = watershed_open_iters() if open_iters is None else open_iters
    dilate_iters = watershed_dilate_iters() if dilate_iters is None else dilate_iters

    foreground = mask.bits
    if not foreground.any():
        return LabelMap(np.zeros(foreground.shape, dtype=np.int32), 0)

    raw = foreground.astype(np.uint8)
    opened = cv2.morphologyEx(raw, cv2.MORPH_OPEN, _CROSS_3X3, iterations=open_iters) if open_iters else raw
    sure_background = cv2.dilate(opened, _SQUARE_3X3, iterations=dilate_iters) == 0 if dilate_iters else opened == 0

    opened_distance = distance_transform(BinaryMask(opened.astype(bool))).pixels
    opened_count, opened_components = cv2.connectedComponents(opened, connectivity=8, ltype=cv2.CV_32S)
    sure_foreground = _component_relative_foreground(opened_distance, opened_components, opened_count, fg_fraction)

    full_distance = distance_transform(mask).pixels
    full_count, full_components = cv2.connectedComponents(raw, connectivity=8, ltype=cv2.CV_32S)
    covered = np.unique(full_components[sure_foreground])
    orphans = np.setdiff1d(np.arange(1, full_count), covered)
    if orphans.size:
        # components erased by opening still receive a marker at their own peak
        orphan_pixels = np.isin(full_components, orphans)
        orphan_seeds = _component_relative_foreground(
            np.where(orphan_pixels, full_distance, 0.0), np.where(orphan_pixels, full_components, 0), full_count, 1.0
        )
        sure_foreground = sure_foreground | orphan_seeds
        logger.debug("watershed_instances: %d components re-seeded after opening", orphans.size)

    marker_count, markers = cv2.connectedComponents(sure_foreground.astype(np.uint8), connectivity=8, ltype=cv2.CV_32S)
    flood_domain = foreground & (~sure_background | np.isin(full_components, orphans))
    labels = watershed(-full_distance, markers=markers, mask=flood_domain, connectivity=2)
    if np.any(foreground & (labels == 0)):
        # spurs removed by opening lie in the sure background; they join the basin they touch
        labels = watershed(-full_distance, markers=labels, mask=foreground, connectivity=2)
    labels = np.where(foreground, labels, 0).astype(np.int32)
    return LabelMap(labels, marker_count - 1)


def feature_stats(labels: LabelMap, enhanced_fft: Image2D, linear_magnitude: Image2D) -> FeatureSet:
    """Per-label centroid, area, equivalent diameter, 8-bit pixel value count and mean magnitude."""
    for image, what in ((enhanced_fft, "enhanced FFT image"), (linear_magnitude, "linear magnitude image")):
        if image.dims != labels.dims:
            raise DimensionMismatchError(labels.dims, image.dims, what=what)
    if labels.count == 0:
        return FeatureSet()

    flat = labels.labels.ravel()
    bins = labels.count + 1
    yy, xx = np.indices(labels.labels.shape)
    area = np.bincount(flat, minlength=bins)
    sum_x = np.bincount(flat, weights=xx.ravel(), minlength=bins)
    sum_y = np.bincount(flat, weights=yy.ravel(), minlength=bins)
    quantized = np.rint(np.clip(enhanced_fft.pixels, 0.0, 1.0) * 255.0).ravel()
    value_count = np.bincount(flat, weights=quantized, minlength=bins)
    magnitude_sum = np.bincount(flat, weights=linear_magnitude.pixels.ravel(), minlength=bins)

    features = [
        Feature(
            label=label,
            centroid_x=float(sum_x[label] / area[label]),
            centroid_y=float(sum_y[label] / area[label]),
            area=int(area[label]),
            equivalent_diameter=equivalent_diameter(float(area[label])),
            pixel_value_count=int(round(value_count[label])),
            mean_intensity=float(magnitude_sum[label] / area[label]),
        )
        for label in range(1, bins)
        if area[label] > 0
    ]
    features.sort(key=lambda item: (-item.area, item.label))
    return FeatureSet(tuple(features))


def write_label_dump(labels: LabelMap, path: str | Path) -> None:
    """Debug dump: P5 with labels modulo 255 (background stays 0)."""
    values = labels.labels
    dumped = np.where(values > 0, (values - 1) % 255 + 1, 0).astype(np.uint8)
    write_netpbm_bytes(path, dumped)


def line_scan(image: Image2D, start: tuple[float, float], end: tuple[float, float], samples: int | None = None) -> np.ndarray:
    """Bilinear intensity profile from ``start`` to ``end`` (x, y), endpoints included."""
    (x0, y0), (x1, y1) = start, end
    if samples is None:
        samples = int(math.ceil(math.hypot(x1 - x0, y1 - y0))) + 1
    if samples < 2:
        raise ValueError(f"line_scan needs at least 2 samples, got {samples}")
    xs = np.linspace(x0, x1, samples)
    ys = np.linspace(y0, y1, samples)
    return ndimage.map_coordinates(image.pixels, [ys, xs], order=1, mode="nearest")
