"""Per-component spectrum masks, masked-IFFT component maps and colour overlays."""

from __future__ import annotations

import logging
from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from typing import Literal

import numpy as np

from temphase.core.errors import DimensionMismatchError
from temphase.services.analysis_config import mapping_radius_scale, mapping_threshold_fraction
from temphase.services.fft_core import ComplexField, inverse_complex
from temphase.services.image_io import Image2D, RgbImage
from temphase.services.instances import Feature
from temphase.services.spot_detection import BinaryMask

logger = logging.getLogger(__name__)

MapIntensity = Literal["envelope", "magnitude"]

DEFAULT_PALETTE: tuple[tuple[float, float, float], ...] = (
    (1.0, 0.0, 0.0),
    (0.0, 1.0, 0.0),
    (0.0, 0.4, 1.0),
    (1.0, 1.0, 0.0),
    (1.0, 0.0, 1.0),
    (0.0, 1.0, 1.0),
    (1.0, 0.5, 0.0),
)
OVERLAY_OPACITY = 0.5


@dataclass(frozen=True)
class ComponentMap:
    key: tuple[str, str] | None
    bits: BinaryMask
    intensity: Image2D
    threshold_fraction: float
    threshold: float
    color_index: int = 0

    @property
    def is_empty(self) -> bool:
        return self.bits.is_empty()

    @property
    def coverage(self) -> float:
        return self.bits.count / float(self.bits.bits.size)


def hermitian_partner(x: np.ndarray, y: np.ndarray, width: int, height: int) -> tuple[np.ndarray, np.ndarray]:
    """Shifted-layout index of the conjugate bin of (x, y)."""
    return (2 * (width // 2) - x) % width, (2 * (height // 2) - y) % height


def _paint_disk(bits: np.ndarray, cx: float, cy: float, radius: float) -> None:
    height, width = bits.shape
    x0 = max(0, int(np.floor(cx - radius)))
    x1 = min(width - 1, int(np.ceil(cx + radius)))
    y0 = max(0, int(np.floor(cy - radius)))
    y1 = min(height - 1, int(np.ceil(cy + radius)))
    if x0 > x1 or y0 > y1:
        return
    yy, xx = np.mgrid[y0 : y1 + 1, x0 : x1 + 1]
    inside = (xx - cx) ** 2 + (yy - cy) ** 2 <= radius * radius
    bits[yy[inside], xx[inside]] = True


def build_feature_mask(
    features: Iterable[Feature],
    dims: tuple[int, int],
    radius_scale: float | None = None,
) -> BinaryMask:
    """Union of a disk per feature (radius = radius_scale * diameter / 2) and its conjugate pixels.

    ``dims`` is (width, height) of the shifted spectrum the centroids refer to.
    """
    scale = mapping_radius_scale() if radius_scale is None else radius_scale
    if scale < 0:
        raise ValueError(f"radius_scale must be >= 0, got {scale}")
    width, height = dims
    bits = np.zeros((height, width), dtype=bool)
    if scale == 0:
        return BinaryMask(bits)
    for feature in features:
        _paint_disk(bits, feature.centroid_x, feature.centroid_y, scale * feature.equivalent_diameter / 2.0)
    ys, xs = np.nonzero(bits)
    px, py = hermitian_partner(xs, ys, width, height)
    bits[py, px] = True
    return BinaryMask(bits)


def _one_sided_weights(width: int, height: int) -> np.ndarray:
    """Unshifted-layout weights: 2 on one half-plane, 1 on self-conjugate bins, 0 elsewhere."""
    fu = np.fft.fftfreq(width) * width
    fv = np.fft.fftfreq(height) * height
    u_idx = np.arange(width)
    v_idx = np.arange(height)
    self_u = (2 * u_idx) % width == 0
    self_v = (2 * v_idx) % height == 0
    self_conjugate = self_v[:, np.newaxis] & self_u[np.newaxis, :]
    positive = (fv[:, np.newaxis] > 0) | (self_v[:, np.newaxis] & (fu[np.newaxis, :] > 0))
    weights = np.where(positive, 2.0, 0.0)
    weights[self_conjugate] = 1.0
    return weights


def masked_ifft(field: ComplexField, mask: BinaryMask) -> np.ndarray:
    """Complex inverse of ``field`` with every coefficient outside the (shifted) mask zeroed."""
    if mask.dims != field.dims:
        raise DimensionMismatchError(field.dims, mask.dims, what="component mask")
    keep = np.fft.ifftshift(mask.bits)
    return inverse_complex(np.where(keep, field.coeffs, 0.0))


def component_map(
    field: ComplexField,
    mask: BinaryMask,
    threshold_fraction: float | None = None,
    *,
    intensity: MapIntensity = "envelope",
    key: tuple[str, str] | None = None,
    color_index: int = 0,
) -> ComponentMap:
    """Threshold the masked inverse transform at a fraction of its maximum.

    ``envelope`` takes the modulus of the one-sided reconstruction, the
    local fringe amplitude. ``magnitude`` takes |IFFT| of the masked field
    directly, which follows the fringe oscillation.
    """
    fraction = mapping_threshold_fraction() if threshold_fraction is None else threshold_fraction
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"threshold_fraction must lie in [0, 1], got {fraction}")
    if mask.dims != field.dims:
        raise DimensionMismatchError(field.dims, mask.dims, what="component mask")

    if mask.is_empty():
        logger.warning("Component %s has an empty spectrum mask; map left empty", key)
        zeros = np.zeros((field.height, field.width))
        return ComponentMap(key, BinaryMask(zeros.astype(bool)), Image2D(zeros), fraction, 0.0, color_index)

    if intensity == "envelope":
        keep = np.fft.ifftshift(mask.bits) * _one_sided_weights(field.width, field.height)
        amplitude = np.abs(inverse_complex(field.coeffs * keep))
    elif intensity == "magnitude":
        amplitude = np.abs(masked_ifft(field, mask))
    else:
        raise ValueError(f"intensity must be 'envelope' or 'magnitude', got {intensity!r}")

    peak = float(amplitude.max())
    if peak <= 0.0:
        logger.warning("Component %s reconstructs to zero everywhere; map left empty", key)
        normalized = np.zeros_like(amplitude)
    else:
        normalized = amplitude / peak
    bits = normalized >= fraction if peak > 0.0 else np.zeros_like(normalized, dtype=bool)
    return ComponentMap(key, BinaryMask(bits), Image2D(normalized), fraction, fraction * peak, color_index)


def overlay(
    base: Image2D,
    maps: Sequence[ComponentMap],
    palette: Sequence[tuple[float, float, float]] = DEFAULT_PALETTE,
) -> RgbImage:
    """Grayscale base with each map blended at 50% opacity, colours cycling through ``palette``."""
    if not palette:
        raise ValueError("palette must contain at least one colour")
    gray = np.clip(base.pixels, 0.0, 1.0)
    rgb = np.repeat(gray[:, :, np.newaxis], 3, axis=2)
    for index, component in enumerate(maps):
        if component.bits.dims != base.dims:
            raise DimensionMismatchError(base.dims, component.bits.dims, what="component map")
        color = np.asarray(palette[index % len(palette)], dtype=np.float64)
        selected = component.bits.bits
        rgb[selected] = (1.0 - OVERLAY_OPACITY) * rgb[selected] + OVERLAY_OPACITY * color
    return RgbImage(rgb)
