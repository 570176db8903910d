"""Forward/inverse 2D DFT and FFT-image preparation.

The forward transform carries the 1/(M*N) factor, so ``F(0, 0)`` is the
image mean and the inverse is an unscaled sum.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from functools import lru_cache

import cv2
import numpy as np

from temphase.services.analysis_config import enhance_gain, enhance_gamma
from temphase.services.image_io import Image2D

logger = logging.getLogger(__name__)

IMAG_RESIDUE_WARN_RATIO = 1e-4


@dataclass(frozen=True)
class ComplexField:
    """Unshifted spectrum, shape (N, M), DC at index (0, 0)."""

    coeffs: np.ndarray
    pixel_size: float | None = None

    def __post_init__(self) -> None:
        coeffs = np.asarray(self.coeffs, dtype=np.complex128)
        if coeffs is self.coeffs and coeffs.flags.writeable:
            coeffs = coeffs.copy()
        if coeffs.ndim != 2:
            raise ValueError(f"ComplexField needs a 2D array, got shape {coeffs.shape}")
        coeffs.setflags(write=False)
        object.__setattr__(self, "coeffs", coeffs)

    @property
    def width(self) -> int:
        return int(self.coeffs.shape[1])

    @property
    def height(self) -> int:
        return int(self.coeffs.shape[0])

    @property
    def dims(self) -> tuple[int, int]:
        return self.width, self.height

    def shifted(self) -> np.ndarray:
        """Spectrum with DC moved to (W // 2, H // 2)."""
        return np.fft.fftshift(self.coeffs)


@dataclass(frozen=True)
class EnhanceParams:
    gamma: float = 2.0
    gain: float = 1.8

    def __post_init__(self) -> None:
        if self.gamma < 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        if not self.gain > 0:
            raise ValueError(f"gain must be > 0, got {self.gain}")

    @classmethod
    def from_env(cls) -> EnhanceParams:
        return cls(gamma=enhance_gamma(), gain=enhance_gain())


def forward_fft(img: Image2D) -> ComplexField:
    return ComplexField(np.fft.fft2(img.pixels, norm="forward"), pixel_size=img.pixel_size)


def inverse_complex(coeffs: np.ndarray) -> np.ndarray:
    """Unscaled inverse sum of unshifted coefficients."""
    return np.fft.ifft2(coeffs, norm="forward")


def inverse_fft(field: ComplexField) -> Image2D:
    spatial = inverse_complex(field.coeffs)
    real = spatial.real
    max_real = float(np.max(np.abs(real))) if real.size else 0.0
    max_imag = float(np.max(np.abs(spatial.imag))) if real.size else 0.0
    if max_imag > IMAG_RESIDUE_WARN_RATIO * max_real and max_imag > 0.0:
        logger.warning(
            "Inverse FFT imaginary residue %.3g exceeds %.0e of real maximum %.3g",
            max_imag,
            IMAG_RESIDUE_WARN_RATIO,
            max_real,
        )
    return Image2D(real, pixel_size=field.pixel_size)


def normalize_unit(values: np.ndarray) -> np.ndarray:
    """Min-max scale to [0, 1]; constant input maps to zeros."""
    lo = float(np.min(values))
    hi = float(np.max(values))
    if hi - lo <= 0.0:
        return np.zeros_like(values, dtype=np.float64)
    return (values - lo) / (hi - lo)


def linear_magnitude(field: ComplexField) -> Image2D:
    """|F| in shifted layout, without log scaling or normalization."""
    return Image2D(np.abs(field.shifted()))


def log_magnitude(field: ComplexField) -> Image2D:
    return Image2D(normalize_unit(np.log1p(np.abs(field.shifted()))))


def center_crop(img: Image2D, target_w: int, target_h: int) -> Image2D:
    """Window of target size centred on the integer bin (W // 2, H // 2)."""
    if target_w > img.width or target_h > img.height:
        raise ValueError(f"Crop {target_w}x{target_h} exceeds source {img.width}x{img.height}")
    if target_w < 1 or target_h < 1:
        raise ValueError(f"Crop size must be positive, got {target_w}x{target_h}")
    x0 = img.width // 2 - target_w // 2
    y0 = img.height // 2 - target_h // 2
    return img.with_pixels(np.ascontiguousarray(img.pixels[y0 : y0 + target_h, x0 : x0 + target_w]))


def resize(img: Image2D, target_w: int, target_h: int) -> Image2D:
    """Area averaging when shrinking, so every source bin contributes; bilinear when enlarging."""
    if target_w < 2 or target_h < 2:
        raise ValueError(f"Resize target must be at least 2x2, got {target_w}x{target_h}")
    if (target_w, target_h) == img.dims:
        return img
    shrinking = target_w <= img.width and target_h <= img.height
    interpolation = cv2.INTER_AREA if shrinking else cv2.INTER_LINEAR
    resized = cv2.resize(np.ascontiguousarray(img.pixels), (target_w, target_h), interpolation=interpolation)
    lo, hi = float(img.pixels.min()), float(img.pixels.max())
    return img.with_pixels(np.clip(resized, lo, hi))


def gaussian_blur(img: Image2D, sigma: float) -> Image2D:
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return img
    radius = int(math.ceil(3.0 * sigma))
    ksize = 2 * radius + 1
    blurred = cv2.GaussianBlur(
        np.ascontiguousarray(img.pixels),
        (ksize, ksize),
        sigmaX=sigma,
        sigmaY=sigma,
        borderType=cv2.BORDER_REFLECT,
    )
    return img.with_pixels(blurred)


def center_convention(width: int, height: int) -> tuple[float, float]:
    """Geometric centre used for distances: ((W - 1) / 2, (H - 1) / 2)."""
    return (width - 1) / 2.0, (height - 1) / 2.0


@lru_cache(maxsize=8)
def factor_map(width: int, height: int, gamma: float) -> np.ndarray:
    """exp(gamma * (r / R - 1)): 1 at the corners, exp(-gamma) at the centre."""
    cx, cy = center_convention(width, height)
    yy, xx = np.mgrid[0:height, 0:width]
    r = np.hypot(xx - cx, yy - cy)
    r_max = math.hypot(cx, cy)
    if r_max == 0.0:
        factors = np.ones((height, width))
    else:
        factors = np.exp(gamma * (r / r_max - 1.0))
    factors.setflags(write=False)
    return factors


def enhance(img: Image2D, params: EnhanceParams | None = None) -> Image2D:
    params = params or EnhanceParams()
    factors = factor_map(img.width, img.height, float(params.gamma))
    return img.with_pixels(np.clip(params.gain * img.pixels * factors, 0.0, 1.0))
