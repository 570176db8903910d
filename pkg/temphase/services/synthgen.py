"""Synthetic lattice-fringe images, FFT spot fixtures, stacks and training-set augmentation."""

from __future__ import annotations

import csv
import logging
import math
import multiprocessing
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import Literal

import cv2
import numpy as np
from skimage.transform import AffineTransform

from temphase.core.runtime_paths import ensure_output_dir
from temphase.core.settings import DEFAULT_FRAME_PERIOD_S
from temphase.services.fft_core import center_convention, gaussian_blur, resize
from temphase.services.image_io import Image2D, ImageStack, write_image
from temphase.services.phase_matching import NM_TO_ANGSTROM
from temphase.services.spot_detection import BinaryMask, crop_half, write_mask

logger = logging.getLogger(__name__)

MANIFEST_COLUMNS = (
    "index",
    "image",
    "mask",
    "source",
    "seed",
    "rotation_deg",
    "shift_px",
    "shear_deg",
    "zoom",
)
DEFAULT_TRUTH_RADIUS_SIGMAS = 3.0


# --- lattice fringes ----------------------------------------------------------


@dataclass(frozen=True)
class FringeSpec:
    d_spacing: float
    orientation: float = 0.0
    amplitude: float = 1.0
    phase: float = 0.0
    region: Literal["full", "disk"] = "full"
    # disk region in image px; defaults to the image centre and a quarter of the short side
    region_center: tuple[float, float] | None = None
    region_radius: float | None = None

    def __post_init__(self) -> None:
        if not self.d_spacing > 0:
            raise ValueError(f"d_spacing must be positive, got {self.d_spacing}")
        if not self.amplitude > 0:
            raise ValueError(f"amplitude must be positive, got {self.amplitude}")
        if self.region not in ("full", "disk"):
            raise ValueError(f"region must be 'full' or 'disk', got {self.region!r}")


@dataclass(frozen=True)
class FringeTruth:
    d_requested: float
    d_realized: float
    radius_px: float
    spots: tuple[tuple[int, int], tuple[int, int]]


def _wave_bins(spec: FringeSpec, width: int, height: int, pixel_size: float, snap: bool) -> tuple[float, float]:
    period = spec.d_spacing / (pixel_size * NM_TO_ANGSTROM)
    if not 2.0 < period < min(width, height) / 2.0:
        raise ValueError(
            f"d-spacing {spec.d_spacing} A is a {period:.3f} px period; it must lie in (2, {min(width, height) / 2})"
        )
    u = math.cos(spec.orientation) * width / period
    v = math.sin(spec.orientation) * height / period
    if snap:
        u, v = float(round(u)), float(round(v))
        if u == 0.0 and v == 0.0:
            raise ValueError(f"d-spacing {spec.d_spacing} A snaps onto the DC bin")
    return u, v


def _region_weight(spec: FringeSpec, width: int, height: int) -> np.ndarray | float:
    if spec.region == "full":
        return 1.0
    cx, cy = spec.region_center or center_convention(width, height)
    radius = spec.region_radius if spec.region_radius is not None else min(width, height) / 4.0
    yy, xx = np.mgrid[0:height, 0:width]
    return ((xx - cx) ** 2 + (yy - cy) ** 2 <= radius * radius).astype(np.float64)


def synth_lattice(
    specs: Sequence[FringeSpec],
    dims: tuple[int, int],
    pixel_size: float,
    noise_sigma: float = 0.0,
    *,
    seed: int | None = None,
    snap: bool = True,
) -> tuple[Image2D, list[FringeTruth]]:
    """Sum of cosine fringes plus Gaussian noise, with the expected FFT spot pair of each fringe.

    With ``snap`` the wave vector is moved to the nearest FFT bin so the
    fringe is exactly periodic; the truth records the realized spacing.
    """
    if not pixel_size > 0:
        raise ValueError(f"pixel_size must be positive, got {pixel_size}")
    if noise_sigma < 0:
        raise ValueError(f"noise_sigma must be >= 0, got {noise_sigma}")
    width, height = dims
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    pixels = np.zeros((height, width))
    truth: list[FringeTruth] = []
    for spec in specs:
        u, v = _wave_bins(spec, width, height, pixel_size, snap)
        kx, ky = u / width, v / height
        pixels += spec.amplitude * np.cos(2.0 * np.pi * (kx * xx + ky * yy) + spec.phase) * _region_weight(
            spec, width, height
        )
        realized_period = 1.0 / math.hypot(kx, ky)
        cx, cy = width // 2, height // 2
        truth.append(
            FringeTruth(
                d_requested=spec.d_spacing,
                d_realized=realized_period * pixel_size * NM_TO_ANGSTROM,
                radius_px=math.hypot(u, v),
                spots=((int(round(cx + u)), int(round(cy + v))), (int(round(cx - u)), int(round(cy - v)))),
            )
        )
    if noise_sigma > 0:
        pixels += np.random.default_rng(seed).normal(0.0, noise_sigma, size=pixels.shape)
    return Image2D(pixels, pixel_size=pixel_size), truth


# --- FFT-domain spot fixtures ---------------------------------------------------


@dataclass(frozen=True)
class SpotSpec:
    x: float
    y: float
    amplitude: float = 0.4
    sigma: float = 2.0


def _disk(width: int, height: int, cx: float, cy: float, radius: float) -> np.ndarray:
    yy, xx = np.mgrid[0:height, 0:width]
    return (xx - cx) ** 2 + (yy - cy) ** 2 <= radius * radius


def synth_fft_spots(
    spots: Sequence[SpotSpec],
    dims: tuple[int, int],
    background_noise: float = 0.05,
    *,
    seed: int | None = None,
    background_level: float = 0.3,
    dc_exclusion_radius: float = 20.0,
    truth_radius_sigmas: float = DEFAULT_TRUTH_RADIUS_SIGMAS,
) -> tuple[Image2D, BinaryMask]:
    """FFT-image-like fixture: Gaussian spots mirrored through the centre on a decaying noisy background.

    Spot SNR is amplitude / background_noise. The truth mask holds a disk of
    radius ``truth_radius_sigmas * sigma`` per spot and per reflection.
    """
    width, height = dims
    cx, cy = center_convention(width, height)
    yy, xx = np.mgrid[0:height, 0:width]
    r = np.hypot(xx - cx, yy - cy)
    r_max = math.hypot(cx, cy)
    pixels = background_level * np.exp(-3.0 * r / r_max)
    if background_noise > 0:
        pixels = pixels + np.random.default_rng(seed).normal(0.0, background_noise, size=pixels.shape)

    bumps = np.zeros((height, width))
    truth = np.zeros((height, width), dtype=bool)
    for spot in spots:
        if math.hypot(spot.x - cx, spot.y - cy) <= dc_exclusion_radius:
            raise ValueError(f"Spot at ({spot.x}, {spot.y}) lies inside the DC exclusion radius {dc_exclusion_radius}")
        bumps += spot.amplitude * np.exp(-((xx - spot.x) ** 2 + (yy - spot.y) ** 2) / (2.0 * spot.sigma**2))
        truth |= _disk(width, height, spot.x, spot.y, truth_radius_sigmas * spot.sigma)
    # reflection through ((W - 1) / 2, (H - 1) / 2)
    bumps = bumps + bumps[::-1, ::-1]
    truth = truth | truth[::-1, ::-1]
    return Image2D(np.clip(pixels + bumps, 0.0, 1.0)), BinaryMask(truth)


# --- stacks -----------------------------------------------------------------------


@dataclass(frozen=True)
class StackFringe:
    fringe: FringeSpec
    onset_frame: int = 1
    # amplitude at frame k >= onset: amplitude * (1 + growth * (k - onset))
    growth: float = 0.0

    def amplitude_at(self, k: int) -> float:
        if k < self.onset_frame:
            return 0.0
        return self.fringe.amplitude * max(0.0, 1.0 + self.growth * (k - self.onset_frame))


def synth_stack(
    fringes: Sequence[StackFringe],
    frames: int,
    size: int,
    pixel_size: float,
    noise_sigma: float = 0.0,
    *,
    seed: int | None = None,
    frame_period_s: float = DEFAULT_FRAME_PERIOD_S,
) -> tuple[ImageStack, list[FringeTruth]]:
    """Stack whose fringes switch on at their onset frame and scale linearly with frame index."""
    if frames < 1:
        raise ValueError(f"frames must be >= 1, got {frames}")
    seeds = np.random.SeedSequence(seed).spawn(frames)
    images = []
    truth: list[FringeTruth] = []
    for k in range(1, frames + 1):
        active = []
        for item in fringes:
            amplitude = item.amplitude_at(k)
            if amplitude > 0:
                spec = item.fringe
                active.append(
                    FringeSpec(
                        spec.d_spacing, spec.orientation, amplitude, spec.phase,
                        spec.region, spec.region_center, spec.region_radius,
                    )
                )
        frame_seed = int(seeds[k - 1].generate_state(1)[0])
        image, _ = synth_lattice(active, (size, size), pixel_size, noise_sigma, seed=frame_seed)
        images.append(image)
    if fringes:
        _, truth = synth_lattice([item.fringe for item in fringes], (size, size), pixel_size)
    return ImageStack(tuple(images), frame_period_s=frame_period_s, pixel_size=pixel_size), truth


# --- augmentation -------------------------------------------------------------------


@dataclass(frozen=True)
class AugmentParams:
    rotation_deg: float = 0.2
    shift_fraction: float = 0.05
    shear_deg: float = 0.05
    zoom_fraction: float = 0.05
    seed: int | None = None

    def __post_init__(self) -> None:
        for name in ("rotation_deg", "shift_fraction", "shear_deg", "zoom_fraction"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative, got {getattr(self, name)}")

    @classmethod
    def identity(cls, seed: int | None = None) -> AugmentParams:
        return cls(0.0, 0.0, 0.0, 0.0, seed)


@dataclass(frozen=True)
class AffineDraw:
    rotation_deg: float = 0.0
    shift_px: float = 0.0
    shear_deg: float = 0.0
    zoom: float = 1.0

    @property
    def is_identity(self) -> bool:
        return self.rotation_deg == 0.0 and self.shift_px == 0.0 and self.shear_deg == 0.0 and self.zoom == 1.0


def draw_affine(params: AugmentParams, width: int, rng: np.random.Generator) -> AffineDraw:
    """One random draw; translation is horizontal only."""
    return AffineDraw(
        rotation_deg=float(rng.uniform(-params.rotation_deg, params.rotation_deg)),
        shift_px=float(rng.uniform(-params.shift_fraction, params.shift_fraction) * width),
        shear_deg=float(rng.uniform(-params.shear_deg, params.shear_deg)),
        zoom=float(1.0 + rng.uniform(-params.zoom_fraction, params.zoom_fraction)),
    )


def affine_matrix(draw: AffineDraw, width: int, height: int) -> np.ndarray:
    """3x3 forward map (source px -> destination px) about the image centre."""
    cx, cy = center_convention(width, height)
    to_origin = AffineTransform(translation=(-cx, -cy))
    body = AffineTransform(
        scale=(draw.zoom, draw.zoom),
        rotation=math.radians(draw.rotation_deg),
        shear=math.radians(draw.shear_deg),
    )
    back = AffineTransform(translation=(cx + draw.shift_px, cy))
    return back.params @ body.params @ to_origin.params


def apply_affine(img: Image2D, draw: AffineDraw) -> Image2D:
    if draw.is_identity:
        return img
    matrix = affine_matrix(draw, img.width, img.height)[:2]
    warped = cv2.warpAffine(
        np.ascontiguousarray(img.pixels),
        matrix,
        (img.width, img.height),
        flags=cv2.INTER_LINEAR,
        borderMode=cv2.BORDER_REFLECT,
    )
    return img.with_pixels(warped)


def augment(img: Image2D, params: AugmentParams) -> Image2D:
    """One random affine draw seeded by ``params.seed``, bilinear with reflection padding."""
    return apply_affine(img, draw_affine(params, img.width, np.random.default_rng(params.seed)))


# --- training-set export -------------------------------------------------------------


@dataclass(frozen=True)
class _ExportJob:
    index: int
    source_index: int
    image: Image2D
    mask: BinaryMask
    seed: int
    params: AugmentParams
    target_size: int
    blur_sigma: float
    out_dir: Path


def _export_one(job: _ExportJob) -> list[str]:
    draw = draw_affine(job.params, job.image.width, np.random.default_rng(job.seed))
    image = apply_affine(gaussian_blur(job.image, job.blur_sigma), draw)
    image = resize(image, job.target_size, job.target_size)
    mask_img = apply_affine(Image2D(job.mask.bits.astype(np.float64)), draw)
    mask_img = resize(mask_img, job.target_size, job.target_size)
    mask = BinaryMask(mask_img.pixels >= 0.5)

    image_name = f"image_{job.index:05d}.pgm"
    mask_name = f"mask_{job.index:05d}.pgm"
    write_image(crop_half(image), job.out_dir / image_name)
    write_mask(crop_half(mask), job.out_dir / mask_name)
    return [
        str(job.index),
        image_name,
        mask_name,
        str(job.source_index),
        str(job.seed),
        f"{draw.rotation_deg:.6f}",
        f"{draw.shift_px:.4f}",
        f"{draw.shear_deg:.6f}",
        f"{draw.zoom:.6f}",
    ]


def derive_seed(base_seed: int | None, index: int) -> int:
    entropy = [index] if base_seed is None else [base_seed, index]
    return int(np.random.SeedSequence(entropy).generate_state(1)[0])


def export_training_set(
    sources: Sequence[tuple[Image2D, BinaryMask]],
    count: int,
    out_dir: str | Path,
    params: AugmentParams,
    *,
    target_size: int = 1024,
    blur_sigma: float = 3.0,
    workers: int = 1,
) -> Path:
    """Write ``count`` augmented half-image/mask pairs plus manifest.csv; returns the manifest path."""
    if not sources:
        raise ValueError("export_training_set needs at least one source image")
    if count < 0:
        raise ValueError(f"count must be >= 0, got {count}")
    if target_size % 2:
        raise ValueError(f"target_size must be even for the half crop, got {target_size}")
    target = ensure_output_dir(out_dir)
    jobs = [
        _ExportJob(
            index=i,
            source_index=i % len(sources),
            image=sources[i % len(sources)][0],
            mask=sources[i % len(sources)][1],
            seed=derive_seed(params.seed, i),
            params=params,
            target_size=target_size,
            blur_sigma=blur_sigma,
            out_dir=target,
        )
        for i in range(count)
    ]
    if workers > 1 and len(jobs) > 1:
        with multiprocessing.Pool(workers) as pool:
            rows = pool.map(_export_one, jobs)
    else:
        rows = [_export_one(job) for job in jobs]

    manifest = target / "manifest.csv"
    with manifest.open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(MANIFEST_COLUMNS)
        writer.writerows(rows)
    logger.info("Exported %d training pairs to %s", len(rows), target)
    return manifest
