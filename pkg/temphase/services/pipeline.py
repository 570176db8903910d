"""Single-image chain: FFT image, feature mask, instances, matching, component maps."""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Literal

import numpy as np

from temphase.core.runtime_paths import ensure_output_dir
from temphase.services import analysis_config
from temphase.services.component_mapping import (
    ComponentMap,
    MapIntensity,
    build_feature_mask,
    component_map,
    overlay,
)
from temphase.services.fft_core import (
    ComplexField,
    EnhanceParams,
    center_crop,
    enhance,
    forward_fft,
    linear_magnitude,
    log_magnitude,
    normalize_unit,
    resize,
)
from temphase.services.image_io import DSpacingDB, Image2D, RgbImage, write_image
from temphase.services.instances import FeatureSet, LabelMap, feature_stats, watershed_instances, write_label_dump
from temphase.services.phase_matching import (
    DEFAULT_DC_EXCLUSION_BANDS,
    DiffractionProfile,
    MatchResult,
    RadialPeak,
    ScaleChain,
    ScaleMode,
    find_peaks,
    match_components,
    radial_profile,
)
from temphase.services.reports import component_column_name, emit_report
from temphase.services.spot_detection import (
    BinaryMask,
    DetectParams,
    detect_spots,
    import_mask,
    import_probability_map,
    reconstruct_full,
    threshold_mask,
    write_mask,
)

logger = logging.getLogger(__name__)

DEFAULT_FINAL_SIZE = 1024
IntensityMetric = Literal["linear", "pixel-count"]


@dataclass(frozen=True)
class PipelineConfig:
    pixel_size: float
    scale_mode: ScaleMode = ScaleMode.GENERALIZED
    crop_size: int | None = None
    final_size: int | None = None
    enhance: EnhanceParams = field(default_factory=EnhanceParams)
    detect: DetectParams = field(default_factory=DetectParams)
    mask_path: Path | None = None
    prob_map_path: Path | None = None
    half: bool = False
    prob_threshold: float = analysis_config.DEFAULT_PROB_THRESHOLD
    fg_fraction: float = 0.5
    open_iters: int = 2
    dilate_iters: int = 3
    rel_tolerance: float = analysis_config.DEFAULT_MATCH_TOLERANCE
    map_threshold: float = 0.35
    map_radius_scale: float = 1.0
    map_intensity: MapIntensity = "envelope"
    intensity_metric: IntensityMetric = "linear"
    peak_prominence: float = 0.05
    peak_dc_bands: int = DEFAULT_DC_EXCLUSION_BANDS

    def __post_init__(self) -> None:
        if not self.pixel_size > 0:
            raise ValueError(f"pixel_size must be positive, got {self.pixel_size}")
        object.__setattr__(self, "scale_mode", ScaleMode(self.scale_mode))
        if self.mask_path is not None and self.prob_map_path is not None:
            raise ValueError("mask_path and prob_map_path are mutually exclusive")
        if self.intensity_metric not in ("linear", "pixel-count"):
            raise ValueError(f"intensity_metric must be 'linear' or 'pixel-count', got {self.intensity_metric!r}")

    @classmethod
    def from_env(cls, pixel_size: float, **overrides: Any) -> PipelineConfig:
        """Defaults from TEMPHASE_* variables, then explicit overrides."""
        values: dict[str, Any] = {
            "scale_mode": analysis_config.scale_mode_default(),
            "enhance": EnhanceParams.from_env(),
            "detect": DetectParams.from_env(),
            "half": analysis_config.half_mask_default(),
            "prob_threshold": analysis_config.prob_threshold(),
            "fg_fraction": analysis_config.watershed_fg_fraction(),
            "open_iters": analysis_config.watershed_open_iters(),
            "dilate_iters": analysis_config.watershed_dilate_iters(),
            "rel_tolerance": analysis_config.match_rel_tolerance(),
            "map_threshold": analysis_config.mapping_threshold_fraction(),
            "map_radius_scale": analysis_config.mapping_radius_scale(),
            "peak_prominence": analysis_config.peak_min_prominence_fraction(),
        }
        values.update({key: value for key, value in overrides.items() if value is not None})
        return cls(pixel_size=pixel_size, **values)

    def as_report(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class FftProduct:
    field: ComplexField
    log_image: Image2D
    linear: Image2D
    enhanced: Image2D
    chain: ScaleChain


@dataclass(frozen=True)
class AnalysisResult:
    source: Image2D
    product: FftProduct
    mask: BinaryMask
    mask_source: str
    labels: LabelMap
    features: FeatureSet
    matches: MatchResult
    profile: DiffractionProfile
    segmented_profile: DiffractionProfile
    peaks: tuple[RadialPeak, ...]
    component_maps: tuple[ComponentMap, ...]
    component_intensity: dict[tuple[str, str], float]

    @property
    def chain(self) -> ScaleChain:
        return self.product.chain

    def overlay_image(self) -> RgbImage:
        return overlay(self.source.with_pixels(normalize_unit(self.source.pixels)), self.component_maps)


def square_crop(image: Image2D) -> Image2D:
    """Centre-crop to the largest square; square input is returned unchanged."""
    if image.width == image.height:
        return image
    side = min(image.width, image.height)
    logger.warning("Non-square image %dx%d cropped to %dx%d", image.width, image.height, side, side)
    return center_crop(image, side, side)


def scale_chain_for(size: int, cfg: PipelineConfig) -> ScaleChain:
    crop = cfg.crop_size or size
    final = cfg.final_size or min(crop, DEFAULT_FINAL_SIZE)
    return ScaleChain(size, cfg.pixel_size, crop, final, cfg.scale_mode)


def prepare_fft(image: Image2D, cfg: PipelineConfig) -> FftProduct:
    """Square crop, forward FFT, log magnitude, centre crop, resize and enhance."""
    square = square_crop(image)
    chain = scale_chain_for(square.width, cfg)
    spectrum = forward_fft(square)

    def _to_fft_image(full: Image2D) -> Image2D:
        cropped = center_crop(full, chain.crop_size, chain.crop_size)
        return resize(cropped, chain.final_size, chain.final_size)

    log_image = _to_fft_image(log_magnitude(spectrum))
    linear = _to_fft_image(linear_magnitude(spectrum))
    enhanced = enhance(log_image, cfg.enhance)
    return FftProduct(spectrum, log_image, linear, enhanced, chain)


def acquire_mask(product: FftProduct, cfg: PipelineConfig) -> tuple[BinaryMask, str]:
    """Feature mask from an imported mask, a probability map or the classical detector."""
    size = product.chain.final_size
    expected_h = size // 2 if cfg.half else size
    if cfg.mask_path is not None:
        mask = import_mask(cfg.mask_path, size, expected_h)
        source = "mask"
    elif cfg.prob_map_path is not None:
        mask = threshold_mask(import_probability_map(cfg.prob_map_path, size, expected_h), cfg.prob_threshold)
        source = "probability-map"
    else:
        return detect_spots(product.enhanced, cfg.detect), "detector"
    if cfg.half:
        mask = reconstruct_full(mask)
        if mask.dims != (size, size):
            raise ValueError(f"Half-mode needs an even FFT image size, got {size}")
    return mask, source


def _spectrum_features(features, chain: ScaleChain):
    scale = chain.resize_factor
    for feature in features:
        x, y = chain.to_spectrum(feature.centroid_x, feature.centroid_y)
        yield dataclasses.replace(
            feature, centroid_x=x, centroid_y=y, equivalent_diameter=feature.equivalent_diameter * scale
        )


def analyze_image(image: Image2D, cfg: PipelineConfig, db: DSpacingDB) -> AnalysisResult:
    product = prepare_fft(image, cfg)
    mask, mask_source = acquire_mask(product, cfg)
    labels = watershed_instances(mask, cfg.fg_fraction, cfg.open_iters, cfg.dilate_iters)
    features = feature_stats(labels, product.enhanced, product.linear)
    matches = match_components(features, product.chain, db, cfg.rel_tolerance)

    profile = radial_profile(product.enhanced, product.chain)
    segmented_profile = radial_profile(product.enhanced, product.chain, mask)
    peaks = tuple(find_peaks(profile, cfg.peak_prominence, cfg.peak_dc_bands))

    by_label = features.by_label()
    spectrum_magnitude = np.abs(product.field.shifted())
    maps: list[ComponentMap] = []
    intensity: dict[tuple[str, str], float] = {}
    for index, match in enumerate(matches):
        members = [by_label[label] for label in match.feature_ids]
        spectrum_mask = build_feature_mask(
            _spectrum_features(members, product.chain), product.field.dims, cfg.map_radius_scale
        )
        if cfg.intensity_metric == "linear":
            intensity[match.key] = float(spectrum_magnitude[spectrum_mask.bits].sum())
        else:
            intensity[match.key] = float(sum(member.pixel_value_count for member in members))
        maps.append(
            component_map(
                product.field,
                spectrum_mask,
                cfg.map_threshold,
                intensity=cfg.map_intensity,
                key=match.key,
                color_index=index,
            )
        )

    logger.info(
        "Analysis: %d features (%s), %d components, %d unassigned",
        len(features),
        mask_source,
        len(matches),
        len(matches.unassigned),
    )
    return AnalysisResult(
        source=square_crop(image),
        product=product,
        mask=mask,
        mask_source=mask_source,
        labels=labels,
        features=features,
        matches=matches,
        profile=profile,
        segmented_profile=segmented_profile,
        peaks=peaks,
        component_maps=tuple(maps),
        component_intensity=intensity,
    )


def map_file_name(key: tuple[str, str]) -> str:
    name, hkl = key
    safe = "".join(ch if ch.isalnum() or ch in "-_" else "_" for ch in f"{name}_{hkl}")
    return f"map_{safe}.pgm"


def report_payload(result: AnalysisResult, cfg: PipelineConfig, extra: dict[str, Any] | None = None) -> dict[str, Any]:
    chain = result.chain
    payload: dict[str, Any] = {
        "config": cfg.as_report(),
        "scale_chain": {
            "original_size": chain.original_size,
            "crop_size": chain.crop_size,
            "final_size": chain.final_size,
            "pixel_size_nm": chain.pixel_size,
            "mode": chain.mode.value,
            "center_px": list(chain.center),
        },
        "mask_source": result.mask_source,
        "n_features": len(result.features),
        "components": [
            {
                "component": component_column_name(match.key),
                "d_calc": match.d_calc,
                "d_ref": match.d_ref,
                "match_pct": round(match.match_pct, 2),
                "feature_ids": list(match.feature_ids),
                "intensity": result.component_intensity.get(match.key, 0.0),
            }
            for match in result.matches
        ],
        "empty_component_maps": [component_column_name(m.key) for m in result.component_maps if m.is_empty and m.key],
        "unassigned_features": [dataclasses.asdict(item) for item in result.matches.unassigned],
        "radial_peaks": [peak._asdict() for peak in result.peaks],
        "segmented_radial_peaks": [
            peak._asdict() for peak in find_peaks(result.segmented_profile, cfg.peak_prominence, cfg.peak_dc_bands)
        ],
    }
    if extra:
        payload.update(extra)
    return payload


def write_artifacts(
    result: AnalysisResult,
    cfg: PipelineConfig,
    out_dir: str | Path,
    *,
    dump_labels: bool = False,
    extra: dict[str, Any] | None = None,
) -> list[Path]:
    """Reports plus fft_enhanced.pgm, mask.pgm, overlay.ppm and one map_<name>_<hkl>.pgm per component."""
    target = ensure_output_dir(out_dir)
    written = emit_report(
        target,
        components=result.matches.matches,
        radial_profile=result.profile,
        params=report_payload(result, cfg, extra),
        features=result.features.features,
        feature_d=result.matches.feature_d,
        feature_components={
            label: component_column_name(key) for label, key in result.matches.assignments.items()
        },
    )
    write_image(result.product.enhanced, target / "fft_enhanced.pgm")
    write_mask(result.mask, target / "mask.pgm")
    write_image(result.overlay_image(), target / "overlay.ppm")
    written += [target / "fft_enhanced.pgm", target / "mask.pgm", target / "overlay.ppm"]
    for component in result.component_maps:
        if component.key is None:
            continue
        path = target / map_file_name(component.key)
        write_mask(component.bits, path)
        written.append(path)
    if dump_labels:
        write_label_dump(result.labels, target / "labels.pgm")
        written.append(target / "labels.pgm")
    return written
