from __future__ import annotations

import json
from collections.abc import Mapping
from pathlib import Path
from typing import Any, Literal

from pydantic import BaseModel, ConfigDict, Field, model_validator

from temphase.core.settings import get_settings
from temphase.services import analysis_config
from temphase.services.fft_core import EnhanceParams
from temphase.services.phase_matching import ScaleMode
from temphase.services.pipeline import PipelineConfig
from temphase.services.spot_detection import DetectParams


class RunConfig(BaseModel):
    """Validated run parameters shared by every subcommand."""

    model_config = ConfigDict(extra="forbid")

    pixel_size: float | None = Field(default=None, gt=0)
    scale_mode: Literal["paper_compat", "compat", "generalized"] = "generalized"
    db_path: Path | None = None
    out_dir: Path = Path("run")
    mask_path: Path | None = None
    prob_map_path: Path | None = None
    half: bool = False
    prob_threshold: float = Field(default=analysis_config.DEFAULT_PROB_THRESHOLD, gt=0, lt=1)
    crop_size: int | None = Field(default=None, ge=2)
    final_size: int | None = Field(default=None, ge=2)
    gamma: float = Field(default=2.0, ge=0)
    gain: float = Field(default=1.8, gt=0)
    blur_sigma: float = Field(default=3.0, ge=0)
    dc_radius: float = Field(default=20.0, ge=0)
    k_sigma: float = Field(default=4.0, ge=0)
    symmetry_tolerance: float = Field(default=5.0, ge=0)
    min_blob_area: int = Field(default=4, ge=0)
    fg_fraction: float = Field(default=0.5, ge=0, le=1)
    open_iters: int = Field(default=2, ge=0)
    dilate_iters: int = Field(default=3, ge=0)
    match_tolerance: float = Field(default=analysis_config.DEFAULT_MATCH_TOLERANCE, gt=0)
    map_threshold: float = Field(default=0.35, ge=0, le=1)
    map_radius_scale: float = Field(default=1.0, ge=0)
    map_intensity: Literal["envelope", "magnitude"] = "envelope"
    intensity_metric: Literal["linear", "pixel-count"] = "linear"
    peak_prominence: float = Field(default=0.05, ge=0)
    frame_period_s: float = Field(default=2.46, gt=0)
    workers: int = Field(default=1, ge=1)
    seed: int | None = None
    dump_labels: bool = False

    @model_validator(mode="after")
    def _mask_sources_exclusive(self) -> RunConfig:
        if self.mask_path is not None and self.prob_map_path is not None:
            raise ValueError("mask_path and prob_map_path are mutually exclusive")
        return self

    def require_pixel_size(self) -> float:
        if self.pixel_size is None:
            raise ValueError("--pixel-size is required")
        return self.pixel_size

    def to_pipeline_config(self) -> PipelineConfig:
        return PipelineConfig(
            pixel_size=self.require_pixel_size(),
            scale_mode=ScaleMode(self.scale_mode),
            crop_size=self.crop_size,
            final_size=self.final_size,
            enhance=EnhanceParams(gamma=self.gamma, gain=self.gain),
            detect=DetectParams(
                blur_sigma=self.blur_sigma,
                dc_exclusion_radius=self.dc_radius,
                k_sigma=self.k_sigma,
                symmetry_tolerance=self.symmetry_tolerance,
                min_blob_area=self.min_blob_area,
            ),
            mask_path=self.mask_path,
            prob_map_path=self.prob_map_path,
            half=self.half,
            prob_threshold=self.prob_threshold,
            fg_fraction=self.fg_fraction,
            open_iters=self.open_iters,
            dilate_iters=self.dilate_iters,
            rel_tolerance=self.match_tolerance,
            map_threshold=self.map_threshold,
            map_radius_scale=self.map_radius_scale,
            map_intensity=self.map_intensity,
            intensity_metric=self.intensity_metric,
            peak_prominence=self.peak_prominence,
        )


def env_defaults() -> dict[str, Any]:
    """RunConfig values taken from TEMPHASE_* variables."""
    settings = get_settings()
    return {
        "scale_mode": analysis_config.scale_mode_default(),
        "db_path": settings.db_file,
        "half": analysis_config.half_mask_default(),
        "prob_threshold": analysis_config.prob_threshold(),
        "gamma": analysis_config.enhance_gamma(),
        "gain": analysis_config.enhance_gain(),
        "blur_sigma": analysis_config.detect_blur_sigma(),
        "dc_radius": analysis_config.detect_dc_exclusion_radius(),
        "k_sigma": analysis_config.detect_k_sigma(),
        "symmetry_tolerance": analysis_config.detect_symmetry_tolerance(),
        "min_blob_area": analysis_config.detect_min_blob_area(),
        "fg_fraction": analysis_config.watershed_fg_fraction(),
        "open_iters": analysis_config.watershed_open_iters(),
        "dilate_iters": analysis_config.watershed_dilate_iters(),
        "match_tolerance": analysis_config.match_rel_tolerance(),
        "map_threshold": analysis_config.mapping_threshold_fraction(),
        "map_radius_scale": analysis_config.mapping_radius_scale(),
        "peak_prominence": analysis_config.peak_min_prominence_fraction(),
        "frame_period_s": settings.frame_period_s,
        "workers": settings.default_workers,
    }


def load_run_config_file(path: str | Path) -> dict[str, Any]:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(payload, dict):
        raise ValueError(f"{path}: run config must be a JSON object")
    return payload


def build_run_config(cli_values: Mapping[str, Any], config_file: str | Path | None = None) -> RunConfig:
    """Layer CLI flags over the JSON file over the environment; unset flags are None."""
    merged = env_defaults()
    if config_file is not None:
        merged.update(load_run_config_file(config_file))
    merged.update({key: value for key, value in cli_values.items() if value is not None})
    return RunConfig.model_validate(merged)
