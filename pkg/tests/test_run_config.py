from __future__ import annotations

import json
from pathlib import Path

import pytest
from pydantic import ValidationError

from temphase.schemas.run_config import RunConfig, build_run_config, load_run_config_file
from temphase.services.phase_matching import ScaleMode


def _write_config(tmp_path: Path, payload) -> Path:
    path = tmp_path / "run.json"
    path.write_text(json.dumps(payload), encoding="utf-8")
    return path


def test_cli_over_file_over_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("TEMPHASE_MAP_THRESHOLD", "0.3")
    config = _write_config(tmp_path, {"map_threshold": 0.4, "pixel_size": 0.05})

    assert build_run_config({}).map_threshold == 0.3
    assert build_run_config({}, config).map_threshold == 0.4
    assert build_run_config({"map_threshold": 0.5, "pixel_size": None}, config).map_threshold == 0.5
    assert build_run_config({"pixel_size": None}, config).pixel_size == 0.05


def test_defaults_come_from_settings():
    cfg = build_run_config({})
    assert cfg.frame_period_s == 2.46
    assert cfg.workers == 1
    assert cfg.scale_mode == "generalized"
    assert cfg.db_path is not None and cfg.db_path.name == "dspacing_db.csv"


def test_unknown_keys_are_rejected(tmp_path):
    config = _write_config(tmp_path, {"pixel_sise": 0.05})
    with pytest.raises(ValidationError):
        build_run_config({}, config)


def test_config_file_must_be_an_object(tmp_path):
    with pytest.raises(ValueError):
        load_run_config_file(_write_config(tmp_path, [1, 2]))


@pytest.mark.parametrize(
    "values",
    [
        {"pixel_size": -1.0},
        {"map_threshold": 1.5},
        {"prob_threshold": 1.0},
        {"workers": 0},
        {"scale_mode": "legacy"},
        {"mask_path": "a.pgm", "prob_map_path": "b.pgm"},
    ],
)
def test_validation_errors(values):
    with pytest.raises(ValidationError):
        RunConfig.model_validate(values)


def test_pixel_size_required_for_pipeline():
    with pytest.raises(ValueError, match="pixel-size"):
        RunConfig().to_pipeline_config()


@pytest.mark.parametrize("mode", ["paper_compat", "compat"])
def test_paper_compat_mode_and_alias_validate(mode):
    cfg = RunConfig.model_validate({"pixel_size": 0.037, "scale_mode": mode})
    assert cfg.to_pipeline_config().scale_mode is ScaleMode.COMPAT


def test_to_pipeline_config_maps_fields():
    cfg = RunConfig(
        pixel_size=0.037,
        scale_mode="compat",
        crop_size=2048,
        final_size=1024,
        gamma=1.0,
        k_sigma=3.0,
        match_tolerance=0.03,
        map_intensity="magnitude",
        intensity_metric="pixel-count",
    )
    pipeline = cfg.to_pipeline_config()
    assert pipeline.pixel_size == 0.037
    assert pipeline.scale_mode is ScaleMode.COMPAT
    assert (pipeline.crop_size, pipeline.final_size) == (2048, 1024)
    assert pipeline.enhance.gamma == 1.0
    assert pipeline.detect.k_sigma == 3.0
    assert pipeline.rel_tolerance == 0.03
    assert pipeline.map_intensity == "magnitude"
    assert pipeline.intensity_metric == "pixel-count"
