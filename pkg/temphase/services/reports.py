"""CSV/JSON report emission for single-image and stack analyses."""

from __future__ import annotations

import csv
import io
import json
import logging
from collections.abc import Mapping, Sequence
from pathlib import Path
from typing import Any, Protocol

import numpy as np

from temphase.core.runtime_paths import ensure_output_dir

logger = logging.getLogger(__name__)

COMPONENT_COLUMNS = ("name", "hkl", "d_calc", "d_ref", "match_pct", "feature_size_px", "pixel_value_count")
RADIAL_COLUMNS = ("d_angstrom", "intensity")
FEATURE_COLUMNS = (
    "label",
    "centroid_x",
    "centroid_y",
    "area_px",
    "equivalent_diameter_px",
    "pixel_value_count",
    "mean_intensity",
    "d_calc",
    "component",
)


class ComponentRecord(Protocol):
    name: str
    hkl: str
    d_calc: float
    d_ref: float
    match_pct: float
    feature_size_px: float
    pixel_value_count: int


class RadialRecord(Protocol):
    d_angstrom: np.ndarray
    intensity: np.ndarray


class FeatureRecord(Protocol):
    label: int
    centroid_x: float
    centroid_y: float
    area: int
    equivalent_diameter: float
    pixel_value_count: int
    mean_intensity: float


class IntensityRecord(Protocol):
    component_keys: tuple[tuple[str, str], ...]
    intensity: np.ndarray
    frame_period_s: float

    def frame_times(self) -> np.ndarray: ...


def format_d(value: float) -> str:
    return f"{value:.5f}"


def format_pct(value: float) -> str:
    return f"{value:.2f}"


def format_seconds(value: float) -> str:
    return format(round(float(value), 9), ".10g")


def format_float(value: float) -> str:
    return format(float(value), ".10g")


def component_column_name(key: tuple[str, str]) -> str:
    name, hkl = key
    return f"{name}({hkl})"


def _csv_text(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buffer.getvalue()


def components_csv(components: Sequence[ComponentRecord]) -> str:
    ordered = sorted(components, key=lambda item: (-item.d_calc, item.name, item.hkl))
    rows = [
        (
            item.name,
            item.hkl,
            format_d(item.d_calc),
            format_d(item.d_ref),
            format_pct(item.match_pct),
            f"{item.feature_size_px:.2f}",
            str(int(item.pixel_value_count)),
        )
        for item in ordered
    ]
    return _csv_text(COMPONENT_COLUMNS, rows)


def radial_csv(profile: RadialRecord) -> str:
    rows = [(format_d(d), format_float(value)) for d, value in zip(profile.d_angstrom, profile.intensity)]
    return _csv_text(RADIAL_COLUMNS, rows)


def features_csv(
    features: Sequence[FeatureRecord],
    d_by_label: Mapping[int, float] | None = None,
    component_by_label: Mapping[int, str] | None = None,
) -> str:
    d_by_label = d_by_label or {}
    component_by_label = component_by_label or {}
    rows = []
    for feature in features:
        d_calc = d_by_label.get(feature.label)
        rows.append(
            (
                str(feature.label),
                f"{feature.centroid_x:.3f}",
                f"{feature.centroid_y:.3f}",
                str(feature.area),
                f"{feature.equivalent_diameter:.2f}",
                str(int(feature.pixel_value_count)),
                format_float(feature.mean_intensity),
                format_d(d_calc) if d_calc is not None else "",
                component_by_label.get(feature.label, ""),
            )
        )
    return _csv_text(FEATURE_COLUMNS, rows)


def intensity_csv(profile: IntensityRecord) -> str:
    header = ["frame", "time_s", *(component_column_name(key) for key in profile.component_keys)]
    times = profile.frame_times()
    rows = []
    for index, row in enumerate(np.asarray(profile.intensity)):
        rows.append([str(index + 1), format_seconds(times[index]), *(format_float(value) for value in row)])
    return _csv_text(header, rows)


def _json_default(value: Any) -> Any:
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (set, frozenset)):
        return sorted(value)
    raise TypeError(f"Object of type {type(value).__name__} is not JSON serializable")


def write_json(path: Path, payload: Mapping[str, Any]) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=_json_default) + "\n", encoding="utf-8")


def emit_report(
    out_dir: str | Path,
    *,
    components: Sequence[ComponentRecord],
    radial_profile: RadialRecord | None,
    params: Mapping[str, Any],
    features: Sequence[FeatureRecord] | None = None,
    feature_d: Mapping[int, float] | None = None,
    feature_components: Mapping[int, str] | None = None,
    intensity_profile: IntensityRecord | None = None,
) -> list[Path]:
    """Write components.csv, radial_profile.csv, report.json and the optional tables.

    Output bytes depend only on the inputs (components sorted by d_calc
    descending, JSON keys sorted).
    """
    target = ensure_output_dir(out_dir)
    written: list[Path] = []

    def _emit(name: str, text: str) -> None:
        path = target / name
        path.write_text(text, encoding="utf-8", newline="")
        written.append(path)

    _emit("components.csv", components_csv(components))
    if radial_profile is not None:
        _emit("radial_profile.csv", radial_csv(radial_profile))
    if features is not None:
        _emit("features.csv", features_csv(features, feature_d, feature_components))
    if intensity_profile is not None:
        _emit("intensity_profile.csv", intensity_csv(intensity_profile))

    report_path = target / "report.json"
    write_json(report_path, params)
    written.append(report_path)
    logger.info("Wrote %d report files to %s", len(written), target)
    return written
