"""Stack processing: per-frame analysis, component intensity over time, first detection."""

from __future__ import annotations

import logging
import multiprocessing
from collections.abc import Iterator, Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from temphase.core.runtime_paths import ensure_output_dir
from temphase.services.analysis_config import (
    first_detection_min_intensity_fraction,
    first_detection_min_match_pct,
)
from temphase.services.image_io import DSpacingDB, Image2D, ImageStack, write_image
from temphase.services.phase_matching import ComponentMatch, match_percent
from temphase.services.pipeline import PipelineConfig, analyze_image

logger = logging.getLogger(__name__)

FRAMES_DIR = "frames"


def frame_time(k: int, frame_period_s: float) -> float:
    """Exposure time at the end of 1-based frame ``k``."""
    if k < 1:
        raise ValueError(f"frame index must be >= 1, got {k}")
    if not frame_period_s > 0:
        raise ValueError(f"frame_period_s must be positive, got {frame_period_s}")
    return k * frame_period_s


@dataclass(frozen=True)
class FrameOutcome:
    index: int
    intensity: dict[tuple[str, str], float]
    match_pct: dict[tuple[str, str], float]
    n_features: int
    matches: tuple[ComponentMatch, ...] = ()
    error: str | None = None


@dataclass(frozen=True)
class IntensityProfile:
    component_keys: tuple[tuple[str, str], ...]
    intensity: np.ndarray
    match_pct: np.ndarray
    frame_period_s: float
    first_detection_frame: dict[tuple[str, str], int | None]
    failed_frames: tuple[int, ...] = ()
    components: tuple[ComponentMatch, ...] = ()

    @property
    def frame_count(self) -> int:
        return int(self.intensity.shape[0])

    def frame_times(self) -> np.ndarray:
        return np.asarray([frame_time(k, self.frame_period_s) for k in range(1, self.frame_count + 1)])

    def column(self, key: tuple[str, str]) -> np.ndarray:
        return self.intensity[:, self.component_keys.index(key)]


# Worker state, set once per process by _init_worker.
_worker_cfg: PipelineConfig | None = None
_worker_db: DSpacingDB | None = None
_worker_frames_dir: Path | None = None


def _init_worker(cfg: PipelineConfig, db: DSpacingDB, frames_dir: Path | None) -> None:
    global _worker_cfg, _worker_db, _worker_frames_dir
    _worker_cfg = cfg
    _worker_db = db
    _worker_frames_dir = frames_dir


def _analyze_frame(job: tuple[int, Image2D]) -> FrameOutcome:
    index, frame = job
    if _worker_cfg is None or _worker_db is None:
        raise RuntimeError("frame worker used before _init_worker")
    try:
        result = analyze_image(frame, _worker_cfg, _worker_db)
    except Exception as exc:  # a bad frame becomes a zero row
        logger.warning("Frame %d failed: %s", index, exc)
        return FrameOutcome(index, {}, {}, 0, error=f"{type(exc).__name__}: {exc}")
    if _worker_frames_dir is not None:
        write_image(result.overlay_image(), _worker_frames_dir / f"overlay_frame{index}.ppm")
    return FrameOutcome(
        index,
        dict(result.component_intensity),
        {match.key: match.match_pct for match in result.matches},
        len(result.features),
        tuple(result.matches),
    )


def _run_frames(jobs: Sequence[tuple[int, Image2D]], cfg, db, frames_dir, workers: int) -> Iterator[FrameOutcome]:
    if workers <= 1 or len(jobs) <= 1:
        _init_worker(cfg, db, frames_dir)
        yield from map(_analyze_frame, jobs)
        return
    with multiprocessing.Pool(workers, initializer=_init_worker, initargs=(cfg, db, frames_dir)) as pool:
        yield from pool.imap(_analyze_frame, jobs)


def _ordered_keys(outcomes: Sequence[FrameOutcome], db: DSpacingDB) -> tuple[tuple[str, str], ...]:
    seen = {key for outcome in outcomes for key in outcome.intensity}
    d_ref = {entry.key: entry.d_ref for entry in db}
    return tuple(sorted(seen, key=lambda key: (-d_ref.get(key, 0.0), key)))


def summarize_components(
    outcomes: Sequence[FrameOutcome], keys: Sequence[tuple[str, str]], db: DSpacingDB
) -> tuple[ComponentMatch, ...]:
    """One row per component averaged over the frames that matched it."""
    entries = {entry.key: entry for entry in db}
    summary = []
    for key in keys:
        per_frame = [match for outcome in outcomes for match in outcome.matches if match.key == key]
        if not per_frame:
            continue
        entry = entries[key]
        d_mean = float(np.mean([match.d_calc for match in per_frame]))
        summary.append(
            ComponentMatch(
                name=entry.name,
                hkl=entry.hkl,
                d_calc=d_mean,
                d_ref=entry.d_ref,
                match_pct=match_percent(d_mean, entry.d_ref, entry.decimals),
                feature_ids=(),
                feature_size_px=float(np.mean([match.feature_size_px for match in per_frame])),
                pixel_value_count=int(round(np.mean([match.pixel_value_count for match in per_frame]))),
            )
        )
    return tuple(summary)


def process_stack(
    stack: ImageStack,
    cfg: PipelineConfig,
    db: DSpacingDB,
    *,
    workers: int = 1,
    out_dir: str | Path | None = None,
    min_match_pct: float | None = None,
    min_intensity_fraction: float | None = None,
) -> IntensityProfile:
    """Analyse every frame independently and join components by (name, hkl) in frame order."""
    if workers < 1:
        raise ValueError(f"workers must be >= 1, got {workers}")
    frames_dir = ensure_output_dir(Path(out_dir) / FRAMES_DIR) if out_dir is not None else None
    jobs = [(index, frame) for index, frame in enumerate(stack.frames, start=1)]
    logger.info("Processing %d frames with %d worker(s)", len(jobs), workers)
    outcomes = sorted(_run_frames(jobs, cfg, db, frames_dir, workers), key=lambda outcome: outcome.index)

    keys = _ordered_keys(outcomes, db)
    intensity = np.zeros((len(outcomes), len(keys)))
    match_pct = np.zeros((len(outcomes), len(keys)))
    for row, outcome in enumerate(outcomes):
        for col, key in enumerate(keys):
            intensity[row, col] = outcome.intensity.get(key, 0.0)
            match_pct[row, col] = outcome.match_pct.get(key, 0.0)

    failed = tuple(outcome.index for outcome in outcomes if outcome.error is not None)
    if failed:
        logger.warning("%d of %d frames failed and were recorded as zero rows", len(failed), len(outcomes))

    profile = IntensityProfile(keys, intensity, match_pct, stack.frame_period_s, {}, failed)
    detections = {
        key: first_detection(profile, key, min_match_pct, min_intensity_fraction) for key in keys
    }
    components = summarize_components(outcomes, keys, db)
    return IntensityProfile(keys, intensity, match_pct, stack.frame_period_s, detections, failed, components)


def first_detection(
    profile: IntensityProfile,
    component: tuple[str, str],
    min_match_pct: float | None = None,
    min_intensity_fraction: float | None = None,
) -> int | None:
    """Smallest 1-based frame where the component is matched well enough and bright enough."""
    if component not in profile.component_keys:
        raise ValueError(f"Component {component} is not in the profile")
    min_match_pct = first_detection_min_match_pct() if min_match_pct is None else min_match_pct
    fraction = first_detection_min_intensity_fraction() if min_intensity_fraction is None else min_intensity_fraction
    col = profile.component_keys.index(component)
    intensity = profile.intensity[:, col]
    peak = float(intensity.max()) if intensity.size else 0.0
    if peak <= 0.0:
        return None
    detected = (profile.match_pct[:, col] >= min_match_pct) & (intensity > 0.0) & (intensity >= fraction * peak)
    hits = np.flatnonzero(detected)
    return int(hits[0]) + 1 if hits.size else None
