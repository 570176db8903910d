"""Pipeline parameter defaults, overridable from the environment."""

from __future__ import annotations

import os

DEFAULT_PROB_THRESHOLD = 0.5
DEFAULT_MATCH_TOLERANCE = 0.02


def env_float(name: str, default: float) -> float:
    raw = os.getenv(name)
    if raw is None:
        return default
    try:
        return float(raw)
    except ValueError:
        return default


def env_int(name: str, default: int) -> int:
    return max(0, int(env_float(name, float(default))))


def env_bool(name: str, default: bool) -> bool:
    raw = os.getenv(name)
    if raw is None:
        return default
    return raw.strip().lower() not in {"0", "false", "no", "off"}


def enhance_gamma() -> float:
    return max(0.0, env_float("TEMPHASE_ENHANCE_GAMMA", 2.0))


def enhance_gain() -> float:
    gain = env_float("TEMPHASE_ENHANCE_GAIN", 1.8)
    return gain if gain > 0 else 1.8


def detect_blur_sigma() -> float:
    return max(0.0, env_float("TEMPHASE_DETECT_BLUR_SIGMA", 3.0))


def detect_dc_exclusion_radius() -> float:
    return max(0.0, env_float("TEMPHASE_DETECT_DC_RADIUS", 20.0))


def detect_k_sigma() -> float:
    return max(0.0, env_float("TEMPHASE_DETECT_K_SIGMA", 4.0))


def detect_symmetry_tolerance() -> float:
    return max(0.0, env_float("TEMPHASE_DETECT_SYMMETRY_TOL", 5.0))


def detect_min_blob_area() -> int:
    return env_int("TEMPHASE_DETECT_MIN_BLOB_AREA", 4)


def prob_threshold() -> float:
    value = env_float("TEMPHASE_PROB_THRESHOLD", DEFAULT_PROB_THRESHOLD)
    return value if 0.0 < value < 1.0 else DEFAULT_PROB_THRESHOLD


def watershed_fg_fraction() -> float:
    return max(0.0, min(1.0, env_float("TEMPHASE_WATERSHED_FG_FRACTION", 0.5)))


def watershed_open_iters() -> int:
    return env_int("TEMPHASE_WATERSHED_OPEN_ITERS", 2)


def watershed_dilate_iters() -> int:
    return env_int("TEMPHASE_WATERSHED_DILATE_ITERS", 3)


def match_rel_tolerance() -> float:
    value = env_float("TEMPHASE_MATCH_TOLERANCE", DEFAULT_MATCH_TOLERANCE)
    return value if value > 0 else DEFAULT_MATCH_TOLERANCE


def peak_min_prominence_fraction() -> float:
    return max(0.0, env_float("TEMPHASE_PEAK_PROMINENCE", 0.05))


def mapping_threshold_fraction() -> float:
    """Fraction of the component-map maximum kept as foreground."""
    return max(0.0, min(1.0, env_float("TEMPHASE_MAP_THRESHOLD", 0.35)))


def mapping_radius_scale() -> float:
    return max(0.0, env_float("TEMPHASE_MAP_RADIUS_SCALE", 1.0))


def first_detection_min_match_pct() -> float:
    return env_float("TEMPHASE_FIRST_DETECTION_MATCH_PCT", 98.0)


def first_detection_min_intensity_fraction() -> float:
    return max(0.0, env_float("TEMPHASE_FIRST_DETECTION_INTENSITY", 0.02))


def scale_mode_default() -> str:
    raw = os.getenv("TEMPHASE_SCALE_MODE", "generalized").strip().lower()
    return raw if raw in {"paper_compat", "compat", "generalized"} else "generalized"


def half_mask_default() -> bool:
    """Imported masks/probability maps cover only the top half of the FFT image."""
    return env_bool("TEMPHASE_HALF_MASK", False)
