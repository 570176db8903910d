import os
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

from temphase.core.runtime_paths import resolve_project_path

DEFAULT_FRAME_PERIOD_S = 2.46


@dataclass(frozen=True)
class Settings:
    base_dir: Path
    data_dir: Path
    db_file: Path
    default_workers: int
    frame_period_s: float
    log_level: str


def _env_positive_float(name: str, default: float) -> float:
    raw = os.getenv(name)
    if raw is None:
        return default
    try:
        value = float(raw)
    except ValueError:
        return default
    return value if value > 0 else default


@lru_cache(maxsize=1)
def get_settings() -> Settings:
    base_dir = Path(__file__).resolve().parents[2]
    data_dir = resolve_project_path(os.getenv("TEMPHASE_DATA_DIR", "data"))
    db_raw = os.getenv("TEMPHASE_DB_PATH", "").strip()
    return Settings(
        base_dir=base_dir,
        data_dir=data_dir,
        db_file=resolve_project_path(db_raw) if db_raw else data_dir / "dspacing_db.csv",
        default_workers=max(1, int(_env_positive_float("TEMPHASE_WORKERS", 1))),
        frame_period_s=_env_positive_float("TEMPHASE_FRAME_PERIOD_S", DEFAULT_FRAME_PERIOD_S),
        log_level=os.getenv("TEMPHASE_LOG_LEVEL", "INFO").strip().upper() or "INFO",
    )


def clear_settings_cache() -> None:
    get_settings.cache_clear()
