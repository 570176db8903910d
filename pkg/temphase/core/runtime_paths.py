from __future__ import annotations

from pathlib import Path


def _project_base_dir() -> Path:
    return Path(__file__).resolve().parents[2]


def resolve_project_path(relative_or_absolute: str | Path) -> Path:
    path = Path(relative_or_absolute)
    if path.is_absolute():
        return path
    return _project_base_dir() / path


def ensure_output_dir(path: str | Path) -> Path:
    """Create an output directory (and parents); raise OSError when not creatable."""
    out_dir = Path(path)
    out_dir.mkdir(parents=True, exist_ok=True)
    if not out_dir.is_dir():
        raise NotADirectoryError(f"Output path is not a directory: {out_dir}")
    return out_dir
