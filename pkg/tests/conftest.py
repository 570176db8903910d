from __future__ import annotations

import os
from pathlib import Path

import numpy as np
import pytest

from temphase.core.settings import clear_settings_cache
from temphase.services.image_io import DSpacingDB, parse_dspacing_rows
from temphase.services.spot_detection import BinaryMask

DB_ROWS = (
    "name,hkl,d_angstrom",
    "Li,011,2.416",
    "Li2O,111,2.6528",
    "Li2O,022,1.593",
)


@pytest.fixture(autouse=True)
def _isolated_env(monkeypatch: pytest.MonkeyPatch):
    for name in list(os.environ):
        if name.startswith("TEMPHASE_"):
            monkeypatch.delenv(name, raising=False)
    clear_settings_cache()
    yield
    clear_settings_cache()


@pytest.fixture
def sample_db() -> DSpacingDB:
    return parse_dspacing_rows(DB_ROWS)


@pytest.fixture
def db_file(tmp_path: Path) -> Path:
    path = tmp_path / "dspacing_db.csv"
    path.write_text("\n".join(DB_ROWS) + "\n", encoding="utf-8")
    return path


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


def _disk_bits(width: int, height: int, cx: float, cy: float, radius: float) -> np.ndarray:
    yy, xx = np.mgrid[0:height, 0:width]
    return (xx - cx) ** 2 + (yy - cy) ** 2 <= radius * radius


@pytest.fixture
def make_disk_mask():
    def _make(width: int, height: int, *disks: tuple[float, float, float]) -> BinaryMask:
        bits = np.zeros((height, width), dtype=bool)
        for cx, cy, radius in disks:
            bits |= _disk_bits(width, height, cx, cy, radius)
        return BinaryMask(bits)

    return _make
