"""Readers and writers for MRC stacks, PGM/PPM rasters and the d-spacing database."""

from __future__ import annotations

import csv
import logging
import math
import struct
from collections.abc import Iterator, Sequence
from dataclasses import dataclass, field
from decimal import Decimal, InvalidOperation
from pathlib import Path

import numpy as np

from temphase.core.errors import (
    DatabaseParseError,
    EmptyStackError,
    ImageFormatError,
    TruncatedDataError,
    UnsupportedModeError,
)
from temphase.core.settings import DEFAULT_FRAME_PERIOD_S

logger = logging.getLogger(__name__)

MRC_HEADER_BYTES = 1024
MRC_NSYMBT_OFFSET = 92
MRC_CELL_OFFSET = 40
MRC_MODE_DTYPES: dict[int, np.dtype] = {
    0: np.dtype("i1"),
    1: np.dtype("<i2"),
    2: np.dtype("<f4"),
    6: np.dtype("<u2"),
}
DB_HEADER = ("name", "hkl", "d_angstrom")


def _frozen_float_array(values, *, ndim: int) -> np.ndarray:
    array = np.asarray(values, dtype=np.float64)
    if array is values and array.flags.writeable:
        array = array.copy()
    if array.ndim != ndim:
        raise ValueError(f"Expected a {ndim}D array, got shape {array.shape}")
    array.setflags(write=False)
    return array


@dataclass(frozen=True)
class Image2D:
    """Single-channel floating-point raster, row-major (height, width)."""

    pixels: np.ndarray
    pixel_size: float | None = None

    def __post_init__(self) -> None:
        pixels = _frozen_float_array(self.pixels, ndim=2)
        height, width = pixels.shape
        if width < 2 or height < 2:
            raise ValueError(f"Image must be at least 2x2, got {width}x{height}")
        if not np.all(np.isfinite(pixels)):
            raise ValueError("Image contains non-finite values")
        if self.pixel_size is not None and not self.pixel_size > 0:
            raise ValueError(f"pixel_size must be positive, got {self.pixel_size}")
        object.__setattr__(self, "pixels", pixels)

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def dims(self) -> tuple[int, int]:
        return self.width, self.height

    def with_pixels(self, pixels: np.ndarray) -> Image2D:
        return Image2D(pixels, pixel_size=self.pixel_size)

    def with_pixel_size(self, pixel_size: float | None) -> Image2D:
        return Image2D(self.pixels, pixel_size=pixel_size)


@dataclass(frozen=True)
class RgbImage:
    """Three-channel raster with values in [0, 1], shape (height, width, 3)."""

    pixels: np.ndarray

    def __post_init__(self) -> None:
        pixels = _frozen_float_array(self.pixels, ndim=3)
        if pixels.shape[2] != 3:
            raise ValueError(f"RGB image needs 3 channels, got shape {pixels.shape}")
        object.__setattr__(self, "pixels", pixels)

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])


@dataclass(frozen=True)
class ImageStack:
    frames: tuple[Image2D, ...]
    frame_period_s: float = DEFAULT_FRAME_PERIOD_S
    pixel_size: float | None = None
    cell_angstrom: tuple[float, float, float] | None = None

    def __post_init__(self) -> None:
        frames = tuple(self.frames)
        if not frames:
            raise EmptyStackError("Image stack contains no frames")
        dims = frames[0].dims
        for index, frame in enumerate(frames):
            if frame.dims != dims:
                raise ValueError(f"Frame {index} has dims {frame.dims}, expected {dims}")
        if not self.frame_period_s > 0:
            raise ValueError(f"frame_period_s must be positive, got {self.frame_period_s}")
        object.__setattr__(self, "frames", frames)

    def __len__(self) -> int:
        return len(self.frames)

    def with_pixel_size(self, pixel_size: float) -> ImageStack:
        return ImageStack(
            frames=tuple(frame.with_pixel_size(pixel_size) for frame in self.frames),
            frame_period_s=self.frame_period_s,
            pixel_size=pixel_size,
            cell_angstrom=self.cell_angstrom,
        )


@dataclass(frozen=True)
class DSpacingEntry:
    name: str
    hkl: str
    d_ref: float
    # decimals quoted in the source text; bounds the precision of a match
    decimals: int | None = None

    @property
    def key(self) -> tuple[str, str]:
        return self.name, self.hkl


@dataclass(frozen=True)
class DSpacingDB:
    entries: tuple[DSpacingEntry, ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        entries = tuple(self.entries)
        seen: set[tuple[str, str]] = set()
        for entry in entries:
            if not entry.d_ref > 0:
                raise ValueError(f"d-spacing for {entry.name} ({entry.hkl}) must be positive, got {entry.d_ref}")
            if entry.key in seen:
                raise ValueError(f"Duplicate database entry {entry.name} ({entry.hkl})")
            seen.add(entry.key)
        object.__setattr__(self, "entries", entries)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[DSpacingEntry]:
        return iter(self.entries)

    def nearest(self, d_angstrom: float) -> tuple[DSpacingEntry, float]:
        """Return the entry with the smallest relative deviation and that deviation."""
        if not self.entries:
            raise ValueError("d-spacing database is empty")
        best = min(self.entries, key=lambda entry: (abs(d_angstrom - entry.d_ref) / entry.d_ref, entry.key))
        return best, abs(d_angstrom - best.d_ref) / best.d_ref

    def scaled(self, factor: float) -> DSpacingDB:
        return DSpacingDB(
            tuple(
                DSpacingEntry(entry.name, entry.hkl, entry.d_ref * factor, entry.decimals) for entry in self.entries
            )
        )


# --- MRC -------------------------------------------------------------------


def read_mrc(
    path: str | Path,
    *,
    frame_period_s: float = DEFAULT_FRAME_PERIOD_S,
    pixel_size: float | None = None,
) -> ImageStack:
    """Parse an MRC2014 stack (modes 0, 1, 2, 6) into floating-point frames.

    The header pixel calibration is not trusted: ``pixel_size`` comes from the
    caller. Nonzero cell dimensions are kept on the stack for cross-checking.
    """
    data = Path(path).read_bytes()
    if len(data) < MRC_HEADER_BYTES:
        raise TruncatedDataError(
            f"MRC header truncated: {len(data)} of {MRC_HEADER_BYTES} bytes",
            byte_offset=len(data),
        )
    nx, ny, nz, mode = struct.unpack_from("<4i", data, 0)
    (nsymbt,) = struct.unpack_from("<i", data, MRC_NSYMBT_OFFSET)
    cell = struct.unpack_from("<3f", data, MRC_CELL_OFFSET)

    dtype = MRC_MODE_DTYPES.get(mode)
    if dtype is None:
        raise UnsupportedModeError(mode)
    if nz == 0:
        raise EmptyStackError(f"MRC file {path} declares nz = 0")
    if nx <= 0 or ny <= 0 or nz < 0 or nsymbt < 0:
        raise ImageFormatError(f"Invalid MRC dimensions nx={nx} ny={ny} nz={nz} nsymbt={nsymbt}", byte_offset=0)

    offset = MRC_HEADER_BYTES + nsymbt
    count = nx * ny * nz
    end = offset + count * dtype.itemsize
    if len(data) < end:
        raise TruncatedDataError(
            f"MRC payload truncated: expected {end} bytes, file has {len(data)}",
            byte_offset=len(data),
        )
    volume = np.frombuffer(data, dtype=dtype, count=count, offset=offset).reshape(nz, ny, nx)

    cell_angstrom = None
    if any(value != 0.0 for value in cell):
        cell_angstrom = (float(cell[0]), float(cell[1]), float(cell[2]))
        logger.info("MRC header cell dimensions %s A (reported only, not used for calibration)", cell_angstrom)

    frames = tuple(Image2D(volume[k].astype(np.float64), pixel_size=pixel_size) for k in range(nz))
    logger.debug("Read MRC %s: %dx%dx%d mode %d", path, nx, ny, nz, mode)
    return ImageStack(frames=frames, frame_period_s=frame_period_s, pixel_size=pixel_size, cell_angstrom=cell_angstrom)


def write_mrc(
    path: str | Path,
    volume: np.ndarray,
    *,
    mode: int = 2,
    cell_angstrom: tuple[float, float, float] = (0.0, 0.0, 0.0),
) -> None:
    """Write a (nz, ny, nx) volume as a minimal MRC2014 file (fixture writer)."""
    dtype = MRC_MODE_DTYPES.get(mode)
    if dtype is None:
        raise UnsupportedModeError(mode)
    data = np.asarray(volume)
    if data.ndim == 2:
        data = data[np.newaxis]
    if data.ndim != 3:
        raise ValueError(f"MRC volume must be 2D or 3D, got shape {data.shape}")
    nz, ny, nx = data.shape
    payload = data.astype(dtype)

    header = bytearray(MRC_HEADER_BYTES)
    struct.pack_into("<4i", header, 0, nx, ny, nz, mode)
    struct.pack_into("<3i", header, 28, nx, ny, nz)
    struct.pack_into("<3f", header, MRC_CELL_OFFSET, *cell_angstrom)
    struct.pack_into("<3f", header, 52, 90.0, 90.0, 90.0)
    struct.pack_into("<3i", header, 64, 1, 2, 3)
    struct.pack_into(
        "<3f",
        header,
        76,
        float(payload.min()) if payload.size else 0.0,
        float(payload.max()) if payload.size else 0.0,
        float(payload.mean()) if payload.size else 0.0,
    )
    struct.pack_into("<i", header, MRC_NSYMBT_OFFSET, 0)
    struct.pack_into("<i", header, 104, 20140)
    header[208:212] = b"MAP "
    header[212:216] = bytes((0x44, 0x44, 0x00, 0x00))
    Path(path).write_bytes(bytes(header) + payload.tobytes(order="C"))


# --- PGM / PPM ------------------------------------------------------------


def _parse_netpbm_header(data: bytes, path: str | Path) -> tuple[bytes, int, int, int, int]:
    """Return (magic, width, height, maxval, payload offset)."""
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos >= len(data):
            raise TruncatedDataError(f"Netpbm header truncated in {path}", byte_offset=pos)
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace() and data[pos : pos + 1] != b"#":
            pos += 1
        tokens.append(data[start:pos])
        if len(tokens) == 1 and tokens[0] not in (b"P5", b"P6"):
            raise ImageFormatError(f"Unsupported netpbm magic {tokens[0]!r} in {path}", byte_offset=0)
    # exactly one whitespace byte separates the header from the payload
    pos += 1
    try:
        width, height, maxval = (int(token) for token in tokens[1:4])
    except ValueError as exc:
        raise ImageFormatError(f"Malformed netpbm header in {path}: {exc}", byte_offset=pos) from exc
    if width <= 0 or height <= 0:
        raise ImageFormatError(f"Invalid netpbm dimensions {width}x{height} in {path}", byte_offset=pos)
    return tokens[0], width, height, maxval, pos


def _read_netpbm_samples(
    data: bytes, offset: int, width: int, height: int, channels: int, maxval: int, path: str | Path
) -> np.ndarray:
    if maxval == 255:
        dtype = np.dtype("u1")
    elif maxval == 65535:
        dtype = np.dtype(">u2")
    else:
        raise ImageFormatError(f"Unsupported maxval {maxval} in {path}; expected 255 or 65535", byte_offset=offset)
    count = width * height * channels
    available = (len(data) - offset) // dtype.itemsize
    if available < count:
        raise TruncatedDataError(
            f"Pixel payload of {path} truncated: {available} of {count} samples",
            byte_offset=len(data),
        )
    samples = np.frombuffer(data, dtype=dtype, count=count, offset=offset)
    return samples.astype(np.float64) / float(maxval)


def read_pgm(path: str | Path) -> Image2D:
    """Read a binary P5 graymap, scaling samples to [0, 1]."""
    data = Path(path).read_bytes()
    magic, width, height, maxval, offset = _parse_netpbm_header(data, path)
    if magic != b"P5":
        raise ImageFormatError(f"{path} is a {magic.decode()} pixmap; use read_ppm for RGB overlays", byte_offset=0)
    samples = _read_netpbm_samples(data, offset, width, height, 1, maxval, path)
    return Image2D(samples.reshape(height, width))


def read_ppm(path: str | Path) -> RgbImage:
    """Read a binary P6 pixmap, scaling samples to [0, 1]."""
    data = Path(path).read_bytes()
    magic, width, height, maxval, offset = _parse_netpbm_header(data, path)
    if magic != b"P6":
        raise ImageFormatError(f"{path} is a {magic.decode()} graymap; use read_pgm", byte_offset=0)
    samples = _read_netpbm_samples(data, offset, width, height, 3, maxval, path)
    return RgbImage(samples.reshape(height, width, 3))


def to_bytes_8bit(values: np.ndarray) -> np.ndarray:
    """Clamp to [0, 1] and quantize to 0..255."""
    clipped = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    return np.rint(clipped * 255.0).astype(np.uint8)


def write_netpbm_bytes(path: str | Path, samples: np.ndarray) -> None:
    """Write uint8 samples as P5 (2D) or P6 (HxWx3)."""
    samples = np.ascontiguousarray(samples, dtype=np.uint8)
    if samples.ndim == 2:
        magic = "P5"
    elif samples.ndim == 3 and samples.shape[2] == 3:
        magic = "P6"
    else:
        raise ValueError(f"Cannot write samples of shape {samples.shape} as netpbm")
    height, width = samples.shape[:2]
    header = f"{magic}\n{width} {height}\n255\n".encode("ascii")
    Path(path).write_bytes(header + samples.tobytes())


def write_image(image: Image2D | RgbImage | np.ndarray, path: str | Path) -> None:
    """Write grayscale as P5 or RGB as P6, 8-bit, values clamped to [0, 1]."""
    values = image.pixels if isinstance(image, (Image2D, RgbImage)) else np.asarray(image)
    write_netpbm_bytes(path, to_bytes_8bit(values))


# --- d-spacing database ------------------------------------------------------


def _quoted_decimals(text: str) -> int | None:
    try:
        exponent = Decimal(text.strip()).as_tuple().exponent
    except InvalidOperation:
        return None
    return max(0, -exponent) if isinstance(exponent, int) else None


def parse_dspacing_rows(lines: Sequence[str], source: str = "<memory>") -> DSpacingDB:
    """Parse database CSV text; lines starting with ``#`` are comments."""
    reader = csv.reader(lines)
    entries: list[DSpacingEntry] = []
    seen: dict[tuple[str, str], int] = {}
    header_seen = False
    for line_number, row in enumerate(reader, start=1):
        if not row or not "".join(row).strip() or row[0].lstrip().startswith("#"):
            continue
        cells = [cell.strip() for cell in row]
        if not header_seen:
            if tuple(cell.lower() for cell in cells) != DB_HEADER:
                raise DatabaseParseError(
                    f"{source}: expected header {','.join(DB_HEADER)}, got {','.join(cells)}",
                    line_number=line_number,
                )
            header_seen = True
            continue
        if len(cells) != 3 or not cells[0] or not cells[1]:
            raise DatabaseParseError(f"{source}: expected 3 columns name,hkl,d_angstrom", line_number=line_number)
        name, hkl, d_text = cells
        try:
            d_ref = float(d_text)
        except ValueError as exc:
            raise DatabaseParseError(f"{source}: invalid d-spacing {d_text!r}", line_number=line_number) from exc
        if not math.isfinite(d_ref) or d_ref <= 0:
            raise DatabaseParseError(f"{source}: d-spacing must be positive, got {d_text}", line_number=line_number)
        key = (name, hkl)
        if key in seen:
            raise DatabaseParseError(
                f"{source}: duplicate entry {name} ({hkl}), first defined on line {seen[key]}",
                line_number=line_number,
            )
        seen[key] = line_number
        entries.append(DSpacingEntry(name=name, hkl=hkl, d_ref=d_ref, decimals=_quoted_decimals(d_text)))
    if not header_seen:
        raise DatabaseParseError(f"{source}: missing header {','.join(DB_HEADER)}", line_number=1)
    return DSpacingDB(tuple(entries))


def read_dspacing_db(path: str | Path) -> DSpacingDB:
    text = Path(path).read_text(encoding="utf-8")
    return parse_dspacing_rows(text.splitlines(), source=str(path))
