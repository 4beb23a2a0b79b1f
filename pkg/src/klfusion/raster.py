"""Raster time-series container, native on-disk format and tiling.

A stack is a sequence of co-registered single-band rasters stored
slice-major ``(time, row, col)``. Missing samples are NaN in ``values`` and
flagged in ``missing``; the mask is authoritative.

The native format is a JSON sidecar ``<name>.json`` next to a raw
little-endian float32 payload ``<name>.bin``.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

BANDS = ("optical-evi", "optical-anomaly", "sar-vv", "sar-vh", "sar-filtered", "datemap", "truth")


class StackFormatError(ValueError):
    """Raised for malformed sidecars or payloads."""


@dataclass(frozen=True)
class SceneMetadata:
    epoch: str = "1970-01-01"
    pixel_size: float = 10.0
    crs: str = ""
    notes: str = ""

    def __post_init__(self):
        if not self.pixel_size > 0:
            raise ValueError("pixel_size must be positive")


@dataclass(frozen=True, eq=False)
class RasterStack:
    values: np.ndarray
    days: np.ndarray
    band: str
    missing: np.ndarray = None
    meta: SceneMetadata = field(default_factory=SceneMetadata)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float32)
        if values.ndim == 2:
            values = values[None]
        if values.ndim != 3:
            raise ValueError(f"values must be 3-D (time,row,col), got shape {values.shape}")
        days = np.asarray(self.days, dtype=np.int64).reshape(-1)
        if days.size != values.shape[0]:
            raise ValueError(f"{days.size} days for {values.shape[0]} slices")
        if days.size > 1 and np.any(np.diff(days) <= 0):
            raise ValueError("days must be strictly increasing")
        if self.band not in BANDS:
            raise ValueError(f"unknown band tag {self.band!r}")
        if self.missing is None:
            missing = np.isnan(values)
        else:
            missing = np.asarray(self.missing, dtype=bool)
            if missing.shape != values.shape:
                raise ValueError("missing mask shape differs from values")
            missing = missing | np.isnan(values)
        values = values.copy()
        values[missing] = np.nan
        values.setflags(write=False)
        missing.setflags(write=False)
        days.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "missing", missing)
        object.__setattr__(self, "days", days)

    @property
    def slices(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape

    def select(self, indices: Sequence[int]) -> "RasterStack":
        """Sub-stack holding the given slice indices (kept in day order)."""
        idx = np.sort(np.asarray(indices, dtype=np.int64))
        return RasterStack(self.values[idx], self.days[idx], self.band, self.missing[idx], self.meta)

    def with_values(self, values: np.ndarray, band: str | None = None, missing=None) -> "RasterStack":
        return RasterStack(values, self.days, band or self.band, missing, self.meta)

    def __eq__(self, other):
        if not isinstance(other, RasterStack):
            return NotImplemented
        return (
            self.band == other.band
            and np.array_equal(self.days, other.days)
            and np.array_equal(self.missing, other.missing)
            and np.array_equal(self.values, other.values, equal_nan=True)
        )


def _paths(path) -> tuple[Path, Path]:
    path = Path(path)
    if path.suffix in (".json", ".bin"):
        path = path.with_suffix("")
    return path.with_suffix(".json"), path.with_suffix(".bin")


def write_stack(stack: RasterStack, path) -> None:
    header_path, payload_path = _paths(path)
    header_path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "width": stack.width,
        "height": stack.height,
        "slices": stack.slices,
        "band": stack.band,
        "epoch": stack.meta.epoch,
        "pixel_size": stack.meta.pixel_size,
        "crs": stack.meta.crs,
        "notes": stack.meta.notes,
        "days": [int(d) for d in stack.days],
        "dtype": "f32",
        "byte_order": "little",
    }
    payload = np.ascontiguousarray(stack.values, dtype="<f4")
    with open(payload_path, "wb") as fh:
        fh.write(payload.tobytes())
    with open(header_path, "w") as fh:
        json.dump(header, fh, indent=1)
        fh.write("\n")


def load_stack(path) -> RasterStack:
    header_path, payload_path = _paths(path)
    try:
        with open(header_path) as fh:
            header = json.load(fh)
    except json.JSONDecodeError as exc:
        raise StackFormatError(f"{header_path}: invalid JSON ({exc})") from exc
    for key in ("width", "height", "band", "days"):
        if key not in header:
            raise StackFormatError(f"{header_path}: missing key {key!r}")
    if header.get("dtype", "f32") != "f32" or header.get("byte_order", "little") != "little":
        raise StackFormatError(f"{header_path}: only little-endian f32 payloads are supported")
    width, height, days = int(header["width"]), int(header["height"]), list(header["days"])
    slices = int(header.get("slices", len(days)))
    if slices != len(days):
        raise StackFormatError(f"{header_path}: slices={slices} but {len(days)} days listed")
    if any(b <= a for a, b in zip(days, days[1:])):
        raise StackFormatError(f"{header_path}: day list is not strictly increasing")
    expected = width * height * slices
    nbytes = os.path.getsize(payload_path)
    if nbytes != 4 * expected:
        raise StackFormatError(
            f"{payload_path}: payload holds {nbytes // 4} samples, sidecar declares {expected}"
        )
    values = np.fromfile(payload_path, dtype="<f4").reshape(slices, height, width)
    meta = SceneMetadata(
        epoch=header.get("epoch", "1970-01-01"),
        pixel_size=float(header.get("pixel_size", 10.0)),
        crs=header.get("crs", ""),
        notes=header.get("notes", ""),
    )
    try:
        return RasterStack(values.astype(np.float32), np.asarray(days, dtype=np.int64), header["band"], meta=meta)
    except ValueError as exc:
        raise StackFormatError(f"{header_path}: {exc}") from exc


def flatten_slice(stack: RasterStack, index: int) -> tuple[np.ndarray, np.ndarray]:
    """Row-major vector of one slice and its missing mask."""
    if not 0 <= index < stack.slices:
        raise IndexError(f"slice {index} out of range for {stack.slices} slices")
    return stack.values[index].reshape(-1).copy(), stack.missing[index].reshape(-1).copy()


def unflatten(vector: np.ndarray, height: int, width: int) -> np.ndarray:
    vector = np.asarray(vector)
    if vector.size != height * width:
        raise ValueError(f"vector of length {vector.size} does not fit {height}x{width}")
    return vector.reshape(height, width)


@dataclass(frozen=True)
class Tile:
    row0: int
    col0: int
    rows: int
    cols: int
    parent_height: int
    parent_width: int

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1 or self.row0 < 0 or self.col0 < 0:
            raise ValueError("degenerate tile")
        if self.row0 + self.rows > self.parent_height or self.col0 + self.cols > self.parent_width:
            raise ValueError("tile extends outside parent raster")

    @property
    def window(self) -> tuple[slice, slice]:
        return slice(self.row0, self.row0 + self.rows), slice(self.col0, self.col0 + self.cols)

    @property
    def size(self) -> int:
        return self.rows * self.cols


def tile_iter(height: int, width: int, tile_rows: int, tile_cols: int) -> Iterator[Tile]:
    """Row-major tiles covering a ``height x width`` raster exactly once."""
    if tile_rows < 1 or tile_cols < 1:
        raise ValueError("tile dimensions must be >= 1")
    for r in range(0, height, tile_rows):
        for c in range(0, width, tile_cols):
            yield Tile(r, c, min(tile_rows, height - r), min(tile_cols, width - c), height, width)


def stack_tiles(stack: RasterStack, tile_rows: int, tile_cols: int) -> list[Tile]:
    return list(tile_iter(stack.height, stack.width, tile_rows, tile_cols))


def import_geotiffs(paths: Sequence, days: Sequence[int], band: str, meta: SceneMetadata | None = None,
                    nodata: float | None = None) -> RasterStack:
    """Build a stack from one single-band TIFF per date (requires ``tifffile``)."""
    try:
        import tifffile
    except ImportError as exc:  # pragma: no cover
        raise RuntimeError("GeoTIFF import needs the optional 'tifffile' package") from exc
    if len(paths) != len(days):
        raise ValueError("one day number per file is required")
    order = np.argsort(np.asarray(days))
    slices = []
    for i in order:
        img = np.asarray(tifffile.imread(paths[i]), dtype=np.float32)
        if img.ndim == 3:
            img = img[0] if img.shape[0] < img.shape[-1] else img[..., 0]
        if nodata is not None:
            img = np.where(img == nodata, np.nan, img)
        slices.append(img)
    shapes = {s.shape for s in slices}
    if len(shapes) != 1:
        raise ValueError(f"inputs are not co-registered: shapes {sorted(shapes)}")
    return RasterStack(np.stack(slices), np.asarray(days)[order], band, meta=meta or SceneMetadata())
