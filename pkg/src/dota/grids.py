"""Voxel grid containers and the DGRD binary file format.

Layout of a grid file (all integers little-endian):

    magic   4 bytes  b"DGRD"
    version u16
    dims    u32 x 3  (L, H, W)
    spacing f32 x 3  (mm per voxel along each axis)
    energy  f32      (MeV; present in dose files only)
    payload raw little-endian float32, (L, H, W) row-major

Whether the energy field is present is determined from the remaining
byte count, so geometry and dose files share one reader.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

GRID_MAGIC = b"DGRD"
GRID_VERSION = 1

_HEADER = struct.Struct("<4sH3I3f")
_ENERGY = struct.Struct("<f")


class DataError(RuntimeError):
    """A data file is missing, malformed, or inconsistent."""


def _check_values(values: np.ndarray, what: str) -> np.ndarray:
    values = np.asarray(values, dtype=np.float32)
    if values.ndim != 3:
        raise DataError(f"{what} values must be a 3-D block, got shape {values.shape}")
    if not np.isfinite(values).all():
        raise DataError(f"{what} contains non-finite values")
    if (values < 0).any():
        raise DataError(f"{what} contains negative values")
    return np.ascontiguousarray(values)


@dataclass
class GeometryGrid:
    """Relative stopping-power block (dimensionless, water = 1)."""

    values: np.ndarray
    spacing: tuple[float, float, float] = (3.0, 1.0, 3.0)

    def __post_init__(self):
        self.values = _check_values(self.values, "geometry")
        self.spacing = tuple(float(s) for s in self.spacing)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape


@dataclass
class DoseGrid:
    """Dose block in Gy per 1e9 primaries, optionally tagged with its beam energy."""

    values: np.ndarray
    spacing: tuple[float, float, float] = (3.0, 1.0, 3.0)
    energy: float | None = None

    def __post_init__(self):
        self.values = _check_values(self.values, "dose")
        self.spacing = tuple(float(s) for s in self.spacing)
        if self.energy is not None:
            self.energy = float(self.energy)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape


def write_grid(path, values: np.ndarray, spacing, energy: float | None = None) -> Path:
    """Write a grid block to ``path`` in the DGRD format."""
    path = Path(path)
    values = np.ascontiguousarray(values, dtype=np.float32)
    if values.ndim != 3:
        raise DataError(f"can only write 3-D blocks, got shape {values.shape}")
    dims = values.shape
    sp = tuple(float(s) for s in spacing)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(GRID_MAGIC, GRID_VERSION, *dims, *sp))
        if energy is not None:
            fh.write(_ENERGY.pack(float(energy)))
        fh.write(values.astype("<f4", copy=False).tobytes())
    return path


def read_grid(path) -> tuple[np.ndarray, tuple[float, float, float], float | None]:
    """Read a DGRD file; returns (values, spacing, energy-or-None)."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read grid file {path}: {exc}") from exc
    if len(raw) < _HEADER.size:
        raise DataError(f"{path}: truncated header")
    magic, version, l, h, w, sz, sy, sx = _HEADER.unpack_from(raw)
    if magic != GRID_MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}, expected {GRID_MAGIC!r}")
    if version != GRID_VERSION:
        raise DataError(f"{path}: unsupported format version {version}")
    payload_bytes = l * h * w * 4
    rest = len(raw) - _HEADER.size
    if rest == payload_bytes:
        energy = None
        offset = _HEADER.size
    elif rest == payload_bytes + _ENERGY.size:
        (energy,) = _ENERGY.unpack_from(raw, _HEADER.size)
        offset = _HEADER.size + _ENERGY.size
    else:
        raise DataError(
            f"{path}: payload size {rest} does not match dims ({l}, {h}, {w})"
        )
    values = np.frombuffer(raw, dtype="<f4", count=l * h * w, offset=offset)
    values = values.reshape(l, h, w).copy()
    return values, (sz, sy, sx), energy


def write_geometry(path, grid: GeometryGrid) -> Path:
    return write_grid(path, grid.values, grid.spacing)


def write_dose(path, grid: DoseGrid) -> Path:
    if grid.energy is None:
        raise DataError("dose files carry the beam energy; none was set")
    return write_grid(path, grid.values, grid.spacing, energy=grid.energy)


def read_geometry(path) -> GeometryGrid:
    values, spacing, energy = read_grid(path)
    if energy is not None:
        raise DataError(f"{path}: expected a geometry file, found a dose file")
    return GeometryGrid(values, spacing)


def read_dose(path) -> DoseGrid:
    values, spacing, energy = read_grid(path)
    if energy is None:
        raise DataError(f"{path}: expected a dose file, found a geometry file")
    return DoseGrid(values, spacing, energy)
