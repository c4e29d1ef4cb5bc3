"""Volumetric data model and the header+raw container format.

Arrays are held as ``(nz, ny, nx)`` numpy arrays in C order, so the flat
memory layout is x-fastest, then y, then z, which is exactly the on-disk
sample order. Orientation is fixed LPS with the origin at voxel (0, 0, 0).
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Tuple, Union

import numpy as np

HU_MIN = -1024
HU_MAX = 3071

_DTYPES = {"i16": np.dtype("<i2"), "u8": np.dtype("u1")}

PathLike = Union[str, os.PathLike]


class VolumeFormatError(ValueError):
    """Raised when a container header or payload is malformed."""


def _check_geometry(dims, spacing):
    dims = tuple(int(d) for d in dims)
    spacing = tuple(float(s) for s in spacing)
    if len(dims) != 3 or len(spacing) != 3:
        raise ValueError("dims and spacing must have three components")
    if min(dims) < 1:
        raise ValueError(f"dims must be >= 1, got {dims}")
    if not all(np.isfinite(s) and s > 0 for s in spacing):
        raise ValueError(f"spacing must be > 0, got {spacing}")
    return dims, spacing


@dataclass(frozen=True, eq=False)
class CtVolume:
    """Hounsfield-unit CT grid. ``dims`` is (nx, ny, nz); ``voxels`` is (nz, ny, nx) int16."""

    dims: Tuple[int, int, int]
    spacing: Tuple[float, float, float]
    voxels: np.ndarray

    def __post_init__(self):
        dims, spacing = _check_geometry(self.dims, self.spacing)
        vox = np.asarray(self.voxels)
        nx, ny, nz = dims
        if vox.size != nx * ny * nz:
            raise ValueError(f"voxel count {vox.size} != {nx}*{ny}*{nz}")
        vox = vox.reshape(nz, ny, nx)
        if vox.min() < HU_MIN or vox.max() > HU_MAX:
            raise ValueError("HU values outside [-1024, 3071]")
        vox = np.ascontiguousarray(vox, dtype=np.int16)
        vox.setflags(write=False)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "voxels", vox)

    @property
    def shape(self):
        return self.voxels.shape

    def same_as(self, other: "CtVolume") -> bool:
        return (
            self.dims == other.dims
            and self.spacing == other.spacing
            and np.array_equal(self.voxels, other.voxels)
        )


@dataclass(frozen=True, eq=False)
class BinaryMask:
    """One boolean per voxel, grid-compatible with a :class:`CtVolume`."""

    dims: Tuple[int, int, int]
    spacing: Tuple[float, float, float]
    bits: np.ndarray

    def __post_init__(self):
        dims, spacing = _check_geometry(self.dims, self.spacing)
        nx, ny, nz = dims
        bits = np.asarray(self.bits)
        if bits.size != nx * ny * nz:
            raise ValueError(f"mask size {bits.size} != {nx}*{ny}*{nz}")
        bits = np.ascontiguousarray(bits.reshape(nz, ny, nx), dtype=bool)
        bits.setflags(write=False)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "bits", bits)

    @classmethod
    def like(cls, grid, bits) -> "BinaryMask":
        return cls(grid.dims, grid.spacing, bits)

    @classmethod
    def empty(cls, grid) -> "BinaryMask":
        nx, ny, nz = grid.dims
        return cls(grid.dims, grid.spacing, np.zeros((nz, ny, nx), bool))

    def count(self) -> int:
        return int(np.count_nonzero(self.bits))

    def any(self) -> bool:
        return bool(self.bits.any())

    def same_as(self, other: "BinaryMask") -> bool:
        return (
            self.dims == other.dims
            and self.spacing == other.spacing
            and np.array_equal(self.bits, other.bits)
        )


def check_compatible(a, b) -> None:
    """Raise unless two grids share dims and spacing."""
    if tuple(a.dims) != tuple(b.dims) or tuple(a.spacing) != tuple(b.spacing):
        raise ValueError(
            f"grid mismatch: dims {a.dims} vs {b.dims}, spacing {a.spacing} vs {b.spacing}"
        )


# --- coordinates -----------------------------------------------------------

def index_to_world(grid, idx: Sequence[float]) -> Tuple[float, float, float]:
    """Voxel index (i, j, k) to world mm; out-of-grid indices are allowed."""
    sx, sy, sz = grid.spacing
    i, j, k = idx
    return (i * sx, j * sy, k * sz)


def world_to_index(grid, point: Sequence[float]) -> Tuple[int, int, int]:
    """Nearest voxel index of a world point; raises if it falls outside the grid."""
    idx = tuple(int(np.rint(p / s)) for p, s in zip(point, grid.spacing))
    if any(i < 0 or i >= n for i, n in zip(idx, grid.dims)):
        raise IndexError(f"world point {tuple(point)} maps outside grid {grid.dims}")
    return idx


def voxel_centers(grid, zyx: np.ndarray) -> np.ndarray:
    """World (x, y, z) mm of an ``(n, 3)`` array of (z, y, x) indices."""
    zyx = np.asarray(zyx)
    sx, sy, sz = grid.spacing
    return np.stack([zyx[:, 2] * sx, zyx[:, 1] * sy, zyx[:, 0] * sz], axis=1)


# --- container I/O ---------------------------------------------------------

def _pair_paths(path: PathLike) -> Tuple[Path, Path]:
    p = Path(path)
    if p.suffix in (".json", ".raw"):
        p = p.with_suffix("")
    return p.with_suffix(".json"), p.with_suffix(".raw")


def _header_bytes(dims, spacing, dtype: str) -> bytes:
    header = {
        "dims": list(dims),
        "spacing_mm": [float(s) for s in spacing],
        "dtype": dtype,
        "order": "x-fastest",
    }
    return (json.dumps(header, indent=2) + "\n").encode("ascii")


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def write_container(path: PathLike, dims, spacing, array: np.ndarray, dtype: str) -> None:
    if dtype not in _DTYPES:
        raise VolumeFormatError(f"unsupported dtype {dtype!r}")
    header_path, raw_path = _pair_paths(path)
    header_path.parent.mkdir(parents=True, exist_ok=True)
    payload = np.ascontiguousarray(array, dtype=_DTYPES[dtype]).tobytes()
    _atomic_write(raw_path, payload)
    _atomic_write(header_path, _header_bytes(dims, spacing, dtype))


def read_container(path: PathLike):
    """Return ``(dims, spacing, dtype_name, array(nz, ny, nx))``."""
    header_path, raw_path = _pair_paths(path)
    if not header_path.exists():
        raise FileNotFoundError(header_path)
    if not raw_path.exists():
        raise FileNotFoundError(raw_path)
    try:
        header = json.loads(header_path.read_text())
    except json.JSONDecodeError as exc:
        raise VolumeFormatError(f"bad header {header_path}: {exc}") from exc
    for key in ("dims", "spacing_mm", "dtype"):
        if key not in header:
            raise VolumeFormatError(f"header missing {key!r}")
    if header.get("order", "x-fastest") != "x-fastest":
        raise VolumeFormatError(f"unsupported order {header['order']!r}")
    dtype = header["dtype"]
    if dtype not in _DTYPES:
        raise VolumeFormatError(f"unsupported dtype {dtype!r}")
    try:
        dims, spacing = _check_geometry(header["dims"], header["spacing_mm"])
    except ValueError as exc:
        raise VolumeFormatError(str(exc)) from exc
    nx, ny, nz = dims
    raw = raw_path.read_bytes()
    expected = nx * ny * nz * _DTYPES[dtype].itemsize
    if len(raw) != expected:
        raise VolumeFormatError(
            f"raw payload has {len(raw)} bytes, header implies {expected}"
        )
    arr = np.frombuffer(raw, dtype=_DTYPES[dtype]).reshape(nz, ny, nx)
    return dims, spacing, dtype, arr


def save_volume(vol: CtVolume, path: PathLike) -> None:
    write_container(path, vol.dims, vol.spacing, vol.voxels, "i16")


def load_volume(path: PathLike) -> CtVolume:
    dims, spacing, dtype, arr = read_container(path)
    if dtype != "i16":
        raise VolumeFormatError(f"expected an i16 volume, got {dtype}")
    return CtVolume(dims, spacing, arr.astype(np.int16))


def save_mask(mask: BinaryMask, path: PathLike) -> None:
    write_container(path, mask.dims, mask.spacing, mask.bits.astype(np.uint8), "u8")


def load_mask(path: PathLike) -> BinaryMask:
    dims, spacing, dtype, arr = read_container(path)
    if dtype != "u8":
        raise VolumeFormatError(f"expected a u8 mask, got {dtype}")
    return BinaryMask(dims, spacing, arr != 0)
