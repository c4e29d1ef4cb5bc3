"""Thresholding, connected components, axis-wise closing and slice hulls."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .volume import BinaryMask, CtVolume

UPPER_HU = 1300
LOWER_RANGE = (150.0, 500.0)
N_CANDIDATES = 22
CLOSING_DIAMETER = 7

_STRUCT_26 = np.ones((3, 3, 3), dtype=bool)
_STRUCT_8 = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True, eq=False)
class LabelGrid:
    dims: Tuple[int, int, int]
    spacing: Tuple[float, float, float]
    labels: np.ndarray
    count: int
    sizes: np.ndarray  # sizes[i] is the voxel count of label i + 1


@dataclass(frozen=True)
class Polygon2D:
    """Convex CCW polygon in world mm. Fewer than three vertices means degenerate."""

    vertices: Tuple[Tuple[float, float], ...]

    @property
    def degenerate(self) -> bool:
        return len(self.vertices) < 3

    def as_array(self) -> np.ndarray:
        return np.asarray(self.vertices, dtype=float).reshape(-1, 2)


def threshold_mask(vol: CtVolume, lo: float, hi: float) -> BinaryMask:
    if lo > hi:
        raise ValueError(f"lower threshold {lo} > upper threshold {hi}")
    v = vol.voxels
    return BinaryMask.like(vol, (v >= lo) & (v <= hi))


def connected_components(mask: BinaryMask) -> LabelGrid:
    """26-connected labeling; labels follow first encounter in x-fastest scan order."""
    labels, count = ndimage.label(mask.bits, structure=_STRUCT_26)
    sizes = np.bincount(labels.ravel(), minlength=count + 1)[1:]
    return LabelGrid(mask.dims, mask.spacing, labels, int(count), sizes)


def count_components(bits: np.ndarray) -> int:
    return int(ndimage.label(bits, structure=_STRUCT_26)[1])


def _check_diameter(diameter: int) -> int:
    if int(diameter) != diameter or diameter < 1 or diameter % 2 == 0:
        raise ValueError(f"closing diameter must be a positive odd integer, got {diameter}")
    return int(diameter)


def close_bits(bits: np.ndarray, diameter: int) -> np.ndarray:
    """Sequential 1-D closings along x, y, z of a ``(nz, ny, nx)`` boolean array."""
    diameter = _check_diameter(diameter)
    if diameter == 1 or not bits.any():
        return bits.copy()
    r = diameter // 2
    # zero padding by the radius keeps closing extensive at the borders
    out = np.pad(bits, r)
    for axis in (2, 1, 0):
        shape = [1, 1, 1]
        shape[axis] = diameter
        se = np.ones(shape, bool)
        out = ndimage.binary_dilation(out, structure=se)
        out = ndimage.binary_erosion(out, structure=se, border_value=0)
    return out[r:-r, r:-r, r:-r]


def close_mask(mask: BinaryMask, diameter_voxels: int = CLOSING_DIAMETER) -> BinaryMask:
    return BinaryMask.like(mask, close_bits(mask.bits, diameter_voxels))


def candidate_thresholds(lo: float = LOWER_RANGE[0], hi: float = LOWER_RANGE[1],
                         n: int = N_CANDIDATES) -> np.ndarray:
    return np.linspace(lo, hi, n)


def _bbox(bits: np.ndarray, pad: int = 0):
    idx = [np.flatnonzero(bits.any(axis=tuple(a for a in range(3) if a != ax)))
           for ax in range(3)]
    if any(len(i) == 0 for i in idx):
        return None
    return tuple(
        slice(max(0, i[0] - pad), min(n, i[-1] + 1 + pad))
        for i, n in zip(idx, bits.shape)
    )


def candidate_component_counts(vol: CtVolume, candidates=None, upper: float = UPPER_HU):
    """Component count of the raw thresholded mask at each candidate lower threshold."""
    if candidates is None:
        candidates = candidate_thresholds()
    candidates = np.asarray(candidates, dtype=float)
    v = vol.voxels
    # candidate masks are nested inside the loosest one, so its bounding box suffices
    loosest = (v >= candidates.min()) & (v <= upper)
    box = _bbox(loosest)
    if box is None:
        return np.zeros(len(candidates), dtype=int)
    sub = v[box]
    return np.array([count_components((sub >= c) & (sub <= upper)) for c in candidates])


def adaptive_skeleton_segment(vol: CtVolume, candidates=None, upper: float = UPPER_HU,
                              diameter: int = CLOSING_DIAMETER):
    """Pick the lower HU threshold giving the fewest components, then close.

    Returns ``(lower, mask)``. Ties go to the smallest candidate.
    """
    if candidates is None:
        candidates = candidate_thresholds()
    candidates = np.asarray(candidates, dtype=float)
    counts = candidate_component_counts(vol, candidates, upper)
    best = int(np.argmin(counts))  # argmin returns the first minimum
    lower = float(candidates[best])
    v = vol.voxels
    raw = (v >= lower) & (v <= upper)
    r = _check_diameter(diameter) // 2
    box = _bbox(raw, pad=r)
    closed = np.zeros_like(raw)
    if box is not None:
        closed[box] = close_bits(raw[box], diameter)
    return lower, BinaryMask.like(vol, closed)


# --- planar geometry -------------------------------------------------------

def _cross(o, a, b) -> float:
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def convex_hull_2d(points) -> Polygon2D:
    """Andrew's monotone chain; collinear boundary points are dropped."""
    pts = sorted(set((float(x), float(y)) for x, y in np.asarray(points, float).reshape(-1, 2)))
    if len(pts) < 3:
        return Polygon2D(tuple(pts))
    lower: List[Tuple[float, float]] = []
    for p in pts:
        while len(lower) >= 2 and _cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper: List[Tuple[float, float]] = []
    for p in reversed(pts):
        while len(upper) >= 2 and _cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    hull = lower[:-1] + upper[:-1]
    return Polygon2D(tuple(hull))


def slice_points(mask: BinaryMask, z: int) -> np.ndarray:
    """World (x, y) centers of the set voxels of slice ``z``."""
    nz = mask.dims[2]
    if not 0 <= z < nz:
        raise IndexError(f"slice {z} outside [0, {nz})")
    ys, xs = np.nonzero(mask.bits[z])
    sx, sy, _ = mask.spacing
    return np.stack([xs * sx, ys * sy], axis=1).astype(float)


def _row_extremes(plane: np.ndarray, sx: float, sy: float) -> np.ndarray:
    # the hull of a raster set equals the hull of each row's leftmost/rightmost pixel
    rows = np.flatnonzero(plane.any(axis=1))
    if len(rows) == 0:
        return np.zeros((0, 2))
    sub = plane[rows]
    first = sub.argmax(axis=1)
    last = sub.shape[1] - 1 - sub[:, ::-1].argmax(axis=1)
    xs = np.concatenate([first, last])
    ys = np.concatenate([rows, rows])
    return np.stack([xs * sx, ys * sy], axis=1).astype(float)


def slice_convex_hull(mask: BinaryMask, z: int) -> Polygon2D:
    nz = mask.dims[2]
    if not 0 <= z < nz:
        raise IndexError(f"slice {z} outside [0, {nz})")
    sx, sy, _ = mask.spacing
    return convex_hull_2d(_row_extremes(mask.bits[z], sx, sy))


def hull_width(poly: Polygon2D) -> float:
    """Left-right (x) extent of the polygon in mm."""
    if not poly.vertices:
        return 0.0
    xs = [v[0] for v in poly.vertices]
    return float(max(xs) - min(xs))


def point_in_polygon(poly: Polygon2D, p, eps: float = 1e-9) -> bool:
    """Inside-or-on-boundary test for a convex CCW polygon."""
    px, py = float(p[0]), float(p[1])
    verts = poly.vertices
    if not verts:
        return False
    if len(verts) == 1:
        return math.isclose(px, verts[0][0], abs_tol=eps) and math.isclose(py, verts[0][1], abs_tol=eps)
    if len(verts) == 2:
        (ax, ay), (bx, by) = verts
        if abs(_cross(verts[0], verts[1], (px, py))) > eps * max(1.0, math.hypot(bx - ax, by - ay)):
            return False
        return (min(ax, bx) - eps <= px <= max(ax, bx) + eps
                and min(ay, by) - eps <= py <= max(ay, by) + eps)
    n = len(verts)
    for i in range(n):
        a, b = verts[i], verts[(i + 1) % n]
        scale = max(1.0, math.hypot(b[0] - a[0], b[1] - a[1]))
        if _cross(a, b, (px, py)) < -eps * scale:
            return False
    return True


def points_in_polygon(poly: Polygon2D, pts: np.ndarray, eps: float = 1e-9) -> np.ndarray:
    """Vectorized :func:`point_in_polygon` for an ``(n, 2)`` array."""
    pts = np.asarray(pts, float).reshape(-1, 2)
    if poly.degenerate:
        return np.array([point_in_polygon(poly, p, eps) for p in pts], dtype=bool)
    v = poly.as_array()
    a = v
    b = np.roll(v, -1, axis=0)
    edge = b - a
    scale = np.maximum(1.0, np.hypot(edge[:, 0], edge[:, 1]))
    rel_x = pts[:, None, 0] - a[None, :, 0]
    rel_y = pts[:, None, 1] - a[None, :, 1]
    cross = edge[None, :, 0] * rel_y - edge[None, :, 1] * rel_x
    return np.all(cross >= -eps * scale[None, :], axis=1)
