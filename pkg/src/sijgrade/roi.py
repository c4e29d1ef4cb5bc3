"""Pelvis ROI heuristics, SIJ voxel masks, coccyx localization and ROI rectangles."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Protocol, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .forest import Forest
from .morphology import (
    Polygon2D,
    connected_components,
    hull_width,
    points_in_polygon,
    slice_convex_hull,
)
from .volume import BinaryMask, CtVolume, check_compatible, write_container

WIDTH_JUMP = 1.3
MARGIN_MM = 30.0
PROB_CUTOFF = 0.5
MIN_COMPONENT_MM3 = 2.0
POSTERIOR_FRACTION = 0.01
RECT_MM = (50.0, 25.0)      # x extent (columns), y extent (rows)
RECT_PX = (100, 200)        # rows, columns
HU_WINDOW = (-200.0, 1300.0)


class PipelineError(RuntimeError):
    """A pipeline stage could not produce its output."""

    stage = "pipeline"
    exit_code = 1

    def __init__(self, message: str, stage: Optional[str] = None):
        super().__init__(message)
        if stage is not None:
            self.stage = stage

    def __str__(self):
        return f"[{self.stage}] {super().__str__()}"


class PelvisNotFound(PipelineError):
    stage = "pelvis-roi"
    exit_code = 3


class SijNotFound(PipelineError):
    stage = "roi-refinement"
    exit_code = 4


class CoccyxAmbiguous(PipelineError):
    stage = "coccyx"
    exit_code = 5


@dataclass(frozen=True)
class PelvisRoi:
    z_top: int
    z_bottom: int
    reference_hull: Polygon2D


class VoxelClassifier(Protocol):
    """Maps a (previous, current, next) HU slice triplet to an SIJ probability map."""

    trained: bool

    def predict(self, triplet: np.ndarray) -> np.ndarray: ...


# --- stage 1: pelvis ROI ---------------------------------------------------

def compute_pelvis_roi(skeleton: BinaryMask, spacing=None, width_jump: float = WIDTH_JUMP,
                       margin_mm: float = MARGIN_MM) -> PelvisRoi:
    """Locate the pelvis slab from per-slice hull widths of the skeleton."""
    spacing = tuple(spacing) if spacing is not None else skeleton.spacing
    nz = skeleton.dims[2]
    occupied = np.flatnonzero(skeleton.bits.any(axis=(1, 2)))
    if len(occupied) == 0:
        raise PelvisNotFound("skeleton segmentation is empty")
    z_top = None
    prev_w = None
    for z in range(int(occupied[0]), nz):
        if not skeleton.bits[z].any():
            continue
        w = hull_width(slice_convex_hull(skeleton, z))
        if prev_w is not None and w > width_jump * prev_w:
            z_top = z
            break
        prev_w = w
    if z_top is None:
        raise PelvisNotFound(f"pelvis not found: no slice widens by more than "
                             f"{(width_jump - 1) * 100:.0f}%")
    ref_z = z_top + 1 if z_top + 1 < nz and skeleton.bits[z_top + 1].any() else z_top
    ref = slice_convex_hull(skeleton, ref_z)
    sx, sy, sz = spacing
    z_empty = -1
    for z in range(z_top, -1, -1):
        ys, xs = np.nonzero(skeleton.bits[z])
        if len(xs) == 0:
            z_empty = z
            break
        pts = np.stack([xs * sx, ys * sy], axis=1)
        if not points_in_polygon(ref, pts).any():
            z_empty = z
            break
    z_bottom = max(0, z_empty - int(math.ceil(margin_mm / sz)))
    return PelvisRoi(int(z_top), int(z_bottom), ref)


def slab_bits(grid, roi: PelvisRoi) -> np.ndarray:
    nx, ny, nz = grid.dims
    bits = np.zeros((nz, ny, nx), bool)
    bits[roi.z_bottom:roi.z_top + 1] = True
    return bits


def triplet(vol: CtVolume, z: int) -> np.ndarray:
    """(previous, current, next) slices, replicating the volume's edge slices."""
    nz = vol.dims[2]
    zs = [min(max(z + d, 0), nz - 1) for d in (-1, 0, 1)]
    return vol.voxels[zs]


def initial_sij_mask(vol: CtVolume, roi: PelvisRoi, clf, cutoff: float = PROB_CUTOFF) -> BinaryMask:
    """Run the voxel classifier on every slab slice and threshold its probabilities."""
    if not getattr(clf, "trained", False):
        raise ValueError("voxel classifier is not trained")
    nx, ny, nz = vol.dims
    out = np.zeros((nz, ny, nx), bool)
    zs = list(range(roi.z_bottom, roi.z_top + 1))
    if hasattr(clf, "predict_batch"):
        probs = clf.predict_batch(np.stack([triplet(vol, z) for z in zs]))
    else:
        probs = [clf.predict(triplet(vol, z)) for z in zs]
    for z, p in zip(zs, probs):
        p = np.asarray(p)
        if p.shape != (ny, nx):
            raise ValueError(f"classifier returned shape {p.shape}, expected {(ny, nx)}")
        out[z] = p >= cutoff
    return BinaryMask.like(vol, out)


# --- stage 2: refinement ---------------------------------------------------

def features_for(zyx: np.ndarray, coccyx, grid, hu: Optional[np.ndarray] = None) -> np.ndarray:
    """Direction (unit x, y, z) and distance in mm from the coccyx, for ``(n, 3)`` indices."""
    zyx = np.asarray(zyx).reshape(-1, 3)
    sx, sy, sz = grid.spacing
    d = np.stack([zyx[:, 2] * sx - coccyx[0], zyx[:, 1] * sy - coccyx[1],
                  zyx[:, 0] * sz - coccyx[2]], axis=1)
    dist = np.sqrt((d * d).sum(axis=1))
    unit = np.divide(d, dist[:, None], out=np.zeros_like(d), where=dist[:, None] > 0)
    feats = np.concatenate([unit, dist[:, None]], axis=1)
    if hu is not None:
        feats = np.concatenate([feats, np.asarray(hu, float).reshape(-1, 1)], axis=1)
    return feats


def voxel_features(p, coccyx, vol, use_hu: bool = False) -> np.ndarray:
    """Feature vector of voxel ``p = (i, j, k)`` relative to the coccyx point."""
    i, j, k = p
    hu = np.array([vol.voxels[k, j, i]]) if use_hu else None
    return features_for(np.array([[k, j, i]]), coccyx, vol, hu)[0]


def posterior_centroid(bits: np.ndarray, grid, fraction: float = POSTERIOR_FRACTION):
    """Centroid (world mm) of the most posterior (largest y) ``fraction`` of set voxels.

    Every voxel tied with the cutoff y is included, so the result does not
    depend on scan order.
    """
    zyx = np.argwhere(bits)
    if len(zyx) == 0:
        return None
    n = max(1, int(math.ceil(fraction * len(zyx))))
    ys = zyx[:, 1]
    cutoff = np.partition(ys, len(ys) - n)[len(ys) - n]
    sel = zyx[ys >= cutoff]
    sx, sy, sz = grid.spacing
    c = sel.mean(axis=0)
    return (float(c[2] * sx), float(c[1] * sy), float(c[0] * sz))


def rf_positive(rf: Forest, zyx: np.ndarray, coccyx, vol, use_hu: bool = False) -> np.ndarray:
    if len(zyx) == 0:
        return np.zeros(0, bool)
    hu = vol.voxels[zyx[:, 0], zyx[:, 1], zyx[:, 2]] if use_hu else None
    feats = features_for(zyx, coccyx, vol, hu)
    return rf.predict(feats) == 1


@dataclass
class CoccyxCandidates:
    points: Tuple[Optional[Tuple[float, float, float]], ...]
    intersections: Tuple[int, ...]
    chosen: int


def coccyx_candidates(skeleton: BinaryMask, roi: PelvisRoi, initial: BinaryMask, rf: Forest,
                      vol: Optional[CtVolume] = None, fraction: float = POSTERIOR_FRACTION,
                      use_hu: bool = False) -> CoccyxCandidates:
    check_compatible(skeleton, initial)
    if not initial.any():
        raise CoccyxAmbiguous("initial SIJ mask is empty")
    slab = skeleton.bits & slab_bits(skeleton, roi)
    points = (posterior_centroid(slab, skeleton, fraction),
              posterior_centroid(skeleton.bits, skeleton, fraction))
    # only voxels of the initial mask can land in the intersection
    zyx = np.argwhere(initial.bits & slab_bits(skeleton, roi))
    grid = vol if vol is not None else skeleton
    inter = []
    for p in points:
        if p is None:
            inter.append(0)
            continue
        inter.append(int(np.count_nonzero(rf_positive(rf, zyx, p, grid, use_hu))))
    if max(inter) == 0:
        raise CoccyxAmbiguous("coccyx ambiguous: no candidate yields SIJ voxels")
    chosen = 0 if inter[0] >= inter[1] else 1
    return CoccyxCandidates(points, tuple(inter), chosen)


def locate_coccyx(skeleton: BinaryMask, roi: PelvisRoi, initial: BinaryMask, rf: Forest,
                  vol: Optional[CtVolume] = None, fraction: float = POSTERIOR_FRACTION,
                  use_hu: bool = False):
    c = coccyx_candidates(skeleton, roi, initial, rf, vol, fraction, use_hu)
    return c.points[c.chosen]


def refine_sij_mask(initial: BinaryMask, coccyx, rf: Forest, vol: CtVolume,
                    min_volume_mm3: float = MIN_COMPONENT_MM3, use_hu: bool = False) -> BinaryMask:
    """Keep forest-positive voxels of the initial mask, minus components under the volume floor."""
    check_compatible(initial, vol)
    zyx = np.argwhere(initial.bits)
    keep = np.zeros_like(initial.bits)
    pos = rf_positive(rf, zyx, coccyx, vol, use_hu)
    sel = zyx[pos]
    keep[sel[:, 0], sel[:, 1], sel[:, 2]] = True
    cc = connected_components(BinaryMask.like(initial, keep))
    voxel_mm3 = float(np.prod(vol.spacing))
    big = np.concatenate([[False], cc.sizes * voxel_mm3 >= min_volume_mm3])
    keep = big[cc.labels]
    if not keep.any():
        raise SijNotFound("SIJ not found: refined mask is empty")
    return BinaryMask.like(initial, keep)


# --- stage 3 input: half-slice rectangles ---------------------------------

@dataclass(frozen=True)
class RectGeometry:
    center: Tuple[float, float]
    width_mm: float = RECT_MM[0]
    height_mm: float = RECT_MM[1]
    z: Optional[int] = None


@dataclass(eq=False)
class RectSample:
    side: str
    z: int
    center: Tuple[float, float]
    pixels: np.ndarray
    case_id: str = ""
    grade: Optional[int] = None
    size_mm: Tuple[float, float] = RECT_MM

    @property
    def geometry(self) -> RectGeometry:
        return RectGeometry(self.center, self.size_mm[0], self.size_mm[1], self.z)


def mid_x(grid) -> float:
    return (grid.dims[0] - 1) * grid.spacing[0] / 2.0


def side_centroids(bits: np.ndarray, grid) -> Dict[Tuple[int, str], Tuple[float, float]]:
    """Per (slice, side) centroid in world (x, y) mm of the set voxels."""
    sx, sy, _ = grid.spacing
    mid = mid_x(grid)
    out = {}
    for z in np.flatnonzero(bits.any(axis=(1, 2))):
        ys, xs = np.nonzero(bits[z])
        wx = xs * sx
        for side, sel in (("right", wx < mid), ("left", wx > mid)):
            if sel.any():
                out[(int(z), side)] = (float(wx[sel].mean()), float(ys[sel].mean() * sy))
    return out


def normalize_hu(values, window=HU_WINDOW) -> np.ndarray:
    lo, hi = window
    return (np.clip(values, lo, hi) - lo) / (hi - lo)


def sample_rect(vol: CtVolume, z: int, center, side: str, size_mm=RECT_MM, shape=RECT_PX,
                window=HU_WINDOW) -> np.ndarray:
    """Bilinear resample of an axis-aligned rectangle, normalized to [0, 1]."""
    rows, cols = shape
    w, h = size_mm
    sx, sy, _ = vol.spacing
    px, py = w / cols, h / rows
    xs = center[0] + (np.arange(cols) - (cols - 1) / 2.0) * px
    ys = center[1] + (np.arange(rows) - (rows - 1) / 2.0) * py
    yy, xx = np.meshgrid(ys / sy, xs / sx, indexing="ij")
    plane = vol.voxels[z].astype(float)
    vals = ndimage.map_coordinates(plane, [yy, xx], order=1, mode="nearest")
    pix = normalize_hu(vals, window)
    if side == "left":
        pix = pix[:, ::-1]
    return np.ascontiguousarray(pix, dtype=np.float32)


def extract_half_slice_rects(vol: CtVolume, refined: BinaryMask, case_id: str = "",
                             size_mm=RECT_MM, shape=RECT_PX, window=HU_WINDOW) -> List[RectSample]:
    """One rectangle per (slice, side) with refined voxels, ordered by slice then side."""
    check_compatible(vol, refined)
    if not refined.any():
        raise SijNotFound("refined SIJ mask is empty")
    cents = side_centroids(refined.bits, refined)
    out = []
    for (z, side), c in sorted(cents.items(), key=lambda kv: (kv[0][0], kv[0][1] != "right")):
        out.append(RectSample(side, z, c, sample_rect(vol, z, c, side, size_mm, shape, window),
                              case_id, None, tuple(size_mm)))
    return out


def rects_by_side(rects: Sequence[RectSample]) -> Dict[str, List[RectSample]]:
    out: Dict[str, List[RectSample]] = {"left": [], "right": []}
    for r in rects:
        out[r.side].append(r)
    for side in out:
        out[side].sort(key=lambda r: r.z)
    return out


def save_rect_batch(rects: Sequence[RectSample], path) -> None:
    """u8 container (x255 quantized, one 200x100 plane per rectangle) plus a JSON sidecar."""
    if not rects:
        raise ValueError("no rectangles to save")
    rows, cols = rects[0].pixels.shape
    stack = np.stack([np.rint(np.clip(r.pixels, 0, 1) * 255) for r in rects]).astype(np.uint8)
    write_container(path, (cols, rows, len(rects)), (1.0, 1.0, 1.0), stack, "u8")
    side = [{"case": r.case_id, "side": r.side, "z": int(r.z), "center": list(r.center),
             "grade": r.grade} for r in rects]
    Path(path).with_suffix(".rects.json").write_text(json.dumps(side, indent=1))


def load_rect_batch(path) -> List[RectSample]:
    from .volume import read_container

    _, _, dtype, arr = read_container(path)
    if dtype != "u8":
        raise ValueError("rectangle batches are stored as u8")
    meta = json.loads(Path(path).with_suffix(".rects.json").read_text())
    return [RectSample(m["side"], m["z"], tuple(m["center"]), arr[i].astype(np.float32) / 255.0,
                       m["case"], m["grade"]) for i, m in enumerate(meta)]
