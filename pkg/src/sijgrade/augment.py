"""Geometric and elastic image augmentation for 2-D slices and ROI rectangles."""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Tuple

import numpy as np
from scipy import ndimage

Range = Tuple[float, float]


@dataclass(frozen=True)
class AugmentParams:
    scale: Range = (0.85, 1.15)
    rotation_deg: Range = (-10.0, 10.0)
    width_shift: Range = (-0.10, 0.10)   # fraction of image width
    height_shift: Range = (0.0, 0.01)    # fraction of image height
    elastic: bool = False
    elastic_amplitude: float = 1.0       # px, uniform per-pixel displacement
    elastic_sigma: float = 10.0
    elastic_alpha: float = 5.0

    def __post_init__(self):
        for name in ("scale", "rotation_deg", "width_shift", "height_shift"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} range is inverted: {(lo, hi)}")
        if self.scale[0] <= 0:
            raise ValueError("scale must stay positive")
        if self.elastic and self.elastic_sigma <= 0:
            raise ValueError("elastic sigma must be > 0")

    @classmethod
    def roi(cls) -> "AugmentParams":
        """Augmentation used while training the voxel classifier."""
        return cls(rotation_deg=(-2.0, 2.0), height_shift=(-0.01, 0.01), elastic=True)

    @classmethod
    def slice(cls) -> "AugmentParams":
        """Augmentation used while training the slice grader and the case forest."""
        return cls()

    @classmethod
    def identity(cls) -> "AugmentParams":
        return cls(scale=(1.0, 1.0), rotation_deg=(0.0, 0.0), width_shift=(0.0, 0.0),
                   height_shift=(0.0, 0.0), elastic=False)

    def with_(self, **kw) -> "AugmentParams":
        return replace(self, **kw)


@dataclass(frozen=True)
class AffineDraw:
    scale: float
    rotation_deg: float
    shift_x: float  # fraction of width
    shift_y: float  # fraction of height

    @property
    def is_identity(self) -> bool:
        return (self.scale == 1.0 and self.rotation_deg == 0.0
                and self.shift_x == 0.0 and self.shift_y == 0.0)


def draw_affine(aug: AugmentParams, rng: np.random.Generator) -> AffineDraw:
    return AffineDraw(
        float(rng.uniform(*aug.scale)),
        float(rng.uniform(*aug.rotation_deg)),
        float(rng.uniform(*aug.width_shift)),
        float(rng.uniform(*aug.height_shift)),
    )


def _affine_matrix(draw: AffineDraw, shape) -> Tuple[np.ndarray, np.ndarray]:
    """Output->input mapping (row, col) for scale -> rotate -> translate about the center."""
    h, w = shape
    c = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    t = np.array([draw.shift_y * h, draw.shift_x * w])
    a = np.deg2rad(draw.rotation_deg)
    # forward map in (row, col): p' = R S (p - c) + c + t
    rot = np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]])
    fwd = rot * draw.scale
    inv = np.linalg.inv(fwd)
    offset = c - inv @ (c + t)
    return inv, offset


def apply_affine(img: np.ndarray, draw: AffineDraw, order: int = 1) -> np.ndarray:
    """Warp the last two axes of ``img``; pixels mapped from outside the frame are 0."""
    img = np.asarray(img)
    if draw.is_identity:
        return img.astype(float, copy=True)
    inv, offset = _affine_matrix(draw, img.shape[-2:])
    flat = img.reshape((-1,) + img.shape[-2:]).astype(float)
    out = np.empty_like(flat)
    for i, ch in enumerate(flat):
        out[i] = ndimage.affine_transform(ch, inv, offset=offset, order=order,
                                          mode="constant", cval=0.0)
    return out.reshape(img.shape)


def augment_image(img: np.ndarray, aug: AugmentParams, rng: np.random.Generator) -> np.ndarray:
    """Random scale, rotation and translation (plus elastic warp if enabled)."""
    out = apply_affine(img, draw_affine(aug, rng))
    if aug.elastic:
        out = elastic_deform(out, aug.elastic_sigma, aug.elastic_alpha, rng,
                             amplitude=aug.elastic_amplitude)
    return out


def elastic_displacement(shape, sigma: float, alpha: float, rng: np.random.Generator,
                         amplitude: float = 1.0, smooth: bool = True) -> np.ndarray:
    """Per-axis displacement field of shape ``(2, h, w)``."""
    if sigma <= 0:
        raise ValueError("sigma must be > 0")
    field = rng.uniform(-amplitude, amplitude, size=(2,) + tuple(shape))
    if smooth:
        field = np.stack([ndimage.gaussian_filter(f, sigma) for f in field])
    return field * alpha


def warp(img: np.ndarray, disp: np.ndarray, order: int = 1) -> np.ndarray:
    img = np.asarray(img, dtype=float)
    h, w = img.shape[-2:]
    rr, cc = np.meshgrid(np.arange(h, dtype=float), np.arange(w, dtype=float), indexing="ij")
    coords = np.stack([rr + disp[0], cc + disp[1]])
    flat = img.reshape((-1, h, w))
    out = np.stack([ndimage.map_coordinates(ch, coords, order=order, mode="nearest")
                    for ch in flat])
    return out.reshape(img.shape)


def elastic_deform(img: np.ndarray, sigma: float = 10.0, alpha: float = 5.0,
                   rng: Optional[np.random.Generator] = None, amplitude: float = 1.0) -> np.ndarray:
    """Uniform random displacements, Gaussian-smoothed, scaled by ``alpha``, then warped."""
    if sigma <= 0:
        raise ValueError("sigma must be > 0")
    img = np.asarray(img, dtype=float)
    if alpha == 0:
        return img.copy()
    rng = rng if rng is not None else np.random.default_rng()
    disp = elastic_displacement(img.shape[-2:], sigma, alpha, rng, amplitude)
    return warp(img, disp)
