"""Synthetic pelvis phantoms with ground-truth SIJ labels and slice grades.

The geometry is deliberately schematic. Seen from above (x left-right, +y
posterior) every slice of the joint span holds a sacrum block between two
iliac blocks; each sacroiliac joint is the vertical interface at
``x = cx -/+ joint_offset``. Grades change what the interface looks like:

* 0 -- open 3 mm gap
* 1 -- 2.5 mm gap with blurred margins
* 2 -- 2 mm gap and a sclerotic (bright) rim
* 3 -- 1 mm gap, erosion notches and a lighter rim
* 4 -- bony bridging; only a faint residual line remains

Bottom to top (z increasing) the volume holds empty slices, the ischial
blocks, the joint span, two slices where ilium and sacrum are separated, and
the flared iliac wings whose hull is much wider than anything below them.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .case_grader import CaseGrade, rule_case_grade
from .volume import HU_MAX, HU_MIN, BinaryMask, CtVolume, save_mask, save_volume

SIDES = ("right", "left")  # right joint lies at smaller x (LPS: +x is patient-left)
GAP_MM = (3.0, 2.5, 2.0, 1.0, 0.0)


@dataclass
class PhantomSpec:
    dims: Tuple[int, int, int] = (240, 160, 44)
    spacing: Tuple[float, float, float] = (1.0, 1.0, 2.0)
    center: Tuple[float, float] = (120.0, 80.0)       # body center (x, y) in mm
    joint_offset: float = 24.0                        # |x| of each joint from the center
    ilium_width: float = 36.0
    flare_half_width: float = 90.0
    bone_start: int = 6                               # first slice holding bone (z_e + 1)
    ischium_slices: int = 6
    grades_right: Tuple[int, ...] = (0,) * 14
    grades_left: Tuple[int, ...] = (0,) * 14
    gap_mm: Tuple[float, ...] = GAP_MM
    rim_hu: float = 350.0
    bone_hu: float = 700.0
    bone_sigma: float = 80.0
    soft_hu: float = 40.0
    soft_sigma: float = 15.0
    air_hu: float = -1000.0
    noise_sigma: float = 20.0
    body_axes: Tuple[float, float] = (105.0, 70.0)
    coccyx: Optional[Tuple[float, float, float]] = None  # world mm; default behind the sacrum
    coccyx_radius: float = 9.0
    label_margin_mm: float = 4.0
    seed: int = 0

    # joint interface extends over this y range relative to the center
    JOINT_Y = (5.0, 35.0)

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.spacing = tuple(float(s) for s in self.spacing)
        self.center = tuple(float(c) for c in self.center)
        self.body_axes = tuple(float(a) for a in self.body_axes)
        self.grades_right = tuple(int(g) for g in self.grades_right)
        self.grades_left = tuple(int(g) for g in self.grades_left)
        self.gap_mm = tuple(float(g) for g in self.gap_mm)
        if self.coccyx is not None:
            self.coccyx = tuple(float(c) for c in self.coccyx)
        self.validate()

    @property
    def k(self) -> int:
        return len(self.grades_right)

    @property
    def span_start(self) -> int:
        return self.bone_start + self.ischium_slices

    @property
    def span(self) -> range:
        return range(self.span_start, self.span_start + self.k)

    @property
    def flare_z(self) -> int:
        return self.span_start + self.k + 2

    @property
    def coccyx_center(self) -> Tuple[float, float, float]:
        if self.coccyx is not None:
            return self.coccyx
        cx, cy = self.center
        return (cx, cy + 52.0, (self.span_start - 1) * self.spacing[2])

    def joint_x(self, side: str) -> float:
        return self.center[0] + (-1 if side == "right" else 1) * self.joint_offset

    def grades(self, side: str) -> Tuple[int, ...]:
        return self.grades_right if side == "right" else self.grades_left

    def validate(self) -> None:
        nx, ny, nz = self.dims
        sx, sy, sz = self.spacing
        if min(self.dims) < 1 or min(self.spacing) <= 0:
            raise ValueError("dims and spacing must be positive")
        if self.k < 1 or len(self.grades_left) != self.k:
            raise ValueError("left and right grade vectors must be non-empty and equally long")
        for g in self.grades_right + self.grades_left:
            if not 0 <= g <= 4:
                raise ValueError(f"slice grade {g} outside [0, 4]")
        if len(self.gap_mm) != 5 or any(a < b for a, b in zip(self.gap_mm, self.gap_mm[1:])):
            raise ValueError("gap widths must be five values, non-increasing with grade")
        cx, cy = self.center
        ax, ay = self.body_axes
        if cx - ax < 0 or cx + ax > (nx - 1) * sx or cy - ay < 0 or cy + ay > (ny - 1) * sy:
            raise ValueError("body outline does not fit the volume")
        if self.flare_half_width <= self.joint_offset + self.ilium_width:
            raise ValueError("flare must be wider than the iliac blocks")
        if self.flare_half_width >= ax:
            raise ValueError("flare wings leave the body outline")
        if self.bone_start < 1 or self.flare_z + 6 > nz:
            raise ValueError(f"z layout needs {self.flare_z + 6} slices, volume has {nz}")

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown phantom fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class PhantomCase:
    case_id: str
    spec: PhantomSpec
    volume: CtVolume
    label: BinaryMask
    grades: Dict[str, np.ndarray]
    case_grades: Dict[str, CaseGrade]
    diagnostics: dict

    @property
    def z_span(self) -> range:
        return self.spec.span

    def save(self, directory) -> dict:
        """Write volume, label and metadata; returns the manifest entry."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        vol_path, lab_path = d / f"{self.case_id}.json", d / f"{self.case_id}_label.json"
        save_volume(self.volume, vol_path)
        save_mask(self.label, lab_path)
        return {
            "id": self.case_id,
            "volume": vol_path.name,
            "label": lab_path.name,
            "grades": {s: [int(g) for g in self.grades[s]] for s in SIDES},
            "span": [self.spec.span_start, self.spec.span_start + self.spec.k],
            "case_grades": {s: self.case_grades[s].label for s in SIDES},
            "diagnostics": self.diagnostics,
            "spec": self.spec.to_dict(),
        }


# --- rendering --------------------------------------------------------------

def _coverage(x: np.ndarray, lo: float, hi: float, sx: float) -> np.ndarray:
    """Fraction of each voxel ``[x - sx/2, x + sx/2]`` covered by ``[lo, hi]``."""
    if hi <= lo:
        return np.zeros_like(x)
    return np.clip(np.minimum(x + sx / 2, hi) - np.maximum(x - sx / 2, lo), 0, None) / sx


def _joint_profile(grade: int, spec: PhantomSpec, xs: np.ndarray, ys: np.ndarray, side: str,
                   rng: np.random.Generator):
    """(gap coverage, HU offset on bone) over the (ny, nx) plane for one joint."""
    sx = spec.spacing[0]
    xj = spec.joint_x(side)
    half = spec.gap_mm[grade] / 2
    cov = np.broadcast_to(_coverage(xs, xj - half, xj + half, sx), (len(ys), len(xs))).copy()
    if grade == 1:
        cov = ndimage.gaussian_filter1d(cov, 0.6 / sx, axis=1)
    elif grade == 3:
        # erosion notches: short y stretches where the gap widens into the ilium
        lateral = -1 if side == "right" else 1
        y0, y1 = spec.center[1] + spec.JOINT_Y[0], spec.center[1] + spec.JOINT_Y[1]
        for _ in range(int(rng.integers(2, 4))):
            a = rng.uniform(y0, y1 - 5.0)
            rows = (ys >= a) & (ys <= a + rng.uniform(3.0, 5.0))
            lo, hi = sorted((xj, xj + lateral * (half + rng.uniform(1.5, 2.5))))
            cov[rows] = np.maximum(cov[rows], _coverage(xs, lo, hi, sx))
    elif grade == 4:
        cov = 0.25 * _coverage(xs, xj - 0.5, xj + 0.5, sx)[None, :].repeat(len(ys), 0)
    rim = np.zeros_like(cov)
    if grade in (2, 3):
        width = 3.0 if grade == 2 else 2.0
        boost = spec.rim_hu if grade == 2 else 0.6 * spec.rim_hu
        d = np.abs(xs - xj)
        rim[:] = np.where((d > half) & (d <= half + width), boost, 0.0)[None, :]
    return cov, rim


def _blocks(spec: PhantomSpec, z: int, X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """Clean bone occupancy of one slice (without joint gaps)."""
    cx, cy = spec.center
    J, W = spec.joint_offset, spec.ilium_width
    dx = X - cx
    ady = np.abs(dx)
    bone = np.zeros(X.shape, bool)
    if z < spec.bone_start or z > spec.flare_z + 5:
        return bone
    ilium = (ady >= J) & (ady <= J + W) & (Y >= cy - 15) & (Y <= cy + 35)
    sacrum = (ady <= J) & (Y >= cy + 5) & (Y <= cy + 36)
    if z < spec.span_start:                                    # ischia only
        return (ady >= J) & (ady <= J + W) & (Y >= cy - 15) & (Y <= cy + 20)
    if z < spec.span_start + spec.k:                           # joint span
        return ilium | sacrum
    if z < spec.flare_z:                                       # ilium pulled away from the sacrum
        return ((ady >= J + 8) & (ady <= J + W) & (Y >= cy - 15) & (Y <= cy + 35)) | sacrum
    wing = (ady >= J + 8) & (ady <= spec.flare_half_width) & (Y >= cy - 25) & (Y <= cy + 25)
    return wing | sacrum


def _coccyx_bits(spec: PhantomSpec, z: int, X, Y) -> np.ndarray:
    qx, qy, qz = spec.coccyx_center
    dz = z * spec.spacing[2] - qz
    r2 = spec.coccyx_radius ** 2 - dz * dz
    if r2 < 0:
        return np.zeros(X.shape, bool)
    return (X - qx) ** 2 + (Y - qy) ** 2 <= r2


def render(spec: PhantomSpec):
    """Clean HU, bone fraction, body mask and SIJ label, each shaped ``(nz, ny, nx)``."""
    nx, ny, nz = spec.dims
    sx, sy, _ = spec.spacing
    xs, ys = np.arange(nx) * sx, np.arange(ny) * sy
    Y, X = np.meshgrid(ys, xs, indexing="ij")
    cx, cy = spec.center
    ax, ay = spec.body_axes
    body = ((X - cx) / ax) ** 2 + ((Y - cy) / ay) ** 2 <= 1.0
    rng = np.random.default_rng([spec.seed, 1])
    bone_frac = np.zeros((nz, ny, nx), np.float32)
    rim = np.zeros((nz, ny, nx), np.float32)
    label = np.zeros((nz, ny, nx), bool)
    y0, y1 = cy + spec.JOINT_Y[0], cy + spec.JOINT_Y[1]
    jrows = (ys >= y0) & (ys <= y1)
    for z in range(nz):
        frac = _blocks(spec, z, X, Y).astype(np.float32)
        if z in spec.span:
            i = z - spec.span_start
            for side in SIDES:
                g = spec.grades(side)[i]
                cov, boost = _joint_profile(g, spec, xs, ys[jrows], side, rng)
                sub = frac[jrows]
                frac[jrows] = sub * (1.0 - cov)
                rim[z, jrows] = np.maximum(rim[z, jrows], boost * (sub > 0))
                xj = spec.joint_x(side)
                band = np.abs(xs - xj) <= spec.gap_mm[g] / 2 + spec.label_margin_mm
                label[z][np.ix_(jrows, band)] = True
        frac = np.maximum(frac, _coccyx_bits(spec, z, X, Y))
        bone_frac[z] = frac
    return bone_frac, rim, np.broadcast_to(body, (nz, ny, nx)), label


def _x_extents(bone: np.ndarray, sx: float) -> List[Optional[float]]:
    out = []
    for plane in bone:
        cols = np.flatnonzero(plane.any(axis=0))
        out.append(None if len(cols) == 0 else float((cols[-1] - cols[0]) * sx))
    return out


def generate_phantom(spec: PhantomSpec, case_id: str = "phantom") -> PhantomCase:
    """Render, add noise, and record ground truth plus diagnostics. Deterministic per seed."""
    spec.validate()
    frac, rim, body, label = render(spec)
    rng = np.random.default_rng([spec.seed, 2])
    nx, ny, nz = spec.dims
    hu = np.empty((nz, ny, nx), np.int16)
    for z in range(nz):
        f = frac[z]
        soft = body[z] & (f < 1)
        base = np.where(body[z], spec.soft_hu, spec.air_hu).astype(np.float32)
        bone_hu = spec.bone_hu + rim[z] + spec.bone_sigma * rng.standard_normal((ny, nx), np.float32)
        tissue = base + spec.soft_sigma * soft * rng.standard_normal((ny, nx), np.float32)
        v = f * bone_hu + (1 - f) * tissue
        v += spec.noise_sigma * rng.standard_normal((ny, nx), np.float32)
        hu[z] = np.clip(np.rint(v), HU_MIN, HU_MAX).astype(np.int16)
    vol = CtVolume(spec.dims, spec.spacing, hu)
    lab = BinaryMask(spec.dims, spec.spacing, label)
    grades = {s: np.asarray(spec.grades(s), dtype=np.int64) for s in SIDES}
    case_grades = {s: rule_case_grade(grades[s]) for s in SIDES}
    bone = frac >= 0.5
    diag = {
        "bone_voxels": int(bone.sum()),
        "bone_voxels_300_1300": int(np.count_nonzero((hu >= 300) & (hu <= 1300))),
        "label_voxels": int(label.sum()),
        "pelvis_x_extent_mm": _x_extents(bone, spec.spacing[0]),
        "hu_sum": int(hu.astype(np.int64).sum()),
        "hu_sha256": hashlib.sha256(hu.tobytes()).hexdigest(),
        "z_top": spec.flare_z,
        "z_empty": spec.bone_start - 1,
        "coccyx_mm": list(spec.coccyx_center),
    }
    return PhantomCase(case_id, spec, vol, lab, grades, case_grades, diag)


def bone_truth(spec: PhantomSpec) -> np.ndarray:
    """Voxels that are mostly bone in the clean rendering."""
    return render(spec)[0] >= 0.5


# --- grade vectors and cohorts ---------------------------------------------

def sample_grade_vector(case_grade: int, k: int, rng: np.random.Generator) -> np.ndarray:
    """A slice-grade vector of length ``k`` whose rule grade is ``case_grade``."""
    target = CaseGrade(int(case_grade))
    for _ in range(1000):
        if target is CaseGrade.HEALTHY:
            g = rng.integers(0, 2, k)
            n2 = int(rng.integers(0, int(0.15 * k) + 1))
            g[rng.choice(k, n2, replace=False)] = 2
        elif target is CaseGrade.SUSPICIOUS:
            g = rng.integers(0, 2, k)
            n2 = int(math.ceil(rng.uniform(0.4, 0.6) * k))
            g[rng.choice(k, n2, replace=False)] = 2
            if rng.random() < 0.3:
                g[rng.integers(k)] = 3
        else:
            g = rng.integers(1, 3, k)
            if rng.random() < 0.5:
                n = int(rng.integers(4, min(7, k) + 1))
                s = int(rng.integers(0, k - n + 1))
                g[s:s + n] = 3
            else:
                n = int(rng.integers(3, min(5, k) + 1))
                s = int(rng.integers(0, k - n + 1))
                g[s:s + n] = 4
        if rule_case_grade(g) is target:
            return g.astype(np.int64)
    raise RuntimeError(f"could not sample a {target.label} vector of length {k}")


def allocate(n: int, mix: Sequence[float]) -> List[int]:
    """Largest-remainder counts for ``n`` items; ties favour the lower class index."""
    mix = np.asarray(mix, dtype=float)
    if n < 1:
        raise ValueError("n must be >= 1")
    if mix.ndim != 1 or len(mix) != 3 or (mix < 0).any() or abs(mix.sum() - 1) > 1e-6:
        raise ValueError(f"mix must be three non-negative proportions summing to 1, got {mix}")
    raw = n * mix
    counts = np.floor(raw + 1e-9).astype(int)
    rem = raw - counts
    for i in sorted(range(3), key=lambda i: (-round(rem[i], 9), i))[: n - counts.sum()]:
        counts[i] += 1
    return counts.tolist()


def cohort_specs(n: int, mix=(1 / 3, 1 / 3, 1 / 3), seed: int = 0,
                 base: Optional[PhantomSpec] = None) -> List[PhantomSpec]:
    """Per-case specs with balanced joint grades and jittered geometry."""
    base = base if base is not None else PhantomSpec()
    counts = allocate(n, mix)
    labels = np.repeat(np.arange(3), counts)
    rng = np.random.default_rng([seed, 0])
    right = rng.permutation(labels)
    left = rng.permutation(labels)
    specs = []
    for i in range(n):
        r = np.random.default_rng([seed, 1, i])
        k = int(r.integers(12, 19))
        cx, cy = base.center
        specs.append(replace(
            base,
            center=(cx + r.uniform(-8, 8), cy + r.uniform(-6, 6)),
            joint_offset=base.joint_offset + r.uniform(-2, 2),
            ilium_width=base.ilium_width + r.uniform(-3, 3),
            bone_hu=base.bone_hu + r.uniform(-30, 30),
            grades_right=tuple(sample_grade_vector(right[i], k, r)),
            grades_left=tuple(sample_grade_vector(left[i], k, r)),
            coccyx=None,
            seed=int(np.random.default_rng([seed, 2, i]).integers(2 ** 31)),
        ))
    return specs


def generate_cohort(n: int, mix=(1 / 3, 1 / 3, 1 / 3), seed: int = 0,
                    base: Optional[PhantomSpec] = None, workers: int = 1) -> List[PhantomCase]:
    specs = cohort_specs(n, mix, seed, base)
    ids = [f"case{i:03d}" for i in range(n)]
    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(workers) as ex:
            return list(ex.map(generate_phantom, specs, ids))
    return [generate_phantom(s, c) for s, c in zip(specs, ids)]


def write_cohort(cases: Sequence[PhantomCase], directory, extra: Optional[dict] = None) -> Path:
    """Save every case and a manifest.json listing paths, grades and diagnostics."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    manifest = {"version": 1, "cases": [c.save(d) for c in cases]}
    if extra:
        manifest.update(extra)
    path = d / "manifest.json"
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    tmp.replace(path)
    return path


def read_manifest(path) -> dict:
    path = Path(path)
    m = json.loads(path.read_text())
    # a manifest may point at volumes stored elsewhere (e.g. a test subset)
    m["root"] = str(path.parent / m["root"]) if "root" in m else str(path.parent)
    return m


def large_phantom_spec(seed: int = 0, dims=(512, 512, 210), spacing=(1.0, 1.0, 2.0)) -> PhantomSpec:
    """Full-size scan with the pelvis centred and the joint span in the middle of the stack."""
    nx, ny, nz = dims
    k = 16
    bone_start = max(1, nz // 2 - 20)
    return PhantomSpec(
        dims=dims, spacing=spacing,
        center=((nx - 1) * spacing[0] / 2, (ny - 1) * spacing[1] / 2),
        body_axes=(160.0, 110.0), bone_start=bone_start,
        grades_right=(0,) * k, grades_left=(1,) * k, seed=seed,
    )
