"""End-to-end orchestration: locate the joints, grade slices, grade cases; train and evaluate."""
from __future__ import annotations

import hashlib
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import case_grader as cg
from .case_grader import CaseGrade, JointCase
from .config import Config, ThresholdConfig
from .forest import Forest, ForestParams, train_forest
from .metrics import (
    classification_report,
    confusion_and_accuracy,
    kfold_split,
    rect_overlap,
    roc_auc,
    threshold_sweep,
)
from .morphology import adaptive_skeleton_segment, candidate_thresholds
from .roi import (
    PelvisRoi,
    PipelineError,
    SijNotFound,
    compute_pelvis_roi,
    coccyx_candidates,
    extract_half_slice_rects,
    features_for,
    initial_sij_mask,
    posterior_centroid,
    refine_sij_mask,
    rects_by_side,
    slab_bits,
    triplet,
)
from .slice_grader import CnnConfig, SliceGrader, map_grades
from .volume import BinaryMask, CtVolume
from .voxel_net import UNetConfig, UNetVoxelClassifier

MODELS_VERSION = 1
SIDES = ("right", "left")
Log = Optional[Callable[[str], None]]


def _say(log: Log, msg: str) -> None:
    if log is not None:
        log(msg)


# --- models -------------------------------------------------------------------

@dataclass
class PipelineModels:
    voxel: UNetVoxelClassifier
    refine_rf: Forest
    grader: SliceGrader
    case_rf: Forest                      # three-class case forest
    case_rf2: Forest                     # healthy vs unhealthy
    stage2_rf: Forest                    # suspicious vs sick, trained on unhealthy joints only
    ensemble: List[Forest] = field(default_factory=list)
    config: Config = field(default_factory=Config)
    use_hu: bool = False
    version: int = MODELS_VERSION

    def check(self) -> None:
        nf = 2 * self.grader.num_classes
        for name in ("case_rf", "case_rf2", "stage2_rf"):
            f = getattr(self, name)
            if f.n_features != nf:
                raise ValueError(f"{name} expects {f.n_features} features, grader yields {nf}")
        if self.case_rf.n_classes != 3 or self.case_rf2.n_classes != 2 or self.stage2_rf.n_classes != 2:
            raise ValueError("case forests have unexpected class counts")
        if self.ensemble and (len(self.ensemble) != cg.ENSEMBLE_SIZE
                              or any(f.n_features != nf or f.n_classes != 3 for f in self.ensemble)):
            raise ValueError("ensemble members are inconsistent with the grader")
        if self.version != MODELS_VERSION:
            raise ValueError(f"models version {self.version} not supported")

    def save(self, directory) -> Path:
        from .config import dump_config

        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        self.voxel.save(d / "voxel_unet")
        self.refine_rf.save(d / "refine_rf.json")
        self.grader.save(d / "slice_cnn")
        self.case_rf.save(d / "case_rf3.json")
        self.case_rf2.save(d / "case_rf2.json")
        self.stage2_rf.save(d / "stage2_rf.json")
        for i, f in enumerate(self.ensemble):
            f.save(d / f"ensemble_{i}.json")
        (d / "config.yaml").write_text(dump_config(self.config))
        files = sorted(p.name for p in d.iterdir() if p.is_file() and p.name != "models.json")
        manifest = {
            "version": self.version,
            "scheme": self.grader.scheme.value,
            "use_hu": self.use_hu,
            "ensemble": len(self.ensemble),
            "sha256": {n: hashlib.sha256((d / n).read_bytes()).hexdigest() for n in files},
        }
        (d / "models.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
        return d

    @classmethod
    def load(cls, directory) -> "PipelineModels":
        from .config import load_config

        d = Path(directory)
        mpath = d / "models.json"
        if not mpath.exists():
            raise FileNotFoundError(f"no models.json in {d}")
        m = json.loads(mpath.read_text())
        for name, digest in m["sha256"].items():
            if hashlib.sha256((d / name).read_bytes()).hexdigest() != digest:
                raise ValueError(f"model file {name} does not match its recorded checksum")
        models = cls(
            voxel=UNetVoxelClassifier.load(d / "voxel_unet"),
            refine_rf=Forest.load(d / "refine_rf.json"),
            grader=SliceGrader.load(d / "slice_cnn"),
            case_rf=Forest.load(d / "case_rf3.json"),
            case_rf2=Forest.load(d / "case_rf2.json"),
            stage2_rf=Forest.load(d / "stage2_rf.json"),
            ensemble=[Forest.load(d / f"ensemble_{i}.json") for i in range(m["ensemble"])],
            config=load_config(d / "config.yaml"),
            use_hu=bool(m["use_hu"]),
            version=int(m["version"]),
        )
        if models.grader.scheme.value != m["scheme"]:
            raise ValueError("grader scheme disagrees with the models manifest")
        models.check()
        return models


# --- online stages ----------------------------------------------------------------

@dataclass
class Localization:
    lower: float
    skeleton: BinaryMask
    roi: PelvisRoi
    initial: Optional[BinaryMask] = None
    coccyx: Optional[Tuple[float, float, float]] = None
    refined: Optional[BinaryMask] = None
    rects: Optional[list] = None


def locate_pelvis(vol: CtVolume, cfg: Config) -> Localization:
    s = cfg.segmentation
    cands = candidate_thresholds(s.lower_range[0], s.lower_range[1], s.n_candidates)
    lower, skel = adaptive_skeleton_segment(vol, cands, s.upper_hu, s.closing_diameter)
    roi = compute_pelvis_roi(skel, None, cfg.roi.width_jump, cfg.roi.margin_mm)
    return Localization(lower, skel, roi)


def locate_joints(vol: CtVolume, models: PipelineModels, cfg: Config,
                  loc: Optional[Localization] = None, case_id: str = "") -> Localization:
    """Stages 1-2 and the rectangle extraction feeding stage 3."""
    loc = loc if loc is not None else locate_pelvis(vol, cfg)
    r = cfg.roi
    initial = initial_sij_mask(vol, loc.roi, models.voxel, r.prob_cutoff)
    if not initial.any():
        raise SijNotFound("voxel classifier found no SIJ voxels in the pelvis slab", stage="initial-roi")
    cands = coccyx_candidates(loc.skeleton, loc.roi, initial, models.refine_rf, vol,
                              r.posterior_fraction, models.use_hu)
    coccyx = cands.points[cands.chosen]
    refined = refine_sij_mask(initial, coccyx, models.refine_rf, vol, r.min_component_mm3, models.use_hu)
    rects = extract_half_slice_rects(vol, refined, case_id, r.rect_mm, tuple(r.rect_px), r.hu_window)
    return replace(loc, initial=initial, coccyx=coccyx, refined=refined, rects=rects)


def _r(x, nd=9):
    return [round(float(v), nd) for v in np.ravel(x)]


def grade_joint(models: PipelineModels, rects, thresholds: ThresholdConfig) -> dict:
    """Stage 3 and 4 for one joint's ordered rectangles."""
    sgv = models.grader.predict(rects)
    feats = cg.runlength_features(sgv, models.grader.num_classes).astype(float)
    p3 = models.case_rf.predict_proba(feats)
    p2 = models.case_rf2.predict_proba(feats)
    grade = CaseGrade(int(np.argmax(p3)))
    out = {
        "rects": [{"z": int(r.z), "center_mm": _r(r.center, 6), "size_mm": _r(r.size_mm, 6)} for r in rects],
        "slice_grades": [int(g) for g in sgv],
        "features": [int(v) for v in feats],
        "probabilities": _r(p3),
        "grade": grade.label,
        "two_class": cg.TWO_CLASS_NAMES[grade.two_class],
        "two_class_forest": {"probabilities": _r(p2),
                             "grade": cg.TWO_CLASS_NAMES[int(np.argmax(p2))]},
        "thresholded": {
            "tau": thresholds.tau,
            "two_class": cg.TWO_CLASS_NAMES[cg.threshold_two_class(p2, thresholds.tau)],
            "alpha": thresholds.alpha,
            "beta": thresholds.beta,
            "three_class": CaseGrade(cg.threshold_three_class(p3, thresholds.alpha,
                                                              thresholds.beta)).label,
        },
        "two_step": CaseGrade(cg.two_step_predict(models.case_rf2, models.stage2_rf, feats)).label,
    }
    if models.ensemble:
        g, total = cg.ensemble_predict(models.ensemble, feats)
        out["ensemble"] = {"sum": _r(total), "grade": CaseGrade(int(g)).label}
    return out


def grade_volume(vol: CtVolume, models: PipelineModels, cfg: Optional[Config] = None,
                 thresholds: Optional[ThresholdConfig] = None, case_id: str = "") -> dict:
    """Run stages 1-4 on one scan and return the case report."""
    cfg = cfg or models.config
    thresholds = thresholds or cfg.thresholds
    t = {}
    t0 = time.perf_counter()
    loc = locate_pelvis(vol, cfg)
    t["pelvis_roi"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    loc = locate_joints(vol, models, cfg, loc, case_id)
    t["sij_roi"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    sides = rects_by_side(loc.rects)
    joints = {}
    for side in SIDES:
        if not sides[side]:
            raise SijNotFound(f"no {side} joint voxels survived refinement")
        joints[side] = grade_joint(models, sides[side], thresholds)
    t["grading"] = time.perf_counter() - t0
    return {
        "version": MODELS_VERSION,
        "case": case_id,
        "scheme": models.grader.scheme.value,
        "pipeline": {
            "lower_threshold_hu": round(loc.lower, 6),
            "z_top": loc.roi.z_top,
            "z_bottom": loc.roi.z_bottom,
            "coccyx_mm": _r(loc.coccyx, 6),
            "initial_voxels": loc.initial.count(),
            "refined_voxels": loc.refined.count(),
        },
        "joints": joints,
        "timings_s": {k: round(v, 4) for k, v in t.items()},
    }


def strip_timings(report: dict) -> dict:
    return {k: v for k, v in report.items() if k != "timings_s"}


# --- training ---------------------------------------------------------------------

@dataclass
class CaseData:
    """What training and evaluation need from a labelled scan."""

    case_id: str
    volume: CtVolume
    label: BinaryMask
    grades: Dict[str, np.ndarray]
    span_start: int

    @property
    def case_grades(self) -> Dict[str, CaseGrade]:
        return {s: cg.rule_case_grade(self.grades[s]) for s in SIDES}

    def grade_at(self, side: str, z: int) -> Optional[int]:
        i = z - self.span_start
        g = self.grades[side]
        return int(g[i]) if 0 <= i < len(g) else None

    @classmethod
    def from_phantom(cls, p) -> "CaseData":
        return cls(p.case_id, p.volume, p.label, dict(p.grades), p.spec.span_start)


def load_cases(manifest: dict, ids: Optional[Sequence[str]] = None) -> List[CaseData]:
    from .volume import load_mask, load_volume

    root = Path(manifest.get("root", "."))
    out = []
    for e in manifest["cases"]:
        if ids is not None and e["id"] not in ids:
            continue
        out.append(CaseData(e["id"], load_volume(root / e["volume"]), load_mask(root / e["label"]),
                            {s: np.asarray(e["grades"][s], dtype=np.int64) for s in SIDES},
                            int(e["span"][0])))
    return out


def split_indices(n: int, cfg: Config, ids: Optional[Sequence[str]] = None):
    """(train, val, test) index lists; explicit lists in the config win over fractions."""
    sp = cfg.split
    if sp.train is not None or sp.val is not None or sp.test is not None:
        if sp.train is None or sp.val is None:
            raise ValueError("explicit splits need both train and val lists")
        lookup = {c: i for i, c in enumerate(ids)} if ids is not None else {}

        def idx(lst):
            return [lookup[v] if isinstance(v, str) else int(v) for v in (lst or [])]

        tr, va, te = idx(sp.train), idx(sp.val), idx(sp.test)
    else:
        f = np.asarray(sp.fractions, float) / np.sum(sp.fractions)
        perm = np.random.default_rng([cfg.seed, 99]).permutation(n)
        n_tr = int(round(f[0] * n))
        n_va = int(round(f[1] * n))
        tr, va, te = perm[:n_tr].tolist(), perm[n_tr:n_tr + n_va].tolist(), perm[n_tr + n_va:].tolist()
    for a, b, name in ((tr, va, "train/val"), (tr, te, "train/test"), (va, te, "val/test")):
        if set(a) & set(b):
            raise ValueError(f"{name} splits overlap: {sorted(set(a) & set(b))}")
    if not tr or not va:
        raise ValueError("train and val splits must be non-empty")
    if any(not 0 <= i < n for i in tr + va + te):
        raise ValueError("split index out of range")
    return sorted(tr), sorted(va), sorted(te)


def voxel_training_data(cases: Sequence[CaseData], locs: Sequence[Localization], cfg: Config):
    """Slab slice triplets: every labelled slice plus a fraction of unlabelled ones."""
    rng = np.random.default_rng([cfg.seed, 11])
    T, L = [], []
    for c, loc in zip(cases, locs):
        for z in range(loc.roi.z_bottom, loc.roi.z_top + 1):
            if c.label.bits[z].any() or rng.random() < cfg.voxel.negative_slice_fraction:
                T.append(triplet(c.volume, z))
                L.append(c.label.bits[z])
    if not any(l.any() for l in L):
        raise ValueError("no labelled SIJ voxels in the training slabs")
    return T, L


def refine_training_data(cases, locs, initials, cfg: Config, use_hu: bool):
    """Initial-mask voxels labelled by the ground truth, featurized against the slab coccyx."""
    X, y = [], []
    for i, (c, loc, init) in enumerate(zip(cases, locs, initials)):
        slab = loc.skeleton.bits & slab_bits(loc.skeleton, loc.roi)
        coccyx = posterior_centroid(slab, loc.skeleton, cfg.roi.posterior_fraction)
        zyx = np.argwhere(init.bits | c.label.bits)
        if len(zyx) == 0 or coccyx is None:
            continue
        rng = np.random.default_rng([cfg.seed, 12, i])
        cap = cfg.refine.max_voxels_per_case
        if len(zyx) > cap:
            zyx = zyx[np.sort(rng.choice(len(zyx), cap, replace=False))]
        # slab bone away from the joints, so the forest also sees clear negatives
        # even when the voxel classifier under-segments
        bone = np.argwhere(slab & ~c.label.bits)
        if len(bone):
            pick = np.sort(rng.choice(len(bone), min(len(bone), max(1, cap // 4)), replace=False))
            zyx = np.concatenate([zyx, bone[pick]])
        hu = c.volume.voxels[zyx[:, 0], zyx[:, 1], zyx[:, 2]] if use_hu else None
        X.append(features_for(zyx, coccyx, c.volume, hu))
        y.append(c.label.bits[zyx[:, 0], zyx[:, 1], zyx[:, 2]].astype(np.int64))
    X, y = np.concatenate(X), np.concatenate(y)
    if len(np.unique(y)) < 2:
        raise ValueError("refinement training data holds a single class")
    return X, y


def joint_cases(c: CaseData, rects) -> List[JointCase]:
    sides = rects_by_side(rects)
    out = []
    for side in SIDES:
        rs = sides[side]
        for r in rs:
            r.grade = c.grade_at(side, r.z)
        if rs:
            out.append(JointCase(c.case_id, side, rs, int(c.case_grades[side])))
    return out


def _map(fn, items, workers: int):
    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            return list(ex.map(fn, items))
    return [fn(x) for x in items]


def _case_forest_rows(X, y, meta, cases_subset: set):
    keep = np.array([m[0] in cases_subset for m in meta], bool)
    return X[keep], y[keep]


@dataclass
class TrainingLog:
    lines: List[str] = field(default_factory=list)
    data: dict = field(default_factory=dict)

    def __call__(self, msg: str) -> None:
        self.lines.append(msg)


def train_pipeline(cases: Sequence[CaseData], cfg: Config, train_idx, val_idx,
                   log: Log = None, workers: int = 1, ensemble: bool = True):
    """Offline phase: voxel classifier, refinement forest, slice grader and case forests."""
    record = {}
    train = [cases[i] for i in train_idx]
    val = [cases[i] for i in val_idx]
    both = train + val
    t0 = time.perf_counter()
    locs = _map(lambda c: locate_pelvis(c.volume, cfg), both, workers)
    _say(log, f"pelvis ROI located for {len(both)} cases ({time.perf_counter() - t0:.1f}s)")

    v = cfg.voxel
    voxel = UNetVoxelClassifier(UNetConfig(v.base_channels, v.levels, v.learning_rate, v.batch_size,
                                           v.epochs, v.pos_weight, v.crop, 0.7, cfg.seed))
    T, L = voxel_training_data(train, locs[:len(train)], cfg)
    t0 = time.perf_counter()
    record["voxel_loss"] = voxel.fit(T, L, cfg.augment("roi"))
    _say(log, f"voxel classifier: {len(T)} slices, loss {record['voxel_loss'][-1]:.4f} "
              f"({time.perf_counter() - t0:.1f}s)")

    initials = _map(lambda cl: initial_sij_mask(cl[0].volume, cl[1].roi, voxel, cfg.roi.prob_cutoff),
                    list(zip(both, locs)), workers)
    use_hu = cfg.refine.use_hu
    X, y = refine_training_data(train, locs[:len(train)], initials[:len(train)], cfg, use_hu)
    refine_rf = train_forest(X, y, ForestParams(cfg.refine.n_trees, cfg.refine.max_depth,
                                                seed=cfg.seed), n_classes=2)
    _say(log, f"refinement forest: {len(y)} voxels, {int(y.sum())} positive")

    stub = PipelineModels(voxel, refine_rf, None, None, None, None, config=cfg, use_hu=use_hu)
    joints: Dict[str, List[JointCase]] = {}
    failures = []
    for c, loc in zip(both, locs):
        try:
            done = locate_joints(c.volume, stub, cfg, loc, c.case_id)
            joints[c.case_id] = joint_cases(c, done.rects)
        except PipelineError as e:
            failures.append(f"{c.case_id}: {e}")
            joints[c.case_id] = []
    if failures:
        _say(log, "localization failures: " + "; ".join(failures))
    tr_j = [j for c in train for j in joints[c.case_id]]
    va_j = [j for c in val for j in joints[c.case_id]]

    g = cfg.grader
    scheme = g.scheme
    n_cls = {"two": 2, "three": 3, "five": 5}[scheme]
    grader = SliceGrader(CnnConfig(n_cls, g.channels, g.hidden, g.learning_rate, g.momentum,
                                   g.batch_size, g.max_epochs, cfg.seed, tuple(cfg.roi.rect_px)), scheme)
    graded = [JointCase(j.case_id, j.side, [r for r in j.rects if r.grade is not None], j.label)
              for j in tr_j]
    graded = [j for j in graded if j.rects]
    c = cfg.case
    recipe = cg.CaseForestRecipe(3, c.n_trees, c.max_depth, c.loop_n_aug, cfg.seed)
    t0 = time.perf_counter()
    res = cg.alternate_train(grader, recipe, graded, va_j, g.max_epochs, cfg.augment("slice"),
                             log=log, case_train=tr_j)
    record.update(val_accuracy=res.val_accuracy, grader_loss=res.losses, best_epoch=res.best_epoch)
    _say(log, f"alternating training done, best epoch {res.best_epoch + 1} "
              f"({time.perf_counter() - t0:.1f}s)")
    grader = res.grader

    t0 = time.perf_counter()
    pool = tr_j + va_j
    Xa, ya, meta = cg.build_case_training_set(pool, grader, c.n_aug, cfg.augment("slice"),
                                              seed=cfg.seed, return_meta=True)
    train_ids = {x.case_id for x in train}
    Xt, yt = _case_forest_rows(Xa, ya, meta, train_ids)
    case_rf = cg.train_case_rf(Xt, yt, cfg.seed, 3, c.n_trees, c.max_depth)
    case_rf2 = cg.train_case_rf(Xt, cg.to_two_class(yt), cfg.seed, 2, c.n_trees, c.max_depth)
    sick = yt > 0
    if len(np.unique(yt[sick])) < 2:
        raise ValueError("stage-two forest needs both suspicious and sick training joints")
    stage2_rf = cg.train_case_rf(Xt[sick], yt[sick] - 1, cfg.seed, 2, c.n_trees, c.max_depth)
    members = []
    if ensemble:
        ids = sorted({x.case_id for x in both})
        folds = kfold_split(len(ids), c.ensemble_folds, cfg.seed)
        for i, fold in enumerate(folds):
            held = {ids[j] for j in fold}
            Xf, yf = _case_forest_rows(Xa, ya, meta, set(ids) - held)
            members.append(cg.train_case_rf(Xf, yf, cfg.seed + 1 + i, 3, c.n_trees, c.max_depth))
    _say(log, f"case forests trained on {len(yt)} rows ({time.perf_counter() - t0:.1f}s)")
    models = PipelineModels(voxel, refine_rf, grader, case_rf, case_rf2, stage2_rf, members,
                            cfg, use_hu)
    models.check()
    record["localization_failures"] = failures
    return models, record


# --- evaluation -------------------------------------------------------------------

def roi_accuracy(case: CaseData, rects, cfg: Config) -> List[dict]:
    """Per ground-truth rectangle: Dice and center distance against the pipeline's rectangle."""
    r = cfg.roi
    truth = extract_half_slice_rects(case.volume, case.label, case.case_id, r.rect_mm,
                                     tuple(r.rect_px), r.hu_window)
    found = {(x.z, x.side): x for x in rects}
    rows = []
    for t in truth:
        p = found.get((t.z, t.side))
        if p is None:
            rows.append({"z": t.z, "side": t.side, "dice": 0.0, "distance_mm": None})
        else:
            d, dist = rect_overlap(t, p)
            rows.append({"z": t.z, "side": t.side, "dice": d, "distance_mm": dist})
    return rows


def _grid(lo, hi, step):
    return [round(v, 6) for v in np.arange(lo, hi + step / 2, step)]


def evaluate(models: PipelineModels, cases: Sequence[CaseData], cfg: Optional[Config] = None,
             workers: int = 1) -> dict:
    """Metrics report over held-out cases (one sample per joint)."""
    if not cases:
        raise ValueError("empty test set")
    cfg = cfg or models.config
    th = cfg.thresholds

    def run(c):
        try:
            loc = locate_joints(c.volume, models, cfg, None, c.case_id)
            return c, loc, None
        except PipelineError as e:
            return c, None, e

    results = _map(run, cases, workers)
    truth3, p3s, p2s, preds, two_step, ens, ens_sum, singles = [], [], [], [], [], [], [], []
    roi_rows, slice_t, slice_p, failures = [], [], [], []
    for c, loc, err in results:
        if err is not None:
            failures.append({"case": c.case_id, "stage": err.stage, "error": str(err)})
        sides = rects_by_side(loc.rects) if loc is not None else {"left": [], "right": []}
        if loc is not None:
            roi_rows += [dict(row, case=c.case_id) for row in roi_accuracy(c, loc.rects, cfg)]
        for side in SIDES:
            truth3.append(int(c.case_grades[side]))
            rs = sides[side]
            if not rs:
                failures.append({"case": c.case_id, "side": side, "error": "no rectangles"})
                f = None
            else:
                sgv = models.grader.predict(rs)
                f = cg.runlength_features(sgv, models.grader.num_classes).astype(float)
                for r, g in zip(rs, sgv):
                    gt = c.grade_at(side, r.z)
                    if gt is not None:
                        slice_t.append(int(map_grades([gt], models.grader.scheme)[0]))
                        slice_p.append(int(g))
            p3 = models.case_rf.predict_proba(f) if f is not None else np.array([1.0, 0, 0])
            p2 = models.case_rf2.predict_proba(f) if f is not None else np.array([1.0, 0])
            p3s.append(p3)
            p2s.append(p2)
            preds.append(int(np.argmax(p3)))
            two_step.append(cg.two_step_predict(models.case_rf2, models.stage2_rf, f)
                            if f is not None else 0)
            if models.ensemble:
                if f is not None:
                    g, tot = cg.ensemble_predict(models.ensemble, f)
                    ens.append(int(g))
                    ens_sum.append(tot)
                    singles.append([int(m.predict(f)) for m in models.ensemble])
                else:
                    ens.append(0)
                    ens_sum.append(np.array([6.0, 0, 0]))
                    singles.append([0] * len(models.ensemble))
    truth3 = np.array(truth3)
    truth2 = cg.to_two_class(truth3)
    p3s, p2s = np.array(p3s), np.array(p2s)
    scores = p2s[:, 1]
    report = {
        "n_cases": len(cases),
        "n_joints": int(len(truth3)),
        "failures": failures,
        "three_class": classification_report(truth3, preds, 3),
        "two_class": classification_report(truth2, np.argmax(p2s, axis=1), 2),
        "two_class_view": classification_report(truth2, cg.to_two_class(preds), 2),
        "two_step": classification_report(truth3, two_step, 3),
    }
    taus = _grid(0.0, 1.0, 0.02)
    if th.tau not in taus:
        taus = sorted(taus + [th.tau])
    try:
        roc = roc_auc(truth2, scores)
        report["roc"] = roc.to_dict()
    except ValueError as e:
        report["roc_error"] = str(e)
    report["tau_sweep"] = threshold_sweep(truth2, scores, taus)
    tau_pred = cg.threshold_two_class(p2s, th.tau)
    ab_pred = cg.threshold_three_class(p3s, th.alpha, th.beta)
    report["table13"] = {
        "a": {"tau": th.tau, **classification_report(truth2, tau_pred, 2)},
        "b": {"alpha": th.alpha, "beta": th.beta, **classification_report(truth3, ab_pred, 3)},
    }
    grid = []
    for a in sorted(set(_grid(0.0, 1.0, 0.1) + [th.alpha])):
        for b in sorted(set(_grid(-1.0, 1.0, 0.25) + [th.beta])):
            p = cg.threshold_three_class(p3s, a, b)
            row = {"alpha": a, "beta": b}
            for k, name in enumerate(("healthy", "suspicious", "sick")):
                row[f"{name}_tp"] = int(((p == k) & (truth3 == k)).sum())
                row[f"{name}_fp"] = int(((p == k) & (truth3 != k)).sum())
            grid.append(row)
    report["alpha_beta_grid"] = grid
    if models.ensemble:
        ens = np.array(ens)
        recomputed = np.argmax(np.array(ens_sum), axis=1)
        singles = np.array(singles)
        report["ensemble"] = {
            **classification_report(truth3, ens, 3),
            "member_accuracy": [round(float(np.mean(singles[:, i] == truth3)), 6)
                                for i in range(singles.shape[1])],
            "consistent_with_sum": bool(np.array_equal(recomputed, ens)),
        }
    if roi_rows:
        dists = [r["distance_mm"] for r in roi_rows if r["distance_mm"] is not None]
        report["roi"] = {
            "n_rects": len(roi_rows),
            "mean_dice": round(float(np.mean([r["dice"] for r in roi_rows])), 6),
            "mean_center_distance_mm": round(float(np.mean(dists)), 6) if dists else None,
            "found_fraction": round(len(dists) / len(roi_rows), 6),
        }
    if slice_t:
        n = models.grader.num_classes
        report["slice"] = classification_report(slice_t, slice_p, n)
    report["thresholds"] = asdict(th)
    report["_arrays"] = {"truth3": truth3.tolist(), "p3": p3s.tolist(), "p2": p2s.tolist()}
    return report
