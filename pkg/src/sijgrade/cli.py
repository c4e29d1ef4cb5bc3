"""Command-line entry point: ``sijgrade {phantom-gen,train,grade,eval}``.

Exit codes:
    0  success
    1  unexpected internal error
    2  usage error
    3  pelvis not found
    4  SIJ not found
    5  coccyx ambiguous
    6  file missing or unreadable
    7  invalid input (bad config, volume, manifest or split)
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import yaml

from .config import ThresholdConfig, load_config, thread_count
from .roi import PipelineError
from .volume import VolumeFormatError

EXIT_OK, EXIT_INTERNAL, EXIT_USAGE = 0, 1, 2
EXIT_IO, EXIT_INVALID = 6, 7

log = logging.getLogger("sijgrade")


def _setup_threads() -> int:
    import torch

    n = thread_count()
    torch.set_num_threads(n)
    return n


def _write_json(obj, path: Path) -> None:
    from .metrics import write_json

    path.parent.mkdir(parents=True, exist_ok=True)
    write_json(obj, path)


# --- phantom-gen -----------------------------------------------------------------

def cmd_phantom_gen(args) -> int:
    from .phantom import (PhantomSpec, generate_cohort, generate_phantom, large_phantom_spec,
                          write_cohort)

    spec = yaml.safe_load(Path(args.spec).read_text()) or {}
    out = Path(args.out)
    workers = thread_count()
    if "cohort" in spec:
        c = dict(spec["cohort"])
        unknown = set(c) - {"n", "mix", "seed", "base"}
        if unknown:
            raise ValueError(f"unknown cohort keys {sorted(unknown)}")
        seed = args.seed if args.seed is not None else int(c.get("seed", 0))
        base = PhantomSpec.from_dict(c["base"]) if c.get("base") else None
        cases = generate_cohort(int(c.get("n", 60)), tuple(c.get("mix", (1 / 3, 1 / 3, 1 / 3))),
                                seed, base, workers)
        extra = {"cohort": {"n": len(cases), "mix": list(c.get("mix", [1 / 3] * 3)), "seed": seed}}
    elif "phantom" in spec or "large" in spec:
        if "large" in spec:
            d = dict(spec["large"] or {})
            s = large_phantom_spec(seed=int(d.pop("seed", 0)), **d)
        else:
            s = PhantomSpec.from_dict(spec["phantom"])
        if args.seed is not None:
            s = replace(s, seed=args.seed)
        cases = [generate_phantom(s, spec.get("id", "phantom"))]
        extra = None
    else:
        raise ValueError("spec file needs a 'cohort', 'phantom' or 'large' section")
    path = write_cohort(cases, out, extra)
    counts = {}
    for c in cases:
        for side, g in c.case_grades.items():
            counts.setdefault(side, {}).setdefault(g.label, 0)
            counts[side][g.label] += 1
    print(f"wrote {len(cases)} phantom(s) to {out}; manifest {path}")
    for side in sorted(counts):
        print(f"  {side}: " + ", ".join(f"{k} {v}" for k, v in sorted(counts[side].items())))
    return EXIT_OK


# --- train ---------------------------------------------------------------------

def cmd_train(args) -> int:
    from .phantom import read_manifest
    from .pipeline import load_cases, split_indices, train_pipeline

    workers = _setup_threads()
    cfg = load_config(args.config, seed=args.seed)
    manifest = read_manifest(args.cohort)
    ids = [e["id"] for e in manifest["cases"]]
    tr, va, te = split_indices(len(ids), cfg, ids)  # validates before any training
    cases = load_cases(manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lines = []

    def say(msg):
        lines.append(msg)
        print(msg, flush=True)

    say(f"split: {len(tr)} train / {len(va)} val / {len(te)} test")
    models, record = train_pipeline(cases, cfg, tr, va, log=say, workers=workers,
                                    ensemble=not args.no_ensemble)
    models.save(out / "models")
    test_manifest = {
        "version": manifest.get("version", 1),
        "source": str(Path(args.cohort).resolve()),
        "cases": [manifest["cases"][i] for i in te],
    }
    test_manifest["root"] = str(Path(manifest["root"]).resolve())
    _write_json(test_manifest, out / "test_manifest.json")
    _write_json({"split": {"train": [ids[i] for i in tr], "val": [ids[i] for i in va],
                           "test": [ids[i] for i in te]},
                 "seed": cfg.seed, "record": record, "log": lines}, out / "training_log.json")
    print(f"models written to {out / 'models'}")
    return EXIT_OK


# --- grade ---------------------------------------------------------------------

def cmd_grade(args) -> int:
    from .pipeline import PipelineModels, grade_volume
    from .volume import load_volume

    _setup_threads()
    if (args.alpha is None) != (args.beta is None):
        raise ValueError("--alpha and --beta must be given together")
    models = PipelineModels.load(args.models)
    cfg = models.config
    if args.config is not None:
        cfg = load_config(args.config, seed=args.seed)
    elif args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    th = cfg.thresholds
    if args.tau is not None:
        th = replace(th, tau=args.tau)
    if args.alpha is not None:
        th = replace(th, alpha=args.alpha, beta=args.beta)
    # validate ranges up front so a bad flag fails before the heavy stages
    ThresholdConfig(**vars(th))
    from .case_grader import threshold_three_class, threshold_two_class

    threshold_two_class([0.5, 0.5], th.tau)
    threshold_three_class([1 / 3] * 3, th.alpha, th.beta)
    vol = load_volume(args.volume)
    case_id = Path(args.volume).name
    for suffix in (".json", ".raw"):
        if case_id.endswith(suffix):
            case_id = case_id[: -len(suffix)]
    report = grade_volume(vol, models, cfg, th, case_id)
    out = Path(args.out) if args.out else Path(f"{case_id}.report.json")
    _write_json(report, out)
    for side in ("right", "left"):
        j = report["joints"][side]
        print(f"{side:>5}: {j['grade']:<10} ({j['two_class']}) "
              f"p={['%.3f' % p for p in j['probabilities']]} slices={len(j['slice_grades'])} "
              f"grades={''.join(map(str, j['slice_grades']))}")
    print(f"report: {out}")
    return EXIT_OK


# --- eval ----------------------------------------------------------------------

def cmd_eval(args) -> int:
    from .phantom import read_manifest
    from .pipeline import PipelineModels, evaluate, load_cases

    workers = _setup_threads()
    models = PipelineModels.load(args.models)
    cfg = models.config
    if args.config is not None:
        cfg = load_config(args.config, seed=args.seed)
    manifest = read_manifest(args.manifest)
    cases = load_cases(manifest)
    if not cases:
        raise ValueError("empty test set")
    report = evaluate(models, cases, cfg, workers)
    report.pop("_arrays", None)
    out = Path(args.out) if args.out else Path(args.models).parent / "metrics.json"
    _write_json(report, out)
    t3, t2 = report["three_class"], report["two_class"]
    print(f"joints: {report['n_joints']}  three-class accuracy {t3['accuracy']:.3f}  "
          f"two-class accuracy {t2['accuracy']:.3f}")
    if "sensitivity" in t2:
        print(f"sensitivity {t2['sensitivity']:.3f}  specificity {t2['specificity']:.3f}")
    if "roc" in report:
        print(f"AUC {report['roc']['auc']:.3f}")
    if "roi" in report:
        r = report["roi"]
        print(f"ROI mean Dice {r['mean_dice']:.3f}  mean center distance {r['mean_center_distance_mm']}")
    print(f"report: {out}")
    return EXIT_OK


# --- entry -----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sijgrade", description="Sacroiliitis grading on CT volumes.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("phantom-gen", help="generate synthetic phantoms")
    g.add_argument("--spec", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_phantom_gen)

    t = sub.add_parser("train", help="train all pipeline models on a labelled cohort")
    t.add_argument("--cohort", required=True)
    t.add_argument("--config")
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--no-ensemble", action="store_true")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("grade", help="grade one CT volume")
    r.add_argument("--volume", required=True)
    r.add_argument("--models", required=True)
    r.add_argument("--config")
    r.add_argument("--tau", type=float)
    r.add_argument("--alpha", type=float)
    r.add_argument("--beta", type=float)
    r.add_argument("--out")
    r.add_argument("--seed", type=int)
    r.set_defaults(func=cmd_grade)

    e = sub.add_parser("eval", help="evaluate models on held-out cases")
    e.add_argument("--models", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--config")
    e.add_argument("--out")
    e.add_argument("--seed", type=int)
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except PipelineError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except (FileNotFoundError, PermissionError, IsADirectoryError) as e:
        print(f"error: [io] {e}", file=sys.stderr)
        return EXIT_IO
    except (VolumeFormatError, ValueError, KeyError, yaml.YAMLError, json.JSONDecodeError) as e:
        print(f"error: [input] {e}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as e:
        print(f"error: [io] {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
