"""Automatic sacroiliitis grading on pelvic CT volumes.

Stages: bone segmentation and pelvis ROI, SIJ localization and refinement,
per-slice grading with a small CNN, and per-joint case grading with random
forests over run-length features of the slice-grade vector.
"""
from .case_grader import CaseGrade, rule_case_grade, runlength_features
from .forest import Forest, ForestParams, train_forest
from .volume import BinaryMask, CtVolume, load_volume, save_volume

__version__ = "0.1.0"

__all__ = [
    "BinaryMask",
    "CaseGrade",
    "CtVolume",
    "Forest",
    "ForestParams",
    "load_volume",
    "rule_case_grade",
    "runlength_features",
    "save_volume",
    "train_forest",
]
