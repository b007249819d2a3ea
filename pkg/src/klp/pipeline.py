"""Glue between a cohort on disk and the detector / classifier training sets."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .classify import PatchSet, knee_patch
from .curate import ExamRecord, pair_views
from .detect import DetectorInput, DetectorSet, prepare_input
from .io import read_pgm
from .preprocess import REFERENCE_SPACING, Raster, preprocess


@dataclass
class KneeExam:
    """A curated knee-visit: its PA and LAT rows and integer grade."""

    pa: ExamRecord
    lat: ExamRecord

    @property
    def key(self) -> str:
        return f"{self.pa.patient_id}_V{self.pa.visit}_{self.pa.side}"

    @property
    def patient_id(self) -> str:
        return self.pa.patient_id

    @property
    def visit(self) -> int:
        return self.pa.visit

    @property
    def side(self) -> str:
        return self.pa.side

    @property
    def kl_grade(self) -> int:
        return int(self.pa.kl_grade)

    def record(self, view: str) -> ExamRecord:
        return self.pa if view == "PA" else self.lat


def knee_exams(records: Sequence[ExamRecord]) -> List[KneeExam]:
    return [KneeExam(pa, lat) for pa, lat in pair_views(records)]


def load_raster(root, record: ExamRecord) -> Raster:
    path = Path(root) / record.image_path
    if not path.exists():
        raise FileNotFoundError(f"image not found: {path}")
    return Raster(read_pgm(path), record.pixel_spacing)


def reference_center(record: ExamRecord, annotations: Dict[str, dict]) -> Tuple[float, float]:
    """Annotated centre of ``record`` converted to reference-spacing pixels."""
    if record.image_path not in annotations:
        raise KeyError(f"no centre annotation for {record.image_path}")
    f = record.pixel_spacing / REFERENCE_SPACING
    cx, cy = annotations[record.image_path]["center"]
    return (cx * f, cy * f)


def select_knees(exams: Sequence[KneeExam], n: int, seed: int) -> List[KneeExam]:
    """``n`` distinct knees (patient, side), one random visit each, in a seeded order."""
    by_knee: Dict[tuple, List[KneeExam]] = {}
    for e in exams:
        by_knee.setdefault((e.patient_id, e.side), []).append(e)
    keys = sorted(by_knee)
    if n > len(keys):
        raise ValueError(f"asked for {n} knees but only {len(keys)} are available")
    rng = np.random.default_rng(seed)
    out = []
    for i in rng.permutation(len(keys))[:n]:
        visits = by_knee[keys[i]]
        out.append(visits[int(rng.integers(len(visits)))])
    return out


def detector_inputs(root, exams: Sequence[KneeExam], view: str, annotations: Dict[str, dict],
                    size: int) -> List[DetectorInput]:
    out = []
    for e in exams:
        rec = e.record(view)
        img = preprocess(load_raster(root, rec))
        out.append(prepare_input(img, size, reference_center(rec, annotations)))
    return out


def patch_set(root, exams: Sequence[KneeExam], size: int, annotations: Optional[Dict[str, dict]] = None,
              detectors: Optional[DetectorSet] = None, canonicalize: bool = True,
              views: Sequence[str] = ("PA", "LAT")) -> Tuple[PatchSet, Dict, Dict[str, str]]:
    """Classifier patches for each knee, cropped at detected or annotated centres.

    Left knees are mirrored when ``canonicalize`` is set. A knee whose crop
    fails (for instance a detected centre outside the image) is left out and
    its error message returned, keyed like the patch ids.
    """
    pa, lat, labels, ids, used, errors = [], [], [], [], {}, {}
    if detectors is None and annotations is None:
        raise ValueError("need annotations or detectors to place the crops")
    for e in exams:
        patches, centers = {}, {}
        try:
            for view in views:
                rec = e.record(view)
                img = preprocess(load_raster(root, rec))
                if detectors is not None:
                    center = detectors.detect(img, view, e.side).center
                else:
                    center = reference_center(rec, annotations)
                centers[view] = center
                patches[view] = knee_patch(img, center, size, canonicalize and e.side == "left")
        except ValueError as exc:
            errors[e.key] = f"{e.key}: {exc}"
            continue
        used[e.key] = centers
        blank = np.zeros((size, size), dtype=np.float32)
        pa.append(patches.get("PA", blank))
        lat.append(patches.get("LAT", blank))
        labels.append(e.kl_grade)
        ids.append(e.key)
    empty = np.zeros((0, size, size), dtype=np.float32)
    ps = PatchSet(np.array(pa) if pa else empty, np.array(lat) if lat else empty,
                  np.array(labels, dtype=np.int64), ids)
    return ps, used, errors


def save_patch_set(path, ps: PatchSet) -> None:
    np.savez(path, pa=ps.pa, lat=ps.lat, labels=ps.labels, ids=np.array(ps.ids))


def load_patch_set(path) -> PatchSet:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"patch cache not found: {path}")
    with np.load(path) as z:
        return PatchSet(z["pa"], z["lat"], z["labels"], [str(i) for i in z["ids"]])
