"""Manifest curation: exclusion rules, KL grade mapping, patient-level splits."""

from __future__ import annotations

import csv
import io
from collections import Counter, defaultdict
from dataclasses import dataclass, field, replace
from typing import Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple

import numpy as np

MANIFEST_COLUMNS = ["patient_id", "visit", "side", "view", "image_path", "pixel_spacing",
                    "kl_grade", "jsn_grade", "osteo_grade", "flags"]
ALLOWED_GRADES = (0.0, 1.0, 1.9, 2.0, 3.0, 4.0)
DEFAULT_FRACTIONS = (0.728, 0.092, 0.180)
SPLITS = ("train", "validation", "test")

# exclusion reasons, in the order they are checked for each knee-visit
FLAGGED = "flagged"
MISSING_GRADES = "missing_jsn_or_osteophyte_grade"
UNPAIRED = "unpaired_views"
DUPLICATE = "duplicate_image"


class ManifestError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass(frozen=True)
class ExamRecord:
    """One image of one knee at one visit."""

    patient_id: str
    visit: int
    side: str
    view: str
    image_path: str
    pixel_spacing: float
    kl_grade: float
    jsn_grade: Optional[int] = None
    osteo_grade: Optional[int] = None
    flags: FrozenSet[str] = frozenset()

    def __post_init__(self):
        if self.side not in ("left", "right"):
            raise ValueError(f"side must be 'left' or 'right', got {self.side!r}")
        if self.view not in ("PA", "LAT"):
            raise ValueError(f"view must be 'PA' or 'LAT', got {self.view!r}")
        if not self.pixel_spacing > 0:
            raise ValueError(f"pixel spacing must be positive, got {self.pixel_spacing}")

    @property
    def knee_visit(self) -> Tuple[str, int, str]:
        return (self.patient_id, self.visit, self.side)


def _fmt_grade(g: float) -> str:
    return str(int(g)) if float(g).is_integer() else repr(float(g))


def _opt_int(cell: str) -> Optional[int]:
    return None if cell.strip() == "" else int(cell)


def parse_manifest(text: str) -> List[ExamRecord]:
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        return []
    if header != MANIFEST_COLUMNS:
        raise ManifestError(1, f"expected columns {','.join(MANIFEST_COLUMNS)}, got {','.join(header)}")
    rows = []
    for line, cells in enumerate(reader, start=2):
        if not cells:
            continue
        if len(cells) != len(MANIFEST_COLUMNS):
            raise ManifestError(line, f"expected {len(MANIFEST_COLUMNS)} fields, got {len(cells)}")
        c = dict(zip(MANIFEST_COLUMNS, cells))
        try:
            rows.append(ExamRecord(
                patient_id=c["patient_id"],
                visit=int(c["visit"]),
                side=c["side"],
                view=c["view"],
                image_path=c["image_path"],
                pixel_spacing=float(c["pixel_spacing"]),
                kl_grade=float(c["kl_grade"]),
                jsn_grade=_opt_int(c["jsn_grade"]),
                osteo_grade=_opt_int(c["osteo_grade"]),
                flags=frozenset(f for f in c["flags"].split(";") if f),
            ))
        except ValueError as exc:
            raise ManifestError(line, str(exc)) from None
    return rows


def read_manifest(path) -> List[ExamRecord]:
    with open(path, newline="") as fh:
        return parse_manifest(fh.read())


def format_manifest(records: Iterable[ExamRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(MANIFEST_COLUMNS)
    for r in records:
        w.writerow([
            r.patient_id, r.visit, r.side, r.view, r.image_path, repr(float(r.pixel_spacing)),
            _fmt_grade(r.kl_grade),
            "" if r.jsn_grade is None else r.jsn_grade,
            "" if r.osteo_grade is None else r.osteo_grade,
            ";".join(sorted(r.flags)),
        ])
    return buf.getvalue()


def write_manifest(path, records: Iterable[ExamRecord]) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(format_manifest(records))


@dataclass
class ExclusionReport:
    """Knee-visits removed per reason plus duplicate image rows dropped."""

    knee_visits: Counter = field(default_factory=Counter)
    duplicate_rows: int = 0

    def rows(self) -> List[Tuple[str, int]]:
        out = [(reason, self.knee_visits.get(reason, 0)) for reason in (FLAGGED, MISSING_GRADES, UNPAIRED)]
        out.append((DUPLICATE, self.duplicate_rows))
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["reason", "count"])
        w.writerows(self.rows())
        return buf.getvalue()


def apply_exclusions(records: Sequence[ExamRecord], seed: int = 0) -> Tuple[List[ExamRecord], ExclusionReport]:
    """Drop knee-visits that are flagged, lack JSN/osteophyte grades, or lack a PA+LAT pair.

    Each dropped knee-visit is charged to the first failing rule. Among
    surviving knee-visits, duplicate images of one view are reduced to a
    single seeded random pick. Output keeps the input row order.
    """
    groups: Dict[tuple, List[int]] = defaultdict(list)
    for i, r in enumerate(records):
        groups[r.knee_visit].append(i)
    report = ExclusionReport()
    keep = set()
    rng = np.random.default_rng(seed)
    for key in sorted(groups, key=lambda k: (k[0], k[1], k[2])):
        rows = [records[i] for i in groups[key]]
        if any(r.flags for r in rows):
            report.knee_visits[FLAGGED] += 1
            continue
        if any(r.jsn_grade is None or r.osteo_grade is None for r in rows):
            report.knee_visits[MISSING_GRADES] += 1
            continue
        by_view: Dict[str, List[int]] = defaultdict(list)
        for i in groups[key]:
            by_view[records[i].view].append(i)
        if not by_view.get("PA") or not by_view.get("LAT"):
            report.knee_visits[UNPAIRED] += 1
            continue
        for view in ("PA", "LAT"):
            idx = sorted(by_view[view], key=lambda i: records[i].image_path)
            keep.add(idx[int(rng.integers(len(idx)))] if len(idx) > 1 else idx[0])
            report.duplicate_rows += len(idx) - 1
    return [r for i, r in enumerate(records) if i in keep], report


def map_grade(grade: float) -> int:
    for allowed in ALLOWED_GRADES:
        if abs(float(grade) - allowed) < 1e-9:
            return 2 if allowed == 1.9 else int(allowed)
    raise ValueError(f"KL grade {grade} is not one of 0, 1, 1.9, 2, 3, 4")


def map_grades(records: Iterable[ExamRecord]) -> List[ExamRecord]:
    """Replace every KL grade with its integer grade (1.9 becomes 2)."""
    return [replace(r, kl_grade=map_grade(r.kl_grade)) for r in records]


def split_by_patient(patients: Iterable, fractions: Sequence[float] = DEFAULT_FRACTIONS,
                     seed: int = 0) -> Dict[str, str]:
    """Shuffle patients with a seeded RNG and cut the list into train/validation/test.

    ``patients`` may be patient ids or :class:`ExamRecord` rows.
    """
    ids = sorted({p.patient_id if isinstance(p, ExamRecord) else str(p) for p in patients})
    if not ids:
        raise ValueError("cannot split an empty manifest")
    fr = np.asarray(fractions, dtype=np.float64)
    if fr.shape != (3,) or (fr < 0).any() or abs(fr.sum() - 1.0) > 1e-9:
        raise ValueError(f"split fractions must be three non-negative numbers summing to 1, got {fractions}")
    order = np.random.default_rng(seed).permutation(len(ids))
    n = len(ids)
    n_train = int(round(n * fr[0]))
    n_val = min(int(round(n * fr[1])), n - n_train)
    out = {}
    for rank, j in enumerate(order):
        split = "train" if rank < n_train else "validation" if rank < n_train + n_val else "test"
        out[ids[j]] = split
    return out


def split_records(records: Iterable[ExamRecord], assignment: Dict[str, str]) -> Dict[str, List[ExamRecord]]:
    out = {s: [] for s in SPLITS}
    for r in records:
        out[assignment[r.patient_id]].append(r)
    return out


def pair_views(records: Iterable[ExamRecord]) -> List[Tuple[ExamRecord, ExamRecord]]:
    """Group curated rows into (PA, LAT) pairs per knee-visit, sorted by key."""
    views: Dict[tuple, dict] = defaultdict(dict)
    for r in records:
        views[r.knee_visit][r.view] = r
    return [(v["PA"], v["LAT"]) for k, v in sorted(views.items()) if "PA" in v and "LAT" in v]
