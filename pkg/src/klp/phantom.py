"""Synthetic knee radiographs with controllable OA severity.

Each knee is drawn from a latent severity ``s`` in [0, 4]. The joint gap
narrows, marginal osteophytes grow and a subchondral sclerosis band brightens
linearly in ``s``. The PA view shows these features clearly; the LAT view
renders them with reduced contrast under overlapping structures, so it
carries less grade information. Readers are simulated by adjacent-grade
swaps of the true grade.
"""

from __future__ import annotations

import csv
import json
import math
import os
import zlib
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .curate import ExamRecord, write_manifest
from .io import write_pgm
from .preprocess import REFERENCE_SPACING, Raster

# KL grade counts of the training split, used as the default grade mix.
TABLE2_TRAIN = (5600, 1951, 2228, 2475, 1150)
VIEWS = ("PA", "LAT")
SIDES = ("left", "right")
BOX_SIDE = 1000


@dataclass
class PhantomConfig:
    canvas: int = 1400
    spacing: float = REFERENCE_SPACING
    gap_max: float = 60.0  # joint-space width at s=0, px at reference spacing
    gap_min: float = 8.0  # at s=4
    osteophyte_min: float = 14.0  # osteophyte radius at s=0+
    osteophyte_max: float = 46.0  # at s=4
    sclerosis_max: float = 0.22  # added intensity at s=4
    center_jitter: float = 150.0  # px, uniform per axis
    noise_sigma: float = 0.03
    pa_variation: float = 0.25  # per-view relative jitter of feature magnitudes
    lat_variation: float = 0.25
    lat_osteophyte_contrast: float = 0.3
    lat_gap_fill: float = 0.55
    lat_occlusion: float = 0.12
    seed: int = 0
    # cohort-level fractions of knee-visits that exercise the curation rules
    flagged_fraction: float = 0.0
    missing_grade_fraction: float = 0.0
    missing_view_fraction: float = 0.0
    duplicate_fraction: float = 0.0
    grade_19_fraction: float = 0.0

    def __post_init__(self):
        if self.canvas < BOX_SIDE * self.scale + 2 * self.center_jitter:
            raise ValueError(
                f"canvas {self.canvas}px cannot hold a {BOX_SIDE}px box around centres jittered by "
                f"±{self.center_jitter}px")
        if not self.gap_max > self.gap_min > 0:
            raise ValueError("need gap_max > gap_min > 0")

    @property
    def scale(self) -> float:
        """Canvas pixels per reference pixel."""
        return REFERENCE_SPACING / self.spacing

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown phantom config keys: {sorted(unknown)}")
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


@dataclass
class PhantomExam:
    patient_id: str
    visit: int
    side: str
    latent: float
    kl_grade: int
    jsn_grade: int
    osteo_grade: int
    joint_space_width: float
    osteophyte_count: int
    centers: Dict[str, Tuple[float, float]]
    images: Dict[str, Raster]

    @property
    def pa(self) -> Raster:
        return self.images["PA"]

    @property
    def lat(self) -> Raster:
        return self.images["LAT"]


def stream_seed(*parts) -> np.random.SeedSequence:
    """Seed sequence keyed by a tuple of ints and strings, stable across runs."""
    ints = []
    for p in parts:
        ints.append(zlib.crc32(p.encode()) if isinstance(p, str) else int(p))
    return np.random.SeedSequence(ints)


def kl_from_latent(s: float) -> int:
    return int(min(4, max(0, math.floor(s + 0.5))))


def joint_space_width(config: PhantomConfig, s: float) -> float:
    return config.gap_max - (config.gap_max - config.gap_min) * s / 4.0


def osteophyte_radius(config: PhantomConfig, s: float) -> float:
    return config.osteophyte_min + (config.osteophyte_max - config.osteophyte_min) * s / 4.0


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(np.clip(z, -30.0, 30.0)))


class _Canvas:
    """Joint-centred coordinate axes of one view; shapes are evaluated on local windows."""

    def __init__(self, n: int, center: Tuple[float, float], k: float, mirror: bool):
        ax = np.arange(n, dtype=np.float32)
        self.n = n
        self.u = (ax - np.float32(center[0])) / np.float32(k)
        if mirror:
            self.u = -self.u
        self.v = (ax - np.float32(center[1])) / np.float32(k)

    def window(self, u0, u1, v0, v1):
        cols = np.nonzero((self.u >= u0) & (self.u <= u1))[0]
        rows = np.nonzero((self.v >= v0) & (self.v <= v1))[0]
        if not len(cols) or not len(rows):
            return None
        return slice(rows[0], rows[-1] + 1), slice(cols[0], cols[-1] + 1)

    def superellipse(self, cu, cv, a, b, p, soft):
        out = np.zeros((self.n, self.n), dtype=np.float32)
        m = 6 * soft
        win = self.window(cu - a - m, cu + a + m, cv - b - m, cv + b + m)
        if win is None:
            return out
        u = self.u[win[1]][None, :]
        v = self.v[win[0]][:, None]
        if p == 2:
            r = np.sqrt(((u - cu) / a) ** 2 + ((v - cv) / b) ** 2)
        else:
            r = (np.abs((u - cu) / a) ** p + np.abs((v - cv) / b) ** p) ** (1.0 / p)
        out[win] = _sigmoid((r - 1.0) * (min(a, b) / soft))
        return out

    def rect(self, u0, u1, v0, v1, soft):
        """Separable soft box; returned as an outer product of two 1-D profiles."""
        pu = _sigmoid(-(self.u - u0) / soft) * _sigmoid(-(u1 - self.u) / soft)
        pv = _sigmoid(-(self.v - v0) / soft) * _sigmoid(-(v1 - self.v) / soft)
        return pv[:, None] * pu[None, :]

    def add_disk(self, img, cu, cv, r, soft, amp):
        m = r + 6 * soft
        win = self.window(cu - m, cu + m, cv - m, cv + m)
        if win is None:
            return
        u = self.u[win[1]][None, :]
        v = self.v[win[0]][:, None]
        d = np.sqrt((u - cu) ** 2 + (v - cv) ** 2) - r
        img[win] += amp * _sigmoid(d / soft)

    def add_blob(self, img, cu, cv, r, amp):
        m = 3.5 * r
        win = self.window(cu - m, cu + m, cv - m, cv + m)
        if win is None:
            return
        u = self.u[win[1]][None, :]
        v = self.v[win[0]][:, None]
        img[win] += amp * np.exp(-((u - cu) ** 2 + (v - cv) ** 2) / (2 * r * r))


def _render_view(config: PhantomConfig, view: str, side: str, s: float, center: Tuple[float, float],
                 rng: np.random.Generator) -> np.ndarray:
    variation = config.pa_variation if view == "PA" else config.lat_variation
    vgap = max(joint_space_width(config, s) * (1 + variation * rng.standard_normal()), 1.0)
    vscl = max(config.sclerosis_max * s / 4.0 * (1 + variation * rng.standard_normal()), 0.0)
    vrad = osteophyte_radius(config, s) * max(1 + variation * rng.standard_normal(), 0.1)
    n_ost = int(math.ceil(s - 1e-12))

    # +u points to the lateral side of the knee, +v down
    cv = _Canvas(config.canvas, center, config.scale, mirror=(side == "left"))
    half = vgap / 2.0
    soft = 2.5
    bone_level = 0.55

    if view == "PA":
        femur = np.maximum(cv.superellipse(0, -half - 130, 240, 130, 4, soft),
                           cv.rect(-125, 125, -1e6, -half - 120, soft))
        tibia = np.maximum(cv.superellipse(0, half + 105, 255, 105, 4, soft),
                           cv.rect(-115, 115, half + 100, 1e6, soft))
        bone = np.maximum(np.maximum(femur, tibia), 0.8 * cv.superellipse(205, half + 300, 40, 150, 2, soft))
        margins = [(240, -half - 12), (255, half + 12), (-240, -half - 12), (-255, half + 12)]
        ost_contrast, gap_fill = 1.0, 0.0
    else:
        femur = np.maximum(cv.superellipse(20, -half - 150, 210, 150, 2, soft),
                           cv.rect(-90, 130, -1e6, -half - 150, soft))
        tibia = np.maximum(cv.superellipse(0, half + 95, 235, 95, 4, soft),
                           cv.rect(-60, 150, half + 90, 1e6, soft))
        bone = np.maximum(np.maximum(femur, tibia), 0.9 * cv.superellipse(-285, -half - 170, 55, 115, 2, soft))
        margins = [(-200, -half - 10), (225, half + 12), (215, -half - 40), (-230, half + 12)]
        ost_contrast, gap_fill = config.lat_osteophyte_contrast, config.lat_gap_fill
    del femur, tibia

    # subchondral sclerosis decays away from both articular surfaces
    vv = cv.v
    band = np.where(vv < -half, np.exp((vv + half) / 28.0), 0.0) + np.where(vv > half, np.exp((half - vv) / 28.0), 0.0)
    lateral_extent = (np.abs(cv.u) < 250).astype(np.float32)
    img = bone * (bone_level + vscl * band.astype(np.float32)[:, None] * lateral_extent[None, :])
    img += 0.16 * cv.rect(-380, 380, -1e6, 1e6, 25.0)  # soft tissue of the leg
    img += 0.06
    if gap_fill:
        img += (gap_fill * bone_level) * cv.rect(-230, 230, -half, half, soft)
    for mu, mv in margins[:n_ost]:
        outward = 1.0 if mu > 0 else -1.0
        cv.add_disk(img, mu + outward * 0.45 * vrad, mv, vrad, soft, ost_contrast * bone_level)
    if view == "LAT" and config.lat_occlusion:
        for _ in range(6):
            bu, bvv, br, amp = rng.uniform(-300, 300), rng.uniform(-250, 250), rng.uniform(40, 120), rng.uniform(-1, 1)
            cv.add_blob(img, bu, bvv, br, config.lat_occlusion * amp)
    img += np.float32(config.noise_sigma) * rng.standard_normal(img.shape, dtype=np.float32)
    np.clip(img, 0.0, 1.2, out=img)
    return (img * 50000.0 + 1000.5).astype(np.uint16)


def generate_exam(config: PhantomConfig, patient_id: str, visit: int, side: str, latent: float,
                  copy: int = 0, views: Sequence[str] = VIEWS) -> PhantomExam:
    """Render the PA and LAT views of one knee appearance."""
    if not 0.0 <= latent <= 4.0:
        raise ValueError(f"latent severity must lie in [0, 4], got {latent}")
    if side not in SIDES:
        raise ValueError(f"side must be 'left' or 'right', got {side!r}")
    ss = stream_seed(config.seed, "exam", patient_id, visit, side)
    rng_geom = np.random.default_rng(ss)
    mid = config.canvas / 2.0
    centers, images = {}, {}
    for view in VIEWS:
        c = tuple(float(x) for x in mid + rng_geom.uniform(-config.center_jitter, config.center_jitter, 2))
        centers[view] = c
    for view in views:
        rng = np.random.default_rng(stream_seed(config.seed, "render", patient_id, visit, side, view, copy))
        images[view] = Raster(_render_view(config, view, side, latent, centers[view], rng), config.spacing)
    return PhantomExam(
        patient_id=patient_id, visit=visit, side=side, latent=float(latent),
        kl_grade=kl_from_latent(latent),
        jsn_grade=int(min(3, math.floor(latent * 3.0 / 4.0 + 0.5))),
        osteo_grade=int(min(3, math.ceil(latent - 1e-12))),
        joint_space_width=joint_space_width(config, latent),
        osteophyte_count=int(math.ceil(latent - 1e-12)),
        centers=centers, images=images,
    )


def sample_latent(grade: int, rng: np.random.Generator) -> float:
    """Uniform latent severity within the rounding bin of ``grade``."""
    lo, hi = max(grade - 0.5, 0.0), min(grade + 0.5, 4.0)
    s = rng.uniform(lo, hi)
    return float(min(s, np.nextafter(grade + 0.5, -np.inf)) if grade < 4 else s)


@dataclass(frozen=True)
class KneeSpec:
    """Everything needed to render (or skip) one knee appearance of a cohort."""

    patient_id: str
    visit: int
    side: str
    latent: float
    flags: Tuple[str, ...] = ()
    missing_grade: Optional[str] = None
    missing_view: Optional[str] = None
    duplicate_view: Optional[str] = None
    recorded_grade: Optional[float] = None

    @property
    def kl_grade(self) -> int:
        return kl_from_latent(self.latent)


def plan_cohort(config: PhantomConfig, n_patients: int, visits_per_patient: int = 2,
                grade_distribution: Optional[Sequence[float]] = None) -> List[KneeSpec]:
    """Draw grades and curation defects for every knee appearance, without rendering.

    A knee keeps its latent severity across visits; defects are drawn per
    knee-visit from the config's fractions.
    """
    if n_patients < 1:
        raise ValueError("n_patients must be at least 1")
    dist = np.asarray(TABLE2_TRAIN if grade_distribution is None else grade_distribution, dtype=np.float64)
    if dist.shape != (5,) or (dist < 0).any() or dist.sum() <= 0:
        raise ValueError(f"grade distribution must be 5 non-negative weights, got {grade_distribution}")
    dist = dist / dist.sum()
    width = max(4, len(str(n_patients - 1)))
    plan = []
    for p in range(n_patients):
        pid = f"P{p:0{width}d}"
        for side in SIDES:
            rng = np.random.default_rng(stream_seed(config.seed, "knee", pid, side))
            grade = int(rng.choice(5, p=dist))
            latent = sample_latent(grade, rng)
            for visit in range(visits_per_patient):
                d = np.random.default_rng(stream_seed(config.seed, "defects", pid, visit, side))
                u = d.random(6)
                flags = ("poor_quality",) if u[0] < config.flagged_fraction else ()
                missing_grade = ("jsn" if u[5] < 0.5 else "osteo") if u[1] < config.missing_grade_fraction else None
                missing_view = "LAT" if u[2] < config.missing_view_fraction else None
                dup = ("PA" if u[5] < 0.5 else "LAT") if u[3] < config.duplicate_fraction else None
                recorded = 1.9 if grade == 2 and u[4] < config.grade_19_fraction else None
                plan.append(KneeSpec(pid, visit, side, latent, flags, missing_grade, missing_view, dup, recorded))
    return plan


def render_knee(config: PhantomConfig, spec: KneeSpec, copy: int = 0) -> PhantomExam:
    return generate_exam(config, spec.patient_id, spec.visit, spec.side, spec.latent, copy=copy)


def _image_name(spec: KneeSpec, view: str, copy: int) -> str:
    suffix = f"_dup{copy}" if copy else ""
    return f"{spec.patient_id}_V{spec.visit}_{spec.side}_{view}{suffix}.pgm"


def generate_cohort(config: PhantomConfig, n_patients: int, visits_per_patient: int = 2,
                    grade_distribution: Optional[Sequence[float]] = None,
                    out_dir=None) -> Tuple[List[ExamRecord], List[dict]]:
    """Render a cohort to ``out_dir`` and return its manifest and centre annotations.

    Writes ``images/*.pgm`` (16-bit), ``manifest.csv``, ``annotations.csv``
    (true joint centre per image) and ``phantom_config.json``. With
    ``out_dir=None`` nothing is rendered and only the records are returned.
    """
    plan = plan_cohort(config, n_patients, visits_per_patient, grade_distribution)
    if out_dir is not None:
        out_dir = Path(out_dir)
        try:
            (out_dir / "images").mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise OSError(f"cannot create output directory {out_dir}: {exc}") from exc
        if not os.access(out_dir, os.W_OK):
            raise OSError(f"output directory {out_dir} is not writable")
    records, annotations = [], []
    for spec in plan:
        views = [v for v in VIEWS if v != spec.missing_view]
        copies = {v: (2 if v == spec.duplicate_view else 1) for v in views}
        exam = None
        for view in views:
            for copy in range(copies[view]):
                name = _image_name(spec, view, copy)
                if out_dir is not None:
                    exam = generate_exam(config, spec.patient_id, spec.visit, spec.side, spec.latent,
                                         copy=copy, views=(view,))
                    write_pgm(out_dir / "images" / name, exam.images[view].samples)
                else:
                    exam = generate_exam(config, spec.patient_id, spec.visit, spec.side, spec.latent,
                                         copy=copy, views=())
                records.append(ExamRecord(
                    patient_id=spec.patient_id, visit=spec.visit, side=spec.side, view=view,
                    image_path=f"images/{name}", pixel_spacing=config.spacing,
                    kl_grade=spec.recorded_grade if spec.recorded_grade is not None else float(spec.kl_grade),
                    jsn_grade=None if spec.missing_grade == "jsn" else exam.jsn_grade,
                    osteo_grade=None if spec.missing_grade == "osteo" else exam.osteo_grade,
                    flags=frozenset(spec.flags),
                ))
                cx, cy = exam.centers[view]
                annotations.append({"image_path": f"images/{name}", "center_x": cx, "center_y": cy,
                                    "latent": spec.latent})
    if out_dir is not None:
        write_manifest(out_dir / "manifest.csv", records)
        write_annotations(out_dir / "annotations.csv", annotations)
        (out_dir / "phantom_config.json").write_text(config.to_json() + "\n")
    return records, annotations


def write_annotations(path, annotations: Sequence[dict]) -> None:
    with open(path, "w") as fh:
        fh.write("image_path,center_x,center_y,latent\n")
        for a in annotations:
            fh.write(f"{a['image_path']},{a['center_x']!r},{a['center_y']!r},{a['latent']!r}\n")


def read_annotations(path) -> Dict[str, dict]:
    with open(path, newline="") as fh:
        return {row["image_path"]: {"center": (float(row["center_x"]), float(row["center_y"])),
                                    "latent": float(row["latent"])}
                for row in csv.DictReader(fh)}


# --- simulated readers ------------------------------------------------------

@dataclass
class SimulatedReaderModel:
    """Reader that moves the true grade to an adjacent one at each boundary.

    ``swap_probabilities[b]`` is the chance of crossing the boundary between
    grades ``b`` and ``b + 1`` (from either side). ``bias`` in (-1, 1) tilts
    every swap upward (positive) or downward (negative).
    """

    swap_probabilities: Tuple[float, ...] = (0.25, 0.12, 0.12, 0.12)
    bias: float = 0.0
    seed: int = 0
    name: str = "reader"

    def __post_init__(self):
        if len(self.swap_probabilities) != 4:
            raise ValueError("need one swap probability per grade boundary (4)")
        if not -1.0 < self.bias < 1.0:
            raise ValueError("reader bias must lie in (-1, 1)")

    def transition(self, grade: int) -> Tuple[float, float]:
        """(P(read one lower), P(read one higher)) for a true ``grade``."""
        p = self.swap_probabilities
        down = p[grade - 1] * (1.0 - self.bias) if grade > 0 else 0.0
        up = p[grade] * (1.0 + self.bias) if grade < 4 else 0.0
        total = down + up
        if total > 1.0:
            down, up = down / total, up / total
        return down, up


DEFAULT_READER_BIASES = (-0.2, -0.1, 0.0, 0.1, 0.2)


def default_readers(seed: int = 0, swap_probabilities=(0.25, 0.12, 0.12, 0.12),
                    biases: Sequence[float] = DEFAULT_READER_BIASES) -> List[SimulatedReaderModel]:
    return [SimulatedReaderModel(tuple(swap_probabilities), b, seed + 1000 * (i + 1), f"reader{i + 1}")
            for i, b in enumerate(biases)]


def simulate_reader(model: SimulatedReaderModel, exam, grade: Optional[int] = None) -> int:
    """KL grade this reader assigns to ``exam`` (anything with patient_id, visit, side, kl_grade)."""
    true = int(exam.kl_grade if grade is None else grade)
    u = np.random.default_rng(stream_seed(model.seed, "read", exam.patient_id, exam.visit, exam.side)).random()
    down, up = model.transition(true)
    if u < down:
        return true - 1
    if u < down + up:
        return true + 1
    return true
