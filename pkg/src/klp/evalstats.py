"""Accuracy, confusion matrices and Cohen's kappa for KL grades."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from itertools import combinations
from typing import Dict, List, Sequence

import numpy as np

N_GRADES = 5
SCHEMES = ("none", "linear", "quadratic")


def _grades(x, name: str) -> np.ndarray:
    a = np.asarray(x)
    if a.ndim != 1:
        raise ValueError(f"{name} must be one-dimensional")
    if a.size and (not np.all(a == np.round(a)) or a.min() < 0 or a.max() >= N_GRADES):
        raise ValueError(f"{name} must hold integer grades in 0..{N_GRADES - 1}")
    return a.astype(np.int64)


def accuracy(predictions, labels) -> float:
    p, t = np.asarray(predictions), np.asarray(labels)
    if p.shape != t.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {t.shape}")
    if p.size == 0:
        raise ValueError("accuracy of an empty sample is undefined")
    return float(np.mean(p == t))


def confusion(predictions, labels, normalize: bool = False, k: int = N_GRADES) -> np.ndarray:
    """Counts with rows indexed by ``labels`` and columns by ``predictions``.

    ``normalize`` divides each row by its total; all-zero rows stay zero.
    """
    p, t = _grades(predictions, "predictions"), _grades(labels, "labels")
    if p.shape != t.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {t.shape}")
    m = np.zeros((k, k), dtype=np.int64)
    np.add.at(m, (t, p), 1)
    if not normalize:
        return m
    totals = m.sum(axis=1, keepdims=True)
    return np.divide(m, totals, out=np.zeros((k, k)), where=totals > 0)


def weight_matrix(scheme: str, k: int = N_GRADES) -> np.ndarray:
    """Disagreement weights: 0/1, |i-j|/(k-1) or (i-j)^2/(k-1)^2."""
    i, j = np.indices((k, k))
    if scheme == "none":
        return (i != j).astype(np.float64)
    if scheme == "linear":
        return np.abs(i - j) / (k - 1)
    if scheme == "quadratic":
        return (i - j) ** 2 / (k - 1) ** 2
    raise ValueError(f"unknown weighting scheme {scheme!r}; expected one of {SCHEMES}")


def kappa(ratings_a, ratings_b, scheme: str = "quadratic", k: int = N_GRADES) -> float:
    """Weighted Cohen's kappa, 1 - sum(w O) / sum(w E).

    O is the joint proportion matrix, E the outer product of the two
    marginals. Two identical constant raters (0/0) give 1.0.
    """
    a, b = _grades(ratings_a, "ratings_a"), _grades(ratings_b, "ratings_b")
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    if a.size == 0:
        raise ValueError("kappa needs at least one rated case")
    w = weight_matrix(scheme, k)
    observed = np.zeros((k, k))
    np.add.at(observed, (a, b), 1.0)
    observed /= a.size
    expected = np.outer(observed.sum(axis=1), observed.sum(axis=0))
    # w is symmetric, so symmetrising both tables leaves the value unchanged
    # and makes kappa(a, b) == kappa(b, a) bit for bit
    observed = (observed + observed.T) / 2
    expected = (expected + expected.T) / 2
    den = (w * expected).sum()
    if den == 0:
        return 1.0
    return float(1.0 - (w * observed).sum() / den)


@dataclass
class RatingsTable:
    """Cases x raters grade matrix with a role (reader, reference, model) per rater."""

    case_ids: List[str]
    rater_ids: List[str]
    roles: Dict[str, str]
    grades: np.ndarray

    @classmethod
    def from_long(cls, rows: Sequence[dict]) -> "RatingsTable":
        """Build from records with keys case_id, rater_id, role, grade; missing cells are -1."""
        cases, raters, roles = [], [], {}
        for r in rows:
            if r["case_id"] not in cases:
                cases.append(r["case_id"])
            if r["rater_id"] not in raters:
                raters.append(r["rater_id"])
            prev = roles.setdefault(r["rater_id"], r["role"])
            if prev != r["role"]:
                raise ValueError(f"rater {r['rater_id']} has conflicting roles {prev!r} and {r['role']!r}")
        ci = {c: i for i, c in enumerate(cases)}
        ri = {c: i for i, c in enumerate(raters)}
        g = np.full((len(cases), len(raters)), -1, dtype=np.int64)
        for r in rows:
            g[ci[r["case_id"]], ri[r["rater_id"]]] = int(r["grade"])
        return cls(cases, raters, roles, g)

    @classmethod
    def read_csv(cls, path) -> "RatingsTable":
        with open(path, newline="") as fh:
            return cls.from_long(list(csv.DictReader(fh)))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["case_id", "rater_id", "role", "grade"])
        for i, c in enumerate(self.case_ids):
            for j, r in enumerate(self.rater_ids):
                if self.grades[i, j] >= 0:
                    w.writerow([c, r, self.roles[r], int(self.grades[i, j])])
        return buf.getvalue()

    def missing_cells(self) -> List[tuple]:
        return [(self.case_ids[i], self.rater_ids[j]) for i, j in zip(*np.nonzero(self.grades < 0))]


def pairwise_kappa_matrix(table: RatingsTable, scheme: str = "quadratic") -> np.ndarray:
    missing = table.missing_cells()
    if missing:
        shown = ", ".join(f"{c}/{r}" for c, r in missing[:10])
        more = f" and {len(missing) - 10} more" if len(missing) > 10 else ""
        raise ValueError(f"ratings table is incomplete; missing {shown}{more}")
    n = len(table.rater_ids)
    m = np.eye(n)
    for i, j in combinations(range(n), 2):
        m[i, j] = m[j, i] = kappa(table.grades[:, i], table.grades[:, j], scheme)
    return m


def reader_study_summary(matrix: np.ndarray, rater_ids: Sequence[str], roles: Dict[str, str]) -> Dict[str, float]:
    """Mean kappa over reader pairs, model-reader pairs and reader-reference pairs."""
    unlabeled = [r for r in rater_ids if r not in roles]
    if unlabeled:
        raise ValueError(f"raters without a role: {unlabeled}")
    readers = [i for i, r in enumerate(rater_ids) if roles[r] == "reader"]
    models = [i for i, r in enumerate(rater_ids) if roles[r] == "model"]
    refs = [i for i, r in enumerate(rater_ids) if roles[r] == "reference"]

    def mean(pairs):
        vals = [matrix[i, j] for i, j in pairs]
        return float(np.mean(vals)) if vals else float("nan")

    return {
        "mean_reader_pairs": mean(combinations(readers, 2)),
        "mean_model_vs_readers": mean((m, r) for m in models for r in readers),
        "mean_readers_vs_reference": mean((r, f) for f in refs for r in readers),
    }


def matrix_to_csv(matrix: np.ndarray, labels: Sequence[str], corner: str = "") -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([corner, *labels])
    for lab, row in zip(labels, matrix):
        w.writerow([lab, *(_fmt(x) for x in row)])
    return buf.getvalue()


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return f"{float(x):.6f}"
