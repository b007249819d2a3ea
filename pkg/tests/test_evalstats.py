import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from klp.evalstats import (RatingsTable, accuracy, confusion, kappa, matrix_to_csv, pairwise_kappa_matrix,
                           reader_study_summary, weight_matrix)

from oracles import kappa_brute

grades = st.lists(st.integers(0, 4), min_size=1, max_size=50)


def test_accuracy_examples():
    assert accuracy([1, 2, 3], [1, 2, 3]) == 1.0
    assert accuracy([0, 0], [1, 1]) == 0.0
    assert accuracy([0, 1, 2, 2], [0, 2, 2, 2]) == 0.75
    with pytest.raises(ValueError):
        accuracy([], [])


def test_confusion_counts_and_normalisation():
    assert np.array_equal(confusion([0, 1, 2, 3, 4], [0, 1, 2, 3, 4]), np.eye(5, dtype=int))
    assert confusion([1, 1], [0, 0])[0, 1] == 2
    m = confusion([0, 1, 1, 4, 2], [0, 0, 1, 4, 4], normalize=True)
    np.testing.assert_allclose(m.sum(axis=1), [1, 1, 0, 0, 1], atol=1e-9)
    with pytest.raises(ValueError):
        confusion([5], [0])


def test_weight_matrices():
    for s in ("none", "linear", "quadratic"):
        w = weight_matrix(s)
        assert np.all(np.diag(w) == 0) and np.array_equal(w, w.T) and w.max() == 1
    assert weight_matrix("quadratic")[0, 1] == 1 / 16


def test_kappa_examples():
    for s in ("none", "linear", "quadratic"):
        assert kappa([0, 1, 2, 3], [0, 1, 2, 3], s) == 1.0
        assert kappa([0, 0, 1, 1], [0, 1, 1, 1], s) == pytest.approx(0.5, abs=1e-12)
    assert kappa([0, 1, 2, 2], [0, 2, 2, 2], "none") == pytest.approx((0.75 - 0.4375) / (1 - 0.4375), abs=1e-12)
    assert round(kappa([0, 1, 2, 2], [0, 2, 2, 2], "none"), 4) == 0.5556
    assert kappa([3, 3, 3], [3, 3, 3]) == 1.0


def test_kappa_errors():
    with pytest.raises(ValueError):
        kappa([0, 1], [0])
    with pytest.raises(ValueError):
        kappa([], [])


@settings(max_examples=200, deadline=None)
@given(st.data(), st.sampled_from(["none", "linear", "quadratic"]))
def test_kappa_oracle_symmetry_permutation(data, scheme):
    a = data.draw(grades)
    b = data.draw(st.lists(st.integers(0, 4), min_size=len(a), max_size=len(a)))
    k = kappa(a, b, scheme)
    assert abs(k - kappa_brute(a, b, scheme)) < 1e-12
    assert k == kappa(b, a, scheme)
    perm = data.draw(st.permutations(range(len(a))))
    assert kappa([a[i] for i in perm], [b[i] for i in perm], scheme) == pytest.approx(k, abs=1e-12)


def test_kappa_weight_scale_invariance():
    rng = np.random.default_rng(0)
    a, b = rng.integers(0, 5, 40), rng.integers(0, 5, 40)
    w = weight_matrix("quadratic")
    o = np.zeros((5, 5))
    np.add.at(o, (a, b), 1 / 40)
    e = np.outer(o.sum(1), o.sum(0))
    for c in (1.0, 3.0, 16.0):
        assert 1 - (c * w * o).sum() / (c * w * e).sum() == pytest.approx(kappa(a, b), abs=1e-12)


def table(grades, roles):
    ids = list(roles)
    return RatingsTable([f"c{i}" for i in range(len(grades))], ids, roles, np.asarray(grades))


def test_pairwise_matrix_and_summary():
    rng = np.random.default_rng(1)
    truth = rng.integers(0, 5, 30)
    roles = {f"R{i}": "reader" for i in range(5)} | {"ref": "reference", "model": "model"}
    g = np.stack([truth] * 7, axis=1)
    m = pairwise_kappa_matrix(table(g, roles))
    assert m.shape == (7, 7) and np.all(m == 1.0)
    s = reader_study_summary(m, list(roles), roles)
    assert s == {"mean_reader_pairs": 1.0, "mean_model_vs_readers": 1.0, "mean_readers_vs_reference": 1.0}

    g = rng.integers(0, 5, (30, 7))
    m = pairwise_kappa_matrix(table(g, roles), "linear")
    assert np.all(np.abs(m - m.T) <= 1e-15) and np.all(np.diag(m) == 1.0)
    s = reader_study_summary(m, list(roles), roles)
    iu = np.triu_indices(5, 1)
    assert s["mean_reader_pairs"] == pytest.approx(m[:5, :5][iu].mean())
    assert len(iu[0]) == 10
    assert s["mean_model_vs_readers"] == pytest.approx(m[6, :5].mean())
    with pytest.raises(ValueError):
        reader_study_summary(m, list(roles), {"R0": "reader"})


def test_incomplete_table_lists_missing_cells():
    rows = [dict(case_id="a", rater_id="r1", role="reader", grade=1),
            dict(case_id="a", rater_id="r2", role="reader", grade=1),
            dict(case_id="b", rater_id="r1", role="reader", grade=2)]
    t = RatingsTable.from_long(rows)
    with pytest.raises(ValueError, match="b/r2"):
        pairwise_kappa_matrix(t)


def test_ratings_csv_roundtrip(tmp_path):
    rows = [dict(case_id=c, rater_id=r, role="reader", grade=(i + j) % 5)
            for i, c in enumerate("abc") for j, r in enumerate(["x", "y"])]
    t = RatingsTable.from_long(rows)
    p = tmp_path / "r.csv"
    p.write_text(t.to_csv())
    u = RatingsTable.read_csv(p)
    assert u.case_ids == t.case_ids and np.array_equal(u.grades, t.grades)
    assert matrix_to_csv(np.eye(2), ["x", "y"]).splitlines()[1] == "x,1.000000,0.000000"
