import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sae.data import AreaDataset, AreaUnits, UnitSample, aggregate, load_area_csv, load_unit_csv, write_area_csv
from sae.errors import DataError


def _write(path, text):
    path.write_text(text)
    return path


def test_two_area_csv(tmp_path):
    f = _write(tmp_path / "u.csv", "area_id,y,x1,weight,N\n"
               "b,1,2,3,10\nb,2,3,3,10\nb,3,4,3,10\na,1,1,2,6\na,2,2,2,6\na,3,5,2,6\n")
    s = load_unit_csv(f)
    assert s.D == 2 and list(s.n_d) == [3, 3]
    assert s.area_ids == ["a", "b"]


def test_zero_weight_row_reports_row(tmp_path):
    f = _write(tmp_path / "u.csv", "area_id,y,x1,weight,N\na,1,2,3,10\na,2,3,0,10\n")
    with pytest.raises(DataError, match="non-positive weight at row 3"):
        load_unit_csv(f)


def test_missing_intercept_added(tmp_path):
    f = _write(tmp_path / "u.csv", "area_id,y,x1,weight,N\na,1,2,3,10\na,2,3,3,10\n")
    s = load_unit_csv(f)
    assert s.p == 2
    np.testing.assert_array_equal(s.areas[0].X[:, 0], 1.0)


def test_size_conflict_is_error(tmp_path):
    f = _write(tmp_path / "u.csv", "area_id,y,x1,weight,N\na,1,2,3,10\na,2,3,3,10\n")
    with pytest.raises(DataError):
        load_unit_csv(f, area_sizes={"a": 11})


def _area_rows(D, bad=None):
    rows = ["area_id,N,n,ybar,xbar_1,W2"]
    for d in range(D):
        n = 30 if d == bad else 3
        rows.append(f"a{d:02d},20,{n},{d + 1.5},{d * 0.1},12")
    return "\n".join(rows) + "\n"


def test_area_csv_25_rows(tmp_path):
    data = load_area_csv(_write(tmp_path / "a.csv", _area_rows(25)))
    assert data.D == 25
    assert np.all(np.isnan(data.psi0))  # psi0 column absent
    assert not data.has_psi0.any()


def test_area_csv_n_exceeds_N(tmp_path):
    with pytest.raises(DataError):
        load_area_csv(_write(tmp_path / "a.csv", _area_rows(4, bad=2)))


def test_area_csv_roundtrip(tmp_path, cal_case):
    _, _, data = cal_case
    data = data.with_psi0(np.linspace(0.1, 0.5, data.D))
    write_area_csv(tmp_path / "a.csv", data)
    back = load_area_csv(tmp_path / "a.csv")
    np.testing.assert_array_equal(back.ybar, data.ybar)
    np.testing.assert_array_equal(back.Xbar, data.Xbar)
    np.testing.assert_array_equal(back.psi0, data.psi0)
    np.testing.assert_array_equal(back.W2, data.W2)


def _one_area(y, w, N, w_cal=None):
    n = len(y)
    return UnitSample([AreaUnits("a", N, y, np.ones((n, 1)), w, w_cal)])


def test_equal_weights_mean():
    data = aggregate(_one_area([1.0, 2.0, 3.0], [4.0, 4.0, 4.0], 12), False, [[1.0]])
    assert data.ybar[0] == 2.0


def test_calibrated_aggregate_arithmetic():
    data = aggregate(_one_area([1.0, 1.0], [3.0, 3.0], 6, w_cal=[2.0, 4.0]), True)
    assert data.ybar[0] == 1.0
    assert data.W2[0] == 20.0


def test_single_unit_area():
    data = aggregate(_one_area([7.5], [9.0], 9, w_cal=[9.0]), True)
    assert data.ybar[0] == 7.5 and data.W2[0] == 81.0


def test_calibrated_xbar_equals_population_mean(cal_case):
    s, T, _ = cal_case
    data = aggregate(s, True)  # weighted covariate means
    Xbar = T / s.N[:, None]
    np.testing.assert_allclose(data.Xbar, Xbar, rtol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_aggregate_ignores_row_order(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 8))
    y, x, w = rng.normal(size=n), rng.gamma(2, size=n), rng.uniform(1, 5, n)
    X = np.column_stack([np.ones(n), x])
    perm = rng.permutation(n)
    a = UnitSample([AreaUnits("a", 100, y, X, w)])
    b = UnitSample([AreaUnits("a", 100, y[perm], X[perm], w[perm])])
    da, db = aggregate(a, False, [[1.0, 2.0]]), aggregate(b, False, [[1.0, 2.0]])
    np.testing.assert_allclose(da.ybar, db.ybar, rtol=1e-13)
    np.testing.assert_allclose(da.W2, db.W2, rtol=1e-13)


def test_area_dataset_sorted_lexicographically():
    d = AreaDataset(["b", "a"], [10, 10], [2, 2], [1.0, 2.0], [[1.0], [1.0]], [50.0, 50.0], [10.0, 10.0])
    assert d.area_id == ["a", "b"]
    np.testing.assert_array_equal(d.ybar, [2.0, 1.0])
