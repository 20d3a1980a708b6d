import numpy as np
import pytest
from hypothesis import given, strategies as st
from sklearn.base import clone

from rainvsl.calibration import (CalibrationError, DetectorFormatError, FundamentalDiagramRegressor,
                                 RainSpeedDensityRegressor, fit_fundamental_diagram, fit_rain_speed_density,
                                 flow_consistent, read_detector_csv)

from conftest import synthetic_detector_rows, write_detector_csv


def fd_curve(k, vf=120.0, kc=30.0, a=2.0):
    return vf * np.exp(-(1 / a) * (k / kc) ** a)


def rain_sample(rng, n, theta=(0.29, 0.17, -43.76), noise=0.0):
    A, B, C = theta
    X = np.column_stack([rng.uniform(5.0, 40.0, n), rng.uniform(0.05, 0.25, n)])
    y = A * np.exp(B * X[:, 0] + C * X[:, 1])
    return X, y * (1 + noise * rng.standard_normal(n))


# -- speed-density curve ----------------------------------------------------

def test_fd_noise_free_roundtrip():
    k = np.linspace(1.0, 90.0, 60)
    est = FundamentalDiagramRegressor().fit(k[:, None], fd_curve(k))
    assert (est.v_f_, est.k_c_, est.a_) == pytest.approx((120.0, 30.0, 2.0), rel=1e-8)
    assert est.rms_ < 1e-6


@pytest.mark.parametrize("seed", range(5))
def test_fd_one_percent_noise_within_two_percent(seed):
    rng = np.random.default_rng(seed)
    k = np.linspace(1.0, 90.0, 200)
    y = fd_curve(k) * (1 + 0.01 * rng.standard_normal(k.size))
    est = FundamentalDiagramRegressor().fit(k[:, None], y)
    assert (est.v_f_, est.k_c_, est.a_) == pytest.approx((120.0, 30.0, 2.0), rel=0.02)


def test_fd_constant_density_rejected():
    k = np.full(40, 25.0)
    with pytest.raises(CalibrationError, match="too narrow"):
        FundamentalDiagramRegressor().fit(k[:, None], fd_curve(k))


def test_fd_too_few_rows():
    k = np.linspace(1.0, 90.0, 29)
    with pytest.raises(CalibrationError, match="at least 30"):
        FundamentalDiagramRegressor().fit(k[:, None], fd_curve(k))


def test_fd_is_deterministic_and_predicts():
    rng = np.random.default_rng(3)
    k = np.linspace(1.0, 90.0, 80)
    y = fd_curve(k) * (1 + 0.02 * rng.standard_normal(k.size))
    a = FundamentalDiagramRegressor().fit(k[:, None], y)
    b = FundamentalDiagramRegressor().fit(k[:, None], y)
    assert (a.v_f_, a.k_c_, a.a_, a.rms_) == (b.v_f_, b.k_c_, b.a_, b.rms_)
    np.testing.assert_allclose(a.predict([[0.0], [a.k_c_]]), [a.v_f_, a.v_f_ * np.exp(-1 / a.a_)])


def test_fd_estimator_contract():
    est = FundamentalDiagramRegressor(min_rows=10)
    assert est.get_params() == {"start_exponents": (1.2, 1.6, 2.0, 2.4), "min_rows": 10, "min_spread": 0.5}
    assert clone(est).get_params() == est.get_params()
    with pytest.raises(ValueError, match="one feature"):
        est.fit(np.ones((20, 2)), np.ones(20))


# -- rain speed-density model -----------------------------------------------

def test_rain_noise_free_exact():
    X, y = rain_sample(np.random.default_rng(0), 50)
    est = RainSpeedDensityRegressor().fit(X, y)
    assert abs(est.A_ - 0.29) <= 1e-9
    assert abs(est.B_ - 0.17) <= 1e-9
    assert abs(est.C_ + 43.76) <= 1e-9
    p = est.to_params()
    assert (p.A, p.B, p.C) == pytest.approx((0.29, 0.17, -43.76), abs=1e-9)


@given(A=st.floats(0.05, 5.0), B=st.floats(-0.2, 0.2), C=st.floats(-60.0, 10.0), seed=st.integers(0, 1000))
def test_rain_roundtrip_property(A, B, C, seed):
    X, y = rain_sample(np.random.default_rng(seed), 40, (A, B, C))
    est = RainSpeedDensityRegressor().fit(X, y)
    assert est.A_ == pytest.approx(A, rel=1e-8)
    assert est.B_ == pytest.approx(B, abs=1e-9)
    assert est.C_ == pytest.approx(C, abs=1e-7)


def test_rain_two_percent_noise_median_within_five_percent():
    rng = np.random.default_rng(11)
    fits = []
    for _ in range(100):
        X, y = rain_sample(rng, 50, noise=0.02)
        est = RainSpeedDensityRegressor().fit(X, y)
        fits.append((est.A_, est.B_, est.C_))
    med = np.median(np.array(fits), axis=0)
    np.testing.assert_allclose(med, [0.29, 0.17, -43.76], rtol=0.05)


def test_rain_one_row_rank_error():
    with pytest.raises(CalibrationError, match="rank"):
        RainSpeedDensityRegressor().fit([[20.0, 0.1]], [1.0])


def test_rain_constant_visibility_rank_error():
    X, y = rain_sample(np.random.default_rng(0), 30)
    X[:, 1] = 0.1
    with pytest.raises(CalibrationError, match="rank"):
        RainSpeedDensityRegressor().fit(X, y)


def test_rain_nonpositive_speed_names_row():
    X, y = rain_sample(np.random.default_rng(0), 10)
    y[6] = 0.0
    with pytest.raises(CalibrationError, match="row 6"):
        RainSpeedDensityRegressor().fit(X, y)


# -- detector files -----------------------------------------------------------

def test_flow_tolerance():
    assert flow_consistent(1200.0, 20.0, 60.0)
    assert flow_consistent(1439.0, 20.0, 60.0)
    assert not flow_consistent(1441.0, 20.0, 60.0)
    assert flow_consistent(0.0, 0.0, 80.0)


def test_csv_round_trip_and_flagging(tmp_path):
    rows = synthetic_detector_rows()
    bad = list(rows[5])
    bad[3] *= 2.0  # q off by 100%
    rows[5] = tuple(bad)
    data = read_detector_csv(write_detector_csv(tmp_path / "d.csv", rows))
    assert len(data.rows) == len(rows)
    assert data.flagged == [5]
    assert len(data.clean()) == len(rows) - 1
    assert sorted(data.cells()) == [(1, 0), (2, 1)]


def test_csv_visibility_optional(tmp_path):
    rows = [r[:6] for r in synthetic_detector_rows()]
    data = read_detector_csv(write_detector_csv(tmp_path / "d.csv", rows, "timestamp,segment,lane,q,k,v"))
    assert all(r.visibility is None for r in data.rows)
    with pytest.raises(CalibrationError, match="visibility"):
        fit_rain_speed_density(data)


@pytest.mark.parametrize("header", ["timestamp,segment,lane,q,k", "timestamp,segment,lane,q,k,v,speed"])
def test_csv_bad_header(tmp_path, header):
    path = tmp_path / "d.csv"
    path.write_text(header + "\n")
    with pytest.raises(DetectorFormatError, match="bad header"):
        read_detector_csv(path)


def test_csv_negative_and_garbage_rows(tmp_path):
    path = write_detector_csv(tmp_path / "neg.csv", [(0.0, 1, 0, 10.0, -1.0, 50.0, 0.1)])
    with pytest.raises(DetectorFormatError, match="row 0: negative"):
        read_detector_csv(path)
    path = write_detector_csv(tmp_path / "junk.csv", [(0.0, 1, 0, "ten", 1.0, 50.0, 0.1)])
    with pytest.raises(DetectorFormatError, match="row 0"):
        read_detector_csv(path)


def test_fit_from_file(tmp_path):
    data = read_detector_csv(write_detector_csv(tmp_path / "d.csv", synthetic_detector_rows()))
    fits = fit_fundamental_diagram(data)
    assert sorted(fits) == [(1, 0), (2, 1)]
    for est in fits.values():
        assert (est.v_f_, est.k_c_, est.a_) == pytest.approx((120.0, 30.0, 2.0), rel=1e-6)
    rain = fit_rain_speed_density(data)
    assert (rain.A_, rain.B_, rain.C_) == pytest.approx((0.29, 0.17, -43.76), rel=1e-8)


def test_fit_error_names_cell(tmp_path):
    rows = [r for r in synthetic_detector_rows() if r[1] == 1][:20]
    data = read_detector_csv(write_detector_csv(tmp_path / "d.csv", rows))
    with pytest.raises(CalibrationError, match="segment 1 lane 0"):
        fit_fundamental_diagram(data)
