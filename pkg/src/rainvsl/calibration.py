"""Least-squares calibration from detector records.

Both fitters follow the scikit-learn estimator contract: hyperparameters in
``__init__``, learned values with a trailing underscore after ``fit``, and
``predict`` mapping features to speed. Feature columns:

* ``FundamentalDiagramRegressor``: X = [[k]], y = v
* ``RainSpeedDensityRegressor``: X = [[k, L_v]], y = v
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass

import numpy as np
from scipy.optimize import least_squares
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted, check_X_y, validate_data

from .domain import RainSpeedDensityParams

log = logging.getLogger(__name__)

DETECTOR_COLUMNS = ("timestamp", "segment", "lane", "q", "k", "v")
FLOW_TOLERANCE = 0.20
START_EXPONENTS = (1.2, 1.6, 2.0, 2.4)


class CalibrationError(ValueError):
    """Data cannot identify the requested parameters."""


class DetectorFormatError(ValueError):
    """Detector file does not follow the expected CSV layout."""


@dataclass(frozen=True)
class DetectorRow:
    timestamp: float
    segment: int
    lane: int
    q: float
    k: float
    v: float
    visibility: float | None = None


@dataclass
class DetectorDataset:
    rows: list[DetectorRow]
    flagged: list[int]  # row indices failing q ~ k v

    def clean(self) -> list[DetectorRow]:
        bad = set(self.flagged)
        return [r for n, r in enumerate(self.rows) if n not in bad]

    def cells(self):
        out: dict[tuple[int, int], list[DetectorRow]] = {}
        for r in self.clean():
            out.setdefault((r.segment, r.lane), []).append(r)
        return dict(sorted(out.items()))


def flow_consistent(q, k, v, tol=FLOW_TOLERANCE) -> bool:
    kv = k * v
    if kv == 0:
        return q == 0
    return abs(q - kv) <= tol * kv


def read_detector_csv(path) -> DetectorDataset:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in DETECTOR_COLUMNS if c not in header]
        extra = [c for c in header if c not in DETECTOR_COLUMNS + ("visibility",)]
        if missing or extra:
            raise DetectorFormatError(f"bad header {header}: missing {missing}, unexpected {extra}")
        rows, flagged = [], []
        for n, rec in enumerate(reader):
            try:
                vis = rec.get("visibility")
                row = DetectorRow(float(rec["timestamp"]), int(rec["segment"]), int(rec["lane"]),
                                  float(rec["q"]), float(rec["k"]), float(rec["v"]),
                                  float(vis) if vis not in (None, "") else None)
            except (TypeError, ValueError) as exc:
                raise DetectorFormatError(f"row {n}: {exc}") from None
            if min(row.q, row.k, row.v) < 0:
                raise DetectorFormatError(f"row {n}: negative value")
            if not flow_consistent(row.q, row.k, row.v):
                flagged.append(n)
            rows.append(row)
    if flagged:
        log.warning("%d rows violate q = k v by more than %.0f%% and are excluded",
                    len(flagged), 100 * FLOW_TOLERANCE)
    return DetectorDataset(rows, flagged)


def _fd_model(theta, k):
    vf, kc, a = theta
    return vf * np.exp(-(1.0 / a) * (k / kc) ** a)


class FundamentalDiagramRegressor(RegressorMixin, BaseEstimator):
    """Fit v = v_f exp(-(1/a)(k/k_c)^a) by nonlinear least squares.

    Every start exponent in ``start_exponents`` seeds one solve; the lowest
    cost wins, earlier starts breaking ties, so the result is deterministic.
    """

    def __init__(self, start_exponents=START_EXPONENTS, min_rows=30, min_spread=0.5):
        self.start_exponents = start_exponents
        self.min_rows = min_rows
        self.min_spread = min_spread

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=float)
        if X.shape[1] != 1:
            raise ValueError(f"expected one feature column (density), got {X.shape[1]}")
        k = X[:, 0]
        if len(k) < self.min_rows:
            raise CalibrationError(f"need at least {self.min_rows} rows, got {len(k)}")
        if np.any(k < 0) or np.any(y <= 0):
            raise CalibrationError("densities must be >= 0 and speeds > 0")
        lo, hi = np.percentile(k, [5, 95])
        if hi <= 0 or (hi - lo) / hi < self.min_spread:
            raise CalibrationError(f"densities span [{lo:.3g}, {hi:.3g}]; too narrow to place the knee")

        vf0 = float(np.max(y))
        kc0 = float(np.median(k[k > 0])) if np.any(k > 0) else 1.0
        best = None
        for a0 in self.start_exponents:
            res = least_squares(lambda th: _fd_model(th, k) - y, x0=[vf0, kc0, a0],
                                bounds=([1e-6, 1e-6, 0.1], [np.inf, np.inf, 10.0]),
                                xtol=1e-15, ftol=1e-15, gtol=1e-15, max_nfev=5000)
            if best is None or res.cost < best.cost:
                best = res
        self.v_f_, self.k_c_, self.a_ = (float(t) for t in best.x)
        self.rms_ = float(np.sqrt(np.mean(best.fun ** 2)))
        self.n_features_in_ = 1
        return self

    def predict(self, X):
        check_is_fitted(self, "v_f_")
        X = validate_data(self, X, reset=False, dtype=float)
        return _fd_model((self.v_f_, self.k_c_, self.a_), X[:, 0])


class RainSpeedDensityRegressor(RegressorMixin, BaseEstimator):
    """Fit v = A exp(B k + C L_v) as ordinary least squares on ln v."""

    def __init__(self, rcond=None):
        self.rcond = rcond

    def fit(self, X, y):
        X = np.asarray(X, dtype=float)
        y = np.asarray(y, dtype=float)
        bad = np.flatnonzero(~(y > 0))
        if bad.size:
            raise CalibrationError(f"row {int(bad[0])}: speed must be > 0, got {y[bad[0]]}")
        X, y = check_X_y(X, y, dtype=float)
        if X.shape[1] != 2:
            raise ValueError(f"expected two feature columns (density, visibility), got {X.shape[1]}")
        design = np.column_stack([np.ones(len(y)), X])
        rank = np.linalg.matrix_rank(design)
        if rank < 3:
            raise CalibrationError(f"design matrix rank {rank} < 3; density and visibility must both vary")
        coef, *_ = np.linalg.lstsq(design, np.log(y), rcond=self.rcond)
        self.A_ = float(np.exp(coef[0]))
        self.B_ = float(coef[1])
        self.C_ = float(coef[2])
        self.rms_ = float(np.sqrt(np.mean((self._eval(X) - y) ** 2)))
        self.n_features_in_ = 2
        return self

    def _eval(self, X):
        return self.A_ * np.exp(self.B_ * X[:, 0] + self.C_ * X[:, 1])

    def predict(self, X):
        check_is_fitted(self, "A_")
        X = validate_data(self, X, reset=False, dtype=float)
        return self._eval(X)

    def to_params(self) -> RainSpeedDensityParams:
        check_is_fitted(self, "A_")
        return RainSpeedDensityParams(A=self.A_, B=self.B_, C=self.C_)


def fit_fundamental_diagram(data: DetectorDataset, **kw):
    """Per (segment, lane) fit; returns {(segment, lane): fitted regressor}."""
    out = {}
    for key, rows in data.cells().items():
        X = np.array([[r.k] for r in rows])
        y = np.array([r.v for r in rows])
        try:
            out[key] = FundamentalDiagramRegressor(**kw).fit(X, y)
        except CalibrationError as exc:
            raise CalibrationError(f"segment {key[0]} lane {key[1]}: {exc}") from None
    if not out:
        raise CalibrationError("no usable rows")
    return out


def fit_rain_speed_density(data: DetectorDataset) -> RainSpeedDensityRegressor:
    rows = [r for r in data.clean() if r.visibility is not None]
    if not rows:
        raise CalibrationError("no rows with visibility")
    X = np.array([[r.k, r.visibility] for r in rows])
    y = np.array([r.v for r in rows])
    return RainSpeedDensityRegressor().fit(X, y)
