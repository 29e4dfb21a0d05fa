"""Regularised linear predictors, hyperparameter search and the rolling schedule."""
from __future__ import annotations

import csv
import itertools
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

from .errors import (
    ConfigError,
    DataIntegrityError,
    InsufficientSpanError,
    MissingColumnError,
    ParseError,
    RankError,
    UASortError,
)
from .panel import ASSET, MONTH, PanelDataset, year_of

ENET, PCR, PLS = "enet", "pcr", "pls"
METHODS = (ENET, PCR, PLS)
SOURCE_BUILTIN, SOURCE_EXTERNAL = "builtin", "external"

# strongest regularisation first; grid_search breaks ties towards the front
DEFAULT_GRIDS = {
    ENET: {"lambda1": [1e0, 1e-1, 1e-2, 1e-3, 1e-4], "lambda2": [1e0, 1e-1, 1e-2, 1e-3, 1e-4]},
    PCR: {"k": [1, 3, 5, 10, 20]},
    PLS: {"k": [1, 3, 5, 10, 20]},
}
HYPERPARAM_ORDER = {ENET: ("lambda1", "lambda2"), PCR: ("k",), PLS: ("k",)}


@dataclass(frozen=True, eq=False)
class LinearModel:
    intercept: float
    weights: np.ndarray
    method: str
    hyperparams: dict
    columns: tuple = ()
    converged: bool = True
    flags: tuple = ()
    info: dict = field(default_factory=dict)

    def predict(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[1] != len(self.weights):
            raise ValueError(f"design has {X.shape[1]} columns, model expects {len(self.weights)}")
        return self.intercept + X @ self.weights


@dataclass(frozen=True)
class RollingSplit:
    """Inclusive month ranges ``(first, last)`` for one train/validation/test triple."""

    train_months: tuple
    validation_months: tuple
    test_months: tuple

    def __post_init__(self):
        a, b, c = self.train_months, self.validation_months, self.test_months
        if not (a[0] <= a[1] and b[0] <= b[1] and c[0] <= c[1]):
            raise ConfigError("empty month range in split")
        if not (b[0] == a[1] + 1 and c[0] == b[1] + 1):
            raise ConfigError("split ranges must be adjacent and ordered train < validation < test")

    @staticmethod
    def _span(r):
        return range(r[0], r[1] + 1)

    @property
    def train(self) -> range:
        return self._span(self.train_months)

    @property
    def validation(self) -> range:
        return self._span(self.validation_months)

    @property
    def test(self) -> range:
        return self._span(self.test_months)

    @property
    def window(self) -> range:
        """Training plus validation months: the calibration window."""
        return range(self.train_months[0], self.validation_months[1] + 1)

    @property
    def test_year(self) -> int:
        return year_of(self.test_months[0])

    @property
    def split_id(self) -> str:
        return f"Y{self.test_year}"


@dataclass(frozen=True)
class PredictionRecord:
    asset: str
    month: int
    model: str
    mu_hat: float
    source: str = SOURCE_BUILTIN


# --------------------------------------------------------------------------
# Rolling schedule
# --------------------------------------------------------------------------

def _whole_years(month_index) -> list:
    months = set(int(m) for m in month_index)
    years = sorted({year_of(m) for m in months})
    return [y for y in years if all(y * 12 + k in months for k in range(12))]


def rolling_schedule(month_index, train_years: int, val_years: int) -> list:
    """Annually advancing splits: ``train_years`` train, ``val_years`` validation, one test year.

    Only calendar years with all twelve months present are scheduled.
    """
    if train_years < 1 or val_years < 1:
        raise ConfigError("train_years and val_years must be >= 1")
    years = _whole_years(month_index)
    need = train_years + val_years + 1
    if len(years) < need:
        raise InsufficientSpanError(need, len(years))
    if years != list(range(years[0], years[-1] + 1)):
        raise DataIntegrityError("whole years are not contiguous")
    splits = []
    for i in range(len(years) - need + 1):
        y0 = years[i]
        ytr, yval, ytest = y0 + train_years - 1, y0 + train_years + val_years - 1, y0 + need - 1
        splits.append(
            RollingSplit(
                train_months=(y0 * 12, ytr * 12 + 11),
                validation_months=((ytr + 1) * 12, yval * 12 + 11),
                test_months=(ytest * 12, ytest * 12 + 11),
            )
        )
    return splits


# --------------------------------------------------------------------------
# Elastic Net
# --------------------------------------------------------------------------

def _check_design(X, y):
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or y.ndim != 1 or X.shape[0] != y.shape[0]:
        raise ValueError("X must be (n, p) and y must be (n,)")
    if X.shape[0] < 2:
        raise ValueError("need at least 2 rows")
    if not (np.isfinite(X).all() and np.isfinite(y).all()):
        raise ValueError("X and y must be finite")
    return X, y


def enet_objective(X, y, weights, intercept, lambda1, lambda2) -> float:
    """``(1/2n)||y - Xw - b||^2 + lambda1 ||w||_1 + (lambda2/2) ||w||^2``."""
    r = y - X @ weights - intercept
    return 0.5 * r @ r / len(y) + lambda1 * np.abs(weights).sum() + 0.5 * lambda2 * weights @ weights


def fit_enet(X, y, lambda1: float, lambda2: float, tol: float = 1e-7, max_iter: int = 10_000,
             columns: Sequence[str] = ()) -> LinearModel:
    """Cyclic coordinate descent with soft-thresholding on centred data.

    Works on the Gram matrix, so each sweep costs O(p^2) regardless of n.
    Stops when the largest coordinate change in a sweep is below ``tol``.
    """
    X, y = _check_design(X, y)
    if lambda1 < 0 or lambda2 < 0:
        raise ValueError("penalties must be nonnegative")
    n, p = X.shape
    xm = X.mean(axis=0)
    ym = y.mean()
    Xc = X - xm
    yc = y - ym
    G = Xc.T @ Xc / n
    c = Xc.T @ yc / n
    yy = yc @ yc / n
    diag = np.diag(G).copy()

    def objective(w):
        return 0.5 * (yy - 2.0 * c @ w + w @ G @ w) + lambda1 * np.abs(w).sum() + 0.5 * lambda2 * w @ w

    w = np.zeros(p)
    Gw = np.zeros(p)
    path = [objective(w)]
    converged = False
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        max_delta = 0.0
        for j in range(p):
            denom = diag[j] + lambda2
            if denom <= 0.0:
                continue
            rho = c[j] - Gw[j] + diag[j] * w[j]
            new = math.copysign(max(abs(rho) - lambda1, 0.0), rho) / denom
            delta = new - w[j]
            if delta != 0.0:
                Gw += G[:, j] * delta
                w[j] = new
                max_delta = max(max_delta, abs(delta))
        path.append(objective(w))
        if max_delta < tol:
            converged = True
            break
    flags = () if converged else ("not_converged",)
    if not converged:
        warnings.warn(f"elastic net did not converge in {max_iter} sweeps", RuntimeWarning, stacklevel=2)
    return LinearModel(
        intercept=float(ym - xm @ w),
        weights=w,
        method=ENET,
        hyperparams={"lambda1": float(lambda1), "lambda2": float(lambda2)},
        columns=tuple(columns),
        converged=converged,
        flags=flags,
        info={"n_iter": n_iter, "objective_path": tuple(path)},
    )


# --------------------------------------------------------------------------
# Principal components and partial least squares
# --------------------------------------------------------------------------

def _numeric_rank(s: np.ndarray, shape) -> int:
    if s.size == 0 or s[0] == 0:
        return 0
    return int((s > max(shape) * np.finfo(np.float64).eps * s[0]).sum())


def _check_k(k, p):
    if int(k) != k or not 1 <= k <= p:
        raise RankError(f"k must be an integer in 1..{p}, got {k}")
    return int(k)


def fit_pcr(X, y, k: int, columns: Sequence[str] = ()) -> LinearModel:
    """OLS on the top-``k`` principal components of column-centred ``X``.

    Each loading vector is signed so that its largest-magnitude entry
    (first one on ties) is nonnegative.
    """
    X, y = _check_design(X, y)
    n, p = X.shape
    k = _check_k(k, p)
    xm = X.mean(axis=0)
    ym = y.mean()
    Xc = X - xm
    U, s, Vt = np.linalg.svd(Xc, full_matrices=False)
    rank = _numeric_rank(s, Xc.shape)
    if k > rank:
        raise RankError(f"k={k} exceeds numeric rank {rank} of the centred design")
    V = Vt[:k].T.copy()
    for j in range(k):
        i = int(np.argmax(np.abs(V[:, j])))
        if V[i, j] < 0:
            V[:, j] = -V[:, j]
    scores = Xc @ V
    gamma = np.linalg.solve(scores.T @ scores, scores.T @ (y - ym))
    w = V @ gamma
    return LinearModel(
        intercept=float(ym - xm @ w),
        weights=w,
        method=PCR,
        hyperparams={"k": k},
        columns=tuple(columns),
        info={"numeric_rank": rank, "loadings": V},
    )


def fit_pls(X, y, k: int, columns: Sequence[str] = (), tol: float = 1e-12) -> LinearModel:
    """PLS1 by NIPALS deflation; weight vector ``X_j' y`` normalised at each step.

    If the deflated covariance with ``y`` vanishes before ``k`` components,
    extraction stops and the model is flagged ``early_stop``.
    """
    X, y = _check_design(X, y)
    n, p = X.shape
    k = _check_k(k, p)
    xm = X.mean(axis=0)
    ym = y.mean()
    E = X - xm
    f = y - ym
    scale = np.linalg.norm(E) * np.linalg.norm(f)
    W, P, q = [], [], []
    for _ in range(k):
        w = E.T @ f
        nw = np.linalg.norm(w)
        if scale == 0.0 or nw <= tol * scale:
            break
        w = w / nw
        t = E @ w
        tt = t @ t
        pj = E.T @ t / tt
        qj = f @ t / tt
        E = E - np.outer(t, pj)
        f = f - qj * t
        W.append(w)
        P.append(pj)
        q.append(qj)
    achieved = len(W)
    if achieved:
        Wm, Pm = np.array(W).T, np.array(P).T
        coef = Wm @ np.linalg.solve(Pm.T @ Wm, np.array(q))
    else:
        coef = np.zeros(p)
    flags = ("early_stop",) if achieved < k else ()
    return LinearModel(
        intercept=float(ym - xm @ coef),
        weights=coef,
        method=PLS,
        hyperparams={"k": k},
        columns=tuple(columns),
        flags=flags,
        info={"n_components": achieved},
    )


def fit(method: str, X, y, hyperparams: Mapping, columns: Sequence[str] = ()) -> LinearModel:
    if method == ENET:
        return fit_enet(X, y, hyperparams["lambda1"], hyperparams["lambda2"], columns=columns)
    if method == PCR:
        return fit_pcr(X, y, hyperparams["k"], columns=columns)
    if method == PLS:
        return fit_pls(X, y, hyperparams["k"], columns=columns)
    raise ConfigError(f"unknown method {method!r}")


def fit_on_months(method, hyperparams, panel: PanelDataset, months, include_macro=True) -> LinearModel:
    X, y, _ = panel.design(months, include_macro)
    return fit(method, X, y, hyperparams, columns=panel.design_columns(include_macro))


# --------------------------------------------------------------------------
# Grid search
# --------------------------------------------------------------------------

class GridPointError(UASortError):
    def __init__(self, method, point, cause):
        self.method = method
        self.point = dict(point)
        self.cause = cause
        super().__init__(f"{method} fit failed at grid point {self.point}: {cause}")


def default_grid(method: str, design_width: int) -> dict:
    grid = {k: list(v) for k, v in DEFAULT_GRIDS[method].items()}
    if "k" in grid:
        capped = [k for k in grid["k"] if k <= design_width]
        grid["k"] = capped or [1]
    return grid


def grid_points(method: str, grid: Mapping) -> list:
    """Grid points in lexicographic order of their coordinates in ``grid``."""
    names = HYPERPARAM_ORDER[method]
    for name in names:
        if not grid.get(name):
            raise ConfigError(f"grid for {method} needs a nonempty list for {name!r}")
    return [dict(zip(names, vals)) for vals in itertools.product(*(grid[n] for n in names))]


def grid_search(method: str, split: RollingSplit, panel: PanelDataset, grid: Mapping | None = None,
                include_macro: bool = True):
    """Fit on the training months at each grid point and keep the lowest validation MSE.

    Returns ``(hyperparams, validation_mse)``.  Only a strictly smaller MSE
    replaces the incumbent, so ties go to the earliest point.
    """
    cols = panel.design_columns(include_macro)
    grid = grid or default_grid(method, len(cols))
    Xtr, ytr, _ = panel.design(split.train, include_macro)
    Xva, yva, _ = panel.design(split.validation, include_macro)
    if len(yva) == 0:
        raise DataIntegrityError(f"no validation rows for split {split.split_id}")
    best, best_mse = None, math.inf
    for point in grid_points(method, grid):
        try:
            model = fit(method, Xtr, ytr, point, columns=cols)
        except (ValueError, RankError, np.linalg.LinAlgError) as exc:
            raise GridPointError(method, point, exc) from exc
        resid = yva - model.predict(Xva)
        mse = float(resid @ resid / len(resid))
        if mse < best_mse:
            best, best_mse = point, mse
    return best, best_mse


# --------------------------------------------------------------------------
# External predictions
# --------------------------------------------------------------------------

def load_external_predictions(path, model_id: str) -> list:
    """Read ``asset,month,model,mu_hat``; rows for other models are skipped.

    A file without a ``model`` column is taken to belong to ``model_id``.
    """
    path = Path(path)
    records, seen = [], set()
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for col in (ASSET, MONTH, "mu_hat"):
            if col not in header:
                raise MissingColumnError(col, path)
        for lineno, row in enumerate(reader, start=2):
            model = row.get("model") or model_id
            if model != model_id:
                continue
            try:
                month = int(row[MONTH])
            except (TypeError, ValueError):
                raise ParseError(f"month {row[MONTH]!r} is not an integer", lineno) from None
            try:
                mu = float(row["mu_hat"])
            except (TypeError, ValueError):
                raise ParseError(f"mu_hat {row['mu_hat']!r} is not a number", lineno) from None
            if not math.isfinite(mu):
                raise ParseError(f"mu_hat {row['mu_hat']!r} is not finite", lineno)
            key = (row[ASSET], month)
            if key in seen:
                raise DataIntegrityError(f"duplicate prediction for (asset={key[0]!r}, month={month})")
            seen.add(key)
            records.append(PredictionRecord(row[ASSET], month, model_id, mu, SOURCE_EXTERNAL))
    return records


def predictions_frame(records) -> pd.DataFrame:
    df = pd.DataFrame(
        [(r.asset, r.month, r.model, r.mu_hat, r.source) for r in records],
        columns=[ASSET, MONTH, "model", "mu_hat", "source"],
    )
    df[MONTH] = df[MONTH].astype(np.int64)
    return df
