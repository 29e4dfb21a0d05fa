"""Out-of-fold residual pools and uncertainty-adjusted bounds.

Inside each rolling window the months are cut into ``K`` contiguous folds.
Pass ``k`` holds out fold ``k`` (validation) and fold ``k+1 mod K``
(calibration), fits on the remaining ``K-2`` folds and records the
calibration-fold residuals in per-asset pools.  Half-widths are order
statistics (or a normal approximation) of an asset's pool.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np
import pandas as pd
from scipy.special import ndtri

from .errors import ConfigError, InsufficientPoolError
from .panel import ASSET, MONTH, PanelDataset
from .predictors import RollingSplit, fit

EMPIRICAL, NORMAL = "empirical", "normal"
HALFWIDTH_METHODS = (EMPIRICAL, NORMAL)
DEFAULT_K = 5
DEFAULT_N_MIN = 12

BOUND_COLUMNS = [ASSET, MONTH, "model", "alpha", "method", "mu_hat", "half_width", "upper", "lower", "fallback"]
POOL_COLUMNS = [ASSET, "window_id", MONTH, "residual_abs", "residual_signed"]


@dataclass(frozen=True)
class FoldScheme:
    K: int
    folds: tuple  # tuple of tuples of months, chronological

    def fold_of(self, month: int) -> int:
        """0-based index of the fold containing ``month``."""
        for j, f in enumerate(self.folds):
            if f[0] <= month <= f[-1]:
                return j
        raise KeyError(month)

    def calibration_fold(self, k: int) -> int:
        """0-based calibration fold of 0-based pass ``k``."""
        return (k + 1) % self.K

    def training_folds(self, k: int) -> tuple:
        held = {k, self.calibration_fold(k)}
        return tuple(j for j in range(self.K) if j not in held)


@dataclass(frozen=True, eq=False)
class ResidualPool:
    """Out-of-fold residuals of one asset in one window.

    ``passes[i]`` is the 0-based cross-fitting pass that produced residual
    ``i``; the pool's ``scheme`` recovers the folds that model trained on.
    """

    asset: str
    window_id: str
    signed_residuals: np.ndarray
    months: np.ndarray
    passes: np.ndarray
    scheme: FoldScheme | None = None
    flags: tuple = ()

    @property
    def abs_residuals(self) -> np.ndarray:
        return np.abs(self.signed_residuals)

    @property
    def n(self) -> int:
        return len(self.signed_residuals)

    @classmethod
    def from_residuals(cls, residuals, asset="*", window_id="") -> "ResidualPool":
        r = np.asarray(residuals, dtype=np.float64)
        return cls(asset, window_id, r, np.zeros(len(r), dtype=np.int64), np.zeros(len(r), dtype=np.int64))


@dataclass(frozen=True)
class BoundRecord:
    asset: str
    month: int
    model: str
    alpha: float
    half_width: float
    upper: float
    lower: float
    method: str
    fallback: bool = False


@dataclass(frozen=True)
class CoverageReport:
    n_predictions: int
    n_bounded: int
    n_fallback: int
    excluded: tuple = ()


def make_time_folds(window_months, K: int) -> FoldScheme:
    months = list(window_months)
    L = len(months)
    if K < 3:
        raise ConfigError(f"K must be >= 3, got {K}")
    if K > L:
        raise ConfigError(f"K={K} exceeds window length {L}")
    if any(b - a != 1 for a, b in zip(months, months[1:])):
        raise ConfigError("window months must be contiguous and increasing")
    cuts = [(j * L) // K for j in range(K + 1)]
    return FoldScheme(K, tuple(tuple(months[cuts[j]:cuts[j + 1]]) for j in range(K)))


def cross_fit_residuals(method: str, hyperparams: Mapping, split: RollingSplit, K: int,
                        panel: PanelDataset, include_macro: bool = True, assets=None) -> dict:
    """Per-asset pools of calibration-fold residuals for one split.

    ``assets`` lists assets that must receive a pool; those with no
    calibration residuals get an empty pool flagged ``empty``.
    """
    scheme = make_time_folds(split.window, K)
    cols = panel.design_columns(include_macro)
    df = panel.rows(split.window)
    X_all = df[cols].to_numpy(dtype=np.float64)
    y_all = df["ret_next"].to_numpy(dtype=np.float64)
    month_arr = df[MONTH].to_numpy()
    asset_arr = df[ASSET].to_numpy()
    fold_arr = np.searchsorted([f[0] for f in scheme.folds], month_arr, side="right") - 1

    # keyed by pass so the merged result does not depend on completion order
    pieces = {}
    for k in range(K):
        train = np.isin(fold_arr, scheme.training_folds(k))
        calib = fold_arr == scheme.calibration_fold(k)
        if not calib.any():
            continue
        model = fit(method, X_all[train], y_all[train], hyperparams, columns=cols)
        resid = y_all[calib] - model.predict(X_all[calib])
        pieces[k] = (asset_arr[calib], month_arr[calib], resid)

    parts = [pieces[k] for k in sorted(pieces)]
    a = np.concatenate([p[0] for p in parts]) if parts else np.array([], dtype=object)
    m = np.concatenate([p[1] for p in parts]) if parts else np.array([], dtype=np.int64)
    r = np.concatenate([p[2] for p in parts]) if parts else np.array([])
    ks = np.concatenate([np.full(len(p[0]), k) for k, p in zip(sorted(pieces), parts)]) if parts else np.array([], dtype=np.int64)

    order = np.lexsort((m, a))
    a, m, r, ks = a[order], m[order], r[order], ks[order]
    pools = {}
    if len(a):
        uniq, start = np.unique(a, return_index=True)
        bounds = list(start[1:]) + [len(a)]
        for asset, s, e in zip(uniq, start, bounds):
            pools[str(asset)] = ResidualPool(str(asset), split.split_id, r[s:e], m[s:e], ks[s:e], scheme)
    for asset in assets or ():
        if asset not in pools:
            pools[asset] = ResidualPool(
                asset, split.split_id, np.array([]), np.array([], dtype=np.int64),
                np.array([], dtype=np.int64), scheme, flags=("empty",),
            )
    return pools


def order_statistic_index(alpha: float, n: int) -> int:
    """1-based index ``ceil(alpha * n)``, robust to binary rounding of ``alpha``."""
    return min(n, max(1, math.ceil(round(alpha * n, 9))))


def _check_alpha(alpha):
    if not 0.0 < alpha < 1.0:
        raise ConfigError(f"alpha must be in (0, 1), got {alpha}")


def empirical_halfwidth(pool: ResidualPool, alpha: float, n_min: int = DEFAULT_N_MIN) -> float:
    """The ``ceil(alpha * n)``-th smallest absolute residual of the pool."""
    _check_alpha(alpha)
    n = pool.n
    if n < max(n_min, 1):
        raise InsufficientPoolError(n, n_min)
    k = order_statistic_index(alpha, n)
    return float(np.partition(pool.abs_residuals, k - 1)[k - 1])


def normal_multiplier(alpha: float) -> float:
    """Standard normal quantile at ``(1 + alpha) / 2``."""
    _check_alpha(alpha)
    return float(ndtri(0.5 * (1.0 + alpha)))


def normal_halfwidth(pool: ResidualPool, alpha: float, n_min: int = 2) -> float:
    """``z_{(1+alpha)/2}`` times the sample sd of the pool's signed residuals."""
    n = pool.n
    if n < max(n_min, 2):
        raise InsufficientPoolError(n, max(n_min, 2))
    sd = float(np.std(pool.signed_residuals, ddof=1))
    if not sd > 0.0:
        return 0.0
    return normal_multiplier(alpha) * sd


def halfwidth(pool: ResidualPool, alpha: float, method: str, n_min: int = DEFAULT_N_MIN) -> float:
    if method == EMPIRICAL:
        return empirical_halfwidth(pool, alpha, n_min)
    if method == NORMAL:
        return normal_halfwidth(pool, alpha, n_min)
    raise ConfigError(f"unknown half-width method {method!r}")


def pooled(pools: Mapping) -> ResidualPool:
    """All assets' residuals in one pool: the cross-sectional fallback basis."""
    items = [pools[a] for a in sorted(pools)]
    if not items:
        return ResidualPool.from_residuals([])
    return ResidualPool(
        "*",
        items[0].window_id,
        np.concatenate([p.signed_residuals for p in items]),
        np.concatenate([p.months for p in items]),
        np.concatenate([p.passes for p in items]),
        items[0].scheme,
    )


def build_bounds(predictions: pd.DataFrame, pools: Mapping, alpha: float, method: str = EMPIRICAL,
                 n_min: int = DEFAULT_N_MIN, split: RollingSplit | None = None):
    """Attach symmetric half-widths to point predictions.

    ``predictions`` needs ``asset, month, model, mu_hat``.  Assets whose
    pool has fewer than ``n_min`` residuals use the same-method half-width
    of the pooled cross-section (``fallback=True``); with no basis at all
    the prediction is dropped and reported in the returned
    :class:`CoverageReport`.
    """
    _check_alpha(alpha)
    if split is not None:
        months = predictions[MONTH].to_numpy()
        lo, hi = split.test_months
        if ((months < lo) | (months > hi)).any():
            raise ConfigError(f"predictions outside test year of split {split.split_id}")
    cache = {}
    fallback_hw = None
    basis = pooled(pools)
    try:
        fallback_hw = halfwidth(basis, alpha, method, n_min=1 if method == EMPIRICAL else 2)
    except InsufficientPoolError:
        fallback_hw = None

    hw = np.empty(len(predictions))
    fb = np.zeros(len(predictions), dtype=bool)
    keep = np.ones(len(predictions), dtype=bool)
    excluded = []
    for i, asset in enumerate(predictions[ASSET].to_numpy()):
        if asset not in cache:
            pool = pools.get(asset)
            try:
                if pool is None:
                    raise InsufficientPoolError(0, n_min)
                cache[asset] = (halfwidth(pool, alpha, method, n_min), False)
            except InsufficientPoolError:
                cache[asset] = (fallback_hw, True)
        value, is_fb = cache[asset]
        if value is None:
            keep[i] = False
            excluded.append(asset)
            continue
        hw[i], fb[i] = value, is_fb

    out = predictions.loc[keep, [ASSET, MONTH, "model", "mu_hat"]].reset_index(drop=True)
    h = hw[keep]
    mu = out["mu_hat"].to_numpy()
    out["alpha"] = float(alpha)
    out["method"] = method
    out["half_width"] = h
    out["upper"] = mu + h
    out["lower"] = mu - h
    out["fallback"] = fb[keep]
    report = CoverageReport(len(predictions), int(keep.sum()), int(fb[keep].sum()), tuple(sorted(set(excluded))))
    return out[BOUND_COLUMNS], report


def bound_records(bounds: pd.DataFrame) -> list:
    return [
        BoundRecord(r.asset, int(r.month), r.model, float(r.alpha), float(r.half_width),
                    float(r.upper), float(r.lower), r.method, bool(r.fallback))
        for r in bounds.itertuples(index=False)
    ]


def pools_frame(pools: Mapping) -> pd.DataFrame:
    """Flatten pools into the ``asset,window_id,month,residual_abs,residual_signed`` layout."""
    rows = []
    for asset in sorted(pools):
        p = pools[asset]
        if p.n:
            rows.append(pd.DataFrame({
                ASSET: asset, "window_id": p.window_id, MONTH: p.months,
                "residual_abs": p.abs_residuals, "residual_signed": p.signed_residuals,
            }))
    if not rows:
        return pd.DataFrame(columns=POOL_COLUMNS)
    return pd.concat(rows, ignore_index=True)[POOL_COLUMNS]


def audit_pools(pools: Mapping, split: RollingSplit) -> dict:
    """Count look-ahead and in-fold violations in one split's pools."""
    look_ahead = in_fold = 0
    test_start = split.test_months[0]
    for p in pools.values():
        if not p.n:
            continue
        look_ahead += int((p.months >= test_start).sum())
        if p.scheme is None:
            continue
        for month, k in zip(p.months, p.passes):
            try:
                fold = p.scheme.fold_of(int(month))
            except KeyError:  # outside the calibration window altogether
                in_fold += 1
                continue
            if fold in p.scheme.training_folds(int(k)) or fold != p.scheme.calibration_fold(int(k)):
                in_fold += 1
    return {"look_ahead": look_ahead, "in_fold": in_fold}
