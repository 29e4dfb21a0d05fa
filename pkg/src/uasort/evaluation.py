"""Performance statistics: annualisation, Sharpe ratios, Newey-West inference, factor alphas."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import pandas as pd

from .errors import ConfigError, CoverageError, DegenerateVarianceError, MissingColumnError, RankError
from .panel import MONTH

MIN_ANNUALIZE_MONTHS = 24


@dataclass(frozen=True)
class FactorTable:
    months: np.ndarray
    factor_names: tuple
    values: np.ndarray  # (n_months, n_factors)

    def __post_init__(self):
        if self.values.shape != (len(self.months), len(self.factor_names)):
            raise ConfigError("factor values must be (n_months, n_factors)")

    def align(self, months) -> np.ndarray:
        """Factor rows for ``months``; raises if any month is missing."""
        pos = {int(m): i for i, m in enumerate(self.months)}
        missing = [int(m) for m in months if int(m) not in pos]
        if missing:
            raise CoverageError(f"factor table does not cover month {missing[0]}")
        return self.values[[pos[int(m)] for m in months]]

    def first(self, k: int) -> "FactorTable | None":
        """The leading ``k`` factors, or ``None`` when fewer are available."""
        if len(self.factor_names) < k:
            return None
        return FactorTable(self.months, self.factor_names[:k], self.values[:, :k])

    @classmethod
    def from_frame(cls, df: pd.DataFrame) -> "FactorTable":
        if MONTH in df.columns:
            df = df.set_index(MONTH)
        df = df.sort_index()
        return cls(df.index.to_numpy(dtype=np.int64), tuple(df.columns), df.to_numpy(dtype=np.float64))


def load_factors(path) -> FactorTable:
    df = pd.read_csv(path, float_precision="round_trip")
    if MONTH not in df.columns:
        raise MissingColumnError(MONTH, path)
    return FactorTable.from_frame(df)


@dataclass(frozen=True)
class PerformanceReport:
    strategy_id: str
    ann_return: float
    ann_vol: float
    sharpe: float | None
    nw_tstat: float | None
    nw_lags: int
    n_months: int
    alpha3: tuple | None = None  # (monthly alpha, NW t)
    alpha5: tuple | None = None
    basis: str = "net"

    def as_row(self) -> dict:
        row = asdict(self)
        for key in ("alpha3", "alpha5"):
            val = row.pop(key)
            row[f"{key}"] = None if val is None else val[0]
            row[f"{key}_t"] = None if val is None else val[1]
        return row


def _series(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 1:
        raise ValueError("expected a 1-d return series")
    return a


def annualize(monthly_returns):
    """``(12 * mean, sqrt(12) * sd)`` with the sample sd (denominator n - 1)."""
    r = _series(monthly_returns)
    if len(r) < MIN_ANNUALIZE_MONTHS:
        raise ConfigError(f"need at least {MIN_ANNUALIZE_MONTHS} months to annualise, got {len(r)}")
    return 12.0 * r.mean(), math.sqrt(12.0) * r.std(ddof=1)


def _is_flat(r: np.ndarray, sd: float) -> bool:
    scale = np.abs(r).max() if len(r) else 0.0
    return not sd > 1e-13 * max(scale, 1e-300)


def sharpe(monthly_returns) -> float | None:
    """Annualised Sharpe ratio ``sqrt(12) * mean / sd``; ``None`` for a flat series."""
    r = _series(monthly_returns)
    if len(r) < 2:
        return None
    sd = r.std(ddof=1)
    if _is_flat(r, sd):
        return None
    return math.sqrt(12.0) * r.mean() / sd


def default_nw_lags(n: int) -> int:
    return int(math.floor(4.0 * (n / 100.0) ** (2.0 / 9.0)))


def _bartlett_lrv(u: np.ndarray, lags: int) -> float:
    n = len(u)
    s = u @ u / n
    for j in range(1, lags + 1):
        s += 2.0 * (1.0 - j / (lags + 1.0)) * (u[j:] @ u[:-j]) / n
    return s


def newey_west_tstat(series, lags: int | None = None) -> float:
    """Mean over its Bartlett-kernel HAC standard error.

    Autocovariances use denominator ``n``; ``lags=None`` uses
    ``floor(4 (n/100)^(2/9))``.
    """
    x = _series(series)
    n = len(x)
    if lags is None:
        lags = default_nw_lags(n)
    if not 0 <= lags < n:
        raise ConfigError(f"need 0 <= lags < n, got lags={lags}, n={n}")
    mean = x.mean()
    S = _bartlett_lrv(x - mean, lags)
    if not S > 0.0:
        raise DegenerateVarianceError("long-run variance is not positive")
    return mean / math.sqrt(S / n)


def factor_alpha(series, factors, lags: int | None = None, months: Sequence | None = None):
    """Intercept of an OLS regression on factors, with a Newey-West t-statistic.

    ``factors`` is a :class:`FactorTable` (aligned through ``months``) or an
    ``(n, k)`` array.  Identically zero factor columns carry no information
    and are dropped; with none left the result is ``(mean, NW t)``.
    """
    y = _series(series)
    n = len(y)
    if isinstance(factors, FactorTable):
        if months is None:
            raise ConfigError("months are required to align a FactorTable")
        F = factors.align(months)
    else:
        F = np.asarray(factors, dtype=np.float64).reshape(n, -1)
    if F.shape[0] != n:
        raise ConfigError("factor rows do not match the return series")
    F = F[:, np.any(F != 0.0, axis=0)]
    if lags is None:
        lags = default_nw_lags(n)
    if F.shape[1] == 0:
        return float(y.mean()), newey_west_tstat(y, lags)
    X = np.column_stack([np.ones(n), F])
    if np.linalg.matrix_rank(X) < X.shape[1]:
        raise RankError("factor matrix is rank deficient")
    if not 0 <= lags < n:
        raise ConfigError(f"need 0 <= lags < n, got lags={lags}, n={n}")
    beta, *_ = np.linalg.lstsq(X, y, rcond=None)
    e = y - X @ beta
    g = X * e[:, None]
    S = g.T @ g / n
    for j in range(1, lags + 1):
        G = g[j:].T @ g[:-j] / n
        S += (1.0 - j / (lags + 1.0)) * (G + G.T)
    Qinv = np.linalg.inv(X.T @ X / n)
    cov = Qinv @ S @ Qinv / n
    se = math.sqrt(cov[0, 0]) if cov[0, 0] > 0 else float("nan")
    return float(beta[0]), float(beta[0] / se)


def performance_report(returns, strategy_id: str, dollar_neutral: bool, months=None,
                       factors3: FactorTable | None = None, factors5: FactorTable | None = None,
                       nw_lags: int | None = None, basis: str = "net") -> PerformanceReport:
    """Assemble the statistics of one strategy's monthly return series.

    Factor alphas are only computed for dollar-neutral strategies.
    """
    r = _series(returns)
    ann_ret, ann_vol = annualize(r)
    lags = default_nw_lags(len(r)) if nw_lags is None else nw_lags
    try:
        t = newey_west_tstat(r, lags)
    except DegenerateVarianceError:
        t = None
    a3 = a5 = None
    if dollar_neutral:
        if factors3 is not None:
            a3 = factor_alpha(r, factors3, lags, months)
        if factors5 is not None:
            a5 = factor_alpha(r, factors5, lags, months)
    return PerformanceReport(strategy_id, ann_ret, ann_vol, sharpe(r), t, lags, len(r), a3, a5, basis)
