"""Decile sorts, long-short and long-only weights, turnover, costs and NAV paths."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
import pandas as pd

from .errors import ConfigError, CoverageError, DataIntegrityError
from .panel import ASSET, MONTH

DEFAULT_COST_RATE = 0.0020
POINT, UA = "point", "ua"
N_DECILES = 10


@dataclass(frozen=True, eq=False)
class DecileAssignment:
    month: int
    score_name: str
    mapping: pd.Series  # asset -> decile in 1..10
    n_excluded: int = 0

    def members(self, decile: int) -> list:
        return sorted(self.mapping.index[self.mapping.to_numpy() == decile])


@dataclass(frozen=True, eq=False)
class PortfolioSeries:
    strategy_id: str
    months: np.ndarray
    weights: dict  # month -> pd.Series(asset -> weight)
    gross_returns: np.ndarray
    turnover: np.ndarray
    net_returns: np.ndarray
    nav: np.ndarray
    benchmark_returns: np.ndarray | None = None
    info: dict = field(default_factory=dict)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            MONTH: self.months,
            "strategy": self.strategy_id,
            "gross": self.gross_returns,
            "net": self.net_returns,
            "turnover": self.turnover,
            "nav": self.nav,
        })

    def weights_frame(self) -> pd.DataFrame:
        parts = [
            pd.DataFrame({MONTH: m, ASSET: w.index, "weight": w.to_numpy()})
            for m, w in sorted(self.weights.items())
        ]
        return pd.concat(parts, ignore_index=True) if parts else pd.DataFrame(columns=[MONTH, ASSET, "weight"])


def assign_deciles(scores, month: int, score_name: str = POINT) -> DecileAssignment:
    """Ascending rank ``r`` of ``N`` assets maps to decile ``ceil(10 r / N)``.

    Ties are ordered by ascending asset id; non-finite scores are dropped
    and counted.
    """
    s = pd.Series(scores, dtype=np.float64)
    finite = np.isfinite(s.to_numpy())
    n_excluded = int((~finite).sum())
    s = s[finite]
    N = len(s)
    if N < N_DECILES:
        raise ConfigError(f"need at least {N_DECILES} assets with finite scores in month {month}, got {N}")
    ids = np.asarray(s.index.astype(str))
    order = np.lexsort((ids, s.to_numpy()))
    r = np.arange(1, N + 1)
    dec = (N_DECILES * r + N - 1) // N
    mapping = pd.Series(dec, index=ids[order]).sort_index()
    return DecileAssignment(month, score_name, mapping, n_excluded)


def _scores_for(point_or_bounds, column):
    if isinstance(point_or_bounds, pd.Series):
        return point_or_bounds
    return point_or_bounds[column]


def build_long_short(point_or_bounds, mode: str, month: int) -> pd.Series:
    """Equal-weight decile spread for one month.

    ``point_or_bounds`` is a Series of point scores or a DataFrame indexed
    by asset with ``mu_hat`` (point mode) or ``upper``/``lower`` (ua mode).
    Under ua an asset in both legs keeps the net of its two weights.
    """
    if mode == POINT:
        dec = assign_deciles(_scores_for(point_or_bounds, "mu_hat"), month, POINT)
        long, short = dec.members(N_DECILES), dec.members(1)
    elif mode == UA:
        long = assign_deciles(point_or_bounds["upper"], month, "upper").members(N_DECILES)
        short = assign_deciles(point_or_bounds["lower"], month, "lower").members(1)
    else:
        raise ConfigError(f"unknown sort mode {mode!r}")
    w = pd.Series(0.0, index=sorted(set(long) | set(short)))
    w[long] += 1.0 / len(long)
    w[short] -= 1.0 / len(short)
    return w


def build_long_only(scores, benchmark_returns: Mapping, month: int, column: str = "mu_hat"):
    """Equal weight in the top decile; returns ``(weights, benchmark_return)``."""
    if month not in benchmark_returns:
        raise CoverageError(f"benchmark series has no return for month {month}")
    long = assign_deciles(_scores_for(scores, column), month, column).members(N_DECILES)
    w = pd.Series(1.0 / len(long), index=long)
    return w, float(benchmark_returns[month])


def compute_turnover(prev_weights, cur_weights) -> float:
    """Sum of absolute weight changes over the union of holdings."""
    prev = pd.Series(prev_weights if prev_weights is not None else {}, dtype=np.float64)
    cur = pd.Series(cur_weights, dtype=np.float64)
    both = prev.index.union(cur.index)
    diff = cur.reindex(both, fill_value=0.0) - prev.reindex(both, fill_value=0.0)
    return float(np.abs(diff.to_numpy()).sum())


def apply_costs(gross_return, turnover, cost_rate: float = DEFAULT_COST_RATE):
    if cost_rate < 0:
        raise ConfigError("cost_rate must be nonnegative")
    return gross_return - cost_rate * turnover


def nav_path(net_returns) -> np.ndarray:
    """Compounded value after each month starting from 1.0."""
    return np.cumprod(1.0 + np.asarray(net_returns, dtype=np.float64))


def realize(weights_by_month: Mapping, returns: pd.Series, strategy_id: str,
            cost_rate: float = DEFAULT_COST_RATE, benchmark: Mapping | None = None) -> PortfolioSeries:
    """Turn monthly target weights into realised gross/net returns and NAV.

    ``returns`` maps ``(asset, month)`` to the return over month + 1 (see
    :meth:`PanelDataset.returns`).  With ``benchmark`` the recorded returns
    are in excess of the benchmark (long-only convention).
    """
    months = np.array(sorted(weights_by_month), dtype=np.int64)
    gross = np.empty(len(months))
    turn = np.empty(len(months))
    bench = np.empty(len(months)) if benchmark is not None else None
    kept = {}
    prev = None
    for t, m in enumerate(months):
        w = pd.Series(weights_by_month[m], dtype=np.float64)
        w = w[w != 0.0].sort_index()
        keys = pd.MultiIndex.from_arrays([w.index, np.full(len(w), m)])
        r = returns.reindex(keys)
        if r.isna().any():
            a = w.index[np.flatnonzero(r.isna().to_numpy())[0]]
            raise DataIntegrityError(f"held asset {a!r} has no realised return for month {int(m)}")
        gross[t] = float(w.to_numpy() @ r.to_numpy())
        if benchmark is not None:
            if m not in benchmark:
                raise CoverageError(f"benchmark series has no return for month {int(m)}")
            bench[t] = float(benchmark[m])
            gross[t] -= bench[t]
        turn[t] = compute_turnover(prev, w)
        kept[int(m)] = w
        prev = w
    net = apply_costs(gross, turn, cost_rate)
    return PortfolioSeries(strategy_id, months, kept, gross, turn, net, nav_path(net), bench)


def scale_path(ua_nav, benchmark_nav) -> np.ndarray:
    """Rescale ``ua_nav`` by a constant so its last value equals the benchmark's."""
    ua = np.asarray(ua_nav, dtype=np.float64)
    bm = np.asarray(benchmark_nav, dtype=np.float64)
    if ua.shape != bm.shape or ua.ndim != 1 or not len(ua):
        raise ConfigError("paths must be nonempty 1-d arrays of equal length")
    if ua[-1] == 0.0:
        raise ConfigError("cannot scale a path with zero terminal value")
    # divide first: x / x == 1 exactly, so the terminal value matches bit for bit
    return ua / ua[-1] * bm[-1]


def weights_by_month(scores: pd.DataFrame, mode: str) -> dict:
    """Long-short weights for every month of a score table.

    ``scores`` has ``asset, month`` and ``mu_hat`` (point) or
    ``upper``/``lower`` (ua) columns.
    """
    out = {}
    cols = ["mu_hat"] if mode == POINT else ["upper", "lower"]
    for m, g in scores.groupby(MONTH, sort=True):
        out[int(m)] = build_long_short(g.set_index(ASSET)[cols], mode, int(m))
    return out


def long_only_weights(scores: pd.DataFrame, column: str) -> dict:
    out = {}
    for m, g in scores.groupby(MONTH, sort=True):
        long = assign_deciles(g.set_index(ASSET)[column], int(m), column).members(N_DECILES)
        out[int(m)] = pd.Series(1.0 / len(long), index=long)
    return out
