"""Mechanism studies: ranking improvements, fixed-effects driver regressions,
placebo permutations of half-widths and the normal-versus-empirical comparison.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import pandas as pd

from .calibration import EMPIRICAL, HALFWIDTH_METHODS, NORMAL
from .errors import CollinearityError, ConfigError, DataIntegrityError
from .evaluation import sharpe
from .panel import ASSET, MONTH, year_of
from .portfolio import POINT, UA, realize, weights_by_month

SHUFFLE_MODES = ("none", "time", "stock", "all")
_MODE_CODES = {m: i for i, m in enumerate(SHUFFLE_MODES)}


# --------------------------------------------------------------------------
# Ranking improvements
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class RankImprovementPanel:
    """Rows of ``asset, month, delta_rank_upper, delta_rank_lower``."""

    frame: pd.DataFrame

    def monthly_sums(self) -> pd.DataFrame:
        return self.frame.groupby(MONTH)[["delta_rank_upper", "delta_rank_lower"]].sum()


def _as_keyed(s, name):
    s = pd.Series(s, dtype=np.float64, name=name)
    if s.index.nlevels != 2:
        raise ConfigError(f"{name} scores must be indexed by (asset, month)")
    return s


def ranking_improvements(point, upper, lower) -> RankImprovementPanel:
    """Per-month rank shifts from point sorting to bound sorting.

    Each input is a Series indexed by ``(asset, month)``.  Ranks ascend in
    the score with ties averaged, so a positive ``delta_rank_upper`` moves an
    asset towards the long leg and a positive ``delta_rank_lower`` moves it
    towards the short leg.
    """
    p, u, l = _as_keyed(point, "point"), _as_keyed(upper, "upper"), _as_keyed(lower, "lower")
    keys = [set(p.index), set(u.index), set(l.index)]
    diff = (keys[0] | keys[1] | keys[2]) - (keys[0] & keys[1] & keys[2])
    if diff:
        shown = ", ".join(f"({a}, {m})" for a, m in sorted(diff, key=lambda t: (t[1], str(t[0]))))
        raise DataIntegrityError(f"score universes differ at: {shown}")
    df = pd.DataFrame({"point": p, "upper": u.reindex(p.index), "lower": l.reindex(p.index)})
    df.index = df.index.set_names([ASSET, MONTH])
    df = df.reset_index()
    ranks = df.groupby(MONTH)[["point", "upper", "lower"]].rank(method="average")
    out = pd.DataFrame({
        ASSET: df[ASSET],
        MONTH: df[MONTH].astype(np.int64),
        "delta_rank_upper": ranks["upper"] - ranks["point"],
        "delta_rank_lower": ranks["point"] - ranks["lower"],
    })
    return RankImprovementPanel(out.sort_values([MONTH, ASSET], kind="mergesort").reset_index(drop=True))


def ranking_improvements_from_bounds(bounds: pd.DataFrame) -> RankImprovementPanel:
    b = bounds.set_index([ASSET, MONTH])
    return ranking_improvements(b["mu_hat"], b["upper"], b["lower"])


# --------------------------------------------------------------------------
# Fixed-effects regression
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class FERegressionResult:
    coefficients: dict
    z_stats: dict
    std_errors: dict
    n_obs: int
    n_firms: int
    terms: tuple

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "term": list(self.terms),
            "coef": [self.coefficients[t] for t in self.terms],
            "se": [self.std_errors[t] for t in self.terms],
            "z": [self.z_stats[t] for t in self.terms],
        })


def interaction_pairs(X: Sequence[str], Z: Sequence[str], interactions="all") -> list:
    """Resolve an interaction spec into ``(x, z)`` pairs, X-major."""
    if interactions is None or interactions is False:
        return []
    if isinstance(interactions, str):
        if interactions != "all":
            raise ConfigError(f"unknown interaction spec {interactions!r}")
        return [(x, z) for x in X for z in Z]
    pairs = [tuple(p) for p in interactions]
    for x, z in pairs:
        if x not in X or z not in Z:
            raise ConfigError(f"interaction {x}:{z} must pair a firm characteristic with a macro variable")
    return pairs


def fe_regression(data: pd.DataFrame, y: str, X: Sequence[str], Z: Sequence[str] = (),
                  interactions="all", firm: str = ASSET, rcond: float = 1e-10) -> FERegressionResult:
    """Firm fixed-effects OLS with HC1 standard errors.

    All variables are demeaned within firm; firms with a single
    observation carry no within variation and are dropped.  ``interactions``
    is ``"all"``, ``None`` or a list of ``(x, z)`` pairs; interaction terms
    are named ``"x:z"``.
    """
    X, Z = list(X), list(Z)
    pairs = interaction_pairs(X, Z, interactions)
    terms = X + Z + [f"{x}:{z}" for x, z in pairs]
    if not terms:
        raise ConfigError("no regressors")
    if len(set(terms)) != len(terms):
        raise ConfigError("duplicate regressor names")
    df = data[[firm, y] + X + Z].copy()
    for x, z in pairs:
        df[f"{x}:{z}"] = df[x].to_numpy(dtype=np.float64) * df[z].to_numpy(dtype=np.float64)
    vals = df[[y] + terms].to_numpy(dtype=np.float64)
    if not np.isfinite(vals).all():
        raise ConfigError("regressors and outcome must be finite")

    counts = df.groupby(firm)[firm].transform("size").to_numpy()
    df = df[counts >= 2]
    if df.empty:
        raise ConfigError("no firm has two or more observations")
    cols = [y] + terms
    demeaned = df[cols] - df.groupby(firm)[cols].transform("mean")
    yd = demeaned[y].to_numpy(dtype=np.float64)
    D = demeaned[terms].to_numpy(dtype=np.float64)
    n, k = D.shape
    G = int(df[firm].nunique())

    _, s, Vt = np.linalg.svd(D, full_matrices=False)
    tol = rcond * max(s[0], np.finfo(float).tiny) if len(s) else 0.0
    small = s <= tol if s[0] > 0 else np.ones(len(s), dtype=bool)
    if len(s) < k or small.any():
        null = Vt[small].T if len(s) == k else np.eye(k)
        involved = np.abs(null).max(axis=1) > 1e-8
        raise CollinearityError([t for t, inv in zip(terms, involved) if inv] or terms)
    dof = n - k - G
    if dof <= 0:
        raise ConfigError(f"not enough observations: n={n}, regressors={k}, firms={G}")

    beta, *_ = np.linalg.lstsq(D, yd, rcond=None)
    e = yd - D @ beta
    bread = np.linalg.inv(D.T @ D)
    meat = (D * (e ** 2)[:, None]).T @ D
    cov = bread @ meat @ bread * (n / dof)
    se = np.sqrt(np.diag(cov))
    with np.errstate(divide="ignore", invalid="ignore"):
        z = beta / se
    return FERegressionResult(
        dict(zip(terms, beta.tolist())), dict(zip(terms, z.tolist())), dict(zip(terms, se.tolist())),
        n, G, tuple(terms),
    )


# --------------------------------------------------------------------------
# Placebo shuffles
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ShuffleSpec:
    mode: str = "none"
    seed: int = 0

    def __post_init__(self):
        if self.mode not in SHUFFLE_MODES:
            raise ConfigError(f"unknown shuffle mode {self.mode!r}")


def substream_seed(seed: int, model: str, mode: str) -> int:
    """Independent integer seed for one (seed, model, mode) task."""
    ss = np.random.SeedSequence([int(seed), zlib.crc32(str(model).encode()), _MODE_CODES[mode]])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def _permute_groups(hw: np.ndarray, groups: np.ndarray, rng) -> np.ndarray:
    out = hw.copy()
    _, start = np.unique(groups, return_index=True)
    ends = list(start[1:]) + [len(groups)]
    for s, e in zip(start, ends):
        out[s:e] = hw[s:e][rng.permutation(e - s)]
    return out


def shuffle_halfwidths(bounds: pd.DataFrame, spec: ShuffleSpec, year_blocks: bool = False) -> pd.DataFrame:
    """Permute half-widths across time, assets or both and rebuild the bounds.

    ``mu_hat`` never moves; ``upper`` and ``lower`` are recomputed from the
    permuted half-widths.  With ``year_blocks`` the time shuffle permutes
    whole calendar years of an asset instead of single months.
    """
    if spec.mode == "none":
        return bounds.copy()
    # canonical row order so the permutation does not depend on input order
    order = np.lexsort((bounds[MONTH].to_numpy(), bounds[ASSET].astype(str).to_numpy()))
    b = bounds.iloc[order].reset_index(drop=True)
    hw = b["half_width"].to_numpy(dtype=np.float64)
    rng = np.random.default_rng(spec.seed)
    assets = b[ASSET].astype(str).to_numpy()
    months = b[MONTH].to_numpy(dtype=np.int64)

    if spec.mode == "all":
        perm = rng.permutation(len(hw))
    elif spec.mode == "stock":
        by_month = np.lexsort((assets, months))
        perm = np.arange(len(hw))
        inner = _permute_groups(by_month, months[by_month], rng)
        perm[by_month] = inner
    elif year_blocks:
        perm = _year_block_perm(assets, months, rng)
    else:
        perm = _permute_groups(np.arange(len(hw)), assets, rng)

    new_hw = hw[perm]
    b["half_width"] = new_hw
    if "fallback" in b.columns:
        b["fallback"] = b["fallback"].to_numpy()[perm]
    mu = b["mu_hat"].to_numpy(dtype=np.float64)
    b["upper"] = mu + new_hw
    b["lower"] = mu - new_hw
    inv = np.empty_like(order)
    inv[order] = np.arange(len(order))
    out = b.iloc[inv]
    out.index = bounds.index
    return out


def _year_block_perm(assets, months, rng) -> np.ndarray:
    perm = np.arange(len(assets))
    years = np.array([year_of(int(m)) for m in months])
    _, start = np.unique(assets, return_index=True)
    ends = list(start[1:]) + [len(assets)]
    for s, e in zip(start, ends):
        ys = years[s:e]
        uniq = np.unique(ys)
        blocks = [np.arange(s, e)[ys == y] for y in uniq]
        if len({len(bl) for bl in blocks}) > 1:
            raise ConfigError(f"year-block shuffle needs equal-length years for asset {assets[s]}")
        for target, src in zip(blocks, [blocks[j] for j in rng.permutation(len(blocks))]):
            perm[target] = src
    return perm


def long_short_returns(returns: pd.Series, scores: pd.DataFrame, mode: str, cost_rate: float = 0.0,
                       basis: str = "gross", strategy_id: str = "") -> np.ndarray:
    series = realize(weights_by_month(scores, mode), returns, strategy_id, cost_rate)
    return series.gross_returns if basis == "gross" else series.net_returns


def _sharpe_or_nan(r) -> float:
    s = sharpe(r)
    return float("nan") if s is None else s


def _returns_of(panel_or_returns) -> pd.Series:
    if isinstance(panel_or_returns, pd.Series):
        return panel_or_returns
    return panel_or_returns.returns()


def _select(bounds: pd.DataFrame, alpha: float, method: str) -> pd.DataFrame:
    sel = bounds[np.isclose(bounds["alpha"].to_numpy(dtype=np.float64), alpha, rtol=0, atol=1e-12)
                 & (bounds["method"].to_numpy() == method)]
    if sel.empty:
        raise ConfigError(f"no bounds for alpha={alpha:g}, method={method}")
    return sel


PLACEBO_COLUMNS = [
    "model", "point", "none", "time", "stock", "all", "time_sd", "stock_sd", "all_sd", "n_seeds",
    "none_minus_time", "time_minus_stock", "stock_minus_all", "all_minus_point",
]


def placebo_suite(panel, bounds: pd.DataFrame, alpha: float, seeds: Sequence[int], method: str = EMPIRICAL,
                  cost_rate: float = 0.0, basis: str = "gross", year_blocks: bool = False,
                  models: Sequence[str] | None = None) -> pd.DataFrame:
    """Long-short Sharpe ratios under each shuffle mode plus the point benchmark.

    ``panel`` is a :class:`PanelDataset` or its realised-return Series;
    ``bounds`` holds the bound rows of one or more models.  Shuffled modes
    report the mean over ``seeds`` and the per-seed sample sd.
    """
    seeds = [int(s) for s in seeds]
    if not seeds:
        raise ConfigError("placebo suite needs at least one seed")
    returns = _returns_of(panel)
    rows = []
    all_models = sorted(bounds["model"].unique()) if models is None else list(models)
    for model in all_models:
        b = _select(bounds[bounds["model"] == model], alpha, method)
        point = _sharpe_or_nan(long_short_returns(returns, b, POINT, cost_rate, basis))
        row = {"model": model, "point": point,
               "none": _sharpe_or_nan(long_short_returns(returns, b, UA, cost_rate, basis))}
        for mode in ("time", "stock", "all"):
            vals = []
            for seed in seeds:
                spec = ShuffleSpec(mode, substream_seed(seed, model, mode))
                shuffled = shuffle_halfwidths(b, spec, year_blocks=year_blocks and mode == "time")
                vals.append(_sharpe_or_nan(long_short_returns(returns, shuffled, UA, cost_rate, basis)))
            vals = np.array(vals)
            row[mode] = float(vals.mean())
            row[f"{mode}_sd"] = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
        row["n_seeds"] = len(seeds)
        row["none_minus_time"] = row["none"] - row["time"]
        row["time_minus_stock"] = row["time"] - row["stock"]
        row["stock_minus_all"] = row["stock"] - row["all"]
        row["all_minus_point"] = row["all"] - row["point"]
        rows.append(row)
    return pd.DataFrame(rows, columns=PLACEBO_COLUMNS)


# --------------------------------------------------------------------------
# Normal versus empirical half-widths
# --------------------------------------------------------------------------

def normal_vs_empirical(panel, bounds: pd.DataFrame, alphas: Sequence[float] = (0.01, 0.05, 0.10),
                        cost_rate: float = 0.0, basis: str = "gross"):
    """Sharpe by (model, method, alpha) beside the point benchmark.

    Returns ``(sharpe_table, median_halfwidths)``.  The first has one row per
    model and columns ``point`` and ``{method}_{alpha}``; the second lists
    the median half-width of every (model, method, alpha).
    """
    returns = _returns_of(panel)
    rows, medians = [], []
    for model in sorted(bounds["model"].unique()):
        bm = bounds[bounds["model"] == model]
        row = {"model": model}
        for method in HALFWIDTH_METHODS:
            for alpha in alphas:
                b = _select(bm, alpha, method)
                if "point" not in row:
                    row["point"] = _sharpe_or_nan(long_short_returns(returns, b, POINT, cost_rate, basis))
                row[f"{method}_{alpha:g}"] = _sharpe_or_nan(long_short_returns(returns, b, UA, cost_rate, basis))
                medians.append({"model": model, "method": method, "alpha": float(alpha),
                                "median_half_width": float(np.median(b["half_width"].to_numpy()))})
        rows.append(row)
    cols = ["model", "point"] + [f"{m}_{a:g}" for m in (EMPIRICAL, NORMAL) for a in alphas]
    return pd.DataFrame(rows, columns=cols), pd.DataFrame(medians)
