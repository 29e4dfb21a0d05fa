"""Panel data model, ingestion, preprocessing and the synthetic generator.

Month ids are integers ``year * 12 + (calendar_month - 1)`` so that
``month // 12`` is the calendar year and consecutive months differ by one.
A panel row ``(asset, month)`` carries the characteristics observed at the
end of ``month`` and the excess return realised over the following month.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np
import pandas as pd

from .errors import ConfigError, CoverageError, DataIntegrityError, MissingColumnError, ParseError

ASSET = "asset"
MONTH = "month"
RET = "ret_next"
MACRO_PREFIX = "macro_"


def month_id(year: int, month: int) -> int:
    """Integer id of calendar ``month`` (1..12) of ``year``."""
    if not 1 <= month <= 12:
        raise ValueError(f"calendar month must be in 1..12, got {month}")
    return year * 12 + month - 1


def year_of(month: int) -> int:
    return month // 12


def month_label(month: int) -> str:
    return f"{month // 12:04d}-{month % 12 + 1:02d}"


@dataclass(frozen=True)
class PanelObservation:
    asset: str
    month: int
    features: tuple
    macro: tuple
    next_excess_return: float


@dataclass(frozen=True)
class LoadReport:
    n_rows_read: int
    n_dropped: int
    dropped_by_column: dict = field(default_factory=dict)


@dataclass(frozen=True)
class PanelSchema:
    """Maps file columns onto the panel's required fields.

    ``features=None`` takes every column that is neither required nor macro;
    ``macro=None`` takes every column whose name starts with ``macro_``.
    """

    asset: str = ASSET
    month: str = MONTH
    ret_next: str = RET
    features: Sequence[str] | None = None
    macro: Sequence[str] | None = None

    @classmethod
    def from_mapping(cls, mapping: Mapping | None) -> "PanelSchema":
        if mapping is None:
            return cls()
        if isinstance(mapping, PanelSchema):
            return mapping
        unknown = set(mapping) - {"asset", "month", "ret_next", "features", "macro"}
        if unknown:
            raise ConfigError(f"unknown schema keys: {sorted(unknown)}")
        return cls(**dict(mapping))


@dataclass(frozen=True, eq=False)
class PanelDataset:
    """Long-form panel of ``(asset, month)`` rows.

    ``frame`` holds the columns ``asset, month, ret_next``, then the feature
    columns, then the macro columns, sorted by month and asset.  The
    constructor validates the invariants and stores a private sorted copy.
    """

    frame: pd.DataFrame
    feature_names: tuple
    macro_names: tuple = ()
    transformed: bool = False
    load_report: LoadReport | None = None

    def __post_init__(self):
        feats = tuple(self.feature_names)
        macro = tuple(self.macro_names)
        object.__setattr__(self, "feature_names", feats)
        object.__setattr__(self, "macro_names", macro)
        cols = [ASSET, MONTH, RET, *feats, *macro]
        for c in cols:
            if c not in self.frame.columns:
                raise MissingColumnError(c)
        if len(set(cols)) != len(cols):
            raise ConfigError("feature and macro names must be distinct from each other and from key columns")
        df = self.frame.loc[:, cols].copy()
        df[ASSET] = df[ASSET].astype(str)
        df[MONTH] = df[MONTH].astype(np.int64)
        for c in (RET, *feats, *macro):
            df[c] = df[c].astype(np.float64)
        df = df.sort_values([MONTH, ASSET], kind="mergesort").reset_index(drop=True)

        dup = df.duplicated([ASSET, MONTH], keep=False)
        if dup.any():
            first = df.loc[dup].iloc[0]
            raise DataIntegrityError(
                f"duplicate observation for (asset={first[ASSET]!r}, month={int(first[MONTH])})"
            )
        if not np.isfinite(df[RET].to_numpy()).all():
            raise DataIntegrityError("next_excess_return must be finite")
        months = np.unique(df[MONTH].to_numpy())
        if len(months) and (np.diff(months) != 1).any():
            gap = int(months[np.flatnonzero(np.diff(months) != 1)[0]])
            raise DataIntegrityError(f"month index is not contiguous after month {gap}")
        if macro:
            spread = df.groupby(MONTH)[list(macro)].agg(lambda s: s.max() - s.min())
            bad = spread.to_numpy() != 0
            if bad.any():
                m = int(spread.index[np.flatnonzero(bad.any(axis=1))[0]])
                raise DataIntegrityError(f"macro vector differs across assets in month {m}")
        if self.transformed and feats:
            vals = df[list(feats)].to_numpy()
            if np.nanmax(np.abs(vals)) > 1.0:
                raise DataIntegrityError("transformed features must lie in [-1, 1]")
        object.__setattr__(self, "frame", df)

    @property
    def asset_index(self) -> tuple:
        return tuple(sorted(self.frame[ASSET].unique()))

    @property
    def month_index(self) -> np.ndarray:
        return np.unique(self.frame[MONTH].to_numpy())

    @property
    def n_obs(self) -> int:
        return len(self.frame)

    @property
    def observations(self) -> Iterator[PanelObservation]:
        feats = self.frame[list(self.feature_names)].to_numpy()
        macro = self.frame[list(self.macro_names)].to_numpy()
        for k, (a, m, r) in enumerate(self.frame[[ASSET, MONTH, RET]].itertuples(index=False)):
            yield PanelObservation(a, int(m), tuple(feats[k]), tuple(macro[k]), float(r))

    def rows(self, months=None) -> pd.DataFrame:
        """Rows whose month is in ``months`` (all rows when ``None``)."""
        if months is None:
            return self.frame
        return self.frame.loc[self.frame[MONTH].isin(np.asarray(list(months)))]

    def design_columns(self, include_macro: bool = True) -> list:
        return list(self.feature_names) + (list(self.macro_names) if include_macro else [])

    def design(self, months=None, include_macro: bool = True):
        """Return ``(X, y, keys)`` for the selected months.

        ``keys`` is a DataFrame with the ``asset`` and ``month`` of every row.
        """
        df = self.rows(months)
        X = df[self.design_columns(include_macro)].to_numpy(dtype=np.float64)
        y = df[RET].to_numpy(dtype=np.float64)
        return X, y, df[[ASSET, MONTH]].reset_index(drop=True)

    def returns(self) -> pd.Series:
        """Realised next-month returns indexed by ``(asset, month)``."""
        return self.frame.set_index([ASSET, MONTH])[RET]

    def replace(self, **changes) -> "PanelDataset":
        kw = dict(
            frame=self.frame,
            feature_names=self.feature_names,
            macro_names=self.macro_names,
            transformed=self.transformed,
            load_report=self.load_report,
        )
        kw.update(changes)
        return PanelDataset(**kw)


def load_panel(path, schema=None) -> PanelDataset:
    """Read a comma-separated panel file.

    Rows missing any required field are dropped and counted in
    ``dataset.load_report``; nothing is imputed.
    """
    path = Path(path)
    schema = PanelSchema.from_mapping(schema)
    raw = pd.read_csv(path, float_precision="round_trip")
    for c in (schema.asset, schema.month, schema.ret_next):
        if c not in raw.columns:
            raise MissingColumnError(c, path)
    key = {schema.asset, schema.month, schema.ret_next}
    if schema.macro is None:
        macro = [c for c in raw.columns if c.startswith(MACRO_PREFIX) and c not in key]
    else:
        macro = list(schema.macro)
    if schema.features is None:
        feats = [c for c in raw.columns if c not in key and c not in macro]
    else:
        feats = list(schema.features)
    for c in feats + macro:
        if c not in raw.columns:
            raise MissingColumnError(c, path)

    df = pd.DataFrame(
        {
            ASSET: raw[schema.asset],
            MONTH: raw[schema.month],
            RET: pd.to_numeric(raw[schema.ret_next], errors="coerce"),
        }
    )
    for c in feats + macro:
        df[c] = pd.to_numeric(raw[c], errors="coerce")
    df[RET] = df[RET].where(np.isfinite(df[RET]))

    required = [ASSET, MONTH, RET, *feats, *macro]
    missing = df[required].isna()
    drop = missing.any(axis=1)
    dropped_by = {c: int(n) for c, n in missing.sum().items() if n}
    df = df.loc[~drop].copy()

    month_num = pd.to_numeric(df[MONTH], errors="coerce")
    bad = month_num.isna() | (month_num != np.round(month_num))
    if bad.any():
        row = int(df.index[bad.to_numpy()][0]) + 2
        raise ParseError(f"month {df.loc[bad, MONTH].iloc[0]!r} is not an integer month id", row)
    df[MONTH] = month_num.astype(np.int64)

    report = LoadReport(n_rows_read=len(raw), n_dropped=int(drop.sum()), dropped_by_column=dropped_by)
    return PanelDataset(df, tuple(feats), tuple(macro), transformed=False, load_report=report)


def quantile_transform(panel: PanelDataset) -> PanelDataset:
    """Map every feature to ``[-1, 1]`` by its cross-sectional rank each month.

    Value = ``2 * (rank - 1) / (N_t - 1) - 1`` with average ranks for ties;
    a month with a single non-missing value maps it to 0.
    """
    df = panel.frame.copy()
    feats = list(panel.feature_names)
    if feats:
        g = df.groupby(MONTH)[feats]
        rank = g.rank(method="average")
        n = g.transform("count")
        with np.errstate(invalid="ignore", divide="ignore"):
            scaled = 2.0 * (rank - 1.0) / (n - 1.0) - 1.0
        df[feats] = scaled.where(n > 1, 0.0).where(df[feats].notna())
    return panel.replace(frame=df, transformed=True)


def load_macro(path) -> pd.DataFrame:
    """Read a macro table (``month`` plus one column per variable), indexed by month."""
    raw = pd.read_csv(path, float_precision="round_trip")
    if MONTH not in raw.columns:
        raise MissingColumnError(MONTH, path)
    if raw[MONTH].duplicated().any():
        m = raw.loc[raw[MONTH].duplicated(), MONTH].iloc[0]
        raise DataIntegrityError(f"duplicate macro month {m}")
    return raw.set_index(MONTH).astype(np.float64)


def _as_macro_frame(macro_table, names) -> pd.DataFrame:
    if isinstance(macro_table, pd.DataFrame):
        tbl = macro_table
        if MONTH in tbl.columns:
            tbl = tbl.set_index(MONTH)
        return tbl.astype(np.float64)
    rows = {int(m): np.asarray(v, dtype=np.float64) for m, v in macro_table.items()}
    width = {len(v) for v in rows.values()}
    if len(width) > 1:
        raise DataIntegrityError("macro vectors have different lengths")
    k = width.pop() if width else 0
    if names is None:
        names = [f"{MACRO_PREFIX}{j + 1:02d}" for j in range(k)]
    if len(names) != k:
        raise ConfigError(f"{len(names)} macro names for vectors of length {k}")
    return pd.DataFrame.from_dict(rows, orient="index", columns=list(names)).sort_index()


def merge_macro(panel: PanelDataset, macro_table, names=None, standardize: bool = False) -> PanelDataset:
    """Broadcast the month's macro vector to every asset in that month.

    ``macro_table`` is a DataFrame indexed by month (or with a ``month``
    column) or a mapping ``month -> vector``.  With ``standardize`` each
    series is z-scored (sample sd) over the panel's months.  Existing macro
    columns are replaced.
    """
    tbl = _as_macro_frame(macro_table, names)
    months = panel.month_index
    missing = [int(m) for m in months if m not in tbl.index]
    if missing:
        raise CoverageError(f"macro table does not cover month {missing[0]} ({month_label(missing[0])})")
    tbl = tbl.loc[months]
    if standardize:
        sd = tbl.std(ddof=1)
        flat = [c for c in tbl.columns if not sd[c] > 0]
        if flat:
            raise DataIntegrityError(f"zero variance macro series: {flat[0]}")
        tbl = (tbl - tbl.mean()) / sd
    clash = set(tbl.columns) & ({ASSET, MONTH, RET} | set(panel.feature_names))
    if clash:
        raise ConfigError(f"macro names collide with panel columns: {sorted(clash)}")
    df = panel.frame.drop(columns=list(panel.macro_names))
    df = df.join(tbl, on=MONTH)
    return panel.replace(frame=df, macro_names=tuple(tbl.columns))


# --------------------------------------------------------------------------
# Synthetic panels
# --------------------------------------------------------------------------

DGP_LINEAR = "linear"
DGP_INTERACTION = "nonlinear-interaction"


@dataclass(frozen=True)
class SyntheticConfig:
    """Parameters of the seeded synthetic panel.

    ``noise_scale`` is the smallest asset noise sd; the largest is
    ``noise_scale * heteroskedasticity``.  ``signal_scale`` is the
    cross-sectional sd of the linear part of the expected return.
    """

    n_assets: int = 200
    n_months: int = 360
    n_features: int = 5
    dgp: str = DGP_LINEAR
    heteroskedasticity: float = 5.0
    seed: int = 0
    noise_scale: float = 0.04
    signal_scale: float = 0.01
    persistence: float = 0.9
    n_macro: int = 2
    start_month: int = 1967 * 12

    def validate(self) -> "SyntheticConfig":
        if self.n_assets < 20:
            raise ConfigError(f"n_assets must be >= 20, got {self.n_assets}")
        if self.n_months < 60:
            raise ConfigError(f"n_months must be >= 60, got {self.n_months}")
        if self.n_features < 1:
            raise ConfigError("n_features must be >= 1")
        if not self.heteroskedasticity >= 1:
            raise ConfigError(f"heteroskedasticity must be >= 1, got {self.heteroskedasticity}")
        if self.dgp not in (DGP_LINEAR, DGP_INTERACTION):
            raise ConfigError(f"unknown dgp {self.dgp!r}")
        if not self.noise_scale > 0:
            raise ConfigError("noise_scale must be positive")
        if not 0 <= self.persistence < 1:
            raise ConfigError("persistence must be in [0, 1)")
        if self.n_macro < 0:
            raise ConfigError("n_macro must be >= 0")
        return self


@dataclass(frozen=True)
class SyntheticGroundTruth:
    true_function_id: str
    coefficients: np.ndarray
    noise_scale_per_asset: dict
    seed: int
    interaction_pairs: tuple = ()

    def __post_init__(self):
        if any(not s > 0 for s in self.noise_scale_per_asset.values()):
            raise ConfigError("noise scales must be strictly positive")

    def expected_return(self, X: np.ndarray) -> np.ndarray:
        """True conditional mean ``f(x)`` for feature rows ``X``."""
        X = np.asarray(X, dtype=np.float64)
        p = X.shape[1]
        out = X @ self.coefficients[:p]
        for c, (j, k) in zip(self.coefficients[p:], self.interaction_pairs):
            out = out + c * X[:, j] * X[:, k]
        return out


def _rank_to_unit(z: np.ndarray) -> np.ndarray:
    # z: (months, assets); continuous draws so ties have probability zero
    n = z.shape[1]
    ranks = z.argsort(axis=1, kind="stable").argsort(axis=1, kind="stable") + 1.0
    return 2.0 * (ranks - 1.0) / (n - 1.0) - 1.0


def generate_synthetic(config: SyntheticConfig | None = None, **overrides):
    """Simulate ``r = f(x) + sigma_i * eps`` on rank-transformed characteristics.

    Returns ``(PanelDataset, SyntheticGroundTruth)``; the output is a pure
    function of the configuration (including the seed).
    """
    cfg = config or SyntheticConfig()
    if overrides:
        cfg = SyntheticConfig(**{**cfg.__dict__, **overrides})
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    N, T, P = cfg.n_assets, cfg.n_months, cfg.n_features

    width = max(4, len(str(N - 1)))
    assets = np.array([f"A{i:0{width}d}" for i in range(N)])
    sigma = cfg.noise_scale * np.geomspace(1.0, cfg.heteroskedasticity, N)
    sigma = sigma[rng.permutation(N)]

    # AR(1) latent characteristics, then the monthly cross-sectional rank map
    phi = cfg.persistence
    z = np.empty((T, N, P))
    z[0] = rng.standard_normal((N, P))
    innov = rng.standard_normal((T, N, P)) * math.sqrt(1.0 - phi * phi)
    for t in range(1, T):
        z[t] = phi * z[t - 1] + innov[t]
    X = np.stack([_rank_to_unit(z[:, :, j]) for j in range(P)], axis=2)

    u = rng.standard_normal(P)
    beta = cfg.signal_scale * math.sqrt(3.0) * u / np.linalg.norm(u)
    pairs: tuple = ()
    coef = beta
    if cfg.dgp == DGP_INTERACTION:
        pairs = tuple((j, k) for j in range(P) for k in range(j + 1, P))
        if pairs:
            v = rng.standard_normal(len(pairs))
            gamma = cfg.signal_scale * 3.0 * v / np.linalg.norm(v)
            coef = np.concatenate([beta, gamma])
    truth = SyntheticGroundTruth(
        true_function_id=cfg.dgp,
        coefficients=coef,
        noise_scale_per_asset={a: float(s) for a, s in zip(assets, sigma)},
        seed=cfg.seed,
        interaction_pairs=pairs,
    )

    flatX = X.reshape(T * N, P)
    f = truth.expected_return(flatX)
    eps = rng.standard_normal((T, N))
    r = f + (eps * sigma[None, :]).reshape(-1)

    months = cfg.start_month + np.arange(T, dtype=np.int64)
    feat_names = [f"char{j + 1:02d}" for j in range(P)]
    df = pd.DataFrame({ASSET: np.tile(assets, T), MONTH: np.repeat(months, N), RET: r})
    for j, name in enumerate(feat_names):
        df[name] = flatX[:, j]

    macro_names: tuple = ()
    if cfg.n_macro:
        m = np.empty((T, cfg.n_macro))
        m[0] = rng.standard_normal(cfg.n_macro)
        e = rng.standard_normal((T, cfg.n_macro)) * math.sqrt(1.0 - 0.8**2)
        for t in range(1, T):
            m[t] = 0.8 * m[t - 1] + e[t]
        macro_names = tuple(f"{MACRO_PREFIX}{j + 1:02d}" for j in range(cfg.n_macro))
        tbl = pd.DataFrame(m, index=months, columns=list(macro_names))
        tbl = (tbl - tbl.mean()) / tbl.std(ddof=1)
        df = df.join(tbl, on=MONTH)

    panel = PanelDataset(df, tuple(feat_names), macro_names, transformed=True)
    return panel, truth


def write_panel(panel: PanelDataset, path) -> None:
    """Write the panel in the delimited-text layout ``load_panel`` reads."""
    panel.frame.to_csv(path, index=False, float_format="%.17g", lineterminator="\n")
