"""Walk-forward pipeline: train per rolling split, calibrate, sort, evaluate and write outputs."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import pandas as pd

from .calibration import (
    DEFAULT_K, DEFAULT_N_MIN, EMPIRICAL, HALFWIDTH_METHODS, ResidualPool, audit_pools, build_bounds,
    cross_fit_residuals, pools_frame,
)
from .errors import ConfigError, MissingColumnError, StageError, UASortError
from .evaluation import FactorTable, load_factors, performance_report
from .panel import (
    ASSET, MONTH, RET, PanelDataset, SyntheticConfig, generate_synthetic, load_macro, load_panel,
    merge_macro, quantile_transform,
)
from .portfolio import DEFAULT_COST_RATE, POINT, UA, long_only_weights, realize, weights_by_month
from .predictors import (
    METHODS, SOURCE_EXTERNAL, fit_on_months, grid_search, load_external_predictions,
    predictions_frame, rolling_schedule,
)

def FLOAT_FORMAT(x) -> str:
    """Shortest string that round-trips to the same double."""
    return repr(float(x))
REPORT_COLUMNS = [
    "model", "strategy", "kind", "mode", "method", "alpha", "basis", "ann_return", "ann_vol", "sharpe",
    "nw_tstat", "nw_lags", "n_months", "alpha3", "alpha3_t", "alpha5", "alpha5_t",
]


@dataclass
class RunConfig:
    """Declarative run settings.  Paths are taken relative to the working directory."""

    panel: str | None = None
    macro: str | None = None
    factors: str | None = None
    benchmark: str | None = None
    external: dict = field(default_factory=dict)
    models: list = field(default_factory=lambda: ["pcr"])
    synthetic: dict = field(default_factory=dict)
    standardize_macro: bool = False
    include_macro: bool = True
    train_years: int = 10
    val_years: int = 5
    K: int = DEFAULT_K
    alphas: list = field(default_factory=lambda: [0.05])
    methods: list = field(default_factory=lambda: [EMPIRICAL])
    n_min: int = DEFAULT_N_MIN
    cost_rate: float = DEFAULT_COST_RATE
    nw_lags: int | None = None
    grids: dict = field(default_factory=dict)
    seed: int = 0
    seeds: list = field(default_factory=lambda: [0])
    placebo_alpha: float = 0.05
    placebo_method: str = EMPIRICAL
    year_blocks: bool = False
    driver_alpha: float = 0.05
    driver_method: str = EMPIRICAL
    interactions: object = "all"
    out: str = "out"

    @classmethod
    def from_mapping(cls, mapping) -> "RunConfig":
        mapping = dict(mapping or {})
        if "config" in mapping and isinstance(mapping["config"], dict):
            mapping = dict(mapping["config"])  # a run manifest
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(mapping) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**mapping)

    def to_mapping(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_mapping(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def input_paths(self) -> dict:
        paths = {k: getattr(self, k) for k in ("panel", "macro", "factors", "benchmark")}
        paths.update({f"external:{m}": p for m, p in sorted(self.external.items())})
        return {k: v for k, v in paths.items() if v}

    def validate(self) -> "RunConfig":
        for key, path in self.input_paths().items():
            if not Path(path).exists():
                raise ConfigError(f"{key} file not found: {path}")
        for a in list(self.alphas) + [self.placebo_alpha, self.driver_alpha]:
            if not 0.0 < float(a) < 1.0:
                raise ConfigError(f"alpha must lie in (0, 1), got {a}")
        if self.cost_rate < 0:
            raise ConfigError("cost_rate must be nonnegative")
        for m in list(self.methods) + [self.placebo_method, self.driver_method]:
            if m not in HALFWIDTH_METHODS:
                raise ConfigError(f"unknown half-width method {m!r}")
        for m in self.models:
            if m not in METHODS:
                raise ConfigError(f"unknown model {m!r}; built-in models are {', '.join(METHODS)}")
        clash = set(self.models) & set(self.external)
        if clash:
            raise ConfigError(f"external model ids clash with built-in models: {', '.join(sorted(clash))}")
        if not self.models and not self.external:
            raise ConfigError("no models configured")
        if self.K < 3:
            raise ConfigError(f"K must be >= 3, got {self.K}")
        if self.n_min < 1:
            raise ConfigError("n_min must be >= 1")
        if self.nw_lags is not None and self.nw_lags < 0:
            raise ConfigError("nw_lags must be nonnegative")
        if self.panel is None:
            SyntheticConfig(**{**self.synthetic, "seed": self.seed}).validate()
        return self


def load_config(path) -> RunConfig:
    """Read a YAML or JSON config (JSON is a subset of YAML)."""
    import yaml

    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    with p.open() as fh:
        data = yaml.safe_load(fh)
    if data is not None and not isinstance(data, dict):
        raise ConfigError(f"config {p} must be a mapping")
    return RunConfig.from_mapping(data)


def _stage(stage, key):
    class _Guard:
        def __enter__(self):
            return self

        def __exit__(self, exc_type, exc, tb):
            if exc is not None and not isinstance(exc, StageError) and isinstance(exc, (UASortError, ValueError, KeyError)):
                raise StageError(stage, key, exc) from exc
            return False

    return _Guard()


# --------------------------------------------------------------------------
# Inputs
# --------------------------------------------------------------------------

def load_benchmark(path) -> dict:
    df = pd.read_csv(path, float_precision="round_trip")
    for c in (MONTH, "ret"):
        if c not in df.columns:
            raise MissingColumnError(c, path)
    return {int(m): float(r) for m, r in zip(df[MONTH], df["ret"])}


def load_inputs(cfg: RunConfig):
    """``(panel, factors, benchmark)``; a synthetic panel is generated when no file is given."""
    with _stage("load", "panel"):
        if cfg.panel:
            panel = quantile_transform(load_panel(cfg.panel))
        else:
            panel, _ = generate_synthetic(SyntheticConfig(**{**cfg.synthetic, "seed": cfg.seed}))
    if cfg.macro:
        with _stage("load", "macro"):
            panel = merge_macro(panel, load_macro(cfg.macro), standardize=cfg.standardize_macro)
    factors = benchmark = None
    if cfg.factors:
        with _stage("load", "factors"):
            factors = load_factors(cfg.factors)
    if cfg.benchmark:
        with _stage("load", "benchmark"):
            benchmark = load_benchmark(cfg.benchmark)
    return panel, factors, benchmark


# --------------------------------------------------------------------------
# Training and calibration
# --------------------------------------------------------------------------

@dataclass(eq=False)
class ModelRun:
    model: str
    source: str
    splits: list
    predictions: pd.DataFrame
    pools: dict  # split_id -> {asset: ResidualPool}
    hyperparams: dict = field(default_factory=dict)
    validation_mse: dict = field(default_factory=dict)

    def audit(self) -> dict:
        total = {"look_ahead": 0, "in_fold": 0}
        for split in self.splits:
            for k, v in audit_pools(self.pools[split.split_id], split).items():
                total[k] += v
        return total


def train_model(panel: PanelDataset, method: str, splits, cfg: RunConfig) -> ModelRun:
    """Grid search, fit on training months, predict the test year and cross-fit pools per split."""
    preds, pools, params, mses = [], {}, {}, {}
    grid = cfg.grids.get(method)
    for split in splits:
        key = f"{method}/{split.split_id}"
        with _stage("train", key):
            point, mse = grid_search(method, split, panel, grid, cfg.include_macro)
            model = fit_on_months(method, point, panel, split.train, cfg.include_macro)
            X, _, keys = panel.design(split.test, cfg.include_macro)
            mu = model.predict(X)
        preds.append(pd.DataFrame({ASSET: keys[ASSET], MONTH: keys[MONTH], "model": method, "mu_hat": mu,
                                   "source": "builtin"}))
        with _stage("calibrate", key):
            pools[split.split_id] = cross_fit_residuals(
                method, point, split, cfg.K, panel, cfg.include_macro, assets=sorted(keys[ASSET].unique()),
            )
        params[split.split_id], mses[split.split_id] = dict(point), mse
    return ModelRun(method, "builtin", list(splits), pd.concat(preds, ignore_index=True), pools, params, mses)


def external_run(panel: PanelDataset, model_id: str, path, splits) -> ModelRun:
    """Wrap externally produced predictions.

    Pools hold the model's own residuals inside each split's train plus
    validation window, so they never reach into the test year.
    """
    with _stage("load", f"external:{model_id}"):
        preds = predictions_frame(load_external_predictions(path, model_id))
    rets = panel.frame[[ASSET, MONTH, RET]]
    joined = preds.merge(rets, on=[ASSET, MONTH], how="inner")
    joined["resid"] = joined[RET] - joined["mu_hat"]
    test_parts, pools = [], {}
    for split in splits:
        lo, hi = split.test_months
        test = preds[(preds[MONTH] >= lo) & (preds[MONTH] <= hi)]
        test_parts.append(test)
        w0, w1 = split.window.start, split.window.stop - 1
        win = joined[(joined[MONTH] >= w0) & (joined[MONTH] <= w1)].sort_values([ASSET, MONTH])
        sp = {}
        for asset, g in win.groupby(ASSET, sort=True):
            sp[str(asset)] = ResidualPool(str(asset), split.split_id, g["resid"].to_numpy(),
                                          g[MONTH].to_numpy(dtype=np.int64), np.zeros(len(g), dtype=np.int64))
        for asset in sorted(test[ASSET].unique()):
            sp.setdefault(str(asset), ResidualPool(str(asset), split.split_id, np.array([]),
                                                   np.array([], dtype=np.int64), np.array([], dtype=np.int64),
                                                   flags=("empty",)))
        pools[split.split_id] = sp
    return ModelRun(model_id, SOURCE_EXTERNAL, list(splits), pd.concat(test_parts, ignore_index=True), pools)


def make_bounds(run: ModelRun, alpha: float, method: str, n_min: int):
    parts, reports = [], []
    for split in run.splits:
        lo, hi = split.test_months
        p = run.predictions
        p = p[(p[MONTH] >= lo) & (p[MONTH] <= hi)]
        with _stage("calibrate", f"{run.model}/{split.split_id}/{method}/{alpha:g}"):
            b, rep = build_bounds(p, run.pools[split.split_id], alpha, method, n_min, split)
        parts.append(b)
        reports.append(rep)
    return pd.concat(parts, ignore_index=True), reports


# --------------------------------------------------------------------------
# Backtest
# --------------------------------------------------------------------------

@dataclass(eq=False)
class BacktestResult:
    config: RunConfig
    runs: dict
    bounds: pd.DataFrame
    portfolios: list
    reports: pd.DataFrame
    audit: dict
    coverage: dict


def strategy_id(model, mode, method=None, alpha=None, kind="ls") -> str:
    if mode == POINT:
        return f"{model}/point/{kind}"
    return f"{model}/ua-{method}-{alpha:g}/{kind}"


def run_backtest(cfg: RunConfig, panel: PanelDataset | None = None, factors: FactorTable | None = None,
                 benchmark: dict | None = None) -> BacktestResult:
    if panel is None:
        panel, factors, benchmark = load_inputs(cfg)
    with _stage("schedule", "panel"):
        splits = rolling_schedule(panel.month_index, cfg.train_years, cfg.val_years)

    runs = {}
    for method in cfg.models:
        runs[method] = train_model(panel, method, splits, cfg)
    for model_id, path in sorted(cfg.external.items()):
        runs[model_id] = external_run(panel, model_id, path, splits)

    returns = panel.returns()
    f3 = factors.first(3) if factors is not None else None
    f5 = factors.first(5) if factors is not None else None
    bounds_parts, portfolios, rows, coverage = [], [], [], {}
    audit = {}
    for model, run in runs.items():
        audit[model] = run.audit()
        scores = run.predictions[[ASSET, MONTH, "mu_hat"]]
        specs = [(POINT, None, None, scores)]
        for method in cfg.methods:
            for alpha in cfg.alphas:
                b, reps = make_bounds(run, float(alpha), method, cfg.n_min)
                bounds_parts.append(b)
                coverage[(model, method, float(alpha))] = reps
                specs.append((UA, method, float(alpha), b))
        for mode, method, alpha, sc in specs:
            kinds = [("ls", weights_by_month(sc, mode))]
            if benchmark is not None:
                kinds.append(("lo", long_only_weights(sc, "mu_hat" if mode == POINT else "upper")))
            for kind, weights in kinds:
                sid = strategy_id(model, mode, method, alpha, kind)
                with _stage("portfolio", sid):
                    series = realize(weights, returns, sid, cfg.cost_rate,
                                     benchmark=benchmark if kind == "lo" else None)
                portfolios.append(series)
                for basis, r in (("gross", series.gross_returns), ("net", series.net_returns)):
                    with _stage("evaluate", f"{sid}/{basis}"):
                        rep = performance_report(r, sid, kind == "ls", series.months, f3, f5, cfg.nw_lags, basis)
                    row = rep.as_row()
                    row.pop("strategy_id")
                    row.update(model=model, strategy=sid, kind=kind, mode=mode, method=method or "",
                               alpha=alpha if alpha is not None else np.nan)
                    rows.append(row)
    bounds = pd.concat(bounds_parts, ignore_index=True) if bounds_parts else pd.DataFrame()
    reports = pd.DataFrame(rows, columns=REPORT_COLUMNS)
    return BacktestResult(cfg, runs, bounds, portfolios, reports, audit, coverage)


# --------------------------------------------------------------------------
# Output
# --------------------------------------------------------------------------

def write_csv(df: pd.DataFrame, path) -> None:
    """Deterministic CSV: round-trip float text and ``\\n`` line endings."""
    df.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def manifest(cfg: RunConfig) -> dict:
    return {
        "config": cfg.to_mapping(),
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "inputs": {k: _sha256(p) for k, p in cfg.input_paths().items()},
    }


def write_outputs(result: BacktestResult, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(result.reports, out / "reports.csv")
    frames = [p.to_frame() for p in result.portfolios]
    port = pd.concat(frames, ignore_index=True)
    write_csv(port, out / "portfolios.csv")
    write_csv(port[[MONTH, "strategy", "nav"]], out / "nav.csv")
    preds = pd.concat([r.predictions for r in result.runs.values()], ignore_index=True)
    write_csv(preds, out / "predictions.csv")
    if not result.bounds.empty:
        write_csv(result.bounds, out / "bounds.csv")
    pools = []
    for model, run in result.runs.items():
        for split in run.splits:
            pf = pools_frame(run.pools[split.split_id])
            pf.insert(0, "model", model)
            pools.append(pf)
    write_csv(pd.concat(pools, ignore_index=True), out / "pools.csv")
    with open(out / "audit.json", "w") as fh:
        json.dump(result.audit, fh, sort_keys=True, indent=2)
        fh.write("\n")
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest(result.config), fh, sort_keys=True, indent=2)
        fh.write("\n")
    return out


def require(path) -> Path:
    """Path of a prerequisite artifact, or an error that names it."""
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"missing prerequisite artifact {p}; run `uasort backtest` first")
    return p


def read_bounds(out_dir) -> pd.DataFrame:
    df = pd.read_csv(require(Path(out_dir) / "bounds.csv"), dtype={ASSET: str}, float_precision="round_trip")
    df[MONTH] = df[MONTH].astype(np.int64)
    return df


def read_portfolios(out_dir) -> pd.DataFrame:
    return pd.read_csv(require(Path(out_dir) / "portfolios.csv"), float_precision="round_trip")
