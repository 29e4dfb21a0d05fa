"""Command-line entry point: ``uasort {synth,backtest,placebo,drivers,report}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import pandas as pd

from .backtest import (
    RunConfig, load_config, load_inputs, read_bounds, read_portfolios, run_backtest, write_csv,
    write_outputs,
)
from .calibration import EMPIRICAL, HALFWIDTH_METHODS, NORMAL
from .errors import ConfigError, UASortError
from .experiments import fe_regression, normal_vs_empirical, placebo_suite, ranking_improvements_from_bounds
from .panel import ASSET, MONTH, SyntheticConfig, generate_synthetic, write_panel
from .portfolio import scale_path

log = logging.getLogger("uasort")

EXIT_OK, EXIT_RUNTIME, EXIT_VALIDATION = 0, 1, 2


def _parse_alphas(text):
    try:
        return [float(a) for a in text.split(",") if a.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid alpha list {text!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="uasort", description="Uncertainty-adjusted portfolio sorts")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML or JSON run config (a run manifest also works)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int)
    common.add_argument("--alpha", type=_parse_alphas, help="comma-separated alphas, e.g. 0.01,0.05")
    common.add_argument("--method", choices=[EMPIRICAL, NORMAL, "both"])
    common.add_argument("--cost-bps", type=int, help="one-way cost per unit turnover in basis points")
    common.add_argument("--nw-lags", type=int)
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in (
        ("synth", "write a synthetic panel and its ground truth"),
        ("backtest", "train, calibrate, sort and evaluate"),
        ("placebo", "half-width permutation tests on backtest bounds"),
        ("drivers", "fixed-effects regressions of ranking improvements"),
        ("report", "plot-ready scaled NAV paths and the normal-versus-empirical table"),
    ):
        sub.add_parser(name, parents=[common], help=text)
    return parser


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.out is not None:
        cfg.out = args.out
    if args.seed is not None:
        cfg.seed = args.seed
    if args.alpha is not None:
        cfg.alphas = list(args.alpha)
    if args.method is not None:
        cfg.methods = list(HALFWIDTH_METHODS) if args.method == "both" else [args.method]
    if args.cost_bps is not None:
        if args.cost_bps < 0:
            raise ConfigError("--cost-bps must be nonnegative")
        cfg.cost_rate = args.cost_bps / 10_000.0
    if args.nw_lags is not None:
        cfg.nw_lags = args.nw_lags
    return cfg.validate()


def cmd_synth(cfg: RunConfig) -> Path:
    config = SyntheticConfig(**{**cfg.synthetic, "seed": cfg.seed})
    panel, truth = generate_synthetic(config)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    write_panel(panel, out / "panel.csv")
    side = {
        "true_function_id": truth.true_function_id,
        "coefficients": np.asarray(truth.coefficients).tolist(),
        "noise_scale_per_asset": np.asarray(truth.noise_scale_per_asset).tolist(),
        "interaction_pairs": [list(p) for p in truth.interaction_pairs],
        "seed": truth.seed,
        "config": {k: getattr(config, k) for k in config.__dataclass_fields__},
    }
    with open(out / "truth.json", "w") as fh:
        json.dump(side, fh, sort_keys=True, indent=2)
        fh.write("\n")
    print(f"seed {config.seed}")
    return out


def cmd_backtest(cfg: RunConfig) -> Path:
    result = run_backtest(cfg)
    out = write_outputs(result, cfg.out)
    print(f"wrote {len(result.reports)} report rows to {out / 'reports.csv'} (config {result.config.config_hash()[:12]})")
    return out


def cmd_placebo(cfg: RunConfig) -> Path:
    bounds = read_bounds(cfg.out)
    panel, _, _ = load_inputs(cfg)
    table = placebo_suite(panel, bounds, cfg.placebo_alpha, cfg.seeds, cfg.placebo_method,
                          year_blocks=cfg.year_blocks)
    path = Path(cfg.out) / "placebo.csv"
    write_csv(table, path)
    print(f"wrote {path}")
    return path


def driver_frame(panel, bounds: pd.DataFrame) -> pd.DataFrame:
    delta = ranking_improvements_from_bounds(bounds).frame
    cols = [ASSET, MONTH] + list(panel.feature_names) + list(panel.macro_names)
    right = panel.frame[cols].copy()
    right[ASSET] = right[ASSET].astype(str)
    delta = delta.assign(**{ASSET: delta[ASSET].astype(str)})
    return delta.merge(right, on=[ASSET, MONTH], how="inner")


def _interactions(spec):
    if spec in (None, "all") or isinstance(spec, str):
        return spec
    return [tuple(p.split(":")) if isinstance(p, str) else tuple(p) for p in spec]


def cmd_drivers(cfg: RunConfig) -> list:
    bounds = read_bounds(cfg.out)
    panel, _, _ = load_inputs(cfg)
    sel = bounds[np.isclose(bounds["alpha"], cfg.driver_alpha, rtol=0, atol=1e-12)
                 & (bounds["method"] == cfg.driver_method)]
    if sel.empty:
        raise ConfigError(f"bounds.csv has no rows for alpha={cfg.driver_alpha:g}, method={cfg.driver_method}")
    X, Z = list(panel.feature_names), list(panel.macro_names)
    paths = []
    for model in sorted(sel["model"].unique()):
        data = driver_frame(panel, sel[sel["model"] == model])
        res = {leg: fe_regression(data, f"delta_rank_{leg}", X, Z, _interactions(cfg.interactions))
               for leg in ("upper", "lower")}
        terms = res["upper"].terms
        table = pd.DataFrame({
            "term": list(terms),
            "coef_upper": [res["upper"].coefficients[t] for t in terms],
            "z_upper": [res["upper"].z_stats[t] for t in terms],
            "coef_lower": [res["lower"].coefficients[t] for t in terms],
            "z_lower": [res["lower"].z_stats[t] for t in terms],
        })
        path = Path(cfg.out) / f"drivers_{model}.csv"
        write_csv(table, path)
        paths.append(path)
        print(f"wrote {path} ({res['upper'].n_obs} obs, {res['upper'].n_firms} firms)")
    return paths


def cmd_report(cfg: RunConfig) -> list:
    port = read_portfolios(cfg.out)
    ls = port[port["strategy"].str.endswith("/ls")]
    paths = []
    for model in sorted({s.split("/")[0] for s in ls["strategy"]}):
        point_id = f"{model}/point/ls"
        bm = ls[ls["strategy"] == point_id].sort_values(MONTH)
        if bm.empty:
            raise ConfigError(f"portfolios.csv has no {point_id} series")
        table = pd.DataFrame({MONTH: bm[MONTH].to_numpy(), "point": bm["nav"].to_numpy()})
        for sid in sorted(s for s in ls["strategy"].unique() if s.startswith(f"{model}/ua-")):
            ua = ls[ls["strategy"] == sid].sort_values(MONTH)
            table[sid.split("/")[1]] = scale_path(ua["nav"].to_numpy(), table["point"].to_numpy())
        path = Path(cfg.out) / f"nav_scaled_{model}.csv"
        write_csv(table, path)
        paths.append(path)
    bounds_path = Path(cfg.out) / "bounds.csv"
    if bounds_path.exists():
        bounds = read_bounds(cfg.out)
        if set(bounds["method"]) >= set(HALFWIDTH_METHODS):
            panel, _, _ = load_inputs(cfg)
            alphas = sorted(bounds["alpha"].unique())
            table, medians = normal_vs_empirical(panel, bounds, alphas)
            write_csv(table, Path(cfg.out) / "normal_vs_empirical.csv")
            write_csv(medians, Path(cfg.out) / "halfwidth_medians.csv")
    for p in paths:
        print(f"wrote {p}")
    return paths


COMMANDS = {
    "synth": cmd_synth, "backtest": cmd_backtest, "placebo": cmd_placebo,
    "drivers": cmd_drivers, "report": cmd_report,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
    except (ConfigError, UASortError, ValueError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    try:
        COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (UASortError, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
