import json

import numpy as np
import pandas as pd
import pytest
import yaml

from uasort.backtest import RunConfig, load_config, run_backtest
from uasort.cli import main
from uasort.errors import ConfigError, StageError
from uasort.panel import generate_synthetic, write_panel

SMALL = {
    "models": ["pcr"],
    "synthetic": {"n_assets": 30, "n_months": 96, "n_features": 3},
    "train_years": 3,
    "val_years": 2,
    "K": 3,
    "alphas": [0.05],
    "methods": ["empirical"],
    "seeds": [1],
}


def _config(tmp_path, **changes):
    cfg = {**SMALL, "out": str(tmp_path / "out"), **changes}
    path = tmp_path / "cfg.yaml"
    path.write_text(yaml.safe_dump(cfg))
    return path


def test_synth_default_writes_files(tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path), "--seed", "3"]) == 0
    assert (tmp_path / "panel.csv").exists() and (tmp_path / "truth.json").exists()
    assert "seed 3" in capsys.readouterr().out


def test_synth_invalid_config_exit_code(tmp_path):
    path = _config(tmp_path, synthetic={"n_assets": 5})
    assert main(["synth", "--config", str(path)]) == 2


def test_synth_same_seed_identical_bytes(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    path = _config(tmp_path)
    assert main(["synth", "--config", str(path), "--out", str(a)]) == 0
    assert main(["synth", "--config", str(path), "--out", str(b)]) == 0
    assert (a / "panel.csv").read_bytes() == (b / "panel.csv").read_bytes()
    assert (a / "truth.json").read_bytes() == (b / "truth.json").read_bytes()


def test_backtest_point_only(tmp_path):
    path = _config(tmp_path, alphas=[])
    assert main(["backtest", "--config", str(path)]) == 0
    rep = pd.read_csv(tmp_path / "out" / "reports.csv")
    assert set(rep["mode"]) == {"point"}
    assert set(rep["basis"]) == {"gross", "net"}


def test_backtest_strategy_count(tmp_path):
    path = _config(tmp_path, models=["pcr", "pls"])
    assert main(["backtest", "--config", str(path), "--alpha", "0.05", "--method", "both"]) == 0
    rep = pd.read_csv(tmp_path / "out" / "reports.csv")
    for model in ("pcr", "pls"):
        strategies = set(rep.loc[rep["model"] == model, "strategy"])
        assert strategies == {f"{model}/point/ls", f"{model}/ua-empirical-0.05/ls", f"{model}/ua-normal-0.05/ls"}


def test_backtest_rerun_from_manifest_identical(tmp_path):
    path = _config(tmp_path)
    assert main(["backtest", "--config", str(path)]) == 0
    first = (tmp_path / "out" / "reports.csv").read_bytes()
    manifest = tmp_path / "out" / "manifest.json"
    meta = json.loads(manifest.read_text())
    assert meta["seed"] == 0 and len(meta["config_hash"]) == 64
    assert main(["backtest", "--config", str(manifest), "--out", str(tmp_path / "again")]) == 0
    assert (tmp_path / "again" / "reports.csv").read_bytes() == first


def test_flags_override_config(tmp_path):
    path = _config(tmp_path)
    assert main(["backtest", "--config", str(path), "--cost-bps", "0", "--nw-lags", "2"]) == 0
    rep = pd.read_csv(tmp_path / "out" / "reports.csv")
    assert (rep["nw_lags"] == 2).all()
    g = rep[rep.basis == "gross"].set_index("strategy")["sharpe"]
    n = rep[rep.basis == "net"].set_index("strategy")["sharpe"]
    pd.testing.assert_series_equal(g, n)


def test_validation_errors_exit_2(tmp_path):
    path = _config(tmp_path)
    assert main(["backtest", "--config", str(path), "--alpha", "1.5"]) == 2
    assert main(["backtest", "--config", str(path), "--cost-bps", "-1"]) == 2
    assert main(["backtest", "--config", str(tmp_path / "nope.yaml")]) == 2
    assert main(["backtest", "--config", str(_config(tmp_path, panel="missing.csv"))]) == 2


def test_missing_prerequisite_named(tmp_path, capsys):
    path = _config(tmp_path)
    for cmd in ("placebo", "drivers", "report"):
        assert main([cmd, "--config", str(path)]) == 1
        assert "bounds.csv" in capsys.readouterr().err or cmd == "report"


def test_studies_after_two_model_backtest(tmp_path):
    path = _config(tmp_path, models=["pcr", "pls"], seeds=[1, 2, 3], interactions=[])
    assert main(["backtest", "--config", str(path), "--method", "both"]) == 0
    assert main(["report", "--config", str(path)]) == 0
    out = tmp_path / "out"
    navs = sorted(p.name for p in out.glob("nav_scaled_*.csv"))
    assert navs == ["nav_scaled_pcr.csv", "nav_scaled_pls.csv"]
    nav = pd.read_csv(out / "nav_scaled_pcr.csv")
    assert nav["ua-empirical-0.05"].iloc[-1] == nav["point"].iloc[-1]
    assert (out / "normal_vs_empirical.csv").exists()

    assert main(["placebo", "--config", str(path)]) == 0
    plc = pd.read_csv(out / "placebo.csv")
    assert (plc["n_seeds"] == 3).all() and {"time_sd", "stock_sd", "all_sd"} <= set(plc.columns)

    assert main(["drivers", "--config", str(path)]) == 0
    drv = pd.read_csv(out / "drivers_pcr.csv")
    assert list(drv["term"]) == ["char01", "char02", "char03", "macro_01", "macro_02"]


def test_drivers_with_interactions(tmp_path):
    path = _config(tmp_path, interactions=["char01:macro_01"])
    assert main(["backtest", "--config", str(path)]) == 0
    assert main(["drivers", "--config", str(path)]) == 0
    drv = pd.read_csv(tmp_path / "out" / "drivers_pcr.csv")
    assert drv["term"].iloc[-1] == "char01:macro_01" and len(drv) == 6


def test_inputs_not_mutated_and_external_models(tmp_path):
    panel, _ = generate_synthetic(n_assets=30, n_months=96, n_features=3, seed=2)
    write_panel(panel, tmp_path / "panel.csv")
    preds = panel.frame[["asset", "month"]].copy()
    preds["model"] = "ext"
    preds["mu_hat"] = panel.frame["char01"] * 0.01
    preds.to_csv(tmp_path / "ext.csv", index=False)
    months = panel.month_index
    rng = np.random.default_rng(0)
    pd.DataFrame({"month": months, "ret": rng.normal(0.005, 0.03, len(months))}).to_csv(tmp_path / "bm.csv", index=False)
    ff = pd.DataFrame(rng.normal(0, 0.03, (len(months), 5)), columns=[f"f{j}" for j in range(1, 6)])
    ff.insert(0, "month", months)
    ff.to_csv(tmp_path / "ff.csv", index=False)
    before = {p.name: p.read_bytes() for p in tmp_path.glob("*.csv")}
    path = _config(tmp_path, panel=str(tmp_path / "panel.csv"), external={"ext": str(tmp_path / "ext.csv")},
                   benchmark=str(tmp_path / "bm.csv"), factors=str(tmp_path / "ff.csv"))
    assert main(["backtest", "--config", str(path)]) == 0
    assert {p.name: p.read_bytes() for p in tmp_path.glob("*.csv")} == before
    rep = pd.read_csv(tmp_path / "out" / "reports.csv")
    assert set(rep["model"]) == {"pcr", "ext"}
    lo = rep[rep["kind"] == "lo"]
    ls = rep[rep["kind"] == "ls"]
    assert len(lo) and lo["alpha3"].isna().all() and lo["alpha5"].isna().all()
    assert ls["alpha3"].notna().all() and ls["alpha5"].notna().all()
    audit = json.loads((tmp_path / "out" / "audit.json").read_text())
    assert audit["ext"] == {"look_ahead": 0, "in_fold": 0}


def test_stage_error_names_stage_and_key(tmp_path):
    cfg = RunConfig(**{**SMALL, "grids": {"pcr": {"k": [50]}}})
    with pytest.raises(StageError, match=r"stage 'train' failed for pcr/Y1972: .*grid point"):
        run_backtest(cfg)


def test_unknown_config_key(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("modelz: [pcr]\n")
    with pytest.raises(ConfigError, match="modelz"):
        load_config(p)
