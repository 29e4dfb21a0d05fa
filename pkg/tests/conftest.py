import numpy as np
import pandas as pd
import pytest

from uasort.panel import PanelDataset, generate_synthetic


def make_panel(n_assets=4, months=range(24), n_features=2, seed=0, macro=0, noise=0.0, beta=None):
    """Small transformed panel with a known linear signal."""
    rng = np.random.default_rng(seed)
    months = list(months)
    rows = []
    beta = np.arange(1, n_features + 1) * 0.01 if beta is None else np.asarray(beta)
    macro_vals = rng.standard_normal((len(months), macro))
    for t, m in enumerate(months):
        X = rng.uniform(-1, 1, size=(n_assets, n_features))
        y = X @ beta + noise * rng.standard_normal(n_assets)
        for i in range(n_assets):
            row = {"asset": f"A{i:02d}", "month": m, "ret_next": y[i]}
            row.update({f"x{j}": X[i, j] for j in range(n_features)})
            row.update({f"macro_{j}": macro_vals[t, j] for j in range(macro)})
            rows.append(row)
    df = pd.DataFrame(rows)
    return PanelDataset(df, [f"x{j}" for j in range(n_features)], [f"macro_{j}" for j in range(macro)],
                        transformed=True)


@pytest.fixture(scope="session")
def small_synthetic():
    return generate_synthetic(n_assets=40, n_months=96, n_features=3, seed=7)


ACCEPTANCE_LINES = {}


def record_criterion(number, passed, detail):
    """Register one acceptance line; printed now and again in the terminal summary."""
    line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
