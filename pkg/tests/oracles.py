"""Independent reference implementations used to cross-check the package.

Each oracle takes the slowest, most literal route to the quantity it checks
(full sorts, explicit double loops, dummy-variable regressions) and shares
no code with the package.
"""
import math
from fractions import Fraction

import numpy as np


def order_statistic(values, alpha):
    """ceil(alpha * n)-th smallest of ``values`` via exact rational arithmetic and a full sort."""
    v = sorted(float(x) for x in values)
    n = len(v)
    k = math.ceil(Fraction(str(alpha)) * n)
    k = max(k, 1)
    return v[k - 1]


def newey_west_t(x, lags):
    """Mean over the Bartlett HAC standard error, one autocovariance term at a time."""
    x = [float(a) for a in x]
    n = len(x)
    mean = sum(x) / n
    u = [a - mean for a in x]
    S = 0.0
    for j in range(0, lags + 1):
        gamma = 0.0
        for t in range(j, n):
            gamma += u[t] * u[t - j]
        gamma /= n
        w = 1.0 if j == 0 else 2.0 * (1.0 - j / (lags + 1.0))
        S += w * gamma
    return mean / math.sqrt(S / n)


def ols(X, y):
    """Normal-equation OLS with an intercept; returns (intercept, slopes)."""
    X = np.asarray(X, dtype=float)
    A = np.column_stack([np.ones(len(X)), X])
    beta = np.linalg.solve(A.T @ A, A.T @ np.asarray(y, dtype=float))
    return beta[0], beta[1:]


def dummy_ols_hc1(y, regressors, firms):
    """OLS of y on regressors plus one dummy per firm; HC1 over all parameters.

    Returns (coefficients, standard errors) for the regressor block.
    """
    firms = np.asarray(firms)
    levels = sorted(set(firms.tolist()))
    D = np.column_stack([(firms == f).astype(float) for f in levels])
    R = np.asarray(regressors, dtype=float)
    A = np.column_stack([R, D])
    n, p = A.shape
    beta = np.linalg.lstsq(A, y, rcond=None)[0]
    e = y - A @ beta
    bread = np.linalg.pinv(A.T @ A)
    meat = A.T @ (A * (e ** 2)[:, None])
    cov = bread @ meat @ bread * n / (n - p)
    k = R.shape[1]
    return beta[:k], np.sqrt(np.diag(cov)[:k])
