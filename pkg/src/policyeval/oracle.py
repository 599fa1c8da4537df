"""Brute-force reference computations used to check the main estimators.

Nothing here shares solver code with the estimators: OLS is solved by
Gauss-Jordan elimination on the normal equations, the sandwich is summed
cluster by cluster, knots are enumerated exhaustively, simplex problems are
searched on a lattice, and the Poisson GLM has its own Newton iteration.
These are slow on purpose and meant for small problems.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np


class OracleLimitError(ValueError):
    """Problem too large for exhaustive evaluation."""


@dataclass(frozen=True)
class OracleReport:
    case_id: str
    main_value: float
    oracle_value: float
    abs_diff: float
    tolerance: float
    passed: bool

    @classmethod
    def compare(cls, case_id, main_value, oracle_value, tolerance) -> "OracleReport":
        main = np.asarray(main_value, dtype=float)
        orc = np.asarray(oracle_value, dtype=float)
        diff = float(np.max(np.abs(main - orc))) if main.size else 0.0
        return cls(case_id, float(np.max(np.abs(main))) if main.size else 0.0,
                   float(np.max(np.abs(orc))) if orc.size else 0.0,
                   diff, float(tolerance), bool(diff <= tolerance))

    def to_json(self) -> str:
        d = asdict(self)
        d["pass"] = d.pop("passed")
        return json.dumps(d, sort_keys=True)


def _gauss_jordan_solve(A, B):
    """Solve A X = B by Gauss-Jordan elimination with partial pivoting."""
    A = [list(map(float, row)) for row in A]
    B = [list(map(float, row)) for row in B]
    n = len(A)
    scale = max(abs(v) for row in A for v in row) or 1.0
    for col in range(n):
        piv = max(range(col, n), key=lambda r: abs(A[r][col]))
        if abs(A[piv][col]) <= 1e-13 * scale:
            raise np.linalg.LinAlgError(f"singular system (column {col})")
        A[col], A[piv] = A[piv], A[col]
        B[col], B[piv] = B[piv], B[col]
        p = A[col][col]
        A[col] = [v / p for v in A[col]]
        B[col] = [v / p for v in B[col]]
        for r in range(n):
            if r != col and A[r][col] != 0.0:
                f = A[r][col]
                A[r] = [a - f * c for a, c in zip(A[r], A[col])]
                B[r] = [b - f * c for b, c in zip(B[r], B[col])]
    return np.array(B)


def _gram(X):
    X = np.asarray(X, dtype=float)
    k = X.shape[1]
    return [[math.fsum(X[:, i] * X[:, j]) for j in range(k)] for i in range(k)]


def ols_normal_equations(X, y) -> np.ndarray:
    """Solve X'X b = X'y by explicit elimination."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    xty = [[math.fsum(X[:, i] * y)] for i in range(X.shape[1])]
    return _gauss_jordan_solve(_gram(X), xty)[:, 0]


def xtx_inverse(X) -> np.ndarray:
    k = np.asarray(X).shape[1]
    return _gauss_jordan_solve(_gram(X), np.eye(k).tolist())


def classical_vcov(X, y) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    b = ols_normal_equations(X, y)
    resid = [yi - math.fsum(xi * b) for xi, yi in zip(X, y)]
    s2 = math.fsum(r * r for r in resid) / (X.shape[0] - X.shape[1])
    return s2 * xtx_inverse(X)


def cluster_sandwich(X, y, clusters, small_sample: bool = True) -> np.ndarray:
    """Cluster-robust covariance summed over clusters one at a time (CR1 when
    ``small_sample``)."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, k = X.shape
    b = ols_normal_equations(X, y)
    bread = xtx_inverse(X)
    meat = np.zeros((k, k))
    labels = list(dict.fromkeys(clusters))
    for g in labels:
        score = np.zeros(k)
        for i in range(n):
            if clusters[i] == g:
                e = y[i] - math.fsum(X[i] * b)
                score += X[i] * e
        meat += np.outer(score, score)
    V = bread @ meat @ bread
    if small_sample:
        G = len(labels)
        V *= G / (G - 1) * (n - 1) / (n - k)
    return V


def enumerate_knots(series, max_knots: int, penalty: float, x=None, min_gap: int = 1):
    """Best knot set by exhaustive search over interior observation indices.

    Every placement of up to ``max_knots`` knots is fitted by least squares on
    a hinge basis.  Ties go to fewer knots (relative slack 1e-10).

    Returns
    -------
    (tuple of int, float)
        Knot indices and the penalised objective.
    """
    y = np.asarray(series, dtype=float)
    n = len(y)
    if n > 30 or max_knots > 3:
        raise OracleLimitError("enumeration limited to length <= 30 and max_knots <= 3")
    x = np.arange(n, dtype=float) if x is None else np.asarray(x, dtype=float)
    best, best_obj = (), None
    for m in range(max_knots + 1):
        level_best, level_obj = None, math.inf
        for knots in itertools.combinations(range(1, n - 1), m):
            bounds = (0,) + knots + (n - 1,)
            if any(b - a < min_gap for a, b in zip(bounds, bounds[1:])):
                continue
            cols = [np.ones(n), x] + [np.where(x > x[k], x - x[k], 0.0) for k in knots]
            X = np.column_stack(cols)
            coef, *_ = np.linalg.lstsq(X, y, rcond=None)
            r = y - X @ coef
            obj = float(r @ r) + penalty * m
            if obj < level_obj:
                level_best, level_obj = knots, obj
        if level_best is None:
            continue
        if best_obj is None or level_obj < best_obj - 1e-10 * (1.0 + abs(best_obj)):
            best, best_obj = level_best, level_obj
    return tuple(best), best_obj


def simplex_grid_min(objective: Callable[[np.ndarray], float], n: int, step: float):
    """Minimum of ``objective`` over the lattice {w >= 0, sum w = 1, w in step * Z}."""
    if n < 1 or n > 4:
        raise OracleLimitError("grid search supports 1 <= n <= 4")
    if step < 1e-3:
        raise OracleLimitError("step must be at least 1e-3")
    m = int(round(1.0 / step))
    if abs(m * step - 1.0) > 1e-9:
        raise ValueError("1/step must be an integer")
    if math.comb(m + n - 1, n - 1) > 10 ** 7:
        raise OracleLimitError("lattice has more than 1e7 points")
    best_w, best_v = None, math.inf
    for head in itertools.product(range(m + 1), repeat=n - 1):
        s = sum(head)
        if s > m:
            continue
        w = np.array(head + (m - s,), dtype=float) / m
        v = float(objective(w))
        if v < best_v:
            best_w, best_v = w, v
    return best_w, best_v


def poisson_irls(y, X, offset=None, tol: float = 1e-12, max_iter: int = 200) -> np.ndarray:
    """Poisson log-link GLM coefficients by Newton-Raphson on the log-likelihood.

    ``X`` should include the intercept column.
    """
    y = np.asarray(y, dtype=float)
    X = np.asarray(X, dtype=float)
    off = np.zeros(len(y)) if offset is None else np.asarray(offset, dtype=float)
    beta = np.zeros(X.shape[1])
    beta[0] = math.log(max(y.mean(), 1e-8)) - off.mean()
    for _ in range(max_iter):
        mu = np.exp(X @ beta + off)
        grad = X.T @ (y - mu)
        hess = (X * mu[:, None]).T @ X
        step = _gauss_jordan_solve(hess.tolist(), grad[:, None].tolist())[:, 0]
        beta = beta + step
        if np.max(np.abs(step)) < tol * (1.0 + np.max(np.abs(beta))):
            break
    return beta


def oracle_agreement(cases: Sequence[OracleReport]) -> bool:
    return all(c.passed for c in cases)
