"""Negative-binomial regression for choosing synthetic-control covariates.

Model: ``log E[y] = offset + a0 + X b`` with ``var(y) = mu + mu**2 / k`` (NB2).
Coefficients are fitted by IRLS for fixed ``k``; ``k`` is then updated by a
one-dimensional maximum-likelihood search, and the two steps alternate until
the log-likelihood settles.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import optimize, stats
from scipy.special import gammaln

from .ingest import CovariateTable
from .synth import CovariateWeights

log = logging.getLogger(__name__)

LOG_K_BOUNDS = (math.log(1e-6), math.log(1e10))
_ETA_MAX = 700.0


class SeparationError(ArithmeticError):
    """Fitted means diverge (the linear predictor overflows)."""


@dataclass(frozen=True)
class NbFit:
    names: tuple
    alpha0: float
    beta: np.ndarray
    k: float
    se: np.ndarray  # intercept first
    z: np.ndarray
    p_values: np.ndarray
    loglik: float
    converged: bool
    iterations: int
    n_obs: int
    loglik_history: tuple = field(default=())
    fixed_k: bool = False

    @property
    def params(self) -> np.ndarray:
        return np.concatenate([[self.alpha0], self.beta])

    def coefficient(self, name: str) -> float:
        return float(self.beta[self.names.index(name)])

    def p_value(self, name: str) -> float:
        return float(self.p_values[1 + self.names.index(name)])

    def table(self) -> str:
        rows = [f"{'':<28}{'Estimate':>12}{'Std. Error':>12}{'z value':>10}{'Pr(>|z|)':>12}"]
        for name, b, s, z, p in zip(("(Intercept)",) + self.names, self.params, self.se, self.z, self.p_values):
            rows.append(f"{name:<28}{b:>12.5f}{s:>12.5f}{z:>10.3f}{p:>12.4g}")
        rows.append(f"dispersion k = {self.k:.6g}{' (fixed)' if self.fixed_k else ''}; "
                    f"log-likelihood = {self.loglik:.6f}; n = {self.n_obs}; "
                    f"{'converged' if self.converged else 'NOT converged'} after {self.iterations} iterations")
        return "\n".join(rows)

    def to_dict(self) -> dict:
        return {
            "names": list(self.names),
            "alpha0": self.alpha0,
            "beta": self.beta.tolist(),
            "k": self.k,
            "se": self.se.tolist(),
            "z": self.z.tolist(),
            "p_values": self.p_values.tolist(),
            "loglik": self.loglik,
            "converged": self.converged,
            "iterations": self.iterations,
            "n_obs": self.n_obs,
            "fixed_k": self.fixed_k,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def nb_loglik(y, mu, k) -> float:
    y = np.asarray(y, dtype=float)
    mu = np.asarray(mu, dtype=float)
    return float(np.sum(
        gammaln(y + k) - gammaln(k) - gammaln(y + 1.0)
        + k * (np.log(k) - np.log(k + mu))
        + y * (np.log(mu) - np.log(k + mu))
    ))


def _mean(X, beta, offset):
    eta = X @ beta + offset
    if not np.all(np.isfinite(eta)) or np.max(eta) > _ETA_MAX:
        raise SeparationError("linear predictor diverges; covariates may separate the data")
    return np.exp(eta)


def _irls(y, X, offset, k, beta, tol=1e-12, max_iter=100):
    mu = _mean(X, beta, offset)
    ll = nb_loglik(y, mu, k)
    for _ in range(max_iter):
        w = mu / (1.0 + mu / k)
        z = X @ beta + (y - mu) / mu
        Xw = X * w[:, None]
        new = np.linalg.solve(X.T @ Xw, Xw.T @ z)
        step = new - beta
        # halve the step until the likelihood does not drop
        accepted = None
        for _ in range(50):
            try:
                mu_c = _mean(X, beta + step, offset)
            except SeparationError:
                step = step / 2
                continue
            ll_c = nb_loglik(y, mu_c, k)
            if ll_c >= ll - 1e-12 * abs(ll):
                accepted = (beta + step, mu_c, ll_c)
                break
            step = step / 2
        if accepted is None:
            break
        done = abs(accepted[2] - ll) <= tol * (abs(ll) + tol)
        beta, mu, ll = accepted
        if done:
            break
    return beta, mu, ll


def _update_k(y, mu, k):
    res = optimize.minimize_scalar(
        lambda lk: -nb_loglik(y, mu, math.exp(lk)),
        bounds=LOG_K_BOUNDS, method="bounded", options={"xatol": 1e-10},
    )
    k_new = math.exp(res.x)
    return (k_new, -res.fun) if -res.fun >= nb_loglik(y, mu, k) else (k, nb_loglik(y, mu, k))


def _separated(y, X) -> bool:
    """Whether the count-model MLE fails to exist.

    That happens exactly when some direction d has x_i'd = 0 wherever
    y_i > 0 and x_i'd <= 0 wherever y_i = 0, strictly for at least one zero;
    moving the coefficients along d then raises the likelihood forever.
    Checked with a small linear program.
    """
    zero = y == 0
    if not zero.any():
        return False
    k = X.shape[1]
    A_eq = X[~zero] if (~zero).any() else None
    res = optimize.linprog(
        c=X[zero].sum(axis=0),  # minimise sum of x_i'd over zeros
        A_ub=X[zero], b_ub=np.zeros(zero.sum()),
        A_eq=A_eq, b_eq=np.zeros(len(A_eq)) if A_eq is not None else None,
        bounds=[(-1, 1)] * k, method="highs",
    )
    scale = np.abs(X).max() * k
    return bool(res.status == 0 and -res.fun > 1e-9 * scale)


def _design(covariates, names):
    if isinstance(covariates, CovariateTable):
        return covariates.normalized.T.copy(), tuple(covariates.covariate_names)
    X = np.asarray(covariates, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if names is None:
        names = tuple(f"x{j + 1}" for j in range(X.shape[1]))
    return X, tuple(names)


def fit_nb(response, covariates, offset=None, names: Sequence[str] | None = None,
           dispersion: float | None = None, tol: float = 1e-8, max_iter: int = 100) -> NbFit:
    """Fit the NB2 regression of counts on covariates.

    Parameters
    ----------
    response : array_like of int
        Nonnegative counts, one per unit.
    covariates : CovariateTable or array_like, shape (n_units, n_covariates)
        A table contributes its normalized values (units along columns).
        Pass an empty (n, 0) array for an intercept-only model.
    offset : array_like, optional
        Log exposure, e.g. ``log(population)``.
    dispersion : float, optional
        Hold ``k`` fixed instead of estimating it.
    tol : float
        Relative change in log-likelihood that ends the outer iteration.
    max_iter : int
        Cap on outer iterations; hitting it sets ``converged=False``.
    """
    y = np.asarray(response, dtype=float)
    if y.ndim != 1:
        raise ValueError("response must be one-dimensional")
    if np.any(y < 0) or np.any(y != np.round(y)):
        raise ValueError("response must be nonnegative integers")
    if not np.any(y > 0):
        raise ValueError("response is all zero")
    Z, names = _design(covariates, names)
    if Z.shape[0] != len(y):
        raise ValueError(f"{Z.shape[0]} covariate rows for {len(y)} responses")
    n, K0 = Z.shape
    if n <= K0 + 1:
        raise ValueError(f"need more than {K0 + 1} observations, got {n}")
    X = np.column_stack([np.ones(n), Z])
    if _separated(y, X):
        raise SeparationError("covariates separate zero from nonzero counts; the fitted means diverge")
    off = np.zeros(n) if offset is None else np.asarray(offset, dtype=float)

    beta = np.zeros(K0 + 1)
    beta[0] = math.log(y.mean()) - off.mean()
    k = float(dispersion) if dispersion is not None else 1.0
    if dispersion is not None and not k > 0:
        raise ValueError("dispersion must be positive")

    history = []
    converged = False
    it = 0
    if dispersion is None:
        # start from the near-Poisson fit, then let k move
        beta, mu, _ = _irls(y, X, off, 1e8, beta)
        k, ll = _update_k(y, mu, 1.0)
    else:
        ll = nb_loglik(y, _mean(X, beta, off), k)
    history.append(ll)
    for it in range(1, max_iter + 1):
        beta, mu, ll = _irls(y, X, off, k, beta)
        if dispersion is None:
            k, ll = _update_k(y, mu, k)
        history.append(ll)
        if abs(history[-1] - history[-2]) <= tol * abs(history[-2]):
            converged = True
            break
    if not converged:
        log.warning("negative-binomial fit did not converge in %d iterations", max_iter)

    w = mu / (1.0 + mu / k)
    cov = np.linalg.inv((X * w[:, None]).T @ X)
    se = np.sqrt(np.diag(cov))
    z = beta / se
    p = 2.0 * stats.norm.sf(np.abs(z))
    return NbFit(
        names=names,
        alpha0=float(beta[0]),
        beta=beta[1:].copy(),
        k=float(k),
        se=se,
        z=z,
        p_values=p,
        loglik=float(ll),
        converged=converged,
        iterations=it,
        n_obs=n,
        loglik_history=tuple(history),
        fixed_k=dispersion is not None,
    )


def select_covariates(fit: NbFit, alpha: float = 0.05) -> list[str]:
    """Covariates with Wald p-value below ``alpha``, largest |coefficient| first."""
    if not fit.converged:
        log.warning("selecting covariates from a fit that did not converge")
    chosen = [(abs(b), name) for name, b, p in zip(fit.names, fit.beta, fit.p_values[1:]) if p < alpha]
    chosen.sort(key=lambda t: (-t[0], t[1]))
    if not chosen:
        log.warning("no covariate is significant at level %g", alpha)
    return [name for _, name in chosen]


def v_from_coefficients(fit: NbFit, selected: Sequence[str]) -> CovariateWeights:
    """Covariate weights proportional to |coefficient|, summing to one."""
    selected = list(selected)
    if not selected:
        raise ValueError("no covariates selected")
    mags = np.array([abs(fit.coefficient(s)) for s in selected])
    total = mags.sum()
    if not total > 0:
        raise ValueError("all selected coefficients are zero")
    return CovariateWeights(tuple(selected), mags / total)
