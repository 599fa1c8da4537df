"""Synthetic-control weights and the treated-versus-synthetic regression.

Inner problem: donor weights ``w`` on the probability simplex minimising
``(x1 - X0 w)' V (x1 - X0 w)`` for a diagonal covariate weighting ``V``.
Solved by fully-corrective Frank-Wolfe: each iteration adds the simplex vertex
with the most negative gradient and then re-optimises exactly over the convex
hull of the active vertices.  The Frank-Wolfe duality gap certifies the result.

Outer problem: ``V`` chosen to minimise the pre-treatment squared prediction
error of the synthetic series, searched with Nelder-Mead over a softmax
parameterisation.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import optimize

from .panel import RateSeries, TreatmentSpec, rate_matrix


@dataclass(frozen=True)
class CovariateWeights:
    """Diagonal of V, normalised to sum to one."""

    names: tuple
    v: np.ndarray

    def __post_init__(self):
        v = np.array(self.v, dtype=float).ravel()
        names = tuple(self.names)
        if len(names) != len(v):
            raise ValueError("one weight per covariate name is required")
        if len(v) == 0:
            raise ValueError("at least one covariate is required")
        if not np.all(np.isfinite(v)) or np.any(v < 0):
            raise ValueError("covariate weights must be finite and nonnegative")
        total = v.sum()
        if not total > 0:
            raise ValueError("covariate weights sum to zero")
        v = v / total
        v.setflags(write=False)
        object.__setattr__(self, "v", v)
        object.__setattr__(self, "names", names)

    @classmethod
    def uniform(cls, names: Sequence[str]) -> "CovariateWeights":
        return cls(tuple(names), np.ones(len(names)))

    def to_dict(self) -> dict:
        return dict(zip(self.names, self.v.tolist()))


@dataclass(frozen=True)
class ScWeights:
    donor_ids: tuple
    w: np.ndarray
    objective: float = math.nan
    gap: float = math.nan
    iterations: int = 0

    def to_dict(self) -> dict:
        return dict(zip(self.donor_ids, self.w.tolist()))


@dataclass(frozen=True)
class ScSolution:
    weights: ScWeights
    v: CovariateWeights
    covariate_loss: float
    pre_mspe: float
    synthetic_series: RateSeries
    tau_fit: object = None
    evaluations: tuple = field(default=())
    mode: str = "nested"

    def to_dict(self) -> dict:
        d = {
            "mode": self.mode,
            "weights": self.weights.to_dict(),
            "v": self.v.to_dict(),
            "covariate_loss": self.covariate_loss,
            "pre_mspe": self.pre_mspe,
            "duality_gap": self.weights.gap,
            "audit": [{"v": list(v), "pre_mspe": m} for v, m in self.evaluations],
        }
        if self.tau_fit is not None:
            d["tau_fit"] = self.tau_fit.to_dict()
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def _check_inputs(x1, x0, v):
    x1 = np.asarray(x1, dtype=float).ravel()
    x0 = np.asarray(x0, dtype=float)
    if x0.ndim == 1:
        x0 = x0[None, :]
    if x0.shape[0] != len(x1):
        raise ValueError(f"x0 has {x0.shape[0]} rows but x1 has {len(x1)} entries")
    if len(x1) < 1 or x0.shape[1] < 1:
        raise ValueError("need at least one covariate and one donor")
    if not (np.all(np.isfinite(x1)) and np.all(np.isfinite(x0))):
        raise ValueError("inputs must be finite")
    vv = v.v if isinstance(v, CovariateWeights) else np.asarray(v, dtype=float).ravel()
    if len(vv) != len(x1):
        raise ValueError("one covariate weight per covariate row is required")
    if not np.all(np.isfinite(vv)) or np.any(vv < 0):
        raise ValueError("covariate weights must be finite and nonnegative")
    return x1, x0, vv


def inner_objective(w, x1, x0, v) -> float:
    r = x1 - x0 @ w
    return float(r @ (v * r))


def _simplex_lsq(A, b, lam, tol):
    """min ||A lam - b||^2 over the simplex spanned by A's columns (active set).

    Starts from a feasible ``lam`` with every column in the working set
    (columns entering at weight zero included) and drops columns whose
    weight reaches zero.
    """
    m = A.shape[1]
    support = np.ones(m, dtype=bool)
    for _ in range(4 * m + 10):
        idx = np.flatnonzero(support)
        s = len(idx)
        As = A[:, idx]
        kkt = np.zeros((s + 1, s + 1))
        kkt[:s, :s] = 2.0 * As.T @ As
        kkt[:s, s] = 1.0
        kkt[s, :s] = 1.0
        rhs = np.concatenate([2.0 * As.T @ b, [1.0]])
        sol = np.linalg.lstsq(kkt, rhs, rcond=None)[0][:s]
        if np.all(sol > tol):
            lam = np.zeros(m)
            lam[idx] = sol
            return lam
        # move from lam towards sol until the first weight hits zero
        cur = lam[idx]
        neg = sol <= tol
        with np.errstate(divide="ignore", invalid="ignore"):
            ratios = np.where(neg, cur / (cur - sol), np.inf)
        t = float(np.clip(np.min(ratios), 0.0, 1.0))
        new = cur + t * (sol - cur)
        new[neg & (ratios <= t + 1e-15)] = 0.0
        new = np.clip(new, 0.0, None)
        lam = np.zeros(m)
        lam[idx] = new / new.sum()
        support = lam > 0
    return lam


def solve_inner(x1, x0, v, tol: float = 1e-10, donor_ids: Sequence[str] | None = None,
                max_iter: int = 1000) -> ScWeights:
    """Donor weights on the simplex that best reproduce the treated covariates.

    Parameters
    ----------
    x1 : array_like, shape (K,)
        Treated unit's covariates.
    x0 : array_like, shape (K, N)
        Donor covariates, one column per donor.
    v : CovariateWeights or array_like, shape (K,)
        Diagonal of V.  Used as given (not renormalised) when an array.
    tol : float
        Stop once the Frank-Wolfe duality gap is below this value.

    Returns
    -------
    ScWeights
        Weights summing to one, with the final objective and duality gap.
    """
    x1, x0, vv = _check_inputs(x1, x0, v)
    K, N = x0.shape
    ids = tuple(donor_ids) if donor_ids is not None else tuple(range(N))
    if len(ids) != N:
        raise ValueError("one donor id per column of x0 is required")
    if N == 1:
        w = np.ones(1)
        return ScWeights(ids, w, inner_objective(w, x1, x0, vv), 0.0, 0)

    sq = np.sqrt(vv)
    A = x0 * sq[:, None]
    b = x1 * sq
    # start at the best single donor
    vert = int(np.argmin(np.sum((A - b[:, None]) ** 2, axis=0)))
    w = np.zeros(N)
    w[vert] = 1.0
    gap = math.inf
    it = 0
    for it in range(1, max_iter + 1):
        grad = -2.0 * A.T @ (b - A @ w)
        s = int(np.argmin(grad))
        gap = float(grad @ w - grad[s])
        if gap < tol:
            break
        active = (w > 0)
        active[s] = True
        idx = np.flatnonzero(active)
        lam = _simplex_lsq(A[:, idx], b, w[idx], 1e-14)
        w = np.zeros(N)
        w[idx] = lam
    w = np.clip(w, 0.0, None)
    w = w / w.sum()
    grad = -2.0 * A.T @ (b - A @ w)
    gap = max(float(grad @ w - grad.min()), 0.0)
    return ScWeights(ids, w, inner_objective(w, x1, x0, vv), gap, it)


def _softmax(z):
    z = np.concatenate([z, [0.0]])
    e = np.exp(z - z.max())
    return e / e.sum()


def _inv_softmax(v):
    v = np.clip(np.asarray(v, dtype=float), 1e-10, None)
    lv = np.log(v)
    return lv[:-1] - lv[-1]


def pre_mspe(y1, y0, w) -> float:
    r = np.asarray(y1) - np.asarray(y0) @ w
    return float(r @ r) / len(r)


@dataclass
class _Search:
    x1: np.ndarray
    x0: np.ndarray
    y1: np.ndarray
    y0: np.ndarray
    names: tuple
    donor_ids: tuple
    tol: float
    budget: int
    log: list = field(default_factory=list)
    best: tuple = None

    def evaluate(self, v: np.ndarray) -> float:
        if len(self.log) >= self.budget:
            raise _BudgetExhausted
        w = solve_inner(self.x1, self.x0, v, self.tol, self.donor_ids)
        m = pre_mspe(self.y1, self.y0, w.w)
        self.log.append((tuple(float(a) for a in v), m))
        if self.best is None or m < self.best[0]:
            self.best = (m, np.array(v), w)
        return m


class _BudgetExhausted(Exception):
    pass


def search_v(y1, y0, x1, x0, v_init: CovariateWeights | None = None, budget: int = 500,
                donor_ids: Sequence[str] | None = None, seed: int = 0, n_random_starts: int = 1,
                tol: float = 1e-10, fixed_v: bool = False):
    """Choose covariate weights V by pre-treatment fit, then donor weights for that V.

    Parameters
    ----------
    y1 : array_like, shape (T0,)
        Treated pre-treatment rates.
    y0 : array_like, shape (T0, N)
        Donor pre-treatment rates.
    x1, x0
        Covariates as in :func:`solve_inner`.
    v_init : CovariateWeights, optional
        First starting point (uniform when omitted).  Further starts are the
        uniform weighting and ``n_random_starts`` Dirichlet draws from ``seed``.
    budget : int
        Total number of inner solves allowed.
    fixed_v : bool
        Skip the search and use ``v_init`` as is.

    Returns
    -------
    (ScWeights, CovariateWeights, list)
        Best weights, the V that produced them, and every evaluation as
        ``(v, pre_mspe)`` in order.  No evaluated V has a lower pre-treatment
        error than the returned one.
    """
    if budget < 1:
        raise ValueError("budget must be at least 1")
    y1 = np.asarray(y1, dtype=float).ravel()
    y0 = np.asarray(y0, dtype=float)
    if y0.ndim == 1:
        y0 = y0[:, None]
    if len(y1) < 2:
        raise ValueError("need at least 2 pre-treatment periods")
    if y0.shape[0] != len(y1):
        raise ValueError("y0 and y1 differ in length")
    x1 = np.asarray(x1, dtype=float).ravel()
    x0 = np.asarray(x0, dtype=float)
    if x0.ndim == 1:
        x0 = x0[None, :]
    if y0.shape[1] != x0.shape[1]:
        raise ValueError("y0 and x0 disagree on the number of donors")
    K = len(x1)
    if v_init is None:
        v_init = CovariateWeights.uniform([f"x{j + 1}" for j in range(K)])
    if len(v_init.v) != K:
        raise ValueError("v_init has the wrong length")
    ids = tuple(donor_ids) if donor_ids is not None else tuple(range(x0.shape[1]))
    search = _Search(x1, x0, y1, y0, v_init.names, ids, tol, budget)

    search.evaluate(v_init.v)
    if not fixed_v and K > 1:
        rng = np.random.default_rng(seed)
        starts = [v_init.v, np.full(K, 1.0 / K)]
        starts += [rng.dirichlet(np.ones(K)) for _ in range(n_random_starts)]
        try:
            for start in starts:
                if len(search.log) >= budget:
                    break
                optimize.minimize(
                    lambda z: search.evaluate(_softmax(z)),
                    _inv_softmax(start),
                    method="Nelder-Mead",
                    options={"maxfev": budget, "xatol": 1e-6, "fatol": 1e-14},
                )
        except _BudgetExhausted:
            pass
    _, v_best, w_best = search.best
    return w_best, CovariateWeights(v_init.names, v_best), search.log


def synthetic_series(donors: Sequence[RateSeries], weights: ScWeights, unit_id: str = "synthetic") -> RateSeries:
    Y = rate_matrix(donors)
    return RateSeries(unit_id, donors[0].dates, Y @ weights.w)


def solve_outer(treated: RateSeries, donors: Sequence[RateSeries], x1, x0,
                spec: TreatmentSpec, v_init: CovariateWeights | None = None,
                mode: str = "nested", budget: int = 500, seed: int = 0,
                tol: float = 1e-10, include_post: bool = False) -> ScSolution:
    """Full synthetic-control fit: weights, synthetic series and treatment effect.

    ``mode`` is ``"fixed"`` (use ``v_init`` directly) or ``"nested"``
    (search V by pre-treatment fit starting from ``v_init``).
    """
    if mode not in ("fixed", "nested"):
        raise ValueError(f"unknown mode {mode!r}")
    if not donors:
        raise ValueError("empty donor pool")
    Y0 = rate_matrix(donors)
    if treated.dates != donors[0].dates:
        raise ValueError("treated and donor series have different dates")
    T0 = treated.n_before(spec.effective_start)
    ids = tuple(d.unit_id for d in donors)
    w, v, log = search_v(treated.rates[:T0], Y0[:T0], x1, x0, v_init, budget, ids, seed,
                            tol=tol, fixed_v=(mode == "fixed"))
    x1a, x0a, vv = _check_inputs(x1, x0, v)
    synth = synthetic_series(donors, w)
    sol = ScSolution(
        weights=w,
        v=v,
        covariate_loss=inner_objective(w.w, x1a, x0a, vv),
        pre_mspe=pre_mspe(treated.rates[:T0], Y0[:T0], w.w),
        synthetic_series=synth,
        evaluations=tuple(log),
        mode=mode,
    )
    return ScSolution(**{**sol.__dict__, "tau_fit": sc_effect(treated, sol, spec, include_post)})


def sc_effect(treated: RateSeries, solution: ScSolution, spec: TreatmentSpec, include_post: bool = False):
    """DID regression of the treated series against its synthetic control.

    With only two "units" the clustered covariance is degenerate; the fit
    carries a note saying so and the classical inference is the one to read.
    """
    from .did import design_from_series, fit_ols

    synth = solution.synthetic_series
    if synth.dates != treated.dates:
        raise ValueError("synthetic series does not span the treated series' dates")
    design = design_from_series([treated, synth], treated.unit_id, spec, include_post)
    return fit_ols(design)


def covariate_matrix(table, treated_unit: str, donors: Sequence[str], names: Sequence[str]):
    """Treated covariate vector x1 (K,) and donor matrix x0 (K, N) from normalized values."""
    sub = table.select(names=names)
    x1 = sub.column(treated_unit)
    x0 = np.column_stack([sub.column(d) for d in donors]) if donors else np.zeros((len(names), 0))
    return x1, x0
