import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from policyeval import oracle
from policyeval.ingest import CovariateTable
from policyeval.nbglm import (
    NbFit,
    SeparationError,
    fit_nb,
    nb_loglik,
    select_covariates,
    v_from_coefficients,
)


def simulate_nb(seed, n=500, beta=(1.0, 0.5, -0.3, 0.2), k=2.0):
    rng = np.random.default_rng(seed)
    Z = rng.normal(size=(n, len(beta) - 1))
    mu = np.exp(beta[0] + Z @ np.asarray(beta[1:]))
    return rng.negative_binomial(k, k / (k + mu)), Z


def fake_fit(beta, p):
    beta = np.asarray(beta, dtype=float)
    se = np.ones(len(beta) + 1)
    return NbFit(tuple(f"c{i + 1}" for i in range(len(beta))), 0.0, beta, 1.0, se,
                 np.concatenate([[0.0], beta]), np.concatenate([[0.5], p]), 0.0, True, 1, 10)


def test_intercept_only_mean():
    f = fit_nb([2, 4, 6], np.zeros((3, 0)))
    assert f.alpha0 == pytest.approx(math.log(4), abs=1e-8)


def test_recovers_truth_single_seed():
    y, Z = simulate_nb(0)
    f = fit_nb(y, Z)
    truth = np.array([1.0, 0.5, -0.3, 0.2])
    assert f.converged
    assert np.all(np.abs(f.params - truth) < 3 * f.se)
    assert 1.0 < f.k < 4.0
    # score equations at the optimum
    X = np.column_stack([np.ones(len(y)), Z])
    mu = np.exp(X @ f.params)
    score = X.T @ ((y - mu) / (1 + mu / f.k))
    assert np.abs(score).max() < 1e-4 * np.abs(y).sum()


def test_poisson_limit_matches_oracle():
    rng = np.random.default_rng(1)
    Z = rng.normal(size=(300, 2))
    y = rng.poisson(np.exp(0.5 + Z @ [0.4, -0.2]))
    f = fit_nb(y, Z, dispersion=1e8)
    ref = oracle.poisson_irls(y, np.column_stack([np.ones(300), Z]))
    np.testing.assert_allclose(f.params, ref, atol=1e-4)
    free = fit_nb(y, Z)
    assert free.k > 50
    assert np.all(np.abs(free.params - ref) < 3 * free.se)


def test_offset_recovers_rate():
    rng = np.random.default_rng(2)
    pop = rng.integers(1000, 100000, 400)
    z = rng.normal(size=400)
    y = rng.poisson(pop * np.exp(-6 + 0.3 * z))
    f = fit_nb(y, z[:, None], offset=np.log(pop), dispersion=1e8)
    assert f.alpha0 == pytest.approx(-6, abs=0.05)


@given(st.integers(0, 2**31))
def test_likelihood_ascent(seed):
    y, Z = simulate_nb(seed, n=120)
    f = fit_nb(y, Z)
    h = np.array(f.loglik_history)
    assert np.all(np.diff(h) >= -1e-12 * np.abs(h[:-1]))
    assert f.k > 0


def test_errors():
    with pytest.raises(ValueError, match="all zero"):
        fit_nb([0, 0, 0, 0], np.zeros((4, 1)))
    with pytest.raises(ValueError, match="integers"):
        fit_nb([1.5, 2, 3, 4], np.zeros((4, 1)))
    with pytest.raises(ValueError, match="more than"):
        fit_nb([1, 2, 3], np.eye(3)[:, :2])


def test_separation_error():
    x = np.repeat([0.0, 1.0], 20)
    y = np.where(x > 0, np.arange(40) % 5 + 1, 0)
    with pytest.raises(SeparationError):
        fit_nb(y, x[:, None])


def test_covariate_table_input():
    y, Z = simulate_nb(3, n=200)
    table = CovariateTable([str(i) for i in range(200)], ["a", "b", "c"], Z.T)
    f = fit_nb(y, table)
    assert f.names == ("a", "b", "c")
    assert f.coefficient("b") == pytest.approx(fit_nb(y, table.normalized.T).beta[1])


def test_select_covariates_order():
    assert select_covariates(fake_fit([0.5, 2.0, 1.0], [0.01, 0.30, 0.001])) == ["c3", "c1"]
    assert select_covariates(fake_fit([0.5, 2.0, 3.0], [0.01, 0.30, 0.001])) == ["c3", "c1"]
    assert select_covariates(fake_fit([2.0, 2.0, 0.1], [0.01, 0.3, 0.001])) == ["c1", "c3"]
    assert select_covariates(fake_fit([0.5, 2.0], [0.01, 0.001]), alpha=0.0) == []


def test_v_examples():
    np.testing.assert_allclose(v_from_coefficients(fake_fit([2, -2], [0, 0]), ["c1", "c2"]).v, [0.5, 0.5])
    np.testing.assert_allclose(v_from_coefficients(fake_fit([3, -1], [0, 0]), ["c1", "c2"]).v, [0.75, 0.25])
    np.testing.assert_allclose(v_from_coefficients(fake_fit([0.2], [0]), ["c1"]).v, [1.0])
    with pytest.raises(ValueError):
        v_from_coefficients(fake_fit([0.0, 0.0], [0, 0]), ["c1", "c2"])
    with pytest.raises(ValueError):
        v_from_coefficients(fake_fit([1.0], [0]), [])


@given(st.lists(st.floats(-1e3, 1e3).filter(lambda b: abs(b) > 1e-6), min_size=1, max_size=6),
       st.floats(1e-3, 1e3))
def test_v_sums_to_one_and_scale_invariant(beta, c):
    names = [f"c{i + 1}" for i in range(len(beta))]
    v = v_from_coefficients(fake_fit(beta, [0] * len(beta)), names).v
    vc = v_from_coefficients(fake_fit(np.array(beta) * c, [0] * len(beta)), names).v
    assert v.sum() == pytest.approx(1.0, abs=1e-12)
    assert np.all(v >= 0)
    np.testing.assert_allclose(v, vc, rtol=1e-10, atol=1e-15)


def test_nb_loglik_matches_scipy():
    from scipy import stats

    y = np.array([0, 1, 5, 12])
    mu = np.array([0.5, 2.0, 4.0, 10.0])
    k = 1.7
    ref = stats.nbinom.logpmf(y, k, k / (k + mu)).sum()
    assert nb_loglik(y, mu, k) == pytest.approx(ref, rel=1e-12)
