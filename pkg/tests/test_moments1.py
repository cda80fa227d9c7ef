from __future__ import annotations

import numpy as np
import pandas as pd
import pytest
from scipy import optimize, stats

from pivsem.moments1 import (
    CategoryCollapseError,
    Stage1Error,
    VariableMeta,
    assemble_omega,
    bootstrap_acov,
    estimate_pairwise,
    estimate_univariate,
)

CUTS = stats.norm.ppf([0.3, 0.7, 0.9, 0.96])


def _ordinal(z, cuts=CUTS):
    return np.searchsorted(cuts, z) + 1


def _mixed(n, seed, r=0.5):
    rng = np.random.default_rng(seed)
    s = np.array([[1, r, .4], [r, 1, .3], [.4, .3, 1]])
    z = rng.multivariate_normal(np.zeros(3), s, n)
    return pd.DataFrame({"a": _ordinal(z[:, 0]), "b": _ordinal(z[:, 1], CUTS[:2]), "x": 3 + 2 * z[:, 2]})


METAS = [VariableMeta("a", "ordinal"), VariableMeta("b", "ordinal"), VariableMeta("x")]


def test_thresholds_closed_form():
    col = np.repeat([1, 2, 3, 4, 5], [30, 40, 20, 6, 4])
    u = estimate_univariate(col, VariableMeta("y", "ordinal"))
    np.testing.assert_allclose(u.thresholds, stats.norm.ppf([.3, .7, .9, .96]), atol=1e-14)
    assert u.mean == 0 and u.variance == 1


def test_continuous_margin_uses_unbiased_variance():
    x = np.array([1.0, 2.0, 4.0, 7.0])
    u = estimate_univariate(x, VariableMeta("x"))
    assert u.mean == pytest.approx(3.5)
    assert u.variance == pytest.approx(np.var(x, ddof=1))


def test_zero_frequency_category_names_it():
    col = np.array([1, 1, 2, 2, 4, 4])
    with pytest.raises(CategoryCollapseError, match="category 3"):
        estimate_univariate(col, VariableMeta("y", "ordinal"))
    with pytest.raises(CategoryCollapseError, match="category 5"):
        estimate_univariate(np.array([1, 2, 3, 4, 4]), VariableMeta("y", "ordinal", (1, 2, 3, 4, 5)))


def test_missing_values_rejected():
    with pytest.raises(Stage1Error):
        estimate_univariate(np.array([1.0, np.nan, 2.0]), VariableMeta("x"))


def _oracle_polychoric(a, b):
    """ML over rho with thresholds fixed at the margins; cell probabilities from scipy."""
    ta = stats.norm.ppf(np.cumsum(np.bincount(a)[1:])[:-1] / a.size)
    tb = stats.norm.ppf(np.cumsum(np.bincount(b)[1:])[:-1] / b.size)
    counts = np.zeros((ta.size + 1, tb.size + 1))
    np.add.at(counts, (a - 1, b - 1), 1)
    ea = np.concatenate(([-10.0], ta, [10.0]))
    eb = np.concatenate(([-10.0], tb, [10.0]))

    def nll(r):
        mvn = stats.multivariate_normal([0, 0], [[1, r], [r, 1]])
        f = np.array([[mvn.cdf([x, y]) for y in eb] for x in ea])
        p = f[1:, 1:] - f[:-1, 1:] - f[1:, :-1] + f[:-1, :-1]
        return -np.sum(counts * np.log(np.maximum(p, 1e-300)))

    return optimize.minimize_scalar(nll, bounds=(-0.99, 0.99), method="bounded", options={"xatol": 1e-7}).x


def _oracle_polyserial(y, x):
    tau = stats.norm.ppf(np.cumsum(np.bincount(y)[1:])[:-1] / y.size)
    z = (x - x.mean()) / x.std(ddof=1)
    lo = np.concatenate(([-np.inf], tau))[y - 1]
    hi = np.concatenate((tau, [np.inf]))[y - 1]

    def nll(r):
        s = np.sqrt(1 - r * r)
        return -np.sum(np.log(stats.norm.cdf((hi - r * z) / s) - stats.norm.cdf((lo - r * z) / s)))

    return optimize.minimize_scalar(nll, bounds=(-0.99, 0.99), method="bounded", options={"xatol": 1e-8}).x


@pytest.mark.parametrize("seed", [0, 1])
def test_polychoric_matches_bruteforce_ml(seed):
    d = _mixed(400, seed)
    ua = estimate_univariate(d.a, METAS[0])
    ub = estimate_univariate(d.b, METAS[1])
    res = estimate_pairwise(d.a, d.b, ua, ub)
    assert res.kind == "polychoric"
    assert res.rho == pytest.approx(_oracle_polychoric(d.a.to_numpy(), d.b.to_numpy()), abs=2e-5)


@pytest.mark.parametrize("seed", [0, 1])
def test_polyserial_matches_bruteforce_ml(seed):
    d = _mixed(400, seed)
    ua = estimate_univariate(d.a, METAS[0])
    ux = estimate_univariate(d.x, METAS[2])
    res = estimate_pairwise(d.a, d.x, ua, ux)
    assert res.kind == "polyserial"
    rho = _oracle_polyserial(d.a.to_numpy(), d.x.to_numpy())
    assert res.rho == pytest.approx(rho, abs=1e-6)
    # stored as a covariance with the continuous variable's scale
    assert res.value == pytest.approx(rho * d.x.std(ddof=1), abs=1e-5)


def test_continuous_pair_is_sample_covariance():
    d = _mixed(200, 3)
    s = assemble_omega(d, METAS, acov=None)
    i = s.names.index("x")
    assert s.sigma[i, i] == pytest.approx(d.x.var(ddof=1))


def test_assemble_orders_ordinal_first_and_labels():
    d = _mixed(300, 4)[["x", "a", "b"]]
    s = assemble_omega(d, [VariableMeta("x"), VariableMeta("a", "ordinal"), VariableMeta("b", "ordinal")])
    assert s.names == ["a", "b", "x"]
    labs = s.omega_labels
    assert labs[0] == ("mu", "x")
    assert ("tau", "a", 4) in labs and ("tau", "b", 2) in labs
    assert ("sigma", "a", "a") not in labs and ("sigma", "x", "x") in labs
    assert s.omega_acov.shape == (len(labs), len(labs))
    np.testing.assert_allclose(s.omega_acov, s.omega_acov.T, atol=1e-15)
    assert np.linalg.eigvalsh(s.omega_acov).min() > -1e-12


def test_workers_do_not_change_results():
    d = _mixed(300, 5)
    a = assemble_omega(d, METAS)
    b = assemble_omega(d, METAS, workers=3)
    np.testing.assert_array_equal(a.omega, b.omega)
    np.testing.assert_array_equal(a.omega_acov, b.omega_acov)


def test_sandwich_agrees_with_bootstrap():
    d = _mixed(800, 6)
    s = assemble_omega(d, METAS)
    boot = bootstrap_acov(d, METAS, reps=300, seed=1)
    ratio = np.diag(s.omega_acov) / np.diag(boot)
    assert np.all((ratio > 0.7) & (ratio < 1.4)), ratio


def test_sandwich_calibrated_by_monte_carlo():
    oms, acs = [], []
    for r in range(250):
        s = assemble_omega(_mixed(500, 100 + r), METAS)
        oms.append(s.omega)
        acs.append(np.diag(s.omega_acov))
    ratio = np.mean(acs, axis=0) / np.var(oms, axis=0, ddof=1)
    # 250 replications: sampling error of a variance ratio is about 9%
    assert np.all((ratio > 0.75) & (ratio < 1.3)), ratio
