import math

import numpy as np
import pytest
from scipy.special import gamma as G

from sharing_brrr import Hyperparameters
from sharing_brrr.analytics import (
    component_prior_variance, inverse_square_moment, mc_prior_predictive_variance, prior_predictive_variance,
    truncated_prior_predictive_variance, truncation_variance_ratio,
)


def test_component_prior_variance_examples():
    assert component_prior_variance(5, 2, 0) == 0
    assert component_prior_variance(5, 2, 1) == pytest.approx(5 / 12)
    assert component_prior_variance(4, 1, 3) == pytest.approx(6.0)
    with pytest.raises(ValueError):
        component_prior_variance(2, 1, 1)
    with pytest.raises(ValueError):
        component_prior_variance(5, 0, 1)


def test_prior_predictive_variance_examples():
    assert prior_predictive_variance(3, 4, 5, 1) == pytest.approx(1.0, abs=1e-14)
    assert prior_predictive_variance(4, 5, 4, 1) == pytest.approx(4 / 11, abs=1e-14)
    assert prior_predictive_variance(3, 4, 5, 0) == 0
    with pytest.raises(ValueError, match="a3 > 2 and a4 > 3"):
        prior_predictive_variance(2, 4, 5, 1)
    with pytest.raises(ValueError, match="a3 > 2 and a4 > 3"):
        prior_predictive_variance(3, 3, 5, 1)


def test_gamma_ratio_against_gamma_function():
    for a in (2.5, 3, 4.7, 10):
        assert inverse_square_moment(a) == pytest.approx(G(a - 2) / G(a), rel=1e-12)
    # large shapes stay finite through log-gamma
    assert inverse_square_moment(400.0) == pytest.approx(1 / (398 * 399), rel=1e-10)


def test_truncation_ratio_examples():
    assert truncation_variance_ratio(4, 0) == 1
    assert truncation_variance_ratio(4, 1) == pytest.approx(1 / 6)
    assert truncation_variance_ratio(4, 3) == pytest.approx(4.6296296e-3, rel=1e-7)
    r = [truncation_variance_ratio(3.5, s) for s in range(6)]
    assert all(0 < b < a <= 1 for a, b in zip(r, r[1:]))
    with pytest.raises(ValueError):
        truncation_variance_ratio(3, 1)


def test_monotonicity_grid():
    xs = np.linspace(0, 5, 11)
    v = [prior_predictive_variance(3, 4, 5, x) for x in xs]
    assert np.all(np.diff(v) > 0)
    a4s = np.linspace(3.2, 8, 13)
    v = [prior_predictive_variance(3, a, 5, 1) for a in a4s]
    assert np.all(np.diff(v) < 0) or np.all(np.diff(v) > 0)
    # larger a4 means stronger tail shrinkage, so less variance
    assert v[0] > v[-1]


def test_geometric_series_structure():
    # Summing component variances with E[1/tau_h^2] = E[1/d1^2] E[1/d^2]^(h-1)
    # over three terms reproduces the truncated closed form.
    a3, a4, nu = 3.0, 4.0, 5.0
    total = sum(nu / (nu - 2) * inverse_square_moment(a3) * inverse_square_moment(a4) ** h for h in range(3))
    assert total == pytest.approx(truncated_prior_predictive_variance(a3, a4, nu, 1.0, 3), rel=1e-12)


def test_mc_degenerate_x():
    est = mc_prior_predictive_variance(Hyperparameters(a3=3, a4=4), np.zeros(3), 5, 1000, rng=0)
    assert est.estimate == 0 and est.mean == 0


def test_mc_deterministic_and_validated():
    h = Hyperparameters(a3=3, a4=4)
    a = mc_prior_predictive_variance(h, 1, 5, 5000, rng=1, block=700)
    b = mc_prior_predictive_variance(h, 1, 5, 5000, rng=1, block=700)
    assert a == b
    with pytest.raises(ValueError):
        mc_prior_predictive_variance(h, 1, 0, 100)
    with pytest.raises(ValueError):
        mc_prior_predictive_variance(h, 1, 5, 1)


def test_mc_light_tail_matches_closed_form():
    # With larger shapes the fourth moment is finite and the MC check is sharp.
    h = Hyperparameters(a3=6, a4=7, nu=12)
    est = mc_prior_predictive_variance(h, 3, 20, 100_000, rng=2)
    exact = prior_predictive_variance(6, 7, 12, 3.0)
    assert abs(est.estimate - exact) < 3 * est.std_error
    assert abs(est.mean) < 3 * est.mean_std_error


def test_mc_fixed_x_vector():
    h = Hyperparameters(a3=6, a4=7, nu=12)
    x = np.array([0.5, -2.0])
    est = mc_prior_predictive_variance(h, x, 20, 100_000, rng=3)
    exact = prior_predictive_variance(6, 7, 12, float(x @ x))
    assert abs(est.estimate - exact) < 3 * est.std_error
