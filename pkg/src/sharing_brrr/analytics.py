"""Closed-form prior variances of predictions and Monte Carlo checks of them.

For a single response ``i`` the prior prediction is
``y_i = sum_h (x^T Psi_h) gamma_{h i}``.  Its variance has a closed form for
the infinite-rank prior, and truncating at ``S1`` components loses a
fraction ``(Gamma(a4 - 2) / Gamma(a4)) ** S1`` of it.
"""

from __future__ import annotations

from typing import NamedTuple, Optional, Union

import numpy as np
from scipy.special import gammaln

CONDITION = "requires a3 > 2 and a4 > 3"


class MCEstimate(NamedTuple):
    estimate: float
    std_error: float
    mean: float
    mean_std_error: float
    n: int


def _check_nu(nu):
    if not nu > 2:
        raise ValueError(f"nu must be > 2 for finite variance (got {nu})")


def inverse_square_moment(a: float) -> float:
    """``E[d**-2]`` for ``d ~ Ga(a, 1)``, i.e. ``Gamma(a - 2) / Gamma(a)``."""
    if not a > 2:
        raise ValueError(f"E[d^-2] is infinite for shape a <= 2 (got {a})")
    return float(np.exp(gammaln(a - 2) - gammaln(a)))


def component_prior_variance(nu: float, tau_star_h: float, sum_var_x: float) -> float:
    """Prior variance of one component ``x^T Psi_h gamma_{h i}`` given ``tau_star_h``."""
    _check_nu(nu)
    if not tau_star_h > 0:
        raise ValueError("tau_star_h must be > 0")
    if sum_var_x < 0:
        raise ValueError("sum_var_x must be >= 0")
    return nu / (nu - 2) * tau_star_h ** -2 * sum_var_x


def _check_shapes(a3, a4):
    if not (a3 > 2 and a4 > 3):
        raise ValueError(f"finite prior predictive variance {CONDITION} (got a3={a3}, a4={a4})")


def prior_predictive_variance(a3: float, a4: float, nu: float, sum_var_x: float) -> float:
    """Prior variance of a prediction under the infinite-rank prior."""
    _check_shapes(a3, a4)
    _check_nu(nu)
    if sum_var_x < 0:
        raise ValueError("sum_var_x must be >= 0")
    first, rest = inverse_square_moment(a3), inverse_square_moment(a4)
    return nu / (nu - 2) * sum_var_x * first / (1.0 - rest)


def truncated_prior_predictive_variance(a3, a4, nu, sum_var_x, S1: int) -> float:
    """Variance captured by the first ``S1`` components."""
    return prior_predictive_variance(a3, a4, nu, sum_var_x) * (1.0 - truncation_variance_ratio(a4, S1))


def truncation_variance_ratio(a4: float, S1: int) -> float:
    """Relative variance lost by truncating at ``S1`` components."""
    if not a4 > 3:
        raise ValueError(f"truncation ratio {CONDITION} (got a4={a4})")
    if S1 < 0:
        raise ValueError("S1 must be >= 0")
    return float(np.exp(S1 * (gammaln(a4 - 2) - gammaln(a4))))


def _draw_predictions(rng, a3, a4, nu, x, P, S1, n):
    """``n`` joint prior draws of a single-response prediction."""
    d1 = rng.gamma(a3, 1.0, size=(n, 1))
    rest = rng.gamma(a4, 1.0, size=(n, S1 - 1))
    tau = np.cumprod(np.concatenate([d1, rest], axis=1), axis=1)
    if x is None:
        xs = rng.standard_normal((n, P))
    else:
        xs = np.broadcast_to(x, (n, P))
    psi = rng.standard_normal((n, P, S1)) / np.sqrt(tau)[:, None, :]
    phi = rng.gamma(nu / 2, 2.0 / nu, size=(n, S1))
    gam = rng.standard_normal((n, S1)) / np.sqrt(tau * phi)
    xpsi = np.einsum("np,nph->nh", xs, psi)
    return np.sum(xpsi * gam, axis=1)


def mc_prior_predictive_variance(hyper, x: Optional[Union[np.ndarray, int]] = None, S1_trunc: int = 40,
                                 n_draws: int = 200_000, rng=None, block: int = 20_000) -> MCEstimate:
    """Monte Carlo variance of a prior prediction truncated at ``S1_trunc``.

    ``x`` is either a fixed P-vector or an int ``P`` meaning fresh standard
    normal predictors per draw.  ``hyper`` needs ``a3``, ``a4`` and ``nu``.
    Draws are generated in blocks of ``block`` from one stream, so the result
    depends only on the seed.
    """
    if S1_trunc < 1 or n_draws < 2:
        raise ValueError("need S1_trunc >= 1 and n_draws >= 2")
    _check_shapes(hyper.a3, hyper.a4)
    _check_nu(hyper.nu)
    rng = np.random.default_rng(rng)
    if x is None or isinstance(x, (int, np.integer)):
        P, xv = (1 if x is None else int(x)), None
    else:
        xv = np.asarray(x, dtype=float)
        P = xv.size
    y = np.empty(n_draws)
    for start in range(0, n_draws, block):
        m = min(block, n_draws - start)
        y[start:start + m] = _draw_predictions(rng, hyper.a3, hyper.a4, hyper.nu, xv, P, S1_trunc, m)
    mean = y.mean()
    dev2 = (y - mean) ** 2
    var = dev2.sum() / (n_draws - 1)
    se = dev2.std(ddof=1) / np.sqrt(n_draws)
    return MCEstimate(float(var), float(se), float(mean), float(y.std(ddof=1) / np.sqrt(n_draws)), n_draws)
