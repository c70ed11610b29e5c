"""Reference predictors: the training-mean baseline and a Bayesian linear model."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .gibbs import ChainSchedule
from .model import Dataset, NumericalError


@dataclass
class MeanBaseline:
    means: np.ndarray

    def predict(self, X) -> np.ndarray:
        X = np.atleast_2d(X)
        return np.tile(self.means, (X.shape[0], 1))


def mean_baseline(Y_train) -> MeanBaseline:
    Y_train = np.atleast_2d(np.asarray(Y_train, dtype=float))
    if Y_train.shape[0] == 0:
        raise ValueError("empty training set")
    return MeanBaseline(Y_train.mean(axis=0))


def blm_posterior_mean(X, Y, prior_precision: float, sigma2) -> np.ndarray:
    """Conditional posterior mean ``(X^T X + lambda sigma2 I)^{-1} X^T y`` per response.

    ``sigma2`` is a scalar or one value per response column.
    """
    X = np.asarray(X, dtype=float)
    Y = np.atleast_2d(np.asarray(Y, dtype=float).T).T
    sigma2 = np.broadcast_to(np.asarray(sigma2, dtype=float), (Y.shape[1],))
    xtx, xty = X.T @ X, X.T @ Y
    out = np.empty((X.shape[1], Y.shape[1]))
    for k in range(Y.shape[1]):
        A = xtx + prior_precision * sigma2[k] * np.eye(X.shape[1])
        try:
            L = np.linalg.cholesky(A)
        except np.linalg.LinAlgError as exc:
            raise NumericalError("X^T X + lambda I is singular; use prior_precision > 0") from exc
        out[:, k] = np.linalg.solve(L.T, np.linalg.solve(L, xty[:, k]))
    return out


@dataclass
class BLMFit:
    coef: np.ndarray
    sigma2: np.ndarray
    prior_precision: np.ndarray
    n_draws: int

    def predict(self, X) -> np.ndarray:
        return np.atleast_2d(X) @ self.coef


def fit_blm(data: Dataset, prior_precision: Optional[float] = 1.0, noise_a: float = 1.0, noise_b: float = 0.3,
            schedule: ChainSchedule = ChainSchedule(2000, 1000, 1, 0),
            precision_a: float = 1.0, precision_b: float = 1.0) -> BLMFit:
    """Independent Bayesian linear regression for each response.

    Prior ``beta_k ~ N(0, I / lambda)`` and ``1/sigma_k^2 ~ Ga(noise_a, noise_b)``,
    fitted by two-block Gibbs sampling.  ``prior_precision=None`` samples
    ``lambda_k ~ Ga(precision_a, precision_b)`` as well.  The returned
    coefficients average the conditional posterior means over draws.
    """
    X, Y = data.X, data.Y
    N, P = X.shape
    K = Y.shape[1]
    rng = np.random.default_rng(schedule.seed)
    D, U = data.xtx_eig
    if prior_precision is not None and prior_precision == 0 and np.min(D) <= 1e-12 * max(1.0, np.max(D)):
        raise NumericalError("X is rank deficient and prior_precision = 0")
    UtXty = U.T @ data.xty
    lam = np.full(K, 1.0 if prior_precision is None else float(prior_precision))
    sigma2 = np.var(Y, axis=0) + 1e-12
    coef_sum = np.zeros((P, K))
    s2_sum, lam_sum = np.zeros(K), np.zeros(K)
    n = 0
    for it in range(1, schedule.total_iters + 1):
        inv = 1.0 / (D[:, None] / sigma2[None, :] + lam[None, :])  # P x K in eigenbasis
        mean_e = inv * UtXty / sigma2[None, :]
        beta = U @ (mean_e + np.sqrt(inv) * rng.standard_normal((P, K)))
        resid = Y - X @ beta
        sigma2 = 1.0 / rng.gamma(noise_a + N / 2, 1.0 / (noise_b + 0.5 * np.sum(resid ** 2, axis=0)))
        if prior_precision is None:
            lam = rng.gamma(precision_a + P / 2, 1.0 / (precision_b + 0.5 * np.sum(beta ** 2, axis=0)))
        if it > schedule.burn_in and (it - schedule.burn_in) % schedule.thin == 0:
            inv = 1.0 / (D[:, None] / sigma2[None, :] + lam[None, :])
            coef_sum += U @ (inv * UtXty / sigma2[None, :])
            s2_sum += sigma2
            lam_sum += lam
            n += 1
    return BLMFit(coef_sum / n, s2_sum / n, lam_sum / n, n)
