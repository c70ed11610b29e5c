"""Joint-distribution ("getting it right") test of the Gibbs kernel.

Two simulators of ``p(theta, Y)`` are compared moment by moment: the
marginal-conditional one draws ``theta`` from the prior and ``Y`` given
``theta``; the successive-conditional one alternates a Gibbs sweep on
``theta | Y`` with a fresh ``Y | theta``.  Both target the same joint only if
the sweep leaves the posterior invariant.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .gibbs import simulate_responses, update_noise_block, update_regression_block
from .model import Dataset, GroupPartition, Hyperparameters, ModelState, ModelVariant, init_state


def default_statistics(state: ModelState, Y: np.ndarray) -> tuple[list[str], np.ndarray]:
    """First and second moments of a spread of parameters and data entries."""
    Theta = state.Psi @ state.Gamma
    vals = {
        "Psi[0,0]": state.Psi[0, 0],
        "Psi[1,1]": state.Psi[1, 1],
        "Gamma[0,0]": state.Gamma[0, 0],
        "Gamma[1,2]": state.Gamma[1, 2],
        "Lambda[0,0]": state.Lambda[0, 0],
        "Lambda[2,1]": state.Lambda[2, 1],
        "H[0,0]": state.H[0, 0],
        "Theta[0,0]": Theta[0, 0],
        "Theta[1,2]": Theta[1, 2],
        "Y[0,0]": Y[0, 0],
        "Y[2,2]": Y[2, 2],
    }
    names, out = [], []
    for k, v in vals.items():
        names += [k, k + "^2"]
        out += [v, v * v]
    extra = {
        "Gamma[0,0]*Gamma[0,1]": state.Gamma[0, 0] * state.Gamma[0, 1],
        "Y[0,0]*Y[0,1]": Y[0, 0] * Y[0, 1],
        "log sigma2[0]": np.log(state.sigma2[0]),
        "log sigma2[2]": np.log(state.sigma2[2]),
        "log delta_star[0]": np.log(state.delta_star[0]),
        "log delta_star[1]": np.log(state.delta_star[1]),
        "log delta[0]": np.log(state.delta[0]),
        "log delta[1]": np.log(state.delta[1]),
        "log phi_gamma[0,0]": np.log(state.phi_gamma[0, 0]),
        "log phi_lambda[1,0]": np.log(state.phi_lambda[1, 0]),
    }
    names += list(extra)
    out += list(extra.values())
    return names, np.array(out, dtype=float)


@dataclass
class GewekeResult:
    names: list
    mean_marginal: np.ndarray
    mean_successive: np.ndarray
    z: np.ndarray

    @property
    def pass_fraction(self) -> float:
        return float(np.mean(np.abs(self.z) < 4.0))

    def table(self) -> str:
        rows = [f"{n:>24s}  {a: .4f}  {b: .4f}  z={z: .2f}"
                for n, a, b, z in zip(self.names, self.mean_marginal, self.mean_successive, self.z)]
        return "\n".join(rows)


def batch_means_se(x: np.ndarray, n_batches: int = 50) -> np.ndarray:
    """Standard error of column means of an autocorrelated series."""
    n = (x.shape[0] // n_batches) * n_batches
    b = x[:n].reshape(n_batches, -1, x.shape[1]).mean(axis=1)
    return b.std(axis=0, ddof=1) / np.sqrt(n_batches)


def marginal_conditional(X, groups, hyper, variant, ranks, n, rng, stats=default_statistics):
    N, P = X.shape
    dims = (N, P, groups.K, groups.M)
    rows = []
    for _ in range(n):
        st = init_state(hyper, dims, rng, groups, variant, ranks)
        Y = simulate_responses(st, X, rng)
        rows.append(stats(st, Y)[1])
    return np.array(rows)


def successive_conditional(X, groups, hyper, variant, ranks, n, rng, stats=default_statistics):
    N, P = X.shape
    dims = (N, P, groups.K, groups.M)
    st = init_state(hyper, dims, rng, groups, variant, ranks)
    Y = simulate_responses(st, X, rng)
    data = Dataset(X, Y, groups)
    rows = []
    for _ in range(n):
        st = update_regression_block(st, data, hyper, variant, rng)
        st = update_noise_block(st, data, hyper, rng)
        Y = simulate_responses(st, X, rng)
        data = data.with_responses(Y)
        rows.append(stats(st, Y)[1])
    return np.array(rows)


def geweke_test(X, groups: GroupPartition, hyper: Hyperparameters, variant: ModelVariant,
                ranks=(2, 2), n: int = 50_000, seed: int = 0,
                stats: Callable = default_statistics, n_batches: int = 50) -> GewekeResult:
    """Compare the two simulators; ranks are held fixed throughout."""
    mc_rng, sc_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))
    mc = marginal_conditional(X, groups, hyper, variant, ranks, n, mc_rng, stats)
    sc = successive_conditional(X, groups, hyper, variant, ranks, n, sc_rng, stats)
    se_mc = mc.std(axis=0, ddof=1) / np.sqrt(n)
    se_sc = batch_means_se(sc, n_batches)
    z = (mc.mean(axis=0) - sc.mean(axis=0)) / np.sqrt(se_mc ** 2 + se_sc ** 2)
    names = stats(init_state(hyper, (X.shape[0], X.shape[1], groups.K, groups.M),
                             np.random.default_rng(0), groups, variant, ranks),
                  np.zeros((X.shape[0], groups.K)))[0]
    return GewekeResult(names, mc.mean(axis=0), sc.mean(axis=0), z)
