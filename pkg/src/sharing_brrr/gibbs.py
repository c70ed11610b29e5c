"""Alternating Gibbs sampler.

One sweep refreshes the reduced-rank regression parameters on the residuals
``Y - H Lambda^T`` and then the factor noise model on ``Y - X Psi Gamma``.
The noise update ignores the dependence of the ``Gamma`` prior on
``(Lambda, sigma2)``; with information sharing switched on the chain is
therefore an approximation to the joint posterior, exact otherwise.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import gammaln

from .model import (
    SHAPE_LOWER,
    SHARING,
    Dataset,
    DimensionError,
    GroupPartition,
    Hyperparameters,
    ModelState,
    ModelVariant,
    NumericalError,
    cholesky_jitter,
    draw_gamma_rows,
    draw_mgp_increments,
    draw_phi_gamma,
    init_state,
    log_joint_density,
    noise_correlation,
    predict_mean,
)

PARAMETERS = frozenset(
    {"Psi", "Gamma", "phi_gamma", "delta_star", "H", "Lambda", "phi_lambda", "delta", "sigma2", "shapes",
     "ranks"})

_SHAPE_LOWER = SHAPE_LOWER
_SHAPE_STEP = 0.3


@dataclass(frozen=True)
class ChainSchedule:
    total_iters: int = 80_000
    burn_in: int = 40_000
    thin: int = 10
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.burn_in < self.total_iters:
            raise ValueError("need 0 <= burn_in < total_iters")
        if self.thin < 1:
            raise ValueError("thin must be >= 1")

    @property
    def n_retained(self) -> int:
        return (self.total_iters - self.burn_in) // self.thin


@dataclass
class SampleStore:
    Psi: list = field(default_factory=list)
    Gamma: list = field(default_factory=list)
    Lambda: list = field(default_factory=list)
    sigma2: list = field(default_factory=list)
    ranks: list = field(default_factory=list)
    log_joint: np.ndarray = field(default_factory=lambda: np.zeros(0))
    rank_trace: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=int))
    sweep_times: np.ndarray = field(default_factory=lambda: np.zeros(0))
    variant: ModelVariant = SHARING
    schedule: Optional[ChainSchedule] = None
    final_state: Optional[ModelState] = None

    def __len__(self):
        return len(self.Psi)

    def append(self, state: ModelState) -> None:
        self.Psi.append(state.Psi.copy())
        self.Gamma.append(state.Gamma.copy())
        self.Lambda.append(state.Lambda.copy())
        self.sigma2.append(state.sigma2.copy())
        self.ranks.append((state.S1, state.S2))

    def predict(self, X) -> np.ndarray:
        return posterior_predict(self, X)

    def draws_equal(self, other: SampleStore) -> bool:
        """Bit-wise equality of everything except wall-clock timings."""
        if len(self) != len(other) or self.ranks != other.ranks:
            return False
        for name in ("Psi", "Gamma", "Lambda", "sigma2"):
            if not all(np.array_equal(a, b) for a, b in zip(getattr(self, name), getattr(other, name))):
                return False
        return (np.array_equal(self.log_joint, other.log_joint)
                and np.array_equal(self.rank_trace, other.rank_trace))


class ChainError(RuntimeError):
    def __init__(self, iteration: int, cause: Exception):
        super().__init__(f"sampler failed at iteration {iteration}: {cause}")
        self.iteration = iteration


def _gamma(rng, shape, rate, size=None):
    return rng.gamma(shape, 1.0 / rate, size=size)


def _solve_lower(L, b, trans=False):
    return solve_triangular(L, b, lower=True, trans="T" if trans else "N", check_finite=False)


def _group_inverses(R: np.ndarray, groups: GroupPartition) -> list[np.ndarray]:
    out = []
    for idx in groups.blocks:
        L = cholesky_jitter(R[np.ix_(idx, idx)], "Gamma prior")
        Linv = _solve_lower(L, np.eye(idx.size))
        out.append(Linv.T @ Linv)
    return out


def _diag(n):
    i = np.arange(n)
    return i, i


def _padded_blocks(blocks, Rinv):
    """Index table (M x d_max, -1 = padding) and identity-padded inverse blocks."""
    d = max(idx.size for idx in blocks)
    M = len(blocks)
    pad = np.full((M, d), -1)
    Rpad = np.tile(np.eye(d), (M, 1, 1))
    for m, (idx, Ri) in enumerate(zip(blocks, Rinv)):
        pad[m, :idx.size] = idx
        Rpad[m, :idx.size, :idx.size] = Ri
    return pad, Rpad


def _batched_cholesky(A, block):
    try:
        return np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        return np.stack([cholesky_jitter(a, block) for a in A])


def _gamma_quadratic(Gamma, blocks, Rinv) -> np.ndarray:
    """``q[h, m] = gamma_{h, C_m} R_m^{-1} gamma_{h, C_m}^T``."""
    q = np.empty((Gamma.shape[0], len(blocks)))
    for m, (idx, Ri) in enumerate(zip(blocks, Rinv)):
        g = Gamma[:, idx]
        q[:, m] = np.einsum("hi,ij,hj->h", g, Ri, g)
    return q


def _update_mgp(rng, delta, first_shape, rest_shape, n_per_col, col_sums):
    """Sequential conjugate update of multiplicative gamma increments.

    ``col_sums[h]`` is the precision-weighted sum of squares of everything
    scaled by ``tau[h]`` and ``n_per_col`` the number of such entries.
    """
    delta = delta.copy()
    S = delta.size
    for l in range(S):
        tau = np.cumprod(delta)
        tau_minus = tau[l:] / delta[l]
        shape = (first_shape if l == 0 else rest_shape) + 0.5 * n_per_col * (S - l)
        rate = 1.0 + 0.5 * np.sum(tau_minus * col_sums[l:])
        delta[l] = _gamma(rng, shape, rate)
    return delta


def _log_shape_target(a, lower, x_log_sum, n):
    """Log density of ``log(a - lower)`` given ``n`` Ga(a, 1) draws with ``sum(log x)``."""
    u = a - lower
    return 2.0 * np.log(u) - u + (a - 1.0) * x_log_sum - n * gammaln(a)


def _mh_shape(rng, a, lower, x):
    x = np.atleast_1d(x)
    if x.size == 0:
        return a
    s, n = float(np.sum(np.log(x))), x.size
    prop = lower + (a - lower) * math.exp(_SHAPE_STEP * rng.standard_normal())
    log_r = _log_shape_target(prop, lower, s, n) - _log_shape_target(a, lower, s, n)
    return prop if math.log(rng.uniform()) < log_r else a


def psi_column_conditional(data: Dataset, state: ModelState, h: int, XtE=None):
    """Full conditional of column ``h`` of ``Psi``.

    Returns ``(mean, eigvecs, scales)`` with covariance
    ``eigvecs @ diag(scales**2) @ eigvecs.T``.  ``XtE`` is ``X^T`` times the
    current full residual ``Y - H Lambda^T - X Psi Gamma`` (computed if not
    given).
    """
    if XtE is None:
        XtE = data.xty - (data.X.T @ state.H) @ state.Lambda.T - data.xtx @ state.Psi @ state.Gamma
    D, U = data.xtx_eig
    w = 1.0 / state.sigma2
    g = state.Gamma[h]
    c = float(np.sum(w * g * g))
    tau = state.tau_star[h]
    b = XtE @ (w * g) + data.xtx @ state.Psi[:, h] * c
    inv = 1.0 / (c * D + tau)
    mean = U @ (inv * (U.T @ b))
    return mean, U, np.sqrt(inv)


def gamma_row_conditional(data: Dataset, state: ModelState, h: int, variant: ModelVariant = SHARING,
                          G=None, ZtZ=None):
    """Full conditional mean and covariance (K x K) of row ``h`` of ``Gamma``."""
    if G is None or ZtZ is None:
        ZtZ = state.Psi.T @ data.xtx @ state.Psi
        XtYs = data.xty - (data.X.T @ state.H) @ state.Lambda.T
        G = state.Psi.T @ XtYs - ZtZ @ state.Gamma
    R = noise_correlation(state, variant)
    Rinv = _group_inverses(R, data.groups)
    K = state.Gamma.shape[1]
    w = 1.0 / state.sigma2
    q = ZtZ[h, h]
    lin = (G[h] + q * state.Gamma[h]) * w
    mean, cov = np.zeros(K), np.zeros((K, K))
    s = state.tau_star[h] * state.phi_gamma[h]
    for m, idx in enumerate(data.groups.blocks):
        A = np.diag(q * w[idx]) + s[m] * Rinv[m]
        C = np.linalg.inv(A)
        mean[idx] = C @ lin[idx]
        cov[np.ix_(idx, idx)] = C
    return mean, cov


def update_regression_block(state: ModelState, data: Dataset, hyper: Hyperparameters,
                            variant: ModelVariant, rng, frozen: Iterable[str] = ()) -> ModelState:
    """Redraw ``Psi``, ``Gamma``, ``phi_gamma``, ``delta_star`` (and a3, a4)."""
    frozen = frozenset(frozen)
    s = state.copy()
    groups = data.groups
    blocks = groups.blocks
    S1, K = s.Gamma.shape
    nu = hyper.nu
    w = 1.0 / s.sigma2

    # Gamma prior refresh from the newest noise state.
    R = noise_correlation(s, variant)
    Rinv = _group_inverses(R, groups)

    XtYs = data.xty - (data.X.T @ s.H) @ s.Lambda.T
    xtx = data.xtx
    D, U = data.xtx_eig

    if "Psi" not in frozen:
        tau_star = s.tau_star
        XtE = XtYs - xtx @ s.Psi @ s.Gamma
        for h in range(S1):
            g = s.Gamma[h]
            c = float(np.sum(w * g * g))
            b = XtE @ (w * g) + xtx @ s.Psi[:, h] * c
            inv = 1.0 / (c * D + tau_star[h])
            new = U @ (inv * (U.T @ b) + np.sqrt(inv) * rng.standard_normal(D.size))
            XtE -= np.outer(xtx @ (new - s.Psi[:, h]), g)
            s.Psi[:, h] = new

    if "Gamma" not in frozen:
        tau_star = s.tau_star
        ZtZ = s.Psi.T @ xtx @ s.Psi
        G = s.Psi.T @ XtYs - ZtZ @ s.Gamma
        # Groups are conditionally independent given the rest of the row, so
        # each row is drawn as one stacked, identity-padded batch over groups.
        pad, Rpad = _padded_blocks(blocks, Rinv)
        w_pad = np.where(pad >= 0, w[np.maximum(pad, 0)], 1.0)
        valid = pad >= 0
        for h in range(S1):
            q = ZtZ[h, h]
            lin = np.where(valid, ((G[h] + q * s.Gamma[h]) * w)[np.maximum(pad, 0)], 0.0)
            A = Rpad * (tau_star[h] * s.phi_gamma[h])[:, None, None]
            A[:, _diag(pad.shape[1])[0], _diag(pad.shape[1])[1]] += q * w_pad
            L = _batched_cholesky(A, "Gamma")
            Lt = np.swapaxes(L, 1, 2)
            z = rng.standard_normal(pad.shape)[..., None]
            draw = np.linalg.solve(A, lin[..., None]) + np.linalg.solve(Lt, z)
            new = np.empty(K)
            new[pad[valid]] = draw[..., 0][valid]
            G -= np.outer(ZtZ[:, h], new - s.Gamma[h])
            s.Gamma[h] = new

    quad = _gamma_quadratic(s.Gamma, blocks, Rinv)
    if "phi_gamma" not in frozen:
        tau_star = s.tau_star
        if variant.group_sparsity:
            sizes = np.array([idx.size for idx in blocks])
            s.phi_gamma = _gamma(rng, nu / 2 + sizes[None, :] / 2, nu / 2 + 0.5 * tau_star[:, None] * quad)
        else:
            phi = _gamma(rng, nu / 2 + K / 2, nu / 2 + 0.5 * tau_star * quad.sum(axis=1))
            s.phi_gamma = np.repeat(phi[:, None], groups.M, axis=1)

    if "delta_star" not in frozen:
        col = np.sum(s.Psi ** 2, axis=0) + np.sum(s.phi_gamma * quad, axis=1)
        P = s.Psi.shape[0]
        s.delta_star = _update_mgp(rng, s.delta_star, s.shapes[2], s.shapes[3], P + K, col)

    if hyper.sample_hyper_shapes and "shapes" not in frozen:
        s.shapes = s.shapes.copy()
        s.shapes[2] = _mh_shape(rng, s.shapes[2], _SHAPE_LOWER[2], s.delta_star[:1])
        s.shapes[3] = _mh_shape(rng, s.shapes[3], _SHAPE_LOWER[3], s.delta_star[1:])
    return s


def update_noise_block(state: ModelState, data: Dataset, hyper: Hyperparameters, rng,
                       frozen: Iterable[str] = ()) -> ModelState:
    """Redraw ``H``, ``Lambda``, ``phi_lambda``, ``delta``, ``sigma2`` (and a1, a2) given ``Y - X Psi Gamma``."""
    frozen = frozenset(frozen)
    s = state.copy()
    N, K = data.Y.shape
    S2 = s.S2
    nu = hyper.nu
    Yss = data.Y - (data.X @ s.Psi) @ s.Gamma

    if S2 > 0:
        w = 1.0 / s.sigma2
        if "H" not in frozen and N > 0:
            LW = s.Lambda * w[:, None]
            A = np.eye(S2) + s.Lambda.T @ LW
            L = cholesky_jitter(A, "H")
            mean = _solve_lower(L, _solve_lower(L, LW.T @ Yss.T), trans=True)
            s.H = (mean + _solve_lower(L, rng.standard_normal((S2, N)), trans=True)).T

        if "Lambda" not in frozen:
            tau = s.tau
            HtH = s.H.T @ s.H
            HtY = s.H.T @ Yss  # S2 x K
            A = w[:, None, None] * HtH[None] + np.einsum("jh,hk->jhk", s.phi_lambda * tau[None, :], np.eye(S2))
            L = _batched_cholesky(A, "Lambda")
            b = (HtY * w[None, :]).T[..., None]  # K x S2 x 1
            Lt = np.swapaxes(L, 1, 2)
            mean = np.linalg.solve(Lt, np.linalg.solve(L, b))
            noise = np.linalg.solve(Lt, rng.standard_normal((K, S2, 1)))
            s.Lambda = (mean + noise)[..., 0]

        if "phi_lambda" not in frozen:
            s.phi_lambda = _gamma(rng, (nu + 1) / 2, (nu + s.tau[None, :] * s.Lambda ** 2) / 2)

        if "delta" not in frozen:
            col = np.sum(s.phi_lambda * s.Lambda ** 2, axis=0)
            s.delta = _update_mgp(rng, s.delta, s.shapes[0], s.shapes[1], K, col)

    if "sigma2" not in frozen:
        E = Yss - s.H @ s.Lambda.T if S2 > 0 else Yss
        prec = _gamma(rng, hyper.a_sigma + N / 2, hyper.b_sigma + 0.5 * np.sum(E ** 2, axis=0))
        s.sigma2 = 1.0 / prec

    if hyper.sample_hyper_shapes and "shapes" not in frozen and S2 > 0:
        s.shapes = s.shapes.copy()
        s.shapes[0] = _mh_shape(rng, s.shapes[0], _SHAPE_LOWER[0], s.delta[:1])
        s.shapes[1] = _mh_shape(rng, s.shapes[1], _SHAPE_LOWER[1], s.delta[1:])
    return s


def _rank_caps(adapt, P, K):
    cap1 = adapt.max_rank_1 if adapt.max_rank_1 is not None else min(P, K)
    cap2 = adapt.max_rank_2 if adapt.max_rank_2 is not None else K
    return cap1, cap2


def adapt_ranks(state: ModelState, it: int, hyper: Hyperparameters, variant: ModelVariant,
                groups: GroupPartition, rng, burn_freeze: Optional[int] = None) -> ModelState:
    """Prune negligible components or append a fresh one, with decaying probability.

    A regression component is negligible when every entry of its
    contribution ``outer(Psi[:, h], Gamma[h])`` is below ``epsilon`` in
    absolute value; a noise component when every entry of ``Lambda[:, h]``
    is.  Ranks never drop below 1 and never change after ``burn_freeze``.
    """
    adapt = hyper.adapt
    if it < 1:
        raise ValueError("iteration numbers start at 1")
    if adapt is None:
        return state
    freeze = adapt.burn_freeze if adapt.burn_freeze is not None else burn_freeze
    if freeze is not None and it > freeze:
        return state
    if rng.uniform() >= adapt.probability(it):
        return state

    s = state.copy()
    eps = adapt.epsilon
    P, K = s.Psi.shape[0], s.Gamma.shape[1]
    cap1, cap2 = _rank_caps(adapt, P, K)
    a1, a2, a3, a4 = s.shapes
    nu = hyper.nu

    contrib = np.max(np.abs(s.Psi), axis=0) * np.max(np.abs(s.Gamma), axis=1)
    keep = contrib >= eps
    if not keep.all():
        if not keep.any():
            keep[0] = True
        s.Psi, s.Gamma = s.Psi[:, keep], s.Gamma[keep]
        s.delta_star, s.phi_gamma = s.delta_star[keep], s.phi_gamma[keep]
    elif s.S1 < cap1:
        S1 = s.S1
        s.delta_star = np.append(s.delta_star, draw_mgp_increments(rng, a3, a4, 1, start=S1))
        tau_new = s.tau_star[-1]
        s.Psi = np.column_stack([s.Psi, rng.standard_normal(P) / np.sqrt(tau_new)])
        s.phi_gamma = np.vstack([s.phi_gamma, draw_phi_gamma(rng, nu, 1, groups.M, variant.group_sparsity)])
        s.Gamma = np.vstack([s.Gamma, np.zeros((1, K))])
        s.Gamma[-1] = draw_gamma_rows(s, groups, variant, rng, rows=[S1])[0]

    if variant.use_noise_factors and s.S2 > 0:
        keep = np.max(np.abs(s.Lambda), axis=0) >= eps
        if not keep.all():
            if not keep.any():
                keep[0] = True
            s.Lambda, s.H = s.Lambda[:, keep], s.H[:, keep]
            s.phi_lambda, s.delta = s.phi_lambda[:, keep], s.delta[keep]
        elif s.S2 < cap2:
            S2 = s.S2
            s.delta = np.append(s.delta, draw_mgp_increments(rng, a1, a2, 1, start=S2))
            phi = _gamma(rng, nu / 2, nu / 2, K)
            s.phi_lambda = np.column_stack([s.phi_lambda, phi])
            s.Lambda = np.column_stack([s.Lambda, rng.standard_normal(K) / np.sqrt(phi * s.tau[-1])])
            s.H = np.column_stack([s.H, rng.standard_normal(s.H.shape[0])])
    return s


def gibbs_sweep(state, data, hyper, variant, rng, it, frozen=(), burn_freeze=None, adapt=True):
    state = update_regression_block(state, data, hyper, variant, rng, frozen)
    state = update_noise_block(state, data, hyper, rng, frozen)
    if adapt:
        state = adapt_ranks(state, it, hyper, variant, data.groups, rng, burn_freeze)
    return state


def run_chain(data: Dataset, hyper: Hyperparameters, variant: ModelVariant, schedule: ChainSchedule,
              init: Optional[ModelState] = None, frozen: Iterable[str] = (),
              trace_every: int = 1, callback=None) -> SampleStore:
    """Run one seeded chain and keep thinned post-burn-in draws.

    ``frozen`` names parameters held at their initial values.  ``callback``
    (if given) is called as ``callback(it, state)`` after every sweep.
    """
    frozen = frozenset(frozen)
    unknown = frozen - PARAMETERS
    if unknown:
        raise ValueError(f"unknown parameters {sorted(unknown)}")
    rng = np.random.default_rng(schedule.seed)
    if init is None:
        state = init_state(hyper, data.dims, rng, data.groups, variant)
    else:
        state = init.copy()
        state.check(data.dims)
    store = SampleStore(variant=variant, schedule=schedule)
    n_trace = schedule.total_iters // trace_every
    log_joint = np.empty(n_trace)
    ranks = np.empty((schedule.total_iters, 2), dtype=int)
    times = np.empty(schedule.total_iters)
    for it in range(1, schedule.total_iters + 1):
        t0 = time.perf_counter()
        try:
            state = gibbs_sweep(state, data, hyper, variant, rng, it, frozen, schedule.burn_in,
                                adapt="ranks" not in frozen)
        except (NumericalError, np.linalg.LinAlgError, ValueError) as exc:
            raise ChainError(it, exc) from exc
        times[it - 1] = time.perf_counter() - t0
        ranks[it - 1] = state.S1, state.S2
        if it % trace_every == 0:
            try:
                log_joint[it // trace_every - 1] = log_joint_density(state, data, hyper, variant)
            except NumericalError as exc:
                raise ChainError(it, exc) from exc
        if it > schedule.burn_in and (it - schedule.burn_in) % schedule.thin == 0:
            store.append(state)
        if callback is not None:
            callback(it, state)
    store.log_joint = log_joint
    store.rank_trace = ranks
    store.sweep_times = times
    store.final_state = state
    return store


def posterior_predict(store: SampleStore, X_new) -> np.ndarray:
    """Posterior-mean prediction averaged over the retained draws."""
    if len(store) == 0:
        raise RuntimeError("sample store is empty")
    X_new = np.atleast_2d(np.asarray(X_new, dtype=float))
    out = np.zeros((X_new.shape[0], store.Gamma[0].shape[1]))
    for Psi, Gamma in zip(store.Psi, store.Gamma):
        out += predict_mean(X_new, Psi, Gamma)
    return out / len(store)


def simulate_responses(state: ModelState, X, rng) -> np.ndarray:
    """Draw ``Y`` from the likelihood given every parameter including ``H``."""
    mean = predict_mean(X, state.Psi, state.Gamma) + state.H @ state.Lambda.T
    return mean + rng.standard_normal(mean.shape) * np.sqrt(state.sigma2)[None, :]
