import numpy as np
import pytest

from sharing_brrr import (
    BLM_LIKE, GROUP_SPARSE, SHARING, SHRINKAGE, ChainSchedule, Dataset, GroupPartition, Hyperparameters,
    SampleStore, TruncationAdaptation, adapt_ranks, init_state, posterior_predict, predict_mean, run_chain,
    update_noise_block, update_regression_block,
)
from sharing_brrr.geweke import batch_means_se
from sharing_brrr.gibbs import ChainError, gamma_row_conditional, psi_column_conditional
from sharing_brrr.model import draw_mgp_increments

from conftest import small_dataset

LIGHT = Hyperparameters(a1=6, a2=7, a3=6, a4=7, nu=12, a_sigma=6, b_sigma=5, rank_init_1=2, rank_init_2=2,
                        adapt=None)
ALWAYS = TruncationAdaptation(alpha0=0.0, alpha1=-1e-12)


def test_schedule():
    assert ChainSchedule().n_retained == 4000
    assert ChainSchedule(100, 50, 3).n_retained == 16
    with pytest.raises(ValueError):
        ChainSchedule(10, 10)
    with pytest.raises(ValueError):
        ChainSchedule(10, 5, 0)


def _empty_data(P=2, K=3, groups=(1, 1, 2)):
    return Dataset(np.zeros((0, P)), np.zeros((0, K)), GroupPartition(list(groups)))


def _prior_moments(states):
    psi = np.array([s.Psi for s in states])
    gam = np.array([s.Gamma for s in states])
    lam = np.array([s.Lambda for s in states])
    return {
        "psi2": np.mean(psi ** 2, axis=(1, 2)),
        "gamma2": np.mean(gam ** 2, axis=(1, 2)),
        "gamma01": gam[:, 0, 0] * gam[:, 0, 1],
        "log_dstar": np.array([np.log(s.delta_star).mean() for s in states]),
        "log_phig": np.array([np.log(s.phi_gamma).mean() for s in states]),
        "lambda2": np.mean(lam ** 2, axis=(1, 2)),
        "log_delta": np.array([np.log(s.delta).mean() for s in states]),
        "log_sigma2": np.array([np.log(s.sigma2).mean() for s in states]),
        "log_phil": np.array([np.log(s.phi_lambda).mean() for s in states]),
    }


@pytest.mark.parametrize("block", ["regression", "noise"])
def test_empty_data_preserves_prior(block):
    data = _empty_data()
    n = 6000
    rng = np.random.default_rng(11)
    direct = [init_state(LIGHT, data.dims, rng, data.groups) for _ in range(n)]
    s = init_state(LIGHT, data.dims, np.random.default_rng(5), data.groups)
    chain = []
    for _ in range(n):
        if block == "regression":
            s = update_regression_block(s, data, LIGHT, SHARING, rng)
            # refresh the noise part from its prior so Gamma's prior moves too
            fresh = init_state(LIGHT, data.dims, rng, data.groups)
            s.Lambda, s.sigma2, s.phi_lambda, s.delta = fresh.Lambda, fresh.sigma2, fresh.phi_lambda, fresh.delta
        else:
            s = update_noise_block(s, data, LIGHT, rng)
        chain.append(s)
    a, b = _prior_moments(direct), _prior_moments(chain)
    keys = ["psi2", "gamma2", "log_dstar", "log_phig"] if block == "regression" else \
        ["lambda2", "log_delta", "log_sigma2", "log_phil"]
    for k in keys:
        se = np.hypot(np.std(a[k], ddof=1) / np.sqrt(n), batch_means_se(b[k][:, None], 30)[0])
        assert abs(a[k].mean() - b[k].mean()) < 4 * se, k


def test_psi_conditional_scalar_oracle():
    d = small_dataset(N=25, P=3, K=1, groups=(1,), seed=4)
    h = Hyperparameters(rank_init_1=1, rank_init_2=1)
    s = init_state(h, d.dims, np.random.default_rng(0), d.groups, BLM_LIKE)
    s.Gamma[:] = 1.0
    s.sigma2[:] = 0.7
    s.delta_star[:] = 2.5
    mean, U, scales = psi_column_conditional(d, s, 0)
    X, y = d.X, d.Y[:, 0]
    ref = np.linalg.solve(X.T @ X / 0.7 + 2.5 * np.eye(3), X.T @ y / 0.7)
    np.testing.assert_allclose(mean, ref, atol=1e-8)
    cov = U @ np.diag(scales ** 2) @ U.T
    np.testing.assert_allclose(cov, np.linalg.inv(X.T @ X / 0.7 + 2.5 * np.eye(3)), atol=1e-10)


def test_gamma_conditional_diagonal_without_sharing():
    d = small_dataset(K=4, groups=(1, 2, 3, 4))
    h = Hyperparameters(rank_init_1=2, rank_init_2=2)
    s = init_state(h, d.dims, np.random.default_rng(0), d.groups, GROUP_SPARSE)
    _, cov = gamma_row_conditional(d, s, 0, GROUP_SPARSE)
    assert np.count_nonzero(cov - np.diag(np.diag(cov))) == 0
    _, cov = gamma_row_conditional(d, s, 0, SHARING)
    assert np.count_nonzero(cov - np.diag(np.diag(cov))) == 0  # singleton groups: still block-diagonal
    d2 = small_dataset(K=4, groups=(1, 1, 2, 2))
    _, cov = gamma_row_conditional(d2, s, 1, SHARING)
    assert cov[0, 1] != 0 and cov[0, 2] == 0


def test_conditionals_commute_with_response_permutation():
    d = small_dataset(N=20, P=3, K=4, groups=(1, 2, 1, 2), seed=8)
    h = Hyperparameters(rank_init_1=2, rank_init_2=2)
    s = init_state(h, d.dims, np.random.default_rng(3), d.groups)
    perm = np.array([3, 1, 0, 2])
    d2 = Dataset(d.X, d.Y[:, perm], d.groups.permuted(perm))
    s2 = s.copy()
    s2.Gamma, s2.Lambda, s2.sigma2, s2.phi_lambda = s.Gamma[:, perm], s.Lambda[perm], s.sigma2[perm], s.phi_lambda[perm]
    m1, c1 = gamma_row_conditional(d, s, 1)
    m2, c2 = gamma_row_conditional(d2, s2, 1)
    np.testing.assert_allclose(m2, m1[perm], atol=1e-10)
    np.testing.assert_allclose(c2, c1[np.ix_(perm, perm)], atol=1e-10)
    p1, _, _ = psi_column_conditional(d, s, 0)
    p2, _, _ = psi_column_conditional(d2, s2, 0)
    np.testing.assert_allclose(p1, p2, atol=1e-10)


def test_sigma2_conditional_without_factors():
    d = small_dataset(N=15, P=2, K=2, groups=(1, 2), seed=1)
    h = Hyperparameters(a_sigma=2.0, b_sigma=1.5)
    s = init_state(h, d.dims, np.random.default_rng(0), d.groups, BLM_LIKE)
    resid = d.Y - predict_mean(d.X, s.Psi, s.Gamma)
    shape = 2.0 + 15 / 2
    rate = 1.5 + 0.5 * np.sum(resid ** 2, axis=0)
    rng = np.random.default_rng(1)
    prec = np.array([1 / update_noise_block(s, d, h, rng).sigma2 for _ in range(20000)])
    se_mean = np.sqrt(shape) / rate / np.sqrt(len(prec))
    assert np.all(np.abs(prec.mean(axis=0) - shape / rate) < 4 * se_mean)
    var = prec.var(axis=0, ddof=1)
    se_var = np.std((prec - prec.mean(0)) ** 2, axis=0, ddof=1) / np.sqrt(len(prec))
    assert np.all(np.abs(var - shape / rate ** 2) < 4 * se_var)


def test_sweep_support(data, hyper):
    rng = np.random.default_rng(0)
    s = init_state(hyper, data.dims, rng, data.groups)
    for _ in range(20):
        s = update_regression_block(s, data, hyper, SHARING, rng)
        s = update_noise_block(s, data, hyper, rng)
        assert np.all(s.sigma2 > 0) and np.all(np.isfinite(s.Lambda))
        s.check(data.dims)
        assert np.array_equal(s.tau_star, np.cumprod(s.delta_star))


def test_frozen_parameters_are_held(data, hyper):
    rng = np.random.default_rng(0)
    s = init_state(hyper, data.dims, rng, data.groups)
    t = update_regression_block(s, data, hyper, SHARING, rng, frozen={"delta_star", "Psi"})
    assert np.array_equal(t.delta_star, s.delta_star) and np.array_equal(t.Psi, s.Psi)
    assert not np.array_equal(t.Gamma, s.Gamma)
    with pytest.raises(ValueError):
        run_chain(data, hyper, SHARING, ChainSchedule(5, 1), frozen={"nope"})


# -- adaptive truncation ------------------------------------------------------

def test_adapt_prunes_negligible_component(data):
    h = Hyperparameters(rank_init_1=3, rank_init_2=2, adapt=ALWAYS)
    s = init_state(h, data.dims, np.random.default_rng(0), data.groups)
    s.Psi[:, -1] = 0.0
    s.Gamma[-1] = 0.0
    t = adapt_ranks(s, 1, h, SHARING, data.groups, np.random.default_rng(1))
    assert t.S1 == 2
    t.check(data.dims)
    np.testing.assert_array_equal(t.Psi, s.Psi[:, :2])


def test_adapt_grows_when_nothing_negligible(data):
    h = Hyperparameters(rank_init_1=2, rank_init_2=2, adapt=ALWAYS)
    s = init_state(h, data.dims, np.random.default_rng(0), data.groups)
    t = adapt_ranks(s, 1, h, SHARING, data.groups, np.random.default_rng(1))
    assert t.S1 == 3 and t.S2 == 3
    t.check(data.dims)
    assert t.tau_star[-1] == t.tau_star[-2] * t.delta_star[-1]
    np.testing.assert_array_equal(t.delta_star[:2], s.delta_star)


def test_adapt_respects_caps_and_floor(data):
    h = Hyperparameters(rank_init_1=1, rank_init_2=1,
                        adapt=TruncationAdaptation(alpha0=0.0, alpha1=-1e-12, max_rank_1=1, max_rank_2=1))
    s = init_state(h, data.dims, np.random.default_rng(0), data.groups)
    s.Psi[:] = 0.0
    s.Lambda[:] = 0.0
    t = adapt_ranks(s, 1, h, SHARING, data.groups, np.random.default_rng(1))
    assert (t.S1, t.S2) == (1, 1)


def test_adapt_frozen_after_burn_in(data):
    h = Hyperparameters(rank_init_1=2, rank_init_2=2, adapt=ALWAYS)
    s = init_state(h, data.dims, np.random.default_rng(0), data.groups)
    t = adapt_ranks(s, 11, h, SHARING, data.groups, np.random.default_rng(1), burn_freeze=10)
    assert t is s


def test_ranks_constant_after_burn_in(data):
    h = Hyperparameters(rank_init_1=2, rank_init_2=2, adapt=TruncationAdaptation(alpha0=-0.1, alpha1=-1e-4))
    store = run_chain(data, h, SHARING, ChainSchedule(200, 100, 2, 0))
    assert len(set(map(tuple, store.rank_trace[100:]))) == 1
    assert len(set(store.ranks)) == 1


# -- chains -------------------------------------------------------------------

def test_run_chain_is_deterministic(data, hyper):
    sched = ChainSchedule(60, 20, 4, seed=7)
    a = run_chain(data, hyper, SHARING, sched)
    b = run_chain(data, hyper, SHARING, sched)
    assert a.draws_equal(b)
    c = run_chain(data, hyper, SHARING, ChainSchedule(60, 20, 4, seed=8))
    assert not a.draws_equal(c)
    assert len(a) == sched.n_retained == 10
    assert a.sweep_times.shape == (60,) and np.all(a.sweep_times > 0)


@pytest.mark.parametrize("variant", [SHARING, GROUP_SPARSE, SHRINKAGE, BLM_LIKE])
def test_log_joint_trace_finite(variant):
    d = small_dataset(N=40, P=5, K=4, groups=(1, 1, 2, 2), seed=2)
    store = run_chain(d, Hyperparameters(), variant, ChainSchedule(2500, 1000, 10, 1), trace_every=1)
    assert np.all(np.isfinite(store.log_joint)) and store.log_joint.size == 2500


def test_log_joint_trace_finite_long():
    d = small_dataset(N=30, P=3, K=3, groups=(1, 1, 2), seed=3)
    store = run_chain(d, Hyperparameters(), SHARING, ChainSchedule(10_000, 5000, 10, 2), trace_every=1)
    assert np.all(np.isfinite(store.log_joint))


def test_chain_error_carries_iteration(data, hyper):
    def boom(it, state):
        if it == 3:
            state.sigma2[:] = -1.0  # corrupts the next sweep

    with pytest.raises(ChainError) as err:
        run_chain(data, hyper, SHARING, ChainSchedule(10, 5), callback=boom)
    assert err.value.iteration == 4


def test_posterior_predict():
    rng = np.random.default_rng(0)
    X = rng.standard_normal((6, 3))
    Psi, Gamma = rng.standard_normal((3, 2)), rng.standard_normal((2, 4))
    one = SampleStore(Psi=[Psi], Gamma=[Gamma])
    np.testing.assert_allclose(posterior_predict(one, X), predict_mean(X, Psi, Gamma), atol=0)
    two = SampleStore(Psi=[Psi, -Psi], Gamma=[Gamma, Gamma])
    np.testing.assert_allclose(posterior_predict(two, X), 0.0, atol=1e-14)
    draws = [(rng.standard_normal((3, r)), rng.standard_normal((r, 4))) for r in (1, 2, 3, 2)]
    store = SampleStore(Psi=[p for p, _ in draws], Gamma=[g for _, g in draws])
    loop = sum(X @ (p @ g) for p, g in draws) / len(draws)
    np.testing.assert_allclose(posterior_predict(store, X), loop, atol=1e-12)
    with pytest.raises(RuntimeError):
        posterior_predict(SampleStore(), X)


def test_mgp_prior_tau_nondecreasing():
    rng = np.random.default_rng(0)
    d = np.array([draw_mgp_increments(rng, 2.1, 3.1, 6) for _ in range(100_000)])
    tau = np.cumprod(d, axis=1)
    m = tau.mean(axis=0)
    assert np.all(np.diff(m) > 0)
