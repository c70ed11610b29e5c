import numpy as np

from sharing_brrr import GroupPartition, Hyperparameters, SHARING
from sharing_brrr.geweke import batch_means_se, geweke_test


def test_batch_means_se_iid():
    x = np.random.default_rng(0).standard_normal((100_000, 2))
    np.testing.assert_allclose(batch_means_se(x), 1 / np.sqrt(100_000), rtol=0.3)


def test_batch_means_se_inflates_for_ar1():
    rng = np.random.default_rng(1)
    e = rng.standard_normal(100_000)
    x = np.empty_like(e)
    x[0] = e[0]
    for i in range(1, len(e)):
        x[i] = 0.9 * x[i - 1] + e[i]
    # long-run sd of AR(1) with phi=0.9 is 1 / (1 - 0.9)
    np.testing.assert_allclose(batch_means_se(x[:, None])[0], 10 / np.sqrt(100_000), rtol=0.35)


def test_short_geweke_run():
    X = np.random.default_rng(1).standard_normal((3, 2))
    h = Hyperparameters(a1=4, a2=5, a3=4, a4=5, nu=10, a_sigma=6, b_sigma=5, adapt=None)
    r = geweke_test(X, GroupPartition([1, 1, 2]), h, SHARING, n=2000, seed=3)
    assert len(r.z) >= 25 and np.all(np.isfinite(r.z))
    assert r.pass_fraction >= 0.85
