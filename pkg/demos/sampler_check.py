"""
Checking the sampler against its own prior
==========================================

A joint-distribution test: draw (parameters, data) from the prior directly,
and again by alternating data simulation with Gibbs sweeps.  If every
conditional is right, moments of both streams agree.  Short version; the
acceptance suite runs 5e4 sweeps.
"""
import numpy as np

from sharing_brrr import GroupPartition, Hyperparameters, SHARING
from sharing_brrr.geweke import geweke_test

X = np.random.default_rng(1).standard_normal((3, 2))
hyper = Hyperparameters(a1=4, a2=5, a3=4, a4=5, nu=10, a_sigma=6, b_sigma=5, adapt=None)
result = geweke_test(X, GroupPartition([1, 1, 2]), hyper, SHARING, ranks=(2, 2), n=5000, seed=0)
print(result.table())
print(f"{result.pass_fraction:.0%} of moments with |z| < 4")
