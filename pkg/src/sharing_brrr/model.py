"""Model quantities, prior draws and deterministic algebra.

The model is

    Y = X Psi Gamma + H Lambda^T + E,    e_i ~ N(0, diag(sigma2)),

with multiplicative gamma process shrinkage on the columns of ``Lambda`` and
``Psi`` and the rows of ``Gamma``.  Rows of ``Gamma`` get a block-diagonal
prior covariance whose within-group blocks are the current residual
correlation matrix of the noise model, scaled by per-group shrinkage.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import NamedTuple, Optional, Sequence

import numpy as np
from scipy.special import gammaln


class DimensionError(ValueError):
    pass


class NumericalError(ArithmeticError):
    pass


class GroupPartition:
    """Partition of the ``K`` responses into ``M`` groups.

    ``assignments`` holds one group index per response, using ``1..M``.
    """

    def __init__(self, assignments: Sequence[int]):
        a = np.asarray(assignments)
        if a.ndim != 1 or a.size == 0:
            raise ValueError("group assignments must be a non-empty 1-d sequence")
        if not np.issubdtype(a.dtype, np.integer):
            if not np.all(np.equal(np.mod(a, 1), 0)):
                raise ValueError("group indices must be integers")
            a = a.astype(np.int64)
        M = int(a.max())
        if a.min() < 1:
            raise ValueError("group indices must be >= 1")
        missing = sorted(set(range(1, M + 1)) - set(a.tolist()))
        if missing:
            raise ValueError(f"group indices {missing} are empty; groups must be 1..M with none empty")
        self.assignments = a.astype(np.int64)
        self.assignments.setflags(write=False)
        self.M = M

    @classmethod
    def singletons(cls, K: int) -> GroupPartition:
        return cls(np.arange(1, K + 1))

    @classmethod
    def single(cls, K: int) -> GroupPartition:
        return cls(np.ones(K, dtype=np.int64))

    @property
    def K(self) -> int:
        return self.assignments.size

    @cached_property
    def blocks(self) -> list[np.ndarray]:
        """0-based response indices of each group, in group order."""
        return [np.flatnonzero(self.assignments == m) for m in range(1, self.M + 1)]

    def permuted(self, perm: Sequence[int]) -> GroupPartition:
        """Partition of the responses reordered as ``responses[perm]``."""
        return GroupPartition(self.assignments[np.asarray(perm)])

    def __eq__(self, other):
        return isinstance(other, GroupPartition) and np.array_equal(self.assignments, other.assignments)

    def __repr__(self):
        return f"GroupPartition(M={self.M}, assignments={self.assignments.tolist()})"


@dataclass
class Dataset:
    X: np.ndarray
    Y: np.ndarray
    groups: GroupPartition
    feature_names: Optional[list[str]] = None
    target_names: Optional[list[str]] = None
    ids: Optional[list[str]] = None

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        self.Y = np.asarray(self.Y, dtype=float)
        if self.X.ndim != 2 or self.Y.ndim != 2:
            raise DimensionError("X and Y must be 2-d")
        if self.X.shape[0] != self.Y.shape[0]:
            raise DimensionError(f"X has {self.X.shape[0]} rows but Y has {self.Y.shape[0]}")
        if self.X.shape[1] < 1 or self.Y.shape[1] < 1:
            raise DimensionError("need P >= 1 and K >= 1")
        if self.groups.K != self.Y.shape[1]:
            raise DimensionError(f"groups cover {self.groups.K} responses but Y has {self.Y.shape[1]}")
        if not (np.all(np.isfinite(self.X)) and np.all(np.isfinite(self.Y))):
            raise ValueError("X and Y must be finite")
        if self.feature_names is None:
            self.feature_names = [f"x{j + 1}" for j in range(self.P)]
        if self.target_names is None:
            self.target_names = [f"y{k + 1}" for k in range(self.K)]

    @property
    def N(self) -> int:
        return self.X.shape[0]

    @property
    def P(self) -> int:
        return self.X.shape[1]

    @property
    def K(self) -> int:
        return self.Y.shape[1]

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return self.N, self.P, self.K, self.groups.M

    # Sufficient statistics reused by every sweep.  Datasets are treated as
    # immutable once built.
    @cached_property
    def xtx(self) -> np.ndarray:
        return self.X.T @ self.X

    @cached_property
    def xty(self) -> np.ndarray:
        return self.X.T @ self.Y

    @cached_property
    def xtx_eig(self) -> tuple[np.ndarray, np.ndarray]:
        w, U = np.linalg.eigh(self.xtx)
        return np.clip(w, 0.0, None), U

    def with_responses(self, Y) -> Dataset:
        """Same predictors (and their cached statistics) with new responses."""
        out = Dataset.__new__(Dataset)
        out.__dict__.update({k: v for k, v in self.__dict__.items() if k not in ("Y", "xty")})
        out.Y = np.asarray(Y, dtype=float)
        if out.Y.shape != self.Y.shape:
            raise DimensionError(f"Y must have shape {self.Y.shape}")
        return out

    def subset(self, rows) -> Dataset:
        rows = np.asarray(rows)
        ids = None if self.ids is None else [self.ids[i] for i in rows]
        return Dataset(self.X[rows], self.Y[rows], self.groups,
                       list(self.feature_names), list(self.target_names), ids)


@dataclass(frozen=True)
class TruncationAdaptation:
    """Settings for adaptive truncation of the two infinite ranks.

    Adaptation is attempted at iteration ``t`` with probability
    ``exp(alpha0 + alpha1 * t)``.  ``burn_freeze=None`` means "freeze at the
    end of burn-in".  ``max_rank_*=None`` caps ranks at ``min(P, K)`` for the
    regression and ``K`` for the noise model.
    """

    alpha0: float = -1.0
    alpha1: float = -5e-4
    epsilon: float = 1e-4
    burn_freeze: Optional[int] = None
    max_rank_1: Optional[int] = None
    max_rank_2: Optional[int] = None

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be > 0")
        if self.alpha0 > 0 or not self.alpha1 < 0:
            raise ValueError("need alpha0 <= 0 and alpha1 < 0 so the adaptation probability stays in (0, 1]")

    def probability(self, it: int) -> float:
        return float(np.exp(self.alpha0 + self.alpha1 * it))


@dataclass(frozen=True)
class Hyperparameters:
    a1: float = 2.1
    a2: float = 3.1
    a3: float = 2.1
    a4: float = 3.1
    nu: float = 5.0
    a_sigma: float = 1.0
    b_sigma: float = 0.3
    sample_hyper_shapes: bool = False
    rank_init_1: int = 5
    rank_init_2: int = 5
    adapt: Optional[TruncationAdaptation] = field(default_factory=TruncationAdaptation)

    def __post_init__(self):
        if not self.a1 > 2:
            raise ValueError(f"a1 must be > 2 (got {self.a1})")
        if not self.a2 > 3:
            raise ValueError(f"a2 must be > 3 (got {self.a2})")
        if not self.a3 > 2:
            raise ValueError(f"a3 must be > 2 (got {self.a3}); finite prior predictive variance needs a3>2 and a4>3")
        if not self.a4 > 3:
            raise ValueError(f"a4 must be > 3 (got {self.a4}); finite prior predictive variance needs a3>2 and a4>3")
        if not self.nu > 2:
            raise ValueError(f"nu must be > 2 (got {self.nu})")
        if not (self.a_sigma > 0 and self.b_sigma > 0):
            raise ValueError("a_sigma and b_sigma must be > 0")
        if self.rank_init_1 < 1 or self.rank_init_2 < 1:
            raise ValueError("initial ranks must be >= 1")

    @property
    def shapes(self) -> np.ndarray:
        return np.array([self.a1, self.a2, self.a3, self.a4])

    def with_(self, **kw) -> Hyperparameters:
        return replace(self, **kw)


class ModelVariant(NamedTuple):
    share_information: bool = True
    group_sparsity: bool = True
    use_noise_factors: bool = True

    @property
    def name(self) -> str:
        return VARIANT_NAMES.get(tuple(self), "custom")


SHARING = ModelVariant(True, True, True)
GROUP_SPARSE = ModelVariant(False, True, True)
SHRINKAGE = ModelVariant(False, False, True)
BLM_LIKE = ModelVariant(False, False, False)

VARIANT_NAMES = {
    tuple(SHARING): "sharing",
    tuple(GROUP_SPARSE): "group_sparse",
    tuple(SHRINKAGE): "shrinkage",
    tuple(BLM_LIKE): "blm_like",
}
VARIANTS = {v: ModelVariant(*k) for k, v in VARIANT_NAMES.items()}


@dataclass
class ModelState:
    """One Gibbs state.

    ``phi_gamma`` is always ``S1 x M``; without group sparsity its columns
    are equal.  ``shapes`` holds the current ``(a1, a2, a3, a4)``.
    """

    Psi: np.ndarray
    Gamma: np.ndarray
    H: np.ndarray
    Lambda: np.ndarray
    sigma2: np.ndarray
    phi_lambda: np.ndarray
    delta: np.ndarray
    delta_star: np.ndarray
    phi_gamma: np.ndarray
    shapes: np.ndarray

    @property
    def tau(self) -> np.ndarray:
        return np.cumprod(self.delta)

    @property
    def tau_star(self) -> np.ndarray:
        return np.cumprod(self.delta_star)

    @property
    def S1(self) -> int:
        return self.Psi.shape[1]

    @property
    def S2(self) -> int:
        return self.Lambda.shape[1]

    def copy(self) -> ModelState:
        return ModelState(**{k: np.array(v, copy=True) for k, v in self.__dict__.items()})

    def check(self, dims: Optional[tuple[int, int, int, int]] = None) -> None:
        """Raise if the state violates a shape or positivity invariant."""
        S1, S2 = self.S1, self.S2
        K = self.Gamma.shape[1]
        expect = {
            "Gamma": (S1, K), "Lambda": (K, S2), "sigma2": (K,), "phi_lambda": (K, S2),
            "delta": (S2,), "delta_star": (S1,), "shapes": (4,),
        }
        for name, shp in expect.items():
            if getattr(self, name).shape != shp:
                raise DimensionError(f"{name} has shape {getattr(self, name).shape}, expected {shp}")
        if self.H.shape[1] != S2:
            raise DimensionError(f"H has {self.H.shape[1]} columns, expected {S2}")
        if self.phi_gamma.shape[0] != S1:
            raise DimensionError(f"phi_gamma has {self.phi_gamma.shape[0]} rows, expected {S1}")
        if dims is not None:
            N, P, K_, M = dims
            if self.Psi.shape[0] != P or K != K_ or self.H.shape[0] != N or self.phi_gamma.shape[1] != M:
                raise DimensionError("state does not match data dimensions")
        for name in ("sigma2", "phi_lambda", "delta", "delta_star", "phi_gamma"):
            v = getattr(self, name)
            if not np.all(v > 0):
                raise NumericalError(f"{name} must be strictly positive")
        for name, v in self.__dict__.items():
            if not np.all(np.isfinite(v)):
                raise NumericalError(f"{name} has non-finite entries")


def _gamma(rng, shape, rate, size=None):
    return rng.gamma(shape, 1.0 / rate, size=size)


def implied_covariance(Lambda, sigma2) -> np.ndarray:
    """Marginal residual covariance ``Lambda Lambda^T + diag(sigma2)``."""
    Lambda = np.asarray(Lambda, dtype=float)
    sigma2 = np.asarray(sigma2, dtype=float)
    K = sigma2.shape[0]
    if Lambda.ndim != 2 or Lambda.shape[0] != K:
        raise DimensionError(f"Lambda must be {K} x S2, got {Lambda.shape}")
    if not np.all(sigma2 > 0):
        raise ValueError("sigma2 must be strictly positive")
    C = Lambda @ Lambda.T
    C[np.diag_indices(K)] += sigma2
    return 0.5 * (C + C.T)


def residual_correlation(Lambda, sigma2) -> np.ndarray:
    C = implied_covariance(Lambda, sigma2)
    s = 1.0 / np.sqrt(np.diag(C))
    R = C * s[:, None] * s[None, :]
    R = 0.5 * (R + R.T)
    np.fill_diagonal(R, 1.0)
    return R


def gamma_row_prior_cov(Sigma_star, phi_row, tau_star_j, groups: GroupPartition) -> np.ndarray:
    """Prior covariance of one row of ``Gamma``.

    Block ``(C_m, C_m)`` is ``Sigma_star[C_m, C_m] / (phi_row[m] * tau_star_j)``;
    cross-group blocks are zero.
    """
    Sigma_star = np.asarray(Sigma_star, dtype=float)
    phi_row = np.asarray(phi_row, dtype=float)
    if phi_row.shape != (groups.M,):
        raise DimensionError(f"phi_row must have length M={groups.M}")
    if not np.all(phi_row > 0):
        raise ValueError("phi_row must be strictly positive")
    if not tau_star_j > 0:
        raise ValueError("tau_star_j must be strictly positive")
    K = groups.K
    out = np.zeros((K, K))
    for m, idx in enumerate(groups.blocks):
        out[np.ix_(idx, idx)] = Sigma_star[np.ix_(idx, idx)] / (phi_row[m] * tau_star_j)
    return out


def predict_mean(X, Psi, Gamma) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != Psi.shape[0] or Psi.shape[1] != Gamma.shape[0]:
        raise DimensionError(
            f"cannot multiply X {X.shape} by Psi {Psi.shape} and Gamma {Gamma.shape}")
    return (X @ Psi) @ Gamma


def noise_correlation(state: ModelState, variant: ModelVariant) -> np.ndarray:
    """The correlation matrix entering the Gamma prior (identity without sharing)."""
    K = state.sigma2.shape[0]
    if not variant.share_information:
        return np.eye(K)
    return residual_correlation(state.Lambda, state.sigma2)


def contiguous_groups(K: int, M: int) -> GroupPartition:
    """Nearly equal-sized groups of consecutive responses."""
    if not 1 <= M <= K:
        raise DimensionError(f"need 1 <= M <= K, got M={M}, K={K}")
    chunks = np.array_split(np.arange(K), M)
    return GroupPartition(np.concatenate([np.full(c.size, m + 1) for m, c in enumerate(chunks)]))


def init_state(hyper: Hyperparameters, dims, rng, groups: Optional[GroupPartition] = None,
               variant: ModelVariant = SHARING, ranks: Optional[tuple[int, int]] = None) -> ModelState:
    """Draw a state from the joint prior at the initial truncation ranks.

    ``dims`` is ``(N, P, K, M)``.  Without ``groups`` the responses are split
    into ``M`` contiguous groups.  ``ranks`` overrides the initial ranks.
    """
    N, P, K, M = (int(d) for d in dims)
    if N < 0 or P < 1 or K < 1 or M < 1 or M > K:
        raise DimensionError(f"invalid dims (N, P, K, M) = {tuple(dims)}")
    if groups is None:
        groups = contiguous_groups(K, M)
    elif groups.K != K or groups.M != M:
        raise DimensionError("groups do not match dims")
    S1, S2 = ranks if ranks is not None else (hyper.rank_init_1, hyper.rank_init_2)
    if S1 < 1 or S2 < 1:
        raise ValueError("ranks must be >= 1")
    if not variant.use_noise_factors:
        S2 = 0
    a1, a2, a3, a4 = hyper.shapes
    nu = hyper.nu

    delta = draw_mgp_increments(rng, a1, a2, S2)
    tau = np.cumprod(delta)
    phi_lambda = _gamma(rng, nu / 2, nu / 2, (K, S2))
    Lambda = rng.standard_normal((K, S2)) / np.sqrt(phi_lambda * tau[None, :])
    sigma2 = 1.0 / _gamma(rng, hyper.a_sigma, hyper.b_sigma, K)
    H = rng.standard_normal((N, S2))

    delta_star = draw_mgp_increments(rng, a3, a4, S1)
    tau_star = np.cumprod(delta_star)
    Psi = rng.standard_normal((P, S1)) / np.sqrt(tau_star)[None, :]
    phi_gamma = draw_phi_gamma(rng, nu, S1, M, variant.group_sparsity)

    state = ModelState(Psi=Psi, Gamma=np.zeros((S1, K)), H=H, Lambda=Lambda, sigma2=sigma2,
                       phi_lambda=phi_lambda, delta=delta, delta_star=delta_star,
                       phi_gamma=phi_gamma, shapes=hyper.shapes)
    state.Gamma = draw_gamma_rows(state, groups, variant, rng)
    return state


def draw_mgp_increments(rng, first_shape, rest_shape, S, start=0) -> np.ndarray:
    """Shrinkage increments for positions ``start..start+S-1`` (0-based)."""
    shapes = np.where(np.arange(start, start + S) == 0, first_shape, rest_shape)
    return np.array([_gamma(rng, a, 1.0) for a in shapes], dtype=float)


def draw_phi_gamma(rng, nu, S1, M, group_sparsity) -> np.ndarray:
    if group_sparsity:
        return _gamma(rng, nu / 2, nu / 2, (S1, M))
    return np.repeat(_gamma(rng, nu / 2, nu / 2, (S1, 1)), M, axis=1)


def draw_gamma_rows(state: ModelState, groups: GroupPartition, variant: ModelVariant, rng,
                    rows=None) -> np.ndarray:
    """Prior draws of (a subset of) the rows of ``Gamma`` given everything else."""
    rows = np.arange(state.S1) if rows is None else np.asarray(rows)
    R = noise_correlation(state, variant)
    tau_star = state.tau_star
    K = R.shape[0]
    out = np.zeros((rows.size, K))
    for m, idx in enumerate(groups.blocks):
        L = cholesky_jitter(R[np.ix_(idx, idx)], "Gamma prior")
        z = rng.standard_normal((rows.size, idx.size))
        scale = 1.0 / np.sqrt(state.phi_gamma[rows, m] * tau_star[rows])
        out[:, idx] = (z @ L.T) * scale[:, None]
    return out


def cholesky_jitter(A, block: str, jitter: float = 1e-8) -> np.ndarray:
    """Lower Cholesky factor, retrying once with a diagonal ridge."""
    try:
        return np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        pass
    try:
        return np.linalg.cholesky(A + jitter * np.eye(A.shape[-1]))
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"Cholesky failed in the {block} block even with jitter") from exc


# Prior for sampled shape hyperparameters: (a - lower) ~ Ga(2, 1), keeping the
# moment conditions a1, a3 > 2 and a2, a4 > 3.
SHAPE_LOWER = np.array([2.0, 3.0, 2.0, 3.0])


def _gamma_logpdf(x, shape, rate):
    return shape * np.log(rate) - gammaln(shape) + (shape - 1) * np.log(x) - rate * x


def _normal_logpdf(x, prec):
    return 0.5 * (np.log(prec) - np.log(2 * np.pi)) - 0.5 * prec * x ** 2


def log_joint_density(state: ModelState, data: Dataset, hyper: Hyperparameters,
                      variant: ModelVariant = SHARING) -> float:
    """Log prior times likelihood at the current truncation.

    Residual variances enter through their precisions, which is the
    parameterisation the gamma prior is stated in.
    """
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        terms = _log_joint_terms(state, data, hyper, variant)
    for name, v in terms.items():
        if not np.isfinite(v):
            raise NumericalError(f"non-finite log density in the {name} factor")
    return float(sum(terms.values()))


def _log_joint_terms(state, data, hyper, variant) -> dict:
    a1, a2, a3, a4 = state.shapes
    nu = hyper.nu
    groups = data.groups
    terms = {}

    resid = data.Y - predict_mean(data.X, state.Psi, state.Gamma) - state.H @ state.Lambda.T
    prec = 1.0 / state.sigma2
    terms["likelihood"] = float(np.sum(_normal_logpdf(resid, prec[None, :])))
    terms["H"] = float(np.sum(_normal_logpdf(state.H, 1.0)))

    tau = state.tau
    terms["Lambda"] = float(np.sum(_normal_logpdf(state.Lambda, state.phi_lambda * tau[None, :])))
    terms["phi_lambda"] = float(np.sum(_gamma_logpdf(state.phi_lambda, nu / 2, nu / 2)))
    shp = np.where(np.arange(state.S2) == 0, a1, a2)
    terms["delta"] = float(np.sum(_gamma_logpdf(state.delta, shp, 1.0)))
    terms["sigma2"] = float(np.sum(_gamma_logpdf(prec, hyper.a_sigma, hyper.b_sigma)))

    tau_star = state.tau_star
    terms["Psi"] = float(np.sum(_normal_logpdf(state.Psi, tau_star[None, :])))
    shp = np.where(np.arange(state.S1) == 0, a3, a4)
    terms["delta_star"] = float(np.sum(_gamma_logpdf(state.delta_star, shp, 1.0)))
    phi = state.phi_gamma if variant.group_sparsity else state.phi_gamma[:, :1]
    terms["phi_gamma"] = float(np.sum(_gamma_logpdf(phi, nu / 2, nu / 2)))

    R = noise_correlation(state, variant)
    lg = 0.0
    for m, idx in enumerate(groups.blocks):
        L = cholesky_jitter(R[np.ix_(idx, idx)], "Gamma prior")
        logdet_R = 2.0 * np.sum(np.log(np.diag(L)))
        g = state.Gamma[:, idx]
        w = np.linalg.solve(L, g.T)  # L^{-1} g_h for each row h
        quad = np.sum(w ** 2, axis=0)
        s = state.phi_gamma[:, m] * tau_star
        d = idx.size
        lg += float(np.sum(0.5 * d * (np.log(s) - np.log(2 * np.pi)) - 0.5 * logdet_R - 0.5 * s * quad))
    terms["Gamma"] = lg

    if hyper.sample_hyper_shapes:
        u = state.shapes - SHAPE_LOWER
        terms["shapes"] = float(np.sum(np.log(u) - u)) if np.all(u > 0) else -np.inf

    return terms
