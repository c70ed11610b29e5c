"""Dataset ingestion, standardisation, CCA screening, splitting and synthetic data."""

from __future__ import annotations

from dataclasses import dataclass, asdict
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np
import pandas as pd

from .model import Dataset, DimensionError, GroupPartition, contiguous_groups


class DataFormatError(ValueError):
    pass


class Standardization(NamedTuple):
    x_mean: np.ndarray
    x_sd: np.ndarray
    y_mean: np.ndarray
    y_sd: np.ndarray


def _read_table(path, what: str) -> tuple[list[str], list[str], np.ndarray]:
    path = Path(path)
    try:
        df = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except FileNotFoundError:
        raise
    except Exception as exc:  # pandas raises several parser error types
        raise DataFormatError(f"{what} file {path}: {exc}") from exc
    if df.shape[1] < 2:
        raise DataFormatError(f"{what} file {path}: need an id column and at least one data column")
    ids = df.iloc[:, 0].tolist()
    body = df.iloc[:, 1:]
    values = body.apply(pd.to_numeric, errors="coerce")
    bad = values.isna().to_numpy()
    if bad.any():
        r, c = np.argwhere(bad)[0]
        raise DataFormatError(
            f"{what} file {path}: non-numeric cell {body.iat[r, c]!r} at data row {r + 1}, "
            f"column {body.columns[c]!r}")
    # pandas' fast float parser can be off by one ulp; numpy's is correctly rounded
    return ids, list(body.columns), body.to_numpy(dtype=str).astype(float)


def read_groups(path, target_names: Optional[list[str]] = None) -> GroupPartition:
    """Two-column CSV ``target_name, group_index`` (group indices 1..M)."""
    df = pd.read_csv(path, dtype=str, keep_default_na=False)
    if df.shape[1] != 2:
        raise DataFormatError(f"groups file {path}: expected 2 columns, found {df.shape[1]}")
    try:
        idx = df.iloc[:, 1].astype(int).to_numpy()
    except ValueError as exc:
        raise DataFormatError(f"groups file {path}: group indices must be integers") from exc
    names = df.iloc[:, 0].tolist()
    if target_names is not None:
        if sorted(names) != sorted(target_names) or len(names) != len(target_names):
            raise DataFormatError(f"groups file {path}: target names do not match the response columns")
        lookup = dict(zip(names, idx))
        idx = np.array([lookup[t] for t in target_names])
    try:
        return GroupPartition(idx)
    except ValueError as exc:
        raise DataFormatError(f"groups file {path}: {exc}") from exc


def load_dataset(x_path, y_path, groups_path=None) -> Dataset:
    """Read X, Y and (optionally) a group file; rows are aligned by id."""
    x_ids, x_names, X = _read_table(x_path, "X")
    y_ids, y_names, Y = _read_table(y_path, "Y")
    if len(x_ids) != len(y_ids):
        raise DataFormatError(f"X has {len(x_ids)} rows but Y has {len(y_ids)} rows")
    if x_ids != y_ids:
        pos = {v: i for i, v in enumerate(x_ids)}
        if len(pos) != len(x_ids) or set(pos) != set(y_ids):
            raise DataFormatError("X and Y ids do not match")
        X = X[[pos[i] for i in y_ids]]
    groups = read_groups(groups_path, y_names) if groups_path is not None else GroupPartition.single(len(y_names))
    return Dataset(X, Y, groups, x_names, y_names, list(y_ids))


def write_table(path, ids, names, values) -> None:
    df = pd.DataFrame(np.asarray(values), columns=list(names))
    df.insert(0, "id", list(ids))
    df.to_csv(path, index=False, float_format="%.17g")


def write_groups(path, target_names, groups: GroupPartition) -> None:
    pd.DataFrame({"target": list(target_names), "group": groups.assignments}).to_csv(path, index=False)


def save_dataset(dataset: Dataset, x_path, y_path, groups_path) -> None:
    ids = dataset.ids or [f"r{i + 1}" for i in range(dataset.N)]
    write_table(x_path, ids, dataset.feature_names, dataset.X)
    write_table(y_path, ids, dataset.target_names, dataset.Y)
    write_groups(groups_path, dataset.target_names, dataset.groups)


def _column_stats(A, names, what):
    mean = A.mean(axis=0)
    sd = A.std(axis=0, ddof=1) if A.shape[0] > 1 else np.zeros(A.shape[1])
    const = np.flatnonzero(~(sd > 0))
    if const.size:
        raise DataFormatError(f"{what} column {names[const[0]]!r} is constant; cannot standardize")
    return mean, sd


def standardize(dataset: Dataset, stats: Optional[Standardization] = None) -> tuple[Dataset, Standardization]:
    """Z-score every column (sample standard deviation, ``N - 1``).

    With ``stats`` the given means and deviations are applied instead, e.g.
    training statistics on test data.
    """
    if stats is None:
        xm, xs = _column_stats(dataset.X, dataset.feature_names, "predictor")
        ym, ys = _column_stats(dataset.Y, dataset.target_names, "response")
        stats = Standardization(xm, xs, ym, ys)
    X = (dataset.X - stats.x_mean) / stats.x_sd
    Y = (dataset.Y - stats.y_mean) / stats.y_sd
    out = Dataset(X, Y, dataset.groups, list(dataset.feature_names), list(dataset.target_names),
                  None if dataset.ids is None else list(dataset.ids))
    return out, stats


def cca_scores(X, Y, ridge: float = 1e-8) -> np.ndarray:
    """Canonical correlation of each single predictor with all of ``Y``.

    For one variable against a set this is the multiple correlation
    coefficient of regressing the predictor on ``Y``.
    """
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    Xc = X - X.mean(axis=0)
    Yc = Y - Y.mean(axis=0)
    # Scale-free in Y: work with its correlation structure.
    ysd = Yc.std(axis=0)
    ysd[ysd == 0] = 1.0
    Yc = Yc / ysd
    A = Yc.T @ Yc
    A[np.diag_indices_from(A)] += ridge * max(1.0, np.trace(A) / A.shape[0])
    B = Yc.T @ Xc
    explained = np.sum(B * np.linalg.solve(A, B), axis=0)
    total = np.sum(Xc ** 2, axis=0)
    r2 = np.divide(explained, total, out=np.zeros_like(total), where=total > 0)
    return np.sqrt(np.clip(r2, 0.0, 1.0))


def cca_screen(X, Y, m: int) -> np.ndarray:
    """Indices of the ``m`` predictors with the largest canonical correlation, descending."""
    X = np.asarray(X)
    if not 1 <= m <= X.shape[1]:
        raise ValueError(f"m must be in 1..{X.shape[1]}")
    scores = cca_scores(X, Y)
    order = np.argsort(-scores, kind="stable")
    return order[:m]


def split(dataset: Dataset, n_train: int, seed: int) -> tuple[Dataset, Dataset]:
    """Seeded random split into ``n_train`` training rows and the rest."""
    if not 1 <= n_train < dataset.N:
        raise ValueError(f"n_train must be in 1..{dataset.N - 1}")
    perm = np.random.default_rng(seed).permutation(dataset.N)
    return dataset.subset(np.sort(perm[:n_train])), dataset.subset(np.sort(perm[n_train:]))


@dataclass(frozen=True)
class SynthConfig:
    """Synthetic weak-effect data with planted low-rank effects and confounders.

    Effect directions in each response group are correlated like the
    residuals: planted ``Gamma`` rows have within-group covariance
    ``rho * R + (1 - rho) * I`` where ``R`` is the planted residual
    correlation and ``rho = group_effect_correlation``.
    """

    n_train: int = 2000
    n_test: int = 2000
    P: int = 50
    K: int = 16
    M: int = 4
    true_rank: int = 2
    effect_variance_fraction: float = 0.01
    confounder_rank: int = 3
    confounder_variance_fraction: float = 0.5
    group_effect_correlation: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.effect_variance_fraction < 1:
            raise ValueError("effect_variance_fraction must be in [0, 1)")
        if not 0 <= self.confounder_variance_fraction < 1:
            raise ValueError("confounder_variance_fraction must be in [0, 1)")
        if not 0 <= self.group_effect_correlation <= 1:
            raise ValueError("group_effect_correlation must be in [0, 1]")
        if not 1 <= self.M <= self.K:
            raise ValueError("need 1 <= M <= K")
        if self.true_rank < 0 or self.true_rank > min(self.P, self.K):
            raise ValueError(f"true_rank must be in 0..min(P, K) = {min(self.P, self.K)}")
        if self.confounder_rank < 0 or self.confounder_rank > self.K:
            raise ValueError("confounder_rank must be in 0..K")
        if self.n_train < 2 or self.n_test < 1:
            raise ValueError("need n_train >= 2 and n_test >= 1")

    @property
    def N(self) -> int:
        return self.n_train + self.n_test

    def to_dict(self) -> dict:
        return asdict(self)


class SynthTruth(NamedTuple):
    Theta: np.ndarray
    Psi: np.ndarray
    Gamma: np.ndarray
    Lambda: np.ndarray
    sigma2: np.ndarray


def synth_generate(config: SynthConfig) -> tuple[Dataset, Dataset, SynthTruth]:
    c = config
    rng = np.random.default_rng(c.seed)
    K, P, N = c.K, c.P, c.N
    f = c.effect_variance_fraction
    groups = contiguous_groups(K, c.M)

    resid_var = 1.0 - f
    if c.confounder_rank > 0:
        Lambda = rng.standard_normal((K, c.confounder_rank))
        Lambda *= np.sqrt(c.confounder_variance_fraction * resid_var / np.sum(Lambda ** 2, axis=1))[:, None]
        sigma2 = np.full(K, (1.0 - c.confounder_variance_fraction) * resid_var)
    else:
        Lambda = np.zeros((K, 0))
        sigma2 = np.full(K, resid_var)
    R = Lambda @ Lambda.T + np.diag(sigma2)
    d = 1.0 / np.sqrt(np.diag(R))
    R = R * d[:, None] * d[None, :]

    r = c.true_rank
    Psi = rng.standard_normal((P, r))
    Gamma = np.zeros((r, K))
    rho = c.group_effect_correlation
    for idx in groups.blocks:
        C = rho * R[np.ix_(idx, idx)] + (1 - rho) * np.eye(idx.size)
        Gamma[:, idx] = rng.standard_normal((r, idx.size)) @ np.linalg.cholesky(C).T
    Theta = Psi @ Gamma
    if f == 0 or r == 0:
        Theta = np.zeros((P, K))
    else:
        norms = np.sqrt(np.sum(Theta ** 2, axis=0))
        scale = np.sqrt(f) / norms
        Theta = Theta * scale[None, :]
        Gamma = Gamma * scale[None, :]

    X = rng.standard_normal((N, P))
    H = rng.standard_normal((N, Lambda.shape[1]))
    E = rng.standard_normal((N, K)) * np.sqrt(sigma2)[None, :]
    Y = X @ Theta + H @ Lambda.T + E

    ids = [f"s{i + 1}" for i in range(N)]
    full = Dataset(X, Y, groups, [f"x{j + 1}" for j in range(P)], [f"y{k + 1}" for k in range(K)], ids)
    train = full.subset(np.arange(c.n_train))
    test = full.subset(np.arange(c.n_train, N))
    return train, test, SynthTruth(Theta, Psi, Gamma, Lambda, sigma2)
