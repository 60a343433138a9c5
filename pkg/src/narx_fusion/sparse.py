"""Elastic-net feature selection and least-squares re-identification.

The penalised problem solved here is::

    0.5 * ||Y - Z beta||^2 + lam * (gamma * ||beta_P||_1 + (1 - gamma) / 2 * ||beta_P||^2)

where ``P`` is the set of penalised columns (everything except the intercept).
Coordinate descent works on the Gram matrix, so one sweep costs ``O(p^2)``
regardless of the row count.
"""

from __future__ import annotations

import csv
import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, NamedTuple, Sequence

import numpy as np
from numba import njit

from .core import (
    ConvergenceError,
    EmptySelectionError,
    FeatureDescriptor,
    InsufficientDataError,
    NarxFusionError,
    RankDeficiencyError,
)
from .lifting import RegressionProblem

log = logging.getLogger(__name__)

DEFAULT_TOL = 1e-8
DEFAULT_MAX_SWEEPS = 100_000
DEFAULT_EPS_SEL = 1e-6
DEFAULT_GRID_SIZE = 100
DEFAULT_GRID_RATIO = 1e-4


@dataclass(frozen=True, eq=False)
class Standardization:
    """Column transform ``(Z - mean) / scale``; ``excluded`` marks zero-variance columns."""

    Z_std: np.ndarray
    mean: np.ndarray
    scale: np.ndarray
    excluded: np.ndarray
    intercept_index: int | None = None

    def apply(self, Z: np.ndarray) -> np.ndarray:
        out = (np.asarray(Z, dtype=float) - self.mean) / self.scale
        out[:, self.excluded] = 0.0
        return out

    def to_raw(self, beta_std: np.ndarray) -> np.ndarray:
        """Map standardized coefficients back to raw columns (intercept absorbs the shifts)."""
        beta = np.asarray(beta_std, dtype=float) / self.scale
        beta[self.excluded] = 0.0
        if self.intercept_index is not None:
            i = self.intercept_index
            mask = np.ones(beta.size, dtype=bool)
            mask[i] = False
            beta[i] = beta_std[i] - float(beta[mask] @ self.mean[mask])
        return beta

    @property
    def penalized(self) -> np.ndarray:
        pen = ~self.excluded
        if self.intercept_index is not None:
            pen[self.intercept_index] = False
        return pen


def standardize(Z: np.ndarray, intercept_index: int | None = None) -> Standardization:
    """Center and scale every non-intercept column to unit population std.

    Columns with zero variance are flagged in ``excluded``, zeroed in
    ``Z_std`` and kept out of penalisation and selection.
    """
    Z = np.asarray(Z, dtype=float)
    mean = Z.mean(axis=0)
    scale = Z.std(axis=0)
    excluded = scale <= 1e-12 * np.maximum(1.0, np.abs(mean))
    if intercept_index is not None:
        excluded[intercept_index] = False
        mean[intercept_index] = 0.0
        scale[intercept_index] = 1.0
    scale = np.where(excluded, 1.0, scale)
    Z_std = (Z - mean) / scale
    Z_std[:, excluded] = 0.0
    if np.any(excluded):
        log.info("excluding %d zero-variance column(s): %s", excluded.sum(), np.flatnonzero(excluded))
    return Standardization(Z_std, mean, scale, excluded, intercept_index)


@dataclass(frozen=True, eq=False)
class ElasticNetFit:
    beta: np.ndarray
    lam: float
    gamma: float
    n_iter: int
    converged: bool
    max_delta: float = 0.0
    objective_trace: np.ndarray | None = field(default=None, repr=False)

    def to_dict(self) -> dict[str, Any]:
        return {
            "beta": self.beta.tolist(),
            "lambda": self.lam,
            "gamma": self.gamma,
            "n_iter": self.n_iter,
            "converged": self.converged,
        }


@njit(cache=True)
def _cd_kernel(G, c, yy, beta, l1, l2, pen, act, tol, max_sweeps, trace):
    p = beta.size
    grad = G @ beta
    max_delta = 0.0
    for sweep in range(max_sweeps):
        max_delta = 0.0
        for j in range(p):
            if not act[j]:
                continue
            gjj = G[j, j]
            if gjj <= 0.0:
                continue
            rho = c[j] - grad[j] + gjj * beta[j]
            if pen[j]:
                if rho > l1:
                    new = (rho - l1) / (gjj + l2)
                elif rho < -l1:
                    new = (rho + l1) / (gjj + l2)
                else:
                    new = 0.0
            else:
                new = rho / gjj
            if not np.isfinite(new):
                return sweep + 1, False, max_delta, j
            d = new - beta[j]
            if d != 0.0:
                row = G[j]
                for k in range(p):
                    grad[k] += d * row[k]
                beta[j] = new
                ad = abs(d)
                if ad > max_delta:
                    max_delta = ad
        if trace.size > 0:
            obj = 0.5 * yy
            pen_sum = 0.0
            for k in range(p):
                obj += beta[k] * (0.5 * grad[k] - c[k])
                if pen[k]:
                    pen_sum += l1 * abs(beta[k]) + 0.5 * l2 * beta[k] * beta[k]
            trace[sweep] = obj + pen_sum
        if max_delta < tol:
            return sweep + 1, True, max_delta, -1
    return max_sweeps, False, max_delta, -1


class _Gram(NamedTuple):
    G: np.ndarray
    c: np.ndarray
    yy: float


def _gram(Y: np.ndarray, Z: np.ndarray) -> _Gram:
    Z = np.ascontiguousarray(Z, dtype=float)
    Y = np.asarray(Y, dtype=float).ravel()
    if not np.all(np.isfinite(Y)):
        raise NarxFusionError("non-finite value in the target vector")
    bad = np.flatnonzero(~np.all(np.isfinite(Z), axis=0))
    if bad.size:
        raise NarxFusionError(f"non-finite value in feature column {int(bad[0])}")
    return _Gram(np.ascontiguousarray(Z.T @ Z), Z.T @ Y, float(Y @ Y))


def _masks(p: int, penalized, active) -> tuple[np.ndarray, np.ndarray]:
    pen = np.ones(p, dtype=np.bool_) if penalized is None else np.asarray(penalized, dtype=np.bool_).copy()
    act = np.ones(p, dtype=np.bool_) if active is None else np.asarray(active, dtype=np.bool_).copy()
    if pen.size != p or act.size != p:
        raise ValueError("mask length does not match the number of columns")
    return pen, act


def _solve(gram: _Gram, lam, gamma, tol, max_sweeps, beta0, pen, act, track) -> ElasticNetFit:
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    if not 0.0 < gamma < 1.0:
        raise ValueError(f"gamma must lie strictly inside (0, 1), got {gamma}")
    p = gram.c.size
    beta = np.zeros(p) if beta0 is None else np.array(beta0, dtype=float).ravel()
    if beta.size != p:
        raise ValueError("warm start has the wrong length")
    beta[~act] = 0.0
    trace = np.full(max_sweeps if track else 0, np.nan)
    n_iter, converged, max_delta, bad = _cd_kernel(
        gram.G, gram.c, gram.yy, beta, lam * gamma, lam * (1.0 - gamma), pen, act,
        float(tol), int(max_sweeps), trace,
    )
    if bad >= 0:
        raise NarxFusionError(f"coordinate descent produced a non-finite value in column {bad}")
    return ElasticNetFit(
        beta=beta, lam=float(lam), gamma=float(gamma), n_iter=int(n_iter),
        converged=bool(converged), max_delta=float(max_delta),
        objective_trace=trace[:n_iter] if track else None,
    )


def coordinate_descent(
    Y: np.ndarray,
    Z_std: np.ndarray,
    lam: float,
    gamma: float,
    *,
    tol: float = DEFAULT_TOL,
    max_sweeps: int = DEFAULT_MAX_SWEEPS,
    beta0: np.ndarray | None = None,
    penalized: Sequence[bool] | None = None,
    active: Sequence[bool] | None = None,
    track_objective: bool = False,
) -> ElasticNetFit:
    """Cyclic coordinate descent for the elastic net.

    Each update is ``beta_j <- S(rho_j, lam*gamma) / (c_j + lam*(1-gamma))``
    for penalised columns and ``rho_j / c_j`` for unpenalised ones, where
    ``rho_j`` is the partial-residual correlation and ``c_j = ||z_j||^2``.
    Iteration stops once the largest coefficient change in a sweep is below
    ``tol``. Columns outside ``active`` stay at zero.
    """
    Z_std = np.asarray(Z_std, dtype=float)
    pen, act = _masks(Z_std.shape[1], penalized, active)
    return _solve(_gram(Y, Z_std), lam, gamma, tol, max_sweeps, beta0, pen, act, track_objective)


def elastic_net_objective(Y, Z, beta, lam, gamma, penalized=None) -> float:
    pen, _ = _masks(np.shape(Z)[1], penalized, None)
    r = np.asarray(Y, dtype=float) - np.asarray(Z, dtype=float) @ beta
    bp = np.asarray(beta)[pen]
    return float(0.5 * r @ r + lam * (gamma * np.abs(bp).sum() + 0.5 * (1.0 - gamma) * bp @ bp))


def kkt_residuals(Y, Z, fit: ElasticNetFit, penalized=None) -> np.ndarray:
    """Per-column violation of the optimality conditions (0 when satisfied exactly).

    For ``beta_j = 0``: ``max(0, |rho_j - lam(1-gamma) beta_j| - lam*gamma)``;
    otherwise the absolute stationarity residual. Unpenalised columns use the
    plain gradient.
    """
    Z = np.asarray(Z, dtype=float)
    pen, _ = _masks(Z.shape[1], penalized, None)
    beta = fit.beta
    grad = Z.T @ (np.asarray(Y, dtype=float) - Z @ beta)  # rho_j - c_j beta_j
    l1, l2 = fit.lam * fit.gamma, fit.lam * (1.0 - fit.gamma)
    out = np.abs(grad).astype(float)
    for j in np.flatnonzero(pen):
        if beta[j] == 0.0:
            out[j] = max(0.0, abs(grad[j] - l2 * beta[j]) - l1)
        else:
            out[j] = abs(grad[j] - l2 * beta[j] - l1 * np.sign(beta[j]))
    return out


def lambda_path(
    Y: np.ndarray,
    Z_std: np.ndarray,
    gamma: float,
    grid_size: int = DEFAULT_GRID_SIZE,
    *,
    ratio: float = DEFAULT_GRID_RATIO,
    penalized: Sequence[bool] | None = None,
) -> np.ndarray:
    """Descending log-spaced grid from ``lambda_max`` down to ``ratio * lambda_max``.

    ``lambda_max = max_j |z_j^T r| / gamma`` is the smallest penalty that zeros
    every penalised coefficient; ``r`` is ``Y`` after regressing out the
    unpenalised columns. A degenerate (all-zero) residual yields ``[0.0]``.
    """
    if grid_size < 2:
        raise ValueError(f"grid_size must be >= 2, got {grid_size}")
    Z_std = np.asarray(Z_std, dtype=float)
    Y = np.asarray(Y, dtype=float).ravel()
    pen, _ = _masks(Z_std.shape[1], penalized, None)
    r = Y
    if np.any(~pen):
        Zu = Z_std[:, ~pen]
        coef, *_ = np.linalg.lstsq(Zu, Y, rcond=None)
        r = Y - Zu @ coef
    corr = np.abs(Z_std[:, pen].T @ r)
    if corr.size == 0 or not np.any(corr > 0):
        return np.array([0.0])
    # nudge past the exact threshold so rounding in the Gram products cannot
    # leave a 1e-17 coefficient alive at the first grid point
    lam_max = float(corr.max()) / gamma * (1.0 + 1e-10)
    return lam_max * np.logspace(0.0, np.log10(ratio), grid_size)


def elastic_net_path(
    Y: np.ndarray,
    Z_std: np.ndarray,
    lambdas: Sequence[float],
    gamma: float,
    *,
    tol: float = DEFAULT_TOL,
    max_sweeps: int = DEFAULT_MAX_SWEEPS,
    penalized=None,
    active=None,
) -> list[ElasticNetFit]:
    """Warm-started fits along ``lambdas`` (expected in descending order)."""
    Z_std = np.asarray(Z_std, dtype=float)
    pen, act = _masks(Z_std.shape[1], penalized, active)
    gram = _gram(Y, Z_std)
    fits = []
    beta = None
    for lam in lambdas:
        fit = _solve(gram, lam, gamma, tol, max_sweeps, beta, pen, act, False)
        if not fit.converged:
            log.warning("coordinate descent hit max_sweeps=%d at lambda=%.4g (last change %.3g)",
                        max_sweeps, lam, fit.max_delta)
        fits.append(fit)
        beta = fit.beta
    return fits


@dataclass(frozen=True, eq=False)
class CvReport:
    lambdas: np.ndarray
    mse_mean: np.ndarray
    mse_std: np.ndarray
    mse_folds: np.ndarray
    chosen_index: int
    folds: list[list[tuple[int, int]]]

    @property
    def chosen_lambda(self) -> float:
        return float(self.lambdas[self.chosen_index])

    @property
    def k(self) -> int:
        return self.mse_folds.shape[0]

    def to_dict(self) -> dict[str, Any]:
        return {
            "lambdas": self.lambdas.tolist(),
            "mse_mean": self.mse_mean.tolist(),
            "mse_std": self.mse_std.tolist(),
            "mse_folds": self.mse_folds.tolist(),
            "chosen_lambda": self.chosen_lambda,
            "chosen_index": self.chosen_index,
            "folds": [[list(r) for r in fold] for fold in self.folds],
            "fold_scheme": "contiguous slice of every operating-point block per fold",
        }

    def to_json(self, path: str | Path | None = None) -> str:
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            Path(path).write_text(text + "\n", encoding="utf-8")
        return text

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "CvReport":
        return cls(
            lambdas=np.array(d["lambdas"], dtype=float),
            mse_mean=np.array(d["mse_mean"], dtype=float),
            mse_std=np.array(d["mse_std"], dtype=float),
            mse_folds=np.array(d["mse_folds"], dtype=float),
            chosen_index=int(d["chosen_index"]),
            folds=[[tuple(r) for r in fold] for fold in d["folds"]],
        )

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["lambda", "mse_mean", "mse_std", *(f"fold_{i}" for i in range(self.k))])
            for i, lam in enumerate(self.lambdas):
                w.writerow([f"{lam:.12g}", f"{self.mse_mean[i]:.12g}", f"{self.mse_std[i]:.12g}",
                            *(f"{v:.12g}" for v in self.mse_folds[:, i])])


def contiguous_folds(problem: RegressionProblem, k: int) -> list[np.ndarray]:
    """Test-row indices per fold: fold ``f`` takes the ``f``-th contiguous slice of every block."""
    if k < 2:
        raise ValueError(f"need at least 2 folds, got {k}")
    folds: list[list[np.ndarray]] = [[] for _ in range(k)]
    for rows in problem.block_rows():
        for f, part in enumerate(np.array_split(rows, k)):
            if part.size == 0:
                raise InsufficientDataError(
                    f"fold {f} would get no rows from a block of {rows.size} rows (k={k})"
                )
            folds[f].append(part)
    return [np.concatenate(parts) for parts in folds]


def _intercept_index(descriptors: Sequence[FeatureDescriptor]) -> int | None:
    for i, d in enumerate(descriptors):
        if d.constant:
            return i
    return None


def cross_validate(
    problem: RegressionProblem,
    gamma: float,
    k: int = 3,
    grid: Sequence[float] | None = None,
    *,
    grid_size: int = DEFAULT_GRID_SIZE,
    ratio: float = DEFAULT_GRID_RATIO,
    tol: float = DEFAULT_TOL,
    max_sweeps: int = DEFAULT_MAX_SWEEPS,
) -> CvReport:
    """k-fold CV over a descending lambda grid with warm starts inside each fold.

    Each training split is standardized on its own rows; the held-out score is
    the one-step-ahead MSE on the raw targets. The chosen lambda minimises the
    mean score, preferring the largest lambda on ties.
    """
    icpt = _intercept_index(problem.descriptors)
    if grid is None:
        st = standardize(problem.Z, icpt)
        grid = lambda_path(problem.Y, st.Z_std, gamma, grid_size, ratio=ratio, penalized=st.penalized)
    lambdas = np.asarray(grid, dtype=float)
    test_sets = contiguous_folds(problem, k)
    mse = np.empty((k, lambdas.size))
    all_rows = np.arange(problem.n_rows)
    for f, test in enumerate(test_sets):
        train = np.setdiff1d(all_rows, test, assume_unique=True)
        st = standardize(problem.Z[train], icpt)
        fits = elastic_net_path(
            problem.Y[train], st.Z_std, lambdas, gamma, tol=tol, max_sweeps=max_sweeps,
            penalized=st.penalized, active=~st.excluded,
        )
        Zt = st.apply(problem.Z[test])
        Yt = problem.Y[test]
        for i, fit in enumerate(fits):
            mse[f, i] = float(np.mean((Yt - Zt @ fit.beta) ** 2))
    mean = mse.mean(axis=0)
    std = mse.std(axis=0)
    chosen = int(np.flatnonzero(mean == mean.min())[np.argmax(lambdas[mean == mean.min()])])
    blocks = problem.block_rows()
    fold_desc = []
    for test in test_sets:
        desc = []
        for rows in blocks:
            inter = np.intersect1d(rows, test)
            desc.append((int(inter[0]), int(inter[-1]) + 1))
        fold_desc.append(desc)
    return CvReport(lambdas, mean, std, mse, chosen, fold_desc)


def select_features(
    fit: ElasticNetFit,
    descriptors: Sequence[FeatureDescriptor],
    epsilon_sel: float = DEFAULT_EPS_SEL,
) -> list[FeatureDescriptor]:
    """Intercept plus every feature whose standardized ``|beta_j|`` exceeds ``epsilon_sel``.

    Raises
    ------
    EmptySelectionError
        If no non-constant feature survives (lambda too large).
    """
    if not fit.converged:
        warnings.warn(f"selecting from an unconverged fit (lambda={fit.lam:.4g})", RuntimeWarning)
    if len(descriptors) != fit.beta.size:
        raise ValueError("descriptor count does not match the coefficient vector")
    picked = [d for d, b in zip(descriptors, fit.beta) if not d.constant and abs(b) > epsilon_sel]
    if not picked:
        raise EmptySelectionError(f"no feature survives at lambda={fit.lam:.4g}; lambda is too large")
    icpt = [d for d in descriptors if d.constant]
    return icpt + picked


class OlsFit(NamedTuple):
    beta: np.ndarray
    residual_norm: float
    rank: int


def refit_ols(Y: np.ndarray, Z_f: np.ndarray) -> OlsFit:
    """Unpenalised least squares on the selected columns.

    Columns are scaled to unit norm before an SVD-based solve so that the rank
    test is not fooled by scale differences between monomials.

    Raises
    ------
    RankDeficiencyError
        If the selected columns are linearly dependent.
    """
    Z_f = np.asarray(Z_f, dtype=float)
    if Z_f.ndim == 1:
        Z_f = Z_f[:, None]
    Y = np.asarray(Y, dtype=float).ravel()
    norms = np.linalg.norm(Z_f, axis=0)
    if np.any(norms == 0):
        raise RankDeficiencyError(f"selected column(s) {np.flatnonzero(norms == 0)} are identically zero")
    coef, _, rank, sv = np.linalg.lstsq(Z_f / norms, Y, rcond=None)
    if rank < Z_f.shape[1]:
        raise RankDeficiencyError(
            f"selected columns have rank {rank} < {Z_f.shape[1]} (smallest singular value {sv[-1]:.3g})"
        )
    beta = coef / norms
    return OlsFit(beta, float(np.linalg.norm(Y - Z_f @ beta)), int(rank))


def fit_at_lambda(
    problem: RegressionProblem,
    gamma: float,
    lambdas: Sequence[float],
    lam: float,
    *,
    tol: float = DEFAULT_TOL,
    max_sweeps: int = DEFAULT_MAX_SWEEPS,
) -> tuple[ElasticNetFit, Standardization]:
    """Full-data fit at ``lam``, warm-started down the part of ``lambdas`` above it."""
    st = standardize(problem.Z, _intercept_index(problem.descriptors))
    path = [v for v in lambdas if v > lam] + [lam]
    fits = elastic_net_path(problem.Y, st.Z_std, path, gamma, tol=tol, max_sweeps=max_sweeps,
                            penalized=st.penalized, active=~st.excluded)
    fit = fits[-1]
    if not fit.converged:
        raise ConvergenceError(f"coordinate descent did not converge at lambda={lam:.4g}")
    return fit, st
