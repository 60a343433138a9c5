"""Lagged regressors, polynomial lifting and stacking across operating points."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from itertools import combinations_with_replacement
from math import comb
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import (
    INPUT,
    OUTPUT,
    FeatureDescriptor,
    InsufficientDataError,
    Term,
    TimeSeries,
)


def linear_descriptors(n_y: int, n_u: int) -> list[FeatureDescriptor]:
    """``y[k-1] .. y[k-n_y], u[k-1] .. u[k-n_u]`` in column order."""
    return [FeatureDescriptor((Term(OUTPUT, i),)) for i in range(1, n_y + 1)] + [
        FeatureDescriptor((Term(INPUT, j),)) for j in range(1, n_u + 1)
    ]


def build_lagged(
    data: TimeSeries, n_y: int, n_u: int
) -> tuple[np.ndarray, np.ndarray, list[FeatureDescriptor]]:
    """Targets and linear regressor rows for ``k = max(n_y, n_u) .. N-1``.

    Rows with incomplete history are dropped.
    """
    n = len(data)
    m = max(n_y, n_u)
    if n <= m:
        raise InsufficientDataError(f"series of length {n} is too short for lags (n_y={n_y}, n_u={n_u})")
    y, u = data.y, data.u
    cols = [y[m - i : n - i] for i in range(1, n_y + 1)]
    cols += [u[m - j : n - j] for j in range(1, n_u + 1)]
    return y[m:].copy(), np.column_stack(cols), linear_descriptors(n_y, n_u)


def lift_polynomial(
    rows: np.ndarray, descriptors: Sequence[FeatureDescriptor], degree: int = 2
) -> tuple[np.ndarray, list[FeatureDescriptor]]:
    """Prepend an intercept and append every monomial of total degree 2..``degree``.

    Monomials come from ``combinations_with_replacement`` over the linear
    columns, so each appears once and in canonical order.
    """
    if degree < 1:
        raise ValueError(f"degree must be >= 1, got {degree}")
    rows = np.asarray(rows, dtype=float)
    if rows.ndim != 2 or rows.shape[1] != len(descriptors):
        raise ValueError("rows and descriptors do not line up")
    n_l = rows.shape[1]
    out_cols = [np.ones(rows.shape[0])] + [rows[:, i] for i in range(n_l)]
    out_desc = [FeatureDescriptor.intercept()] + list(descriptors)
    for q in range(2, degree + 1):
        for combo in combinations_with_replacement(range(n_l), q):
            col = rows[:, combo[0]].copy()
            for idx in combo[1:]:
                col = col * rows[:, idx]
            out_cols.append(col)
            out_desc.append(
                FeatureDescriptor(tuple(t for idx in combo for t in descriptors[idx].terms))
            )
    return np.column_stack(out_cols), out_desc


def n_features(n_l: int, degree: int = 2) -> int:
    """Non-constant column count after lifting ``n_l`` linear features."""
    return sum(comb(n_l + q - 1, q) for q in range(1, degree + 1))


@dataclass(frozen=True, eq=False)
class RegressionProblem:
    """Stacked regression ``Y ≈ Z beta`` with a column legend and row provenance."""

    Y: np.ndarray
    Z: np.ndarray
    descriptors: tuple[FeatureDescriptor, ...]
    provenance: np.ndarray

    def __post_init__(self) -> None:
        Y = np.asarray(self.Y, dtype=float).ravel()
        Z = np.asarray(self.Z, dtype=float)
        prov = np.asarray(self.provenance, dtype=int).ravel()
        if Z.ndim != 2 or Z.shape[0] != Y.size or prov.size != Y.size:
            raise ValueError("Y, Z and provenance rows do not line up")
        if Z.shape[1] != len(self.descriptors):
            raise ValueError("Z columns and descriptors do not line up")
        if not (np.all(np.isfinite(Y)) and np.all(np.isfinite(Z))):
            raise ValueError("regression data contain non-finite values")
        for arr in (Y, Z, prov):
            arr.setflags(write=False)
        object.__setattr__(self, "Y", Y)
        object.__setattr__(self, "Z", Z)
        object.__setattr__(self, "provenance", prov)
        object.__setattr__(self, "descriptors", tuple(self.descriptors))

    @property
    def n_rows(self) -> int:
        return self.Y.size

    @property
    def names(self) -> list[str]:
        return [d.name for d in self.descriptors]

    def block_rows(self) -> list[np.ndarray]:
        """Row indices of each operating-point block, in provenance order."""
        return [np.flatnonzero(self.provenance == i) for i in np.unique(self.provenance)]

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["op", "Y", *self.names])
            for i in range(self.n_rows):
                w.writerow([int(self.provenance[i]), f"{self.Y[i]:.12g}",
                            *(f"{v:.12g}" for v in self.Z[i])])


def regression_block(data: TimeSeries, n_y: int, n_u: int, degree: int = 2, op_index: int = 0) -> RegressionProblem:
    """Lagged, lifted block for one operating point."""
    Y, rows, desc = build_lagged(data, n_y, n_u)
    Z, full = lift_polynomial(rows, desc, degree)
    return RegressionProblem(Y, Z, tuple(full), np.full(Y.size, op_index))


def stack(blocks: Sequence[RegressionProblem]) -> RegressionProblem:
    """Row-concatenate per-OP blocks in order; block ``i`` gets provenance ``i``."""
    if not blocks:
        raise ValueError("nothing to stack")
    desc = blocks[0].descriptors
    for i, b in enumerate(blocks[1:], start=1):
        if b.descriptors != desc:
            raise ValueError(f"block {i} has a different feature legend than block 0")
    return RegressionProblem(
        np.concatenate([b.Y for b in blocks]),
        np.vstack([b.Z for b in blocks]),
        desc,
        np.concatenate([np.full(b.n_rows, i) for i, b in enumerate(blocks)]),
    )


class FeatureEvaluator:
    """Compiled evaluator for a fixed feature list.

    Each feature becomes an index/exponent list into a history vector laid out
    as ``[y[k-1] .. y[k-n_y], u[k-1] .. u[k-n_u]]``.
    """

    def __init__(self, features: Sequence[FeatureDescriptor], n_y: int, n_u: int):
        self.n_y, self.n_u = n_y, n_u
        self._plan: list[tuple[tuple[int, int], ...]] = []
        for f in features:
            if f.max_lag(OUTPUT) > n_y or f.max_lag(INPUT) > n_u:
                raise InsufficientDataError(f"history (n_y={n_y}, n_u={n_u}) does not cover {f.name}")
            self._plan.append(tuple(
                ((t.lag - 1) if t.variable == OUTPUT else (n_y + t.lag - 1), t.exponent)
                for t in f.terms
            ))

    def __call__(self, history: np.ndarray) -> np.ndarray:
        out = np.empty(len(self._plan))
        for i, plan in enumerate(self._plan):
            # repeated products in canonical order, matching lift_polynomial bit for bit
            v = 1.0
            for idx, exp in plan:
                h = history[idx]
                for _ in range(exp):
                    v *= h
            out[i] = v
        return out


def evaluate_features(
    features: Sequence[FeatureDescriptor],
    y_hist: Sequence[float],
    u_hist: Sequence[float],
) -> np.ndarray:
    """Value of each monomial given ``y_hist[i] = y[k-1-i]`` and ``u_hist[j] = u[k-1-j]``.

    Raises
    ------
    InsufficientDataError
        When a feature references a lag beyond the supplied history.
    """
    y_hist = np.asarray(y_hist, dtype=float).ravel()
    u_hist = np.asarray(u_hist, dtype=float).ravel()
    ev = FeatureEvaluator(features, y_hist.size, u_hist.size)
    return ev(np.concatenate([y_hist, u_hist]))
