"""Model fusion: from local ARX models to one sparse polynomial NARX model."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Literal, Sequence

import numpy as np

from .core import (
    ArxModel,
    DivergenceError,
    FeatureDescriptor,
    FusionConfig,
    InsufficientDataError,
    NarxFusionError,
    PNarxModel,
    TimeSeries,
    as_float_array,
)
from .lifting import FeatureEvaluator, RegressionProblem, linear_descriptors, regression_block, stack
from .local_ident import local_excitation, simulate_arx
from .plants import DEFAULT_BOUND
from .sparse import CvReport, cross_validate, fit_at_lambda, refit_ols, select_features

log = logging.getLogger(__name__)


class FusionError(NarxFusionError):
    """Pipeline failure tagged with the stage it happened in."""

    def __init__(self, stage: str, cause: Exception):
        self.stage = stage
        self.cause = cause
        super().__init__(f"[{stage}] {cause}")


@dataclass(frozen=True, eq=False)
class FusionReport:
    n_s: int
    lam: float
    gamma: float
    cv: CvReport
    selected_features: list[str]
    beta_f: list[float]
    training_mse: list[dict[str, float]]
    problem_shape: tuple[int, int]

    def to_dict(self) -> dict[str, Any]:
        return {
            "n_s": self.n_s,
            "lambda": self.lam,
            "gamma": self.gamma,
            "cv_curve": {
                "lambdas": self.cv.lambdas.tolist(),
                "mse_mean": self.cv.mse_mean.tolist(),
                "mse_std": self.cv.mse_std.tolist(),
            },
            "selected_features": self.selected_features,
            "beta_f": self.beta_f,
            "per_op_mse": self.training_mse,
            "regression_shape": list(self.problem_shape),
        }

    def to_json(self, path: str | Path | None = None) -> str:
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            Path(path).write_text(text + "\n", encoding="utf-8")
        return text


def fusion_training_data(
    models: Sequence[ArxModel],
    config: FusionConfig,
    excitations: Sequence[Sequence[float]] | None = None,
) -> list[TimeSeries]:
    """Free-run every local model on its excitation (PRBS around its ``u_s`` by default)."""
    out = []
    for i, m in enumerate(models):
        if excitations is not None:
            u = as_float_array(excitations[i], f"excitation {i}")
        else:
            u = local_excitation(
                m.op, config.n_train, seed=config.seed + i,
                fraction=config.excitation_amplitude, floor=config.excitation_floor,
                switch_period=config.switch_period,
            )
        out.append(simulate_arx(m, u))
    return out


def build_problem(series: Sequence[TimeSeries], config: FusionConfig) -> RegressionProblem:
    return stack([
        regression_block(ts, config.n_y, config.n_u, config.degree, i) for i, ts in enumerate(series)
    ])


def fuse(
    models: Sequence[ArxModel],
    config: FusionConfig,
    excitations: Sequence[Sequence[float]] | None = None,
) -> tuple[PNarxModel, FusionReport]:
    """Fuse local linear models into one sparse polynomial NARX model.

    Simulates each local model, lifts the lagged data to polynomial features,
    stacks the blocks, picks lambda by contiguous-block cross-validation,
    selects the support from the full-data elastic-net fit and re-identifies
    the surviving coefficients by least squares.

    Raises
    ------
    ValueError
        If fewer than two models are given or two share an operating point.
    FusionError
        Wrapping any failure, with ``stage`` naming the step.
    """
    if len(models) < 2:
        raise ValueError(f"fusion needs at least two local models, got {len(models)}")
    ops = [(m.op.u_s, m.op.y_s) for m in models]
    if len(set(ops)) != len(ops):
        raise ValueError("local models must sit at distinct operating points")
    if excitations is not None and len(excitations) != len(models):
        raise ValueError("need one excitation per local model")

    stage = "simulate"
    try:
        series = fusion_training_data(models, config, excitations)
        stage = "lift"
        problem = build_problem(series, config)
        stage = "cross-validate"
        cv = cross_validate(
            problem, config.gamma, config.cv_folds,
            grid_size=config.lambda_count, ratio=config.lambda_ratio,
            tol=config.tol, max_sweeps=config.max_sweeps,
        )
        stage = "select"
        fit, st = fit_at_lambda(problem, config.gamma, cv.lambdas, cv.chosen_lambda,
                                tol=config.tol, max_sweeps=config.max_sweeps)
        selected = select_features(fit, problem.descriptors, config.epsilon_sel)
        stage = "refit"
        idx = [problem.descriptors.index(d) for d in selected]
        ols = refit_ols(problem.Y, problem.Z[:, idx])
    except (NarxFusionError, ValueError, np.linalg.LinAlgError) as exc:
        if isinstance(exc, FusionError):
            raise
        raise FusionError(stage, exc) from exc

    model = PNarxModel(tuple(selected), tuple(ols.beta), (config.n_y, config.n_u))
    pred = problem.Z[:, idx] @ ols.beta
    per_op = []
    for i, rows in enumerate(problem.block_rows()):
        per_op.append({
            "op": i,
            "u_s": models[i].op.u_s,
            "y_s": models[i].op.y_s,
            "mse": float(np.mean((problem.Y[rows] - pred[rows]) ** 2)),
        })
    report = FusionReport(
        n_s=model.n_s, lam=cv.chosen_lambda, gamma=config.gamma, cv=cv,
        selected_features=[d.name for d in selected], beta_f=[float(b) for b in ols.beta],
        training_mse=per_op, problem_shape=problem.Z.shape,
    )
    log.info("fused model: n_s=%d, lambda=%.4g", model.n_s, cv.chosen_lambda)
    return model, report


def simulate_pnarx(
    model: PNarxModel,
    u: Sequence[float],
    y_init: Sequence[float],
    *,
    bound: float = DEFAULT_BOUND,
    dt: float = 1.0,
) -> TimeSeries:
    """Free-run ``model``: the first ``len(y_init)`` outputs are the seed history.

    ``y_init`` must cover ``max(n_y, n_u)`` samples so that every lag of ``u``
    and ``y`` exists for the first predicted sample. Predictions are fed back
    as lagged outputs.
    """
    u = as_float_array(u, "u")
    y0 = as_float_array(y_init, "y_init")
    n_y, n_u = model.lags
    m = y0.size
    if m < model.max_lag:
        raise InsufficientDataError(f"initial history of {m} samples does not cover max lag {model.max_lag}")
    if u.size < m:
        raise InsufficientDataError("input is shorter than the initial history")
    ev = FeatureEvaluator(model.features, n_y, n_u)
    beta = np.asarray(model.coefficients)
    y = np.empty(u.size)
    y[:m] = y0
    hist = np.empty(n_y + n_u)
    for k in range(m, u.size):
        hist[:n_y] = y[k - 1 : k - n_y - 1 : -1] if k - n_y - 1 >= 0 else y[k - 1 :: -1][:n_y]
        hist[n_y:] = u[k - 1 : k - n_u - 1 : -1] if k - n_u - 1 >= 0 else u[k - 1 :: -1][:n_u]
        yk = float(ev(hist) @ beta)
        if not abs(yk) <= bound:
            raise DivergenceError(k, yk, bound)
        y[k] = yk
    return TimeSeries(u=u, y=y, dt=dt)


def one_step_predict(model: PNarxModel, truth: TimeSeries) -> np.ndarray:
    """One-step-ahead predictions using measured lags; seed samples copied from ``truth``."""
    n_y, n_u = model.lags
    m = model.max_lag
    ev = FeatureEvaluator(model.features, n_y, n_u)
    beta = np.asarray(model.coefficients)
    y, u = truth.y, truth.u
    pred = y.copy()
    for k in range(m, len(truth)):
        hist = np.concatenate([y[k - n_y : k][::-1], u[k - n_u : k][::-1]])
        pred[k] = float(ev(hist) @ beta)
    return pred


def arx_as_pnarx(model: ArxModel, n_y: int | None = None, n_u: int | None = None) -> PNarxModel:
    """Absolute-unit linear p-NARX equivalent of a local ARX model."""
    n_y = n_y or model.n_a
    n_u = n_u or model.max_input_lag
    op = model.op
    lin = linear_descriptors(model.n_a, model.max_input_lag)
    feats = [FeatureDescriptor.intercept()] + lin[: model.n_a]
    coefs = [op.y_s * (1.0 - sum(model.a)) - op.u_s * sum(model.b)] + list(model.a)
    for j, bj in enumerate(model.b, start=1):
        feats.append(lin[model.n_a + model.delay + j - 1])
        coefs.append(bj)
    return PNarxModel(tuple(feats), tuple(coefs), (max(n_y, model.n_a), max(n_u, model.max_input_lag)))


def predict(
    model: PNarxModel | ArxModel,
    truth: TimeSeries,
    mode: Literal["free_run", "one_step"] = "free_run",
) -> np.ndarray:
    """Predicted output trace aligned with ``truth``.

    Local ARX models are converted to their absolute-unit linear form so both
    model kinds start from the same measured history.
    """
    if isinstance(model, ArxModel):
        model = arx_as_pnarx(model)
    m = model.max_lag
    if len(truth) <= m:
        raise InsufficientDataError(f"validation data need more than {m} samples")
    if mode == "free_run":
        return simulate_pnarx(model, truth.u, truth.y[:m]).y
    if mode == "one_step":
        return one_step_predict(model, truth)
    raise ValueError(f"unknown validation mode {mode!r}")


def mse(y: Sequence[float], y_hat: Sequence[float]) -> float:
    y = np.asarray(y, dtype=float)
    y_hat = np.asarray(y_hat, dtype=float)
    if y.shape != y_hat.shape:
        raise ValueError(f"length mismatch: {y.shape} vs {y_hat.shape}")
    return float(np.mean((y - y_hat) ** 2))


def validate(
    model: PNarxModel | ArxModel,
    truth: TimeSeries,
    mode: Literal["free_run", "one_step"] = "free_run",
) -> float:
    """Mean squared prediction error over the whole validation record.

    The first ``max_lag`` samples seed the model and count with zero error.
    """
    return mse(truth.y, predict(model, truth, mode))
