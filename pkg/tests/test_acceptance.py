"""Acceptance criteria 1-8, each checked at its stated tolerance and time budget."""

import math
import time

import numpy as np

from narx_fusion.core import FeatureDescriptor, FusionConfig, TimeSeries, to_json
from narx_fusion.experiment import load_case, run_experiment
from narx_fusion.fusion import build_problem, fuse, fusion_training_data
from narx_fusion.lifting import RegressionProblem, build_lagged, lift_polynomial, regression_block
from narx_fusion.local_ident import make_local_models
from narx_fusion.plants import ConicalTankPlant, ToyNarxPlant, gen_prbs, solve_steady_state
from narx_fusion.sparse import (
    coordinate_descent,
    cross_validate,
    elastic_net_objective,
    fit_at_lambda,
    kkt_residuals,
    lambda_path,
    refit_ols,
    select_features,
)
F = FeatureDescriptor.of


def _columns(n_y, n_u):
    ts = TimeSeries(u=np.arange(20.0), y=np.sin(np.arange(20.0)))
    _, rows, desc = build_lagged(ts, n_y, n_u)
    _, full = lift_polynomial(rows, desc, 2)
    return len(full) - 1


def test_criterion_1_feature_counts(criterion):
    t0 = time.perf_counter()
    c33, c22 = _columns(3, 3), _columns(2, 2)
    elapsed = time.perf_counter() - t0
    criterion(1, c33 == 27 and c22 == 14 and elapsed < 1.0,
              f"n_y=n_u=3 -> {c33} columns, n_l=4 -> {c22} ({elapsed * 1e3:.1f} ms)")


def test_criterion_2_steady_states(criterion):
    t0 = time.perf_counter()
    toy = ToyNarxPlant()
    y1 = solve_steady_state(toy, 0.1).y_s
    y3 = solve_steady_state(toy, 0.3).y_s
    tank = ConicalTankPlant()
    worst = max(abs(solve_steady_state(tank, tank.C_d * math.sqrt(h)).y_s - h) for h in (4, 5, 7.5, 8.5, 10, 11))
    elapsed = time.perf_counter() - t0
    ok = abs(y1 - 0.3146) <= 5e-4 and abs(y3 - 0.6735) <= 5e-4 and worst <= 1e-8 and elapsed < 1.0
    criterion(2, ok, f"toy y_s(0.1)={y1:.5f}, y_s(0.3)={y3:.5f}, tank inversion error {worst:.1e} "
                     f"({elapsed:.2f} s)")


def test_criterion_3_solver_oracles(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    ols_err = ridge_err = kkt_worst = 0.0
    tol = 1e-8
    for _ in range(20):
        n, p = int(rng.integers(15, 51)), int(rng.integers(2, 11))
        Z = rng.normal(size=(n, p))
        Z /= np.linalg.norm(Z, axis=0)
        Y = Z @ (rng.normal(size=p) * (rng.random(p) < 0.6)) + 0.05 * rng.normal(size=n)

        fit0 = coordinate_descent(Y, Z, 0.0, 0.5, tol=1e-13)
        ols = np.linalg.lstsq(Z, Y, rcond=None)[0]
        ols_err = max(ols_err, np.max(np.abs(fit0.beta - ols)))

        lam, g = float(rng.uniform(0.01, 2.0)), 1e-6
        ridge = np.linalg.solve(Z.T @ Z + lam * (1 - g) * np.eye(p), Z.T @ Y)
        ridge_err = max(ridge_err, np.max(np.abs(coordinate_descent(Y, Z, lam, g, tol=1e-13).beta - ridge)))

        gamma = float(rng.uniform(0.1, 0.9))
        lam = float(rng.uniform(0.01, 1.0)) * lambda_path(Y, Z, gamma, 2)[0]
        fit = coordinate_descent(Y, Z, lam, gamma, tol=tol)
        kkt_worst = max(kkt_worst, np.max(kkt_residuals(Y, Z, fit)) / (10 * tol))
    elapsed = time.perf_counter() - t0
    ok = ols_err <= 1e-6 and ridge_err <= 1e-4 and kkt_worst <= 1.0 and elapsed < 10
    criterion(3, ok, f"OLS gap {ols_err:.1e}, ridge gap {ridge_err:.1e}, "
                     f"worst KKT residual {kkt_worst:.2f} x 10 tol ({elapsed:.2f} s)")


def test_criterion_4_realizable_recovery(criterion):
    t0 = time.perf_counter()
    toy = ToyNarxPlant()
    op = solve_steady_state(toy, 0.2)
    ts = toy.simulate_at(gen_prbs(448, 0.15, 0.2, seed=1), op)
    block = regression_block(ts, 3, 3, 2)
    support = [F(("y", 1)), F(("y", 2)), F(("y", 2, 2)), F(("y", 1), ("u", 1)), F(("u", 1)), F(("u", 2))]
    idx = [block.descriptors.index(d) for d in support]
    beta = refit_ols(block.Y, block.Z[:, idx]).beta
    err = np.max(np.abs(beta - [0.5, 0.25, -0.5, 0.1, 1.0, 0.25]))
    elapsed = time.perf_counter() - t0
    criterion(4, err <= 1e-6 and elapsed < 5, f"max coefficient error {err:.1e} ({elapsed:.2f} s)")


def test_criterion_5_toy_benchmark(criterion):
    t0 = time.perf_counter()
    res = run_experiment(load_case("toy"))
    mid = res.result_at(0.2)
    r1, r2 = mid.ratio("M1"), mid.ratio("M2")
    beats = all(r.mse["MF"] < min(r.mse["M1"], r.mse["M2"]) for r in res.results)
    elapsed = time.perf_counter() - t0
    worst = min(min(r.ratio("M1"), r.ratio("M2")) for r in res.results)
    criterion(5, r1 >= 20 and r2 >= 20 and beats and elapsed < 120,
              f"u_s=0.2 ratios {r1:.1f}, {r2:.1f}; smallest grid ratio {worst:.2f} ({elapsed:.1f} s)")


def test_criterion_6_tank_benchmark(criterion):
    t0 = time.perf_counter()
    res = run_experiment(load_case("tank"))
    mid = res.result_at(7.5)
    r1, r2 = mid.ratio("M1"), mid.ratio("M2")
    anchors = [res.result_at(h).mse["MF"] for h in (5.0, 10.0)]
    elapsed = time.perf_counter() - t0
    criterion(6, r1 >= 5 and r2 >= 5 and max(anchors) < 0.05 and elapsed < 300,
              f"h_s=7.5 ratios {r1:.1f}, {r2:.1f}; anchor fusion MSE {anchors[0]:.2e}, {anchors[1]:.2e} "
              f"({elapsed:.1f} s)")


def test_criterion_7_hw_case(criterion):
    t0 = time.perf_counter()
    res = run_experiment(load_case("hw"))
    r = res.result_at(0.5)
    elapsed = time.perf_counter() - t0
    criterion(7, r.mse["MF"] < r.mse["M1"] and r.mse["MF"] < r.mse["M2"] and elapsed < 60,
              f"u_s=0.5 MSE fusion {r.mse['MF']:.2e} vs {r.mse['M1']:.2e}, {r.mse['M2']:.2e} ({elapsed:.1f} s)")


def _toy_problem():
    toy = ToyNarxPlant()
    models = make_local_models(toy, [solve_steady_state(toy, 0.1), solve_steady_state(toy, 0.3)], length=448)
    cfg = FusionConfig()
    return models, cfg, build_problem(fusion_training_data(models, cfg), cfg)


def _selection(problem, cfg):
    cv = cross_validate(problem, cfg.gamma, cfg.cv_folds)
    fit, _ = fit_at_lambda(problem, cfg.gamma, cv.lambdas, cv.chosen_lambda)
    return {d.name for d in select_features(fit, problem.descriptors)}


def test_criterion_8_property_suites(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(8)

    monotone = dominance = True
    for _ in range(20):
        Z = rng.normal(size=(40, 8))
        Y = Z @ (rng.normal(size=8) * (rng.random(8) < 0.5)) + 0.1 * rng.normal(size=40)
        gamma = float(rng.uniform(0.1, 0.9))
        lam = float(rng.uniform(0.01, 0.5)) * lambda_path(Y, Z, gamma, 2)[0]
        beta = np.zeros(8)
        prev = elastic_net_objective(Y, Z, beta, lam, gamma)
        for _ in range(30):
            beta = coordinate_descent(Y, Z, lam, gamma, max_sweeps=1, beta0=beta).beta
            obj = elastic_net_objective(Y, Z, beta, lam, gamma)
            monotone &= obj <= prev + 1e-12 * abs(prev)
            prev = obj
        support = np.flatnonzero(beta)
        if support.size:
            Zf = Z[:, support]
            dominance &= refit_ols(Y, Zf).residual_norm ** 2 <= np.sum((Y - Zf @ beta[support]) ** 2) * (1 + 1e-12)

    models, cfg, prob = _toy_problem()
    base = _selection(prob, cfg)
    equivariant = True
    for col, factor in ((3, 7.5), (12, 0.02), (27, 300.0)):
        Z = prob.Z.copy()
        Z[:, col] *= factor
        equivariant &= _selection(RegressionProblem(prob.Y, Z, prob.descriptors, prob.provenance), cfg) == base

    deterministic = to_json(fuse(models, cfg)[0]) == to_json(fuse(models, cfg)[0])
    elapsed = time.perf_counter() - t0
    ok = monotone and dominance and equivariant and deterministic and elapsed < 60
    criterion(8, ok, f"monotone={monotone}, refit dominance={dominance}, scaling equivariance={equivariant}, "
                     f"deterministic={deterministic} ({elapsed:.1f} s)")
