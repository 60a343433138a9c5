"""Local ARX identification and free-run simulation of local models."""

from __future__ import annotations

import logging
from typing import NamedTuple, Sequence

import numpy as np

from .core import (
    ArxModel,
    DivergenceError,
    InsufficientDataError,
    OperatingPoint,
    RankDeficiencyError,
    TimeSeries,
    as_float_array,
)
from .plants import DEFAULT_BOUND, gen_prbs

log = logging.getLogger(__name__)


class ArxFit(NamedTuple):
    model: ArxModel
    residual_norm: float
    rank: int


def excitation_amplitude(u_s: float, fraction: float = 0.05, floor: float = 0.01) -> float:
    """Default PRBS amplitude around ``u_s``: a fraction of ``|u_s|``, never below ``floor``."""
    return max(fraction * abs(u_s), floor)


def fit_arx(data: TimeSeries, op: OperatingPoint, n_a: int = 2, n_b: int = 2, delay: int = 0) -> ArxFit:
    """Least-squares ARX fit on deviation variables around ``op``.

    Minimises the one-step equation error of
    ``ỹ_k = Σ a_i ỹ_{k-i} + Σ b_j ũ_{k-delay-j}``.

    Raises
    ------
    InsufficientDataError
        If ``N <= n_a + n_b + delay + 10``.
    RankDeficiencyError
        If the regressor matrix is rank deficient, i.e. the data are not
        exciting enough around ``op``.
    """
    n = len(data)
    if n <= n_a + n_b + delay + 10:
        raise InsufficientDataError(
            f"need more than {n_a + n_b + delay + 10} samples for n_a={n_a}, n_b={n_b}, delay={delay}; got {n}"
        )
    yd = data.y - op.y_s
    ud = data.u - op.u_s
    start = max(n_a, n_b + delay)
    cols = [yd[start - i : n - i] for i in range(1, n_a + 1)]
    cols += [ud[start - delay - j : n - delay - j] for j in range(1, n_b + 1)]
    phi = np.column_stack(cols)
    target = yd[start:]
    theta, _, rank, sv = np.linalg.lstsq(phi, target, rcond=None)
    if rank < phi.shape[1]:
        raise RankDeficiencyError(
            f"ARX regressor has rank {rank} < {phi.shape[1]}; data around ({op.u_s}, {op.y_s}) lack excitation"
        )
    resid = float(np.linalg.norm(target - phi @ theta))
    model = ArxModel(a=tuple(theta[:n_a]), b=tuple(theta[n_a:]), delay=delay, op=op)
    log.debug("ARX fit at u_s=%g: residual norm %.3g", op.u_s, resid)
    return ArxFit(model, resid, int(rank))


def simulate_arx(
    model: ArxModel,
    u: Sequence[float],
    *,
    bound: float = DEFAULT_BOUND,
    dt: float = 1.0,
) -> TimeSeries:
    """Free-run ``model`` on the absolute-unit input ``u``.

    The recursion runs in deviation variables with the history before
    ``k = 0`` at the operating point; the returned outputs are absolute.
    """
    u = as_float_array(u, "u")
    n = u.size
    op = model.op
    ud = u - op.u_s
    yd = np.zeros(n)
    a, b, d = model.a, model.b, model.delay
    for k in range(n):
        acc = 0.0
        for i, ai in enumerate(a, start=1):
            if k - i >= 0:
                acc += ai * yd[k - i]
        for j, bj in enumerate(b, start=1):
            idx = k - d - j
            if idx >= 0:
                acc += bj * ud[idx]
        if not abs(acc + op.y_s) <= bound:
            raise DivergenceError(k, acc + op.y_s, bound)
        yd[k] = acc
    return TimeSeries(u=u, y=yd + op.y_s, dt=dt)


def local_excitation(
    op: OperatingPoint,
    length: int,
    *,
    seed: int = 0,
    fraction: float = 0.05,
    floor: float = 0.01,
    switch_period: int = 10,
) -> np.ndarray:
    amp = excitation_amplitude(op.u_s, fraction, floor)
    return gen_prbs(length, amp, op.u_s, switch_period, seed)


def make_local_models(
    plant,
    ops: Sequence[OperatingPoint],
    *,
    length: int = 1000,
    n_a: int = 2,
    n_b: int = 2,
    delay: int = 0,
    seed: int = 0,
    fraction: float = 0.05,
    floor: float = 0.01,
    switch_period: int = 10,
) -> list[ArxModel]:
    """Identify one ARX model per operating point from PRBS tests on ``plant``.

    Each test starts the plant at its steady state and applies a PRBS around
    ``u_s``; the PRBS seed for the ``i``-th point is ``seed + i``.
    """
    keys = [(op.u_s, op.y_s) for op in ops]
    if len(set(keys)) != len(keys):
        raise ValueError("operating points must be distinct")
    models = []
    for i, op in enumerate(ops):
        u = local_excitation(op, length, seed=seed + i, fraction=fraction, floor=floor,
                             switch_period=switch_period)
        data = plant.simulate_at(u, op)
        models.append(fit_arx(data, op, n_a, n_b, delay).model)
    return models


def one_step_mse(model: ArxModel, data: TimeSeries) -> float:
    """Mean squared one-step-ahead prediction error of ``model`` on ``data``."""
    n = len(data)
    start = max(model.n_a, model.max_input_lag)
    if n <= start:
        raise InsufficientDataError("series too short for one-step prediction")
    yd = data.y - model.op.y_s
    ud = data.u - model.op.u_s
    pred = np.zeros(n - start)
    for i, ai in enumerate(model.a, start=1):
        pred += ai * yd[start - i : n - i]
    for j, bj in enumerate(model.b, start=1):
        lag = model.delay + j
        pred += bj * ud[start - lag : n - lag]
    return float(np.mean((yd[start:] - pred) ** 2))


def step_response(model: ArxModel, length: int = 100, size: float = 1.0) -> np.ndarray:
    """Deviation response to a step of ``size`` applied at ``k = 0``."""
    u = np.full(length, model.op.u_s + size)
    return simulate_arx(model, u).y - model.op.y_s
