"""Reference plants, excitation signals and steady-state solving.

Three case-study systems are provided: a quadratic toy NARX recursion, a
conical tank integrated with fixed-step RK4, and a Hammerstein-Wiener chain.
Each plant exposes ``simulate_at(u, op)`` which starts the plant at the
steady state ``op`` and applies the absolute-unit input ``u``; this is the
interface used by :func:`narx_fusion.local_ident.make_local_models` and the
benchmark harness.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import brentq

from .core import (
    ConvergenceError,
    DivergenceError,
    DomainError,
    OperatingPoint,
    TimeSeries,
    as_float_array,
)

DEFAULT_BOUND = 1e6
TANK_H_MIN = 1e-3


@dataclass(frozen=True)
class ToyNarxPlant:
    """y(k) = c1 y(k-1) + c2 y(k-2) + c3 y(k-2)^2 + c4 y(k-1)u(k-1) + c5 u(k-1) + c6 u(k-2)."""

    c1: float = 0.5
    c2: float = 0.25
    c3: float = -0.5
    c4: float = 0.1
    c5: float = 1.0
    c6: float = 0.25
    bound: float = DEFAULT_BOUND
    dt: float = 1.0

    @property
    def coefficients(self) -> tuple[float, ...]:
        return (self.c1, self.c2, self.c3, self.c4, self.c5, self.c6)

    def simulate(self, u: Sequence[float], y_init: Sequence[float] = (0.0, 0.0)) -> TimeSeries:
        return simulate_toy(u, y_init, bound=self.bound, plant=self)

    def simulate_at(self, u: Sequence[float], op: OperatingPoint) -> TimeSeries:
        # Prepend two steady samples so the first recursions see the OP history.
        u = as_float_array(u)
        full = np.concatenate([[op.u_s, op.u_s], u])
        ts = simulate_toy(full, (op.y_s, op.y_s), bound=self.bound, plant=self)
        return TimeSeries(u=u, y=ts.y[2:], dt=self.dt)

    def steady_residual(self, y: float, u: float) -> float:
        c1, c2, c3, c4, c5, c6 = self.coefficients
        return (c1 + c2 - 1.0) * y + c3 * y * y + c4 * y * u + (c5 + c6) * u

    def steady_bracket(self, u_s: float) -> tuple[float, float]:
        return (0.0, 100.0) if u_s >= 0 else (-100.0, 0.0)


def simulate_toy(
    u: Sequence[float],
    y_init: Sequence[float] = (0.0, 0.0),
    *,
    bound: float = DEFAULT_BOUND,
    plant: ToyNarxPlant | None = None,
) -> TimeSeries:
    """Run the quadratic toy recursion.

    The first two outputs are ``y_init``; from ``k = 2`` on the recursion uses
    ``u[k-1]`` and ``u[k-2]``. Output length equals input length.

    Raises
    ------
    DivergenceError
        If ``|y_k|`` exceeds ``bound``.
    """
    p = plant or ToyNarxPlant()
    c1, c2, c3, c4, c5, c6 = p.coefficients
    u = as_float_array(u, "u")
    n = u.size
    y = np.zeros(n)
    y0 = as_float_array(y_init, "y_init")
    if y0.size != 2:
        raise ValueError("y_init must hold two samples")
    y[: min(2, n)] = y0[: min(2, n)]
    for k in range(2, n):
        y1, y2, u1, u2 = y[k - 1], y[k - 2], u[k - 1], u[k - 2]
        yk = c1 * y1 + c2 * y2 + c3 * y2 * y2 + c4 * y1 * u1 + c5 * u1 + c6 * u2
        if not abs(yk) <= bound:
            raise DivergenceError(k, yk, bound)
        y[k] = yk
    return TimeSeries(u=u, y=y, dt=p.dt)


@dataclass(frozen=True)
class ConicalTankPlant:
    """Conical tank ``dh/dt = alpha (q_i - C_d sqrt(h)) / h^2``, level in cm."""

    D: float = 30.0
    H: float = 62.0
    C_d: float = 1.0
    dt: float = 1.0
    h_min: float = TANK_H_MIN
    substeps: int = 1

    def __post_init__(self) -> None:
        if not (self.D > 0 and self.H > 0 and self.C_d > 0):
            raise ValueError("tank D, H and C_d must be positive")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.substeps < 1:
            raise ValueError("substeps must be >= 1")

    @property
    def alpha(self) -> float:
        return 4.0 * self.H**2 / (math.pi * self.D**2)

    def rate(self, h: float, q: float) -> float:
        h = max(h, self.h_min)
        return self.alpha * (q - self.C_d * math.sqrt(h)) / (h * h)

    def simulate(self, q_i: Sequence[float], h0: float) -> tuple[TimeSeries, bool]:
        return simulate_tank(q_i, h0, self.dt, plant=self)

    def simulate_at(self, u: Sequence[float], op: OperatingPoint) -> TimeSeries:
        return simulate_tank(u, op.y_s, self.dt, plant=self)[0]

    def steady_residual(self, y: float, u: float) -> float:
        return u - self.C_d * math.sqrt(max(y, 0.0))

    def steady_bracket(self, u_s: float) -> tuple[float, float]:
        return (self.h_min, self.H)

    def inflow_for_level(self, h_s: float) -> float:
        return self.C_d * math.sqrt(h_s)


def simulate_tank(
    q_i: Sequence[float],
    h0: float,
    dt: float = 1.0,
    *,
    plant: ConicalTankPlant | None = None,
) -> tuple[TimeSeries, bool]:
    """Integrate the tank with fixed-step RK4, inflow held over each step.

    ``y[0] = h0`` and ``y[k+1]`` is the level after integrating one sample
    interval with inflow ``q_i[k]``. The interval is covered by
    ``plant.substeps`` equal RK4 steps (one by default); below roughly 2 cm the
    dynamics get stiff enough that a single one-second step overshoots. The
    level is clamped to ``[h_min, H]``; the second return value reports whether
    any clamping happened.
    """
    p = plant or ConicalTankPlant(dt=dt)
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    if not (0.0 < h0 <= p.H):
        raise ValueError(f"h0 must lie in (0, {p.H}], got {h0}")
    q = as_float_array(q_i, "q_i")
    if np.any(q < 0):
        raise ValueError("inflow must be non-negative")
    n = q.size
    h = np.empty(n)
    h[0] = h0
    clamped = False
    f = p.rate
    step = dt / p.substeps
    for k in range(n - 1):
        hk, qk = h[k], q[k]
        for _ in range(p.substeps):
            k1 = f(hk, qk)
            k2 = f(hk + 0.5 * step * k1, qk)
            k3 = f(hk + 0.5 * step * k2, qk)
            k4 = f(hk + step * k3, qk)
            hk = hk + step / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            if hk < p.h_min or hk > p.H or not math.isfinite(hk):
                clamped = True
                hk = p.h_min if not hk >= p.h_min else p.H
        h[k + 1] = hk
    return TimeSeries(u=q, y=h, dt=dt), clamped


def _identity(v):
    return v


def _hw_input(u):
    return 0.5 * u - 0.18 * u * u


def _hw_output(s):
    return (-1.0 + np.sqrt(1.0 + 0.6 * s)) / 0.3


@dataclass(frozen=True)
class HammersteinWienerPlant:
    """Static input map, linear block ``A(z) s = B(z) x`` plus noise, static output map.

    ``A = a_poly`` (monic) and ``B = b_poly`` holds the ``z^-1, z^-2, ...``
    coefficients. ``output_fn`` must be defined on every simulated ``s``; the
    default requires ``1 + 0.6 s >= 0``.
    """

    a_poly: tuple[float, ...] = (1.0, -0.45, -0.35)
    b_poly: tuple[float, ...] = (0.5, -0.25)
    input_fn: Callable = _hw_input
    output_fn: Callable = _hw_output
    noise_std: float = 0.0
    seed: int | None = None
    dt: float = 1.0
    check_domain: bool = True

    def __post_init__(self) -> None:
        if self.a_poly[0] != 1.0:
            raise ValueError("A polynomial must be monic")
        roots = np.roots(self.a_poly)
        if np.any(np.abs(roots) >= 1.0):
            raise ValueError(f"A polynomial is not stable, roots {roots}")

    @classmethod
    def linear_only(cls, **kw) -> "HammersteinWienerPlant":
        return cls(input_fn=_identity, output_fn=_identity, check_domain=False, **kw)

    @property
    def dc_gain(self) -> float:
        return sum(self.b_poly) / sum(self.a_poly)

    def simulate(self, u: Sequence[float], u_init: float = 0.0) -> TimeSeries:
        return simulate_hw(u, plant=self, u_init=u_init)

    def simulate_at(self, u: Sequence[float], op: OperatingPoint) -> TimeSeries:
        return simulate_hw(u, plant=self, u_init=op.u_s)

    def steady_output(self, u_s: float) -> float:
        s = self.dc_gain * float(self.input_fn(u_s))
        self._check(s, -1)
        return float(self.output_fn(s))

    def steady_residual(self, y: float, u: float) -> float:
        return y - self.steady_output(u)

    def steady_bracket(self, u_s: float) -> tuple[float, float]:
        y = self.steady_output(u_s)
        width = 1.0 + abs(y)
        return (y - width, y + width)

    def _check(self, s: float, t: int) -> None:
        if self.check_domain and 1.0 + 0.6 * s < 0.0:
            where = "steady state" if t < 0 else f"sample {t}"
            raise DomainError(f"output nonlinearity undefined at {where}: 1 + 0.6*s = {1 + 0.6 * s:.6g} < 0")


def simulate_hw(
    u: Sequence[float],
    *,
    plant: HammersteinWienerPlant | None = None,
    u_init: float = 0.0,
) -> TimeSeries:
    """Simulate the Hammerstein-Wiener chain.

    Signals before ``t = 0`` sit at the steady state of the constant input
    ``u_init``; the default ``u_init = 0`` gives zero initial conditions.
    """
    p = plant or HammersteinWienerPlant()
    u = as_float_array(u, "u")
    n = u.size
    na, nb = len(p.a_poly) - 1, len(p.b_poly)
    x_pre = float(p.input_fn(u_init))
    s_pre = p.dc_gain * x_pre
    x = np.asarray(p.input_fn(u), dtype=float)
    rng = np.random.default_rng(p.seed) if p.noise_std > 0 else None
    s = np.empty(n)
    a = p.a_poly
    for t in range(n):
        acc = 0.0
        for i in range(1, na + 1):
            acc -= a[i] * (s[t - i] if t - i >= 0 else s_pre)
        for j in range(1, nb + 1):
            acc += p.b_poly[j - 1] * (x[t - j] if t - j >= 0 else x_pre)
        s[t] = acc
    if rng is not None:
        s = s + rng.normal(0.0, p.noise_std, size=n)
    if p.check_domain:
        bad = np.flatnonzero(1.0 + 0.6 * s < 0.0)
        if bad.size:
            p._check(s[bad[0]], int(bad[0]))
    y = np.asarray(p.output_fn(s), dtype=float)
    return TimeSeries(u=u, y=y, dt=p.dt)


def solve_steady_state(
    plant,
    u_s: float,
    bracket: tuple[float, float] | None = None,
    *,
    maxiter: int = 200,
) -> OperatingPoint:
    """Find the steady output for constant input ``u_s``.

    Brent's method on the plant's steady-state residual inside ``bracket``
    (plant default when omitted). The returned point satisfies
    ``|residual| < 1e-10``.
    """
    lo, hi = bracket if bracket is not None else plant.steady_bracket(u_s)

    def g(y: float) -> float:
        return plant.steady_residual(y, u_s)

    g_lo, g_hi = g(lo), g(hi)
    if g_lo == 0.0:
        return OperatingPoint(u_s, lo)
    if g_hi == 0.0:
        return OperatingPoint(u_s, hi)
    if np.sign(g_lo) == np.sign(g_hi):
        raise ConvergenceError(f"no sign change of the steady-state residual in [{lo}, {hi}]")
    try:
        y_s, info = brentq(g, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps,
                           maxiter=maxiter, full_output=True, disp=False)
    except RuntimeError as exc:  # pragma: no cover - brentq raises only with disp=True
        raise ConvergenceError(str(exc)) from exc
    if not info.converged or abs(g(y_s)) >= 1e-10:
        raise ConvergenceError(f"steady-state solve did not converge (residual {g(y_s):.3g})")
    return OperatingPoint(u_s, y_s)


def operating_point_for_output(plant: ConicalTankPlant, h_s: float) -> OperatingPoint:
    """Tank operating points are specified by level; invert ``q_s = C_d sqrt(h_s)``."""
    return OperatingPoint(plant.inflow_for_level(h_s), h_s)


def _lfsr_bits(seed: int, count: int) -> np.ndarray:
    """Bits of a 31-bit Fibonacci LFSR (x^31 + x^28 + 1) seeded through splitmix64."""
    z = (int(seed) + 0x9E3779B97F4A7C15) & 0xFFFFFFFFFFFFFFFF
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
    z ^= z >> 31
    state = z & 0x7FFFFFFF or 1
    bits = np.empty(count, dtype=np.int8)
    for i in range(count):
        bits[i] = state & 1
        fb = ((state >> 30) ^ (state >> 27)) & 1
        state = ((state << 1) | fb) & 0x7FFFFFFF
    return bits


def gen_prbs(
    length: int,
    amplitude: float,
    u_center: float = 0.0,
    switch_period: int = 10,
    seed: int = 0,
) -> np.ndarray:
    """Two-level PRBS ``u_center ± amplitude`` holding each level for ``switch_period`` samples."""
    if length < 1:
        raise ValueError(f"length must be >= 1, got {length}")
    if switch_period < 1:
        raise ValueError(f"switch_period must be >= 1, got {switch_period}")
    n_levels = -(-length // switch_period)
    bits = _lfsr_bits(seed, n_levels)
    levels = np.where(bits == 1, amplitude, -amplitude).astype(float)
    return u_center + np.repeat(levels, switch_period)[:length]


def gen_step(length: int, u_before: float, u_after: float, step_index: int) -> np.ndarray:
    if not 0 <= step_index < length:
        raise ValueError(f"step_index must lie in [0, {length}), got {step_index}")
    u = np.full(length, float(u_before))
    u[step_index:] = u_after
    return u
