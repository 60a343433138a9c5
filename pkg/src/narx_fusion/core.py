"""Domain types shared across the package.

Everything here is immutable after construction. Global polynomial models
live in absolute plant units; only :class:`ArxModel` uses deviation variables
around its operating point.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, Iterable, Literal, Sequence

import numpy as np

OUTPUT = "output"
INPUT = "input"
Variable = Literal["output", "input"]

_SHORT = {OUTPUT: "y", INPUT: "u"}
_LONG = {"y": OUTPUT, "u": INPUT}


class NarxFusionError(Exception):
    """Base class for errors raised by this package."""


class ConfigError(NarxFusionError, ValueError):
    pass


class DivergenceError(NarxFusionError):
    def __init__(self, index: int, value: float, bound: float):
        self.index = index
        self.value = value
        self.bound = bound
        super().__init__(
            f"simulation diverged at sample {index}: |{value:.6g}| exceeds bound {bound:.3g}"
        )


class DomainError(NarxFusionError, ValueError):
    pass


class RankDeficiencyError(NarxFusionError, np.linalg.LinAlgError):
    pass


class ConvergenceError(NarxFusionError):
    pass


class InsufficientDataError(NarxFusionError, ValueError):
    pass


class EmptySelectionError(NarxFusionError):
    pass


def _frozen_array(values: Iterable[float] | np.ndarray) -> np.ndarray:
    arr = np.array(values, dtype=float).ravel()
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class TimeSeries:
    """Sampled SISO input/output record.

    ``u`` and ``y`` are stored as read-only float arrays of equal length.
    """

    u: np.ndarray
    y: np.ndarray
    dt: float = 1.0

    def __post_init__(self) -> None:
        u = _frozen_array(self.u)
        y = _frozen_array(self.y)
        if u.size != y.size:
            raise ValueError(f"u and y lengths differ ({u.size} != {y.size})")
        if u.size < 1:
            raise ValueError("a time series needs at least one sample")
        if not (np.all(np.isfinite(u)) and np.all(np.isfinite(y))):
            raise ValueError("time series contains non-finite samples")
        if not (self.dt > 0 and math.isfinite(self.dt)):
            raise ValueError(f"dt must be positive, got {self.dt}")
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "dt", float(self.dt))

    def __len__(self) -> int:
        return int(self.u.size)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, TimeSeries):
            return NotImplemented
        return (
            self.dt == other.dt
            and np.array_equal(self.u, other.u)
            and np.array_equal(self.y, other.y)
        )

    __hash__ = None  # type: ignore[assignment]

    def to_csv(self, path: str | Path) -> None:
        """Write ``k,u,y`` rows with round-trip float precision."""
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"# dt={self.dt!r}\n")
            fh.write("k,u,y\n")
            for k, (uk, yk) in enumerate(zip(self.u, self.y)):
                fh.write(f"{k},{uk:.17g},{yk:.17g}\n")

    @classmethod
    def from_csv(cls, path: str | Path, dt: float | None = None) -> "TimeSeries":
        """Read a CSV with ``u`` and ``y`` columns; ``dt`` comes from the comment line unless given.

        Extra columns (for example prediction traces) are ignored.
        """
        file_dt = 1.0
        u: list[float] = []
        y: list[float] = []
        cols: tuple[int, int] | None = None
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                if line.startswith("#"):
                    key, _, val = line[1:].strip().partition("=")
                    if key.strip() == "dt":
                        file_dt = float(val)
                    continue
                fields = line.split(",")
                if cols is None:
                    header = [f.strip() for f in fields]
                    if "u" not in header or "y" not in header:
                        raise ValueError(f"{path}: header needs u and y columns, got {header}")
                    cols = (header.index("u"), header.index("y"))
                    continue
                try:
                    u.append(float(fields[cols[0]]))
                    y.append(float(fields[cols[1]]))
                except (ValueError, IndexError):
                    raise ValueError(f"{path}:{lineno}: malformed row {line!r}") from None
        return cls(u=np.array(u), y=np.array(y), dt=file_dt if dt is None else dt)


@dataclass(frozen=True)
class OperatingPoint:
    u_s: float
    y_s: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.u_s) and math.isfinite(self.y_s)):
            raise ValueError(f"operating point must be finite, got ({self.u_s}, {self.y_s})")
        object.__setattr__(self, "u_s", float(self.u_s))
        object.__setattr__(self, "y_s", float(self.y_s))


@dataclass(frozen=True)
class ArxModel:
    """Local linear model in deviation variables around ``op``.

    ``ỹ_k = Σ_i a[i-1] ỹ_{k-i} + Σ_j b[j-1] ũ_{k-delay-j}`` for ``i = 1..n_a`` and
    ``j = 1..n_b``, with ``ỹ = y - y_s`` and ``ũ = u - u_s``. There is no direct
    feedthrough: with ``delay = d`` a step in ``u`` first moves ``y`` after
    ``d + 1`` samples.
    """

    a: tuple[float, ...]
    b: tuple[float, ...]
    delay: int
    op: OperatingPoint

    def __post_init__(self) -> None:
        a = tuple(float(v) for v in np.ravel(self.a))
        b = tuple(float(v) for v in np.ravel(self.b))
        if len(a) < 1 or len(b) < 1:
            raise ValueError("ArxModel needs at least one a and one b coefficient")
        if not all(math.isfinite(v) for v in a + b):
            raise ValueError("ArxModel coefficients must be finite")
        if int(self.delay) != self.delay or self.delay < 0:
            raise ValueError(f"delay must be a non-negative integer, got {self.delay}")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "delay", int(self.delay))

    @property
    def n_a(self) -> int:
        return len(self.a)

    @property
    def n_b(self) -> int:
        return len(self.b)

    @property
    def max_input_lag(self) -> int:
        return self.delay + self.n_b

    def dc_gain(self) -> float:
        return sum(self.b) / (1.0 - sum(self.a))

    def to_dict(self) -> dict[str, Any]:
        return {
            "a": list(self.a),
            "b": list(self.b),
            "delay": self.delay,
            "op": {"u_s": self.op.u_s, "y_s": self.op.y_s},
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ArxModel":
        return cls(a=tuple(d["a"]), b=tuple(d["b"]), delay=d["delay"], op=OperatingPoint(**d["op"]))


@dataclass(frozen=True, order=True)
class Term:
    """One factor ``variable[k-lag] ** exponent`` of a monomial."""

    variable: Variable
    lag: int
    exponent: int = 1

    def __post_init__(self) -> None:
        if self.variable not in (OUTPUT, INPUT):
            raise ValueError(f"unknown variable {self.variable!r}")
        if self.lag < 1:
            raise ValueError(f"lags start at 1, got {self.lag}")
        if self.exponent < 1:
            raise ValueError(f"exponents start at 1, got {self.exponent}")

    def sort_key(self) -> tuple[int, int]:
        return (0 if self.variable == OUTPUT else 1, self.lag)

    @property
    def name(self) -> str:
        base = f"{_SHORT[self.variable]}[k-{self.lag}]"
        return base if self.exponent == 1 else f"{base}^{self.exponent}"


@dataclass(frozen=True)
class FeatureDescriptor:
    """Symbolic identity of one regressor column.

    A descriptor is a product of lagged output/input factors. Factors are merged
    (``y[k-1]*y[k-1]`` becomes ``y[k-1]^2``) and sorted outputs-first then by lag,
    so structurally identical monomials compare equal. The empty product with
    ``constant=True`` is the intercept.
    """

    terms: tuple[Term, ...] = ()
    constant: bool = False

    def __post_init__(self) -> None:
        merged: dict[tuple[str, int], int] = {}
        for t in self.terms:
            key = (t.variable, t.lag)
            merged[key] = merged.get(key, 0) + t.exponent
        terms = tuple(
            sorted(
                (Term(var, lag, exp) for (var, lag), exp in merged.items()),
                key=Term.sort_key,
            )
        )
        if self.constant and terms:
            raise ValueError("the constant feature cannot carry terms")
        if not self.constant and not terms:
            raise ValueError("a non-constant feature needs at least one term")
        object.__setattr__(self, "terms", terms)

    @classmethod
    def intercept(cls) -> "FeatureDescriptor":
        return cls(constant=True)

    @classmethod
    def of(cls, *factors: tuple[str, int] | tuple[str, int, int]) -> "FeatureDescriptor":
        """Shorthand: ``FeatureDescriptor.of(("y", 1), ("u", 1))`` for ``y[k-1]*u[k-1]``."""
        terms = []
        for f in factors:
            var = _LONG.get(f[0], f[0])
            terms.append(Term(var, int(f[1]), int(f[2]) if len(f) > 2 else 1))
        return cls(terms=tuple(terms))

    @property
    def degree(self) -> int:
        return sum(t.exponent for t in self.terms)

    def max_lag(self, variable: str) -> int:
        var = _LONG.get(variable, variable)
        return max((t.lag for t in self.terms if t.variable == var), default=0)

    @property
    def name(self) -> str:
        if self.constant:
            return "1"
        return "*".join(t.name for t in self.terms)

    def __str__(self) -> str:
        return self.name

    @classmethod
    def parse(cls, name: str) -> "FeatureDescriptor":
        """Inverse of :attr:`name`."""
        name = name.strip()
        if name == "1":
            return cls.intercept()
        terms = []
        for factor in name.split("*"):
            base, _, exp = factor.partition("^")
            var = _LONG[base[0]]
            if not (base[1:4] == "[k-" and base.endswith("]")):
                raise ValueError(f"cannot parse feature factor {factor!r}")
            terms.append(Term(var, int(base[4:-1]), int(exp) if exp else 1))
        return cls(terms=tuple(terms))

    def to_dict(self) -> dict[str, Any]:
        return {
            "terms": [
                {"variable": t.variable, "lag": t.lag, "exponent": t.exponent} for t in self.terms
            ],
            "constant": self.constant,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "FeatureDescriptor":
        return cls(terms=tuple(Term(**t) for t in d["terms"]), constant=bool(d["constant"]))


@dataclass(frozen=True)
class PNarxModel:
    """Sparse global polynomial NARX model in absolute units."""

    features: tuple[FeatureDescriptor, ...]
    coefficients: tuple[float, ...]
    lags: tuple[int, int]

    def __post_init__(self) -> None:
        feats = tuple(self.features)
        coefs = tuple(float(c) for c in np.ravel(self.coefficients))
        n_y, n_u = (int(v) for v in self.lags)
        if len(feats) != len(coefs):
            raise ValueError(f"{len(feats)} features but {len(coefs)} coefficients")
        if len(set(feats)) != len(feats):
            raise ValueError("duplicate features in model")
        if not all(math.isfinite(c) for c in coefs):
            raise ValueError("model coefficients must be finite")
        for f in feats:
            if f.max_lag(OUTPUT) > n_y or f.max_lag(INPUT) > n_u:
                raise ValueError(f"feature {f.name} exceeds lags (n_y={n_y}, n_u={n_u})")
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "coefficients", coefs)
        object.__setattr__(self, "lags", (n_y, n_u))

    @property
    def n_s(self) -> int:
        return len(self.features)

    @property
    def max_lag(self) -> int:
        return max(self.lags)

    def to_dict(self) -> dict[str, Any]:
        return {
            "features": [f.to_dict() for f in self.features],
            "coefficients": list(self.coefficients),
            "lags": list(self.lags),
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "PNarxModel":
        return cls(
            features=tuple(FeatureDescriptor.from_dict(f) for f in d["features"]),
            coefficients=tuple(d["coefficients"]),
            lags=tuple(d["lags"]),
        )


@dataclass(frozen=True)
class FusionConfig:
    """Every knob of a fusion run.

    ``lambda_grid`` is either ``"auto"`` (100 values over four decades below
    ``lambda_max``) or a mapping ``{"count": int, "log_range": float}`` where
    ``log_range`` is the number of decades spanned. ``excitation_amplitude`` is
    a fraction of ``|u_s|`` with ``excitation_floor`` as absolute minimum.
    """

    n_y: int = 3
    n_u: int = 3
    degree: int = 2
    gamma: float = 0.5
    lambda_grid: Any = "auto"
    cv_folds: int = 3
    epsilon_sel: float = 1e-6
    seed: int = 0
    n_train: int = 448
    n_val: int = 155
    n_a: int = 2
    n_b: int = 2
    delay: int = 0
    excitation_amplitude: float = 0.05
    excitation_floor: float = 0.01
    switch_period: int = 10
    tol: float = 1e-8
    max_sweeps: int = 100_000

    def __post_init__(self) -> None:
        for name in ("n_y", "n_u", "n_a", "n_b", "degree", "cv_folds", "n_train", "n_val",
                     "switch_period", "max_sweeps"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, (int, np.integer)) or v < 1:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")
        if isinstance(self.delay, bool) or not isinstance(self.delay, (int, np.integer)) or self.delay < 0:
            raise ConfigError(f"delay must be a non-negative integer, got {self.delay!r}")
        if not (0.0 < float(self.gamma) < 1.0):
            raise ConfigError(f"gamma must lie strictly inside (0, 1), got {self.gamma!r}")
        if self.cv_folds < 2:
            raise ConfigError(f"cv_folds must be at least 2, got {self.cv_folds}")
        if not (self.epsilon_sel >= 0):
            raise ConfigError(f"epsilon_sel must be >= 0, got {self.epsilon_sel!r}")
        if not (self.tol > 0):
            raise ConfigError(f"tol must be positive, got {self.tol!r}")
        if self.excitation_amplitude < 0 or self.excitation_floor < 0:
            raise ConfigError("excitation amplitude and floor must be non-negative")
        max_lag = max(self.n_y, self.n_u)
        if self.n_train - max_lag < self.cv_folds:
            raise ConfigError(
                f"n_train={self.n_train} leaves fewer usable rows than cv_folds={self.cv_folds}"
            )
        if self.n_val <= max_lag:
            raise ConfigError(f"n_val must exceed the maximum lag {max_lag}")
        if self.n_a > self.n_y:
            raise ConfigError(f"local order n_a={self.n_a} exceeds n_y={self.n_y}")
        if self.delay + self.n_b > self.n_u:
            raise ConfigError(f"local input lags delay+n_b={self.delay + self.n_b} exceed n_u={self.n_u}")
        grid = self.lambda_grid
        if isinstance(grid, str):
            if grid != "auto":
                raise ConfigError(f"lambda_grid must be 'auto' or a mapping, got {grid!r}")
        else:
            try:
                count, log_range = int(grid["count"]), float(grid["log_range"])
            except (TypeError, KeyError, ValueError) as exc:
                raise ConfigError(f"lambda_grid needs 'count' and 'log_range': {grid!r}") from exc
            if count < 2 or not log_range > 0:
                raise ConfigError(f"lambda_grid needs count >= 2 and log_range > 0, got {grid!r}")
            object.__setattr__(self, "lambda_grid", {"count": count, "log_range": log_range})
        object.__setattr__(self, "gamma", float(self.gamma))

    @property
    def lambda_count(self) -> int:
        return 100 if self.lambda_grid == "auto" else self.lambda_grid["count"]

    @property
    def lambda_ratio(self) -> float:
        return 1e-4 if self.lambda_grid == "auto" else 10.0 ** (-self.lambda_grid["log_range"])

    def replace(self, **changes: Any) -> "FusionConfig":
        d = self.to_dict()
        d.update(changes)
        return FusionConfig.from_dict(d)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "FusionConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config field(s): {', '.join(sorted(unknown))}")
        return cls(**d)


def to_json(obj: ArxModel | PNarxModel | FusionConfig, path: str | Path | None = None) -> str:
    """Serialize a model or config; optionally write it to ``path``."""
    text = json.dumps(obj.to_dict(), indent=2, sort_keys=True)
    if path is not None:
        Path(path).write_text(text + "\n", encoding="utf-8")
    return text


def from_json(kind: type, source: str | Path) -> Any:
    """Load ``kind`` (ArxModel, PNarxModel or FusionConfig) from a JSON string or file."""
    text = str(source)
    if not text.lstrip().startswith("{"):
        text = Path(source).read_text(encoding="utf-8")
    return kind.from_dict(json.loads(text))


def as_float_array(values: Sequence[float] | np.ndarray, name: str = "input") -> np.ndarray:
    arr = np.asarray(values, dtype=float).ravel()
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr
