"""Experiment configuration and the benchmark harness.

A run is fully described by one TOML file (schema version 1)::

    schema_version = 1

    [plant]
    name = "toy"                 # toy | tank | hw; extra keys are plant parameters

    [operating_points]
    by = "input"                 # "input": values are u_s; "output": values are y_s (tank level)
    anchors = [0.1, 0.3]         # where local models exist
    validation = [0.05, 0.1, 0.2, 0.3, 0.35]
    validation_step = 0.05       # absolute step size of the validation test
    validation_step_fraction = 0.0   # plus this fraction of |u_s|

    [local]
    length = 448                 # samples per local identification test
    amplitude = 0.05             # PRBS amplitude as a fraction of |u_s|
    floor = 0.01                 # absolute minimum amplitude
    models = []                  # optional ArxModel JSON files replacing identification

    [fusion]                     # any FusionConfig field
    n_y = 3

    [output]
    dir = "runs/toy"

The shipped case files live in ``narx_fusion/configs``.
"""

from __future__ import annotations

import csv
import json
import logging
import os
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Sequence

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .core import (
    ArxModel,
    ConfigError,
    DivergenceError,
    FusionConfig,
    OperatingPoint,
    PNarxModel,
    TimeSeries,
    from_json,
)
from .fusion import FusionReport, fuse, mse, predict
from .local_ident import make_local_models
from .plants import (
    ConicalTankPlant,
    HammersteinWienerPlant,
    ToyNarxPlant,
    operating_point_for_output,
    solve_steady_state,
)

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
CASES = ("toy", "tank", "hw")
SEED_ENV = "NARX_FUSION_SEED"

_PLANTS = {"toy": ToyNarxPlant, "tank": ConicalTankPlant, "hw": HammersteinWienerPlant}
_SECTIONS = {"schema_version", "plant", "operating_points", "local", "fusion", "output"}


def make_plant(name: str, **params: Any):
    try:
        cls = _PLANTS[name]
    except KeyError:
        raise ConfigError(f"unknown plant {name!r}; valid plants: {', '.join(_PLANTS)}") from None
    try:
        return cls(**params)
    except TypeError as exc:
        raise ConfigError(f"plant.{name}: {exc}") from exc


@dataclass(frozen=True)
class RunConfig:
    plant: str
    anchors: tuple[float, ...]
    validation: tuple[float, ...]
    fusion: FusionConfig
    by: str = "input"
    validation_step: float = 0.0
    validation_step_fraction: float = 0.0
    local_length: int = 448
    local_amplitude: float = 0.05
    local_floor: float = 0.01
    local_models: tuple[str, ...] = ()
    plant_params: dict[str, Any] = field(default_factory=dict, compare=False)
    output_dir: str = "runs"
    source: str | None = field(default=None, compare=False)

    def build_plant(self):
        return make_plant(self.plant, **self.plant_params)


def _section(doc: dict, name: str) -> dict:
    sec = doc.get(name, {})
    if not isinstance(sec, dict):
        raise ConfigError(f"[{name}] must be a table")
    return sec


def _get(sec: dict, section: str, key: str, kind, default=None, required=False):
    if key not in sec:
        if required:
            raise ConfigError(f"missing required field {section}.{key}")
        return default
    val = sec[key]
    if kind is float and isinstance(val, int) and not isinstance(val, bool):
        val = float(val)
    if kind is tuple:
        if not isinstance(val, list):
            raise ConfigError(f"field {section}.{key} must be an array")
        return tuple(float(v) if isinstance(v, (int, float)) else v for v in val)
    if not isinstance(val, kind) or isinstance(val, bool) and kind is not bool:
        raise ConfigError(f"field {section}.{key} must be of type {kind.__name__}, got {val!r}")
    return val


def parse_config(doc: dict[str, Any], source: str | None = None) -> RunConfig:
    """Validate a parsed TOML document; errors name the offending field."""
    unknown = set(doc) - _SECTIONS
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(sorted(unknown))}")
    version = doc.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigError(f"schema_version must be {SCHEMA_VERSION}, got {version!r}")
    plant = dict(_section(doc, "plant"))
    name = _get(plant, "plant", "name", str, required=True)
    plant.pop("name")
    make_plant(name, **plant)

    ops = _section(doc, "operating_points")
    by = _get(ops, "operating_points", "by", str, "input")
    if by not in ("input", "output"):
        raise ConfigError(f"field operating_points.by must be 'input' or 'output', got {by!r}")
    anchors = _get(ops, "operating_points", "anchors", tuple, required=True)
    validation = _get(ops, "operating_points", "validation", tuple, ())

    local = _section(doc, "local")
    fusion_sec = dict(_section(doc, "fusion"))
    if SEED_ENV in os.environ:
        try:
            fusion_sec["seed"] = int(os.environ[SEED_ENV])
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {os.environ[SEED_ENV]!r}") from None
    try:
        fusion = FusionConfig.from_dict(fusion_sec)
    except ConfigError as exc:
        raise ConfigError(f"[fusion] {exc}") from exc
    except TypeError as exc:
        raise ConfigError(f"[fusion] {exc}") from exc

    models = _get(local, "local", "models", tuple, ())
    if not models and len(anchors) < 2:
        raise ConfigError("operating_points.anchors needs at least two values")
    out = _section(doc, "output")
    return RunConfig(
        plant=name,
        anchors=anchors,
        validation=validation,
        fusion=fusion,
        by=by,
        validation_step=_get(ops, "operating_points", "validation_step", float, 0.0),
        validation_step_fraction=_get(ops, "operating_points", "validation_step_fraction", float, 0.0),
        local_length=_get(local, "local", "length", int, fusion.n_train),
        local_amplitude=_get(local, "local", "amplitude", float, 0.05),
        local_floor=_get(local, "local", "floor", float, 0.01),
        local_models=tuple(str(m) for m in models),
        plant_params=plant,
        output_dir=_get(out, "output", "dir", str, "runs"),
        source=source,
    )


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return parse_config(doc, str(path))


def case_config_path(case: str) -> Path:
    if case not in CASES:
        raise ConfigError(f"unknown case {case!r}; valid cases: {', '.join(CASES)}")
    return Path(str(resources.files("narx_fusion") / "configs" / f"{case}.toml"))


def load_case(case: str) -> RunConfig:
    return load_config(case_config_path(case))


def operating_point(cfg: RunConfig, plant, value: float) -> OperatingPoint:
    if cfg.by == "output":
        if not isinstance(plant, ConicalTankPlant):
            raise ConfigError("operating_points.by = 'output' is only supported for the tank")
        return operating_point_for_output(plant, value)
    return solve_steady_state(plant, value)


def validation_input(u_s: float, length: int, step: float) -> np.ndarray:
    """Step test around ``u_s``: hold, step to ``u_s + step``, then to ``u_s - step``.

    The first 10 % of samples stay at ``u_s``, the next 45 % at the upper
    level and the rest at the lower level.
    """
    u = np.full(length, float(u_s))
    a = int(0.1 * length)
    b = a + int(0.45 * length)
    u[a:b] = u_s + step
    u[b:] = u_s - step
    return u


@dataclass
class OpResult:
    value: float
    op: OperatingPoint
    truth: TimeSeries
    predictions: dict[str, np.ndarray]
    mse: dict[str, float]

    def ratio(self, name: str) -> float:
        mf = self.mse["MF"]
        if not np.isfinite(mf):
            return 0.0
        return self.mse[name] / mf if mf > 0 else float("inf")

    def trace_to_csv(self, path: str | Path) -> None:
        names = list(self.predictions)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["k", "u", "y", *(f"y_{n}" for n in names)])
            for k in range(len(self.truth)):
                w.writerow([k, f"{self.truth.u[k]:.12g}", f"{self.truth.y[k]:.12g}",
                            *(f"{self.predictions[n][k]:.12g}" for n in names)])


@dataclass
class ExperimentResult:
    config: RunConfig
    local_models: list[ArxModel]
    model: PNarxModel
    report: FusionReport
    results: list[OpResult]

    def table(self) -> list[dict[str, float]]:
        """Rows laid out as OP, MSE_MF, MSE_M1..., ratio1... (one per validation OP)."""
        rows = []
        n_loc = len(self.local_models)
        for r in self.results:
            row = {"OP": r.value, "MSE_MF": r.mse["MF"]}
            for i in range(1, n_loc + 1):
                row[f"MSE_M{i}"] = r.mse[f"M{i}"]
            for i in range(1, n_loc + 1):
                row[f"ratio{i}"] = r.ratio(f"M{i}")
            rows.append(row)
        return rows

    def table_to_csv(self, path: str | Path) -> None:
        rows = self.table()
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(list(rows[0]))
            for row in rows:
                w.writerow([f"{v:.12g}" for v in row.values()])

    def result_at(self, value: float) -> OpResult:
        for r in self.results:
            if np.isclose(r.value, value):
                return r
        raise KeyError(f"no validation result at {value}")


def identify_local_models(cfg: RunConfig, plant=None) -> list[ArxModel]:
    if cfg.local_models:
        base = Path(cfg.source).parent if cfg.source else Path(".")
        return [from_json(ArxModel, (base / p) if not Path(p).is_absolute() else Path(p))
                for p in cfg.local_models]
    plant = plant or cfg.build_plant()
    ops = [operating_point(cfg, plant, v) for v in cfg.anchors]
    fc = cfg.fusion
    return make_local_models(
        plant, ops, length=cfg.local_length, n_a=fc.n_a, n_b=fc.n_b, delay=fc.delay,
        seed=fc.seed, fraction=cfg.local_amplitude, floor=cfg.local_floor,
        switch_period=fc.switch_period,
    )


def evaluate_at(cfg: RunConfig, plant, value: float, model: PNarxModel,
                local_models: Sequence[ArxModel], mode: str = "free_run") -> OpResult:
    op = operating_point(cfg, plant, value)
    step = cfg.validation_step + cfg.validation_step_fraction * abs(op.u_s)
    truth = plant.simulate_at(validation_input(op.u_s, cfg.fusion.n_val, step), op)
    preds: dict[str, np.ndarray] = {}
    errs: dict[str, float] = {}
    for name, m in [("MF", model)] + [(f"M{i}", lm) for i, lm in enumerate(local_models, start=1)]:
        try:
            preds[name] = predict(m, truth, mode)
            errs[name] = mse(truth.y, preds[name])
        except DivergenceError as exc:
            log.warning("%s diverged at OP %g: %s", name, value, exc)
            preds[name] = np.full(len(truth), np.nan)
            errs[name] = float("inf")
    return OpResult(value, op, truth, preds, errs)


def run_experiment(cfg: RunConfig, mode: str = "free_run") -> ExperimentResult:
    plant = cfg.build_plant()
    local_models = identify_local_models(cfg, plant)
    model, report = fuse(local_models, cfg.fusion)
    results = [evaluate_at(cfg, plant, v, model, local_models, mode) for v in cfg.validation]
    return ExperimentResult(cfg, local_models, model, report, results)


@dataclass(frozen=True)
class Check:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name}: {self.detail}"


def benchmark_checks(case: str, res: ExperimentResult) -> list[Check]:
    """Directional targets per case (ratios and orderings only)."""
    checks = []
    if case == "toy":
        r = res.result_at(0.2)
        checks.append(Check(
            "toy u_s=0.2 ratios >= 20", r.ratio("M1") >= 20 and r.ratio("M2") >= 20,
            f"M1/MF={r.ratio('M1'):.4g}, M2/MF={r.ratio('M2'):.4g}"))
        for r in res.results:
            checks.append(Check(
                f"toy u_s={r.value:g} fusion beats both", r.ratio("M1") > 1 and r.ratio("M2") > 1,
                f"M1/MF={r.ratio('M1'):.4g}, M2/MF={r.ratio('M2'):.4g}"))
    elif case == "tank":
        r = res.result_at(7.5)
        checks.append(Check(
            "tank h_s=7.5 ratios >= 5", r.ratio("M1") >= 5 and r.ratio("M2") >= 5,
            f"M1/MF={r.ratio('M1'):.4g}, M2/MF={r.ratio('M2'):.4g}"))
        for v in res.config.anchors:
            r = res.result_at(v)
            checks.append(Check(
                f"tank anchor h_s={v:g} fusion MSE < 0.05", r.mse["MF"] < 0.05,
                f"MSE_MF={r.mse['MF']:.4g}"))
    elif case == "hw":
        r = res.result_at(0.5)
        checks.append(Check(
            "hw u_s=0.5 fusion beats both", r.mse["MF"] < r.mse["M1"] and r.mse["MF"] < r.mse["M2"],
            f"MSE_MF={r.mse['MF']:.4g}, MSE_M1={r.mse['M1']:.4g}, MSE_M2={r.mse['M2']:.4g}"))
    return checks


@dataclass
class BenchmarkResult:
    case: str
    experiment: ExperimentResult
    checks: list[Check]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def to_dict(self) -> dict[str, Any]:
        return {
            "case": self.case,
            "passed": self.passed,
            "n_s": self.experiment.report.n_s,
            "lambda": self.experiment.report.lam,
            "table": self.experiment.table(),
            "checks": [{"name": c.name, "passed": c.passed, "detail": c.detail} for c in self.checks],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, default=float)


def benchmark(case: str, config: RunConfig | None = None) -> BenchmarkResult:
    """Run one case study over its validation grid and score it."""
    cfg = config or load_case(case)
    res = run_experiment(cfg)
    return BenchmarkResult(case, res, benchmark_checks(case, res))
