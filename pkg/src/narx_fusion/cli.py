"""Command-line front end: ``narx-fusion {simulate,identify-local,fuse,validate,benchmark}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import (
    ArxModel,
    ConfigError,
    NarxFusionError,
    OperatingPoint,
    PNarxModel,
    TimeSeries,
    to_json,
)
from .experiment import (
    CASES,
    benchmark,
    load_case,
    load_config,
    make_plant,
    run_experiment,
)
from .fusion import FusionError, validate
from .local_ident import fit_arx, make_local_models
from .plants import ConicalTankPlant, gen_prbs, gen_step, operating_point_for_output, solve_steady_state

log = logging.getLogger("narx_fusion")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # noqa: D401 - argparse hook
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _fail(kind: str, message: str, stage: str | None = None, code: int = 1) -> int:
    payload = {"error": kind, "message": message}
    if stage:
        payload["stage"] = stage
    print(json.dumps(payload), file=sys.stderr)
    return code


def _parse_input(args, n: int) -> np.ndarray:
    if args.const is not None:
        return np.full(n, args.const)
    if args.step is not None:
        try:
            levels, _, idx = args.step.partition("@")
            before, after = (float(v) for v in levels.split(":"))
            return gen_step(n, before, after, int(idx))
        except ValueError as exc:
            raise UsageError(f"--step expects BEFORE:AFTER@INDEX, got {args.step!r} ({exc})") from None
    if args.prbs is not None:
        parts = args.prbs.split(":")
        try:
            center, amp = float(parts[0]), float(parts[1])
            period = int(parts[2]) if len(parts) > 2 else 10
        except (ValueError, IndexError):
            raise UsageError(f"--prbs expects CENTER:AMPLITUDE[:PERIOD], got {args.prbs!r}") from None
        return gen_prbs(n, amp, center, period, args.seed)
    raise UsageError("one of --const, --step or --prbs is required")


def cmd_simulate(args) -> int:
    plant = make_plant(args.plant, **({"dt": args.dt} if args.dt is not None else {}))
    u = _parse_input(args, args.n)
    if args.y0 is not None:
        op = OperatingPoint(float(u[0]), args.y0)
    elif isinstance(plant, ConicalTankPlant):
        op = OperatingPoint(float(u[0]), (float(u[0]) / plant.C_d) ** 2)
    else:
        op = solve_steady_state(plant, float(u[0]))
    if isinstance(plant, ConicalTankPlant):
        ts, clamped = plant.simulate(u, op.y_s)
    else:
        ts, clamped = plant.simulate_at(u, op), False
    out = Path(args.out or f"{args.plant}_sim.csv")
    try:
        ts.to_csv(out)
    except OSError as exc:
        raise NarxFusionError(f"cannot write {out}: {exc}") from exc
    tail = ts.y[-max(1, len(ts) // 10):]
    summary = {"plant": args.plant, "N": len(ts), "final_y": float(ts.y[-1]),
               "steady_state_estimate": float(np.mean(tail)), "clamped": clamped, "csv": str(out)}
    print(json.dumps(summary))
    return 0


def cmd_identify_local(args) -> int:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.data:
        if not args.op:
            raise UsageError("--data needs --op U_S:Y_S")
        u_s, y_s = (float(v) for v in args.op.split(":"))
        fit = fit_arx(TimeSeries.from_csv(args.data), OperatingPoint(u_s, y_s), args.n_a, args.n_b, args.delay)
        path = out_dir / "M1.json"
        to_json(fit.model, path)
        print(json.dumps({"models": [str(path)], "residual_norm": fit.residual_norm}))
        return 0
    if not (args.plant and args.ops):
        raise UsageError("give either --plant with --ops or --data with --op")
    plant = make_plant(args.plant)
    values = [float(v) for v in args.ops.split(",")]
    if args.by == "output":
        if not isinstance(plant, ConicalTankPlant):
            raise UsageError("--by output is only supported for the tank")
        ops = [operating_point_for_output(plant, v) for v in values]
    else:
        ops = [solve_steady_state(plant, v) for v in values]
    models = make_local_models(plant, ops, length=args.length, n_a=args.n_a, n_b=args.n_b,
                               delay=args.delay, seed=args.seed)
    paths = []
    for i, m in enumerate(models, start=1):
        path = out_dir / f"M{i}.json"
        to_json(m, path)
        paths.append(str(path))
    print(json.dumps({"models": paths}))
    return 0


def _write_run(res, out_dir: Path) -> dict:
    out_dir.mkdir(parents=True, exist_ok=True)
    to_json(res.model, out_dir / "model.json")
    res.report.to_json(out_dir / "report.json")
    res.report.cv.to_csv(out_dir / "cv_curve.csv")
    for i, m in enumerate(res.local_models, start=1):
        to_json(m, out_dir / f"M{i}.json")
    traces = out_dir / "traces"
    traces.mkdir(exist_ok=True)
    for r in res.results:
        r.trace_to_csv(traces / f"op_{r.value:g}.csv")
    if res.results:
        res.table_to_csv(out_dir / "table.csv")
    return {"out_dir": str(out_dir), "n_s": res.report.n_s, "lambda": res.report.lam,
            "selected_features": res.report.selected_features}


def cmd_fuse(args) -> int:
    if args.config in CASES and not Path(args.config).exists():
        cfg = load_case(args.config)
    else:
        cfg = load_config(args.config)
    res = run_experiment(cfg, mode=args.mode)
    out_dir = Path(args.out_dir or cfg.output_dir)
    print(json.dumps(_write_run(res, out_dir)))
    return 0


def cmd_validate(args) -> int:
    doc = json.loads(Path(args.model).read_text(encoding="utf-8"))
    model = ArxModel.from_dict(doc) if "a" in doc else PNarxModel.from_dict(doc)
    truth = TimeSeries.from_csv(args.data)
    print(json.dumps({"mse": validate(model, truth, args.mode), "mode": args.mode, "N_v": len(truth)}))
    return 0


def cmd_benchmark(args) -> int:
    if args.case not in CASES:
        raise ConfigError(f"unknown case {args.case!r}; valid cases: {', '.join(CASES)}")
    cfg = load_config(args.config) if args.config else load_case(args.case)
    result = benchmark(args.case, cfg)
    out_dir = Path(args.out_dir or cfg.output_dir)
    _write_run(result.experiment, out_dir)
    (out_dir / "benchmark.json").write_text(result.to_json() + "\n", encoding="utf-8")
    for check in result.checks:
        print(check.line())
    print(json.dumps({"case": args.case, "passed": result.passed, "table": str(out_dir / "table.csv")}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="narx-fusion", description="Fuse local linear models into a polynomial NARX model.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="simulate a reference plant and write a k,u,y CSV")
    s.add_argument("--plant", required=True, choices=sorted(CASES))
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--const", type=float, help="constant input level")
    src.add_argument("--step", help="step input BEFORE:AFTER@INDEX")
    src.add_argument("--prbs", help="PRBS input CENTER:AMPLITUDE[:PERIOD]")
    s.add_argument("--n", type=int, required=True, help="number of samples")
    s.add_argument("--dt", type=float, help="sampling interval (tank integration step)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--y0", type=float, help="initial output (default: steady state of the first input)")
    s.add_argument("--out", help="output CSV path")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("identify-local", help="fit local ARX models and write them as JSON")
    s.add_argument("--plant", choices=sorted(CASES))
    s.add_argument("--ops", help="comma-separated operating points")
    s.add_argument("--by", choices=("input", "output"), default="input",
                   help="whether --ops are steady inputs or steady outputs (tank levels)")
    s.add_argument("--data", help="fit from this k,u,y CSV instead of a plant test")
    s.add_argument("--op", help="operating point U_S:Y_S for --data")
    s.add_argument("--length", type=int, default=1000)
    s.add_argument("--n-a", type=int, default=2)
    s.add_argument("--n-b", type=int, default=2)
    s.add_argument("--delay", type=int, default=0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out-dir", default=".")
    s.set_defaults(func=cmd_identify_local)

    s = sub.add_parser("fuse", help="run a fusion experiment from a TOML config (or a case name)")
    s.add_argument("config", help="config path, or one of: " + ", ".join(CASES))
    s.add_argument("--out-dir")
    s.add_argument("--mode", choices=("free_run", "one_step"), default="free_run")
    s.set_defaults(func=cmd_fuse)

    s = sub.add_parser("validate", help="MSE of a model JSON against a k,u,y CSV")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--mode", choices=("free_run", "one_step"), default="free_run")
    s.set_defaults(func=cmd_validate)

    s = sub.add_parser("benchmark", help="run a case-study grid and score it")
    s.add_argument("case", help="one of: " + ", ".join(CASES))
    s.add_argument("--config", help="override the shipped case config")
    s.add_argument("--out-dir")
    s.set_defaults(func=cmd_benchmark)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        return _fail("usage", str(exc), code=2)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        return _fail("usage", str(exc), code=2)
    except ConfigError as exc:
        return _fail("config", str(exc), stage="config")
    except FusionError as exc:
        return _fail(type(exc.cause).__name__, str(exc.cause), stage=exc.stage)
    except (NarxFusionError, ValueError, OSError) as exc:
        return _fail(type(exc).__name__, str(exc), stage=args.command)


if __name__ == "__main__":
    sys.exit(main())
