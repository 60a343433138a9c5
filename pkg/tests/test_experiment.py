import numpy as np
import pytest

from narx_fusion.core import ConfigError
from narx_fusion.experiment import (
    CASES,
    SEED_ENV,
    benchmark_checks,
    load_case,
    make_plant,
    parse_config,
    validation_input,
)


def base_doc(**fusion):
    return {
        "schema_version": 1,
        "plant": {"name": "toy"},
        "operating_points": {"anchors": [0.1, 0.3], "validation": [0.2], "validation_step": 0.05},
        "fusion": {"gamma": 0.5} | fusion,
    }


@pytest.mark.parametrize("case", CASES)
def test_shipped_cases_parse(case):
    cfg = load_case(case)
    assert cfg.plant == case
    assert len(cfg.anchors) == 2


def test_case_settings():
    toy, tank = load_case("toy"), load_case("tank")
    assert (toy.fusion.n_train, toy.fusion.n_val, toy.fusion.cv_folds, toy.fusion.gamma) == (448, 155, 3, 0.5)
    assert (tank.fusion.n_train, tank.fusion.n_val, tank.fusion.cv_folds, tank.fusion.gamma) == (7109, 3048, 5, 0.75)
    assert tank.by == "output"
    assert tank.validation == (4.0, 5.0, 7.5, 8.5, 10.0, 11.0)


def test_gamma_outside_interval_names_field():
    with pytest.raises(ConfigError, match=r"\[fusion\].*gamma"):
        parse_config(base_doc(gamma=1.0))


def test_unknown_fusion_field():
    with pytest.raises(ConfigError, match="lamda"):
        parse_config(base_doc(lamda=3))


def test_wrong_type_names_field():
    doc = base_doc()
    doc["operating_points"]["anchors"] = "0.1"
    with pytest.raises(ConfigError, match="operating_points.anchors"):
        parse_config(doc)


def test_schema_version_required():
    doc = base_doc()
    del doc["schema_version"]
    with pytest.raises(ConfigError, match="schema_version"):
        parse_config(doc)


def test_unknown_plant():
    doc = base_doc()
    doc["plant"]["name"] = "boiler"
    with pytest.raises(ConfigError):
        parse_config(doc)


def test_seed_env_override(monkeypatch):
    monkeypatch.setenv(SEED_ENV, "42")
    assert parse_config(base_doc(seed=3)).fusion.seed == 42
    monkeypatch.setenv(SEED_ENV, "x")
    with pytest.raises(ConfigError):
        parse_config(base_doc())


def test_make_plant_unknown():
    with pytest.raises(ConfigError, match="toy, tank, hw"):
        make_plant("bogus")


def test_validation_input_shape():
    u = validation_input(0.2, 100, 0.05)
    assert np.all(u[:10] == 0.2)
    assert np.all(u[10:55] == 0.25)
    assert np.all(u[55:] == pytest.approx(0.15))


def test_toy_checks_pass(toy_run):
    checks = benchmark_checks("toy", toy_run)
    assert checks and all(c.passed for c in checks)
    assert checks[0].line().startswith("PASS")
