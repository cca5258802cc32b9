import math

import pytest

from sparsecoop.config import ConfigError, builtin_scenarios, load_experiment, parse_experiment, parse_range_spec

BASE = """\
name: t
seed: 4
generator:
  n_vehicles: 3
"""


def test_range_spec_forms():
    assert parse_range_spec("0:1:0.2") == (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)
    assert parse_range_spec("0,100,200") == (0.0, 100.0, 200.0)
    assert parse_range_spec(0.5) == (0.5,)
    for bad in ("1:0:0.2", "0:1", "a", "0:1:0"):
        with pytest.raises(ValueError):
            parse_range_spec(bad)


def test_minimal_config_defaults():
    exp = parse_experiment(BASE)
    assert exp.name == "t" and exp.scenario.seed == 4
    assert len(exp.scenario.agents) == 2 and exp.sweep.epsilon == (0.0,)
    assert math.isclose(exp.scenario.agents[0].lidar.height_h, 1.9)


def test_overrides_replace_seed_and_sweep():
    exp = parse_experiment(BASE, overrides={"seed": 9, "epsilon": "0:1:0.5", "latency_ms": "0,200", "sorting": "local"})
    assert exp.scenario.seed == 9
    assert exp.sweep.epsilon == (0.0, 0.5, 1.0) and exp.sweep.latency_ms == (0.0, 200.0)
    assert exp.pipeline.sorting == "local"


def test_config_hash_tracks_content():
    a = parse_experiment(BASE).config_hash()
    assert a == parse_experiment(BASE).config_hash()
    assert a != parse_experiment(BASE, overrides={"seed": 5}).config_hash()


@pytest.mark.parametrize(
    "text, line, field",
    [
        (BASE + "bogus: 1\n", 5, "bogus"),
        (BASE + "pipeline:\n  cpm_threshold: 2\n", 6, "pipeline.cpm_threshold"),
        (BASE + "pipeline:\n  sorting: sideways\n", 6, "pipeline.sorting"),
        ("name: t\nseed: -1\ngenerator: {}\n", 2, "seed"),
        (BASE + "lidar:\n  rings: many\n", 6, "lidar.rings"),
        (BASE + "error_model:\n  epsilon: 1.5\n", 6, "error_model.epsilon"),
    ],
)
def test_field_errors_report_line(text, line, field):
    with pytest.raises(ConfigError) as err:
        parse_experiment(text, "cfg.yaml")
    assert err.value.line == line and err.value.field_path == field
    assert f"cfg.yaml:{line}" in str(err.value)


def test_structural_errors():
    with pytest.raises(ConfigError, match="duplicate key"):
        parse_experiment("seed: 1\nseed: 2\n")
    with pytest.raises(ConfigError, match="YAML syntax"):
        parse_experiment("seed: [1\n")
    with pytest.raises(ConfigError, match="either 'generator'"):
        parse_experiment("seed: 1\n")
    with pytest.raises(ConfigError, match="ego_id"):
        parse_experiment(BASE + "pipeline:\n  ego_id: 7\n")
    with pytest.raises(ConfigError):
        parse_experiment(BASE, overrides={"epsilon": "0:2:1"})


def test_explicit_scene():
    text = """\
seed: 1
vehicles:
  - {x: 0, y: 0, l: 4.5, w: 1.9, h: 1.6, vx: 10}
  - {x: 20, y: 3.5, l: 4.5, w: 1.9, h: 1.6}
agents:
  - {id: 0, vehicle: 0}
  - {id: 5, pose: {x: 30, y: -8, yaw_deg: 90}}
"""
    exp = parse_experiment(text)
    assert [a.agent_id for a in exp.scenario.agents] == [0, 5]
    assert exp.scenario.vehicles[0].velocity == (10.0, 0.0)
    assert math.isclose(exp.scenario.agents[1].pose.yaw, math.pi / 2)


def test_builtins_load():
    names = builtin_scenarios()
    assert {"two_agents", "three_agents", "intersection", "constant_velocity"} <= set(names)
    for n in names:
        load_experiment(n)
    with pytest.raises(ConfigError, match="not found"):
        load_experiment("no_such_scene")
