import json

import pytest

from slowfastreduce.config import ConfigurationError, load_config, parse_config


def dump(payload) -> str:
    return json.dumps(payload)


def test_valid_configuration():
    config = parse_config(
        dump(
            {
                "experiment": "average_sweep",
                "master_seed": 7,
                "system": {"name": "toy", "sigma": 0.1},
                "paths": {"x0": [0.05], "T": 1, "dt_slow": 0.001},
                "averaging": {"eps_list": [0.1, 0.0316, 0.01], "n_replicas": 2000, "closed_form": True},
            }
        )
    )
    assert config.master_seed == 7
    assert config.paths.T == 1.0
    assert isinstance(config.paths.T, float)
    assert config.averaging.eps_list == [0.1, 0.0316, 0.01]
    assert config.manifold.n_realizations == 64
    assert config.to_dict()["system"]["name"] == "toy"


def test_unknown_key():
    with pytest.raises(ConfigurationError, match="paths.dt"):
        parse_config(dump({"experiment": "simulate", "paths": {"dt": 0.1}}))


def test_missing_experiment():
    with pytest.raises(ConfigurationError, match="experiment"):
        parse_config(dump({"master_seed": 1}))


def test_unknown_experiment():
    with pytest.raises(ConfigurationError):
        parse_config(dump({"experiment": "everything"}))


def test_required_eps_list():
    with pytest.raises(ConfigurationError, match="manifold.eps_list"):
        parse_config(dump({"experiment": "manifold_gap"}))


def test_eps_list_must_decrease():
    with pytest.raises(ConfigurationError, match="strictly decreasing"):
        parse_config(dump({"experiment": "manifold_gap", "manifold": {"eps_list": [0.01, 0.1, 0.05]}}))


def test_eps_list_range():
    with pytest.raises(ConfigurationError):
        parse_config(dump({"experiment": "average_sweep", "averaging": {"eps_list": [2.0, 0.1, 0.01]}}))


def test_json_syntax_error_has_position():
    with pytest.raises(ConfigurationError, match="line 2, column"):
        parse_config('{"experiment": "simulate",\n "master_seed": }')


@pytest.mark.parametrize(
    "payload",
    [
        {"experiment": "simulate", "master_seed": "seven"},
        {"experiment": "simulate", "master_seed": 1.5},
        {"experiment": "simulate", "paths": {"x0": 0.05}},
        {"experiment": "simulate", "averaging": {"closed_form": 1}},
        {"experiment": "simulate", "system": []},
    ],
)
def test_wrong_types(payload):
    with pytest.raises(ConfigurationError):
        parse_config(dump(payload))


def test_bad_budget():
    with pytest.raises(ConfigurationError, match="benchmark.budget"):
        parse_config(dump({"experiment": "validate_toy", "benchmark": {"budget": "huge"}}))


def test_system_eps_range():
    with pytest.raises(ConfigurationError, match="system.eps"):
        parse_config(dump({"experiment": "simulate", "system": {"eps": 0.0}}))


def test_missing_file(tmp_path):
    with pytest.raises(ConfigurationError, match="not found"):
        load_config(str(tmp_path / "absent.json"))


def test_load_from_file(tmp_path):
    path = tmp_path / "experiment.json"
    path.write_text(dump({"experiment": "sigma_table", "fluctuation": {"x_grid": [0.0, 0.05]}}))
    assert load_config(str(path)).fluctuation.x_grid == [0.0, 0.05]
