import json

import pytest

import main


@pytest.fixture
def write_config(tmp_path):
    def write(payload, name="experiment.json"):
        path = tmp_path / name
        path.write_text(json.dumps(payload))
        return str(path)

    return write


def read_json(path):
    with open(path, "r", encoding="utf-8") as handle:
        return json.load(handle)


def test_invalid_configuration_exits_with_error(write_config, tmp_path):
    path = write_config(
        {"experiment": "manifold_gap", "output_dir": str(tmp_path / "out"), "manifold": {"eps_list": [0.01, 0.1, 0.05]}}
    )
    assert main.main(["run", path]) == 1
    assert not (tmp_path / "out").exists()


def test_missing_configuration(tmp_path):
    assert main.main(["run", str(tmp_path / "absent.json")]) == 1


def test_validate_toy_zero_budget(tmp_path):
    out = tmp_path / "validate"
    assert main.main(["validate-toy", "--budget", "zero", "--seed", "4", "--out", str(out)]) == 0

    report = read_json(out / "validation_report.json")
    assert report["ok"] is True
    assert len(report["items"]) == 9

    manifest = read_json(out / "manifest.json")
    assert manifest["master_seed"] == 4
    assert manifest["version"]
    assert manifest["exit_code"] == 0
    assert "validation_report.json" in manifest["files"]
    assert (out / "run.log").exists()


def test_simulation_is_reproducible(write_config, tmp_path):
    outputs = []
    for name in ("a", "b"):
        payload = {
            "experiment": "simulate",
            "master_seed": 3,
            "output_dir": str(tmp_path / name),
            "system": {"name": "toy", "eps": 0.01},
            "paths": {"x0": [0.05], "T": 0.05, "dt_slow": 0.001, "n_replicas": 2},
        }
        assert main.main(["run", write_config(payload, f"{name}.json")]) == 0
        outputs.append((tmp_path / name / "path_000.csv").read_bytes())
    assert outputs[0] == outputs[1]
    assert outputs[0].startswith(b"t,x_1,y_1\n")


def test_manifold_gap_without_fast_forcing(write_config, tmp_path):
    out = tmp_path / "gap"
    path = write_config(
        {
            "experiment": "manifold_gap",
            "output_dir": str(out),
            "system": {"name": "linear_test", "eps": 0.1},
            "manifold": {"X": [0.1], "eps_list": [0.1, 0.05, 0.01], "n_realizations": 4},
        }
    )
    assert main.main(["run", path]) == 0
    assert read_json(out / "manifold_gap.json")["exact_zero"] is True
    assert (out / "manifold_gap.dat").exists()


def test_closed_form_needs_the_toy(write_config, tmp_path):
    out = tmp_path / "sweep"
    path = write_config(
        {
            "experiment": "average_sweep",
            "output_dir": str(out),
            "system": {"name": "linear_test"},
            "averaging": {"eps_list": [0.1, 0.05, 0.01], "closed_form": True},
        }
    )
    assert main.main(["run", path]) == 1
    assert "error" in read_json(out / "manifest.json")["summary"]


def test_fit_rate(tmp_path, capsys):
    path = tmp_path / "rates.csv"
    path.write_text("eps,error,stderr\n0.1,0.1,0.01\n0.01,0.01,0.001\n0.001,0.001,0.0001\n")
    assert main.main(["fit-rate", str(path)]) == 0
    assert capsys.readouterr().out.startswith("slope 1.000000 ci [")


def test_fit_rate_needs_three_rows(tmp_path):
    path = tmp_path / "short.csv"
    path.write_text("eps,error,stderr\n0.1,0.1,0.01\n0.01,0.01,0.001\n")
    assert main.main(["fit-rate", str(path)]) == 1


def test_fit_rate_missing_file(tmp_path):
    assert main.main(["fit-rate", str(tmp_path / "nothing.csv")]) == 1
