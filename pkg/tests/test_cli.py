import json

import numpy as np
import pandas as pd
import pytest

from emdynamics.cli import EXIT_INPUT, EXIT_NUMERICAL, EXIT_OK, main
from emdynamics.models import Dataset

from .create_mixture_data import create_mixture_data


def read_report(path):
    payload = json.loads(path.read_text())
    assert set(payload) == {"manifest", "report"}
    return payload


def without_wall_clock(path):
    payload = json.loads(path.read_text())
    payload["manifest"].pop("wall_clock")
    return payload


@pytest.fixture
def fast_config(tmp_path):
    path = tmp_path / "fast.yaml"
    path.write_text("solver:\n  max_iters: 50\n")
    return path


def test_synth_writes_the_requested_sample(tmp_path):
    assert main(["synth", "--n", "200", "--seed", "7", "--out", str(tmp_path)]) == EXIT_OK
    data = Dataset.from_csv(tmp_path / "data.csv")
    y = data.observations[:, 0]
    assert data.n == 200
    assert y[y < 0].mean() == pytest.approx(-3.0, abs=0.3)
    assert y[y > 0].mean() == pytest.approx(3.0, abs=0.3)
    report = read_report(tmp_path / "synth.json")
    assert report["manifest"]["seed"] == 7
    assert report["report"]["n"] == 200


def test_synth_of_zero_rows_writes_the_header(tmp_path):
    assert main(["synth", "--n", "0", "--out", str(tmp_path)]) == EXIT_OK
    assert (tmp_path / "data.csv").read_text().strip() == "x1"


def test_synth_is_reproducible(tmp_path):
    main(["synth", "--seed", "3", "--out", str(tmp_path / "a")])
    main(["synth", "--seed", "3", "--out", str(tmp_path / "b")])
    first = (tmp_path / "a" / "data.csv").read_bytes()
    assert first == (tmp_path / "b" / "data.csv").read_bytes()


def test_fit_converges_monotonically(tmp_path):
    with create_mixture_data(write_truth=False) as (_, _, _, data_path, _):
        assert main(["fit", "--data", str(data_path), "--out", str(tmp_path)]) == EXIT_OK
    frame = pd.read_csv(tmp_path / "trajectory.csv")
    assert list(frame.columns[:9]) == [
        "k", "loglik", "step_norm", "ascent_slack", "kl_to_next", "q_gain", "V", "dV", "slack",
    ]
    lls = frame["loglik"].to_numpy()
    assert np.all(np.diff(lls) >= -1e-12 * (1 + np.abs(lls[:-1])))
    summary = read_report(tmp_path / "summary.json")["report"]
    assert summary["status"] == "converged"
    assert summary["delta"] is None
    params = json.loads((tmp_path / "params.json").read_text())
    assert sorted(np.round(np.ravel(params["means"]))) == [-3.0, 3.0]


def test_fit_with_delta_respects_the_radius(tmp_path, fast_config):
    with create_mixture_data(write_truth=False) as (_, _, _, data_path, _):
        argv = ["fit", "--data", str(data_path), "--out", str(tmp_path), "--delta", "0.001"]
        assert main([*argv, "--config", str(fast_config)]) == EXIT_OK
    frame = pd.read_csv(tmp_path / "trajectory.csv")
    assert len(frame) == 51
    assert np.all(frame["step_norm"] <= 0.001 + 1e-12)
    assert np.all(frame["q_gain"].iloc[:-1] >= -1e-12)
    summary = read_report(tmp_path / "summary.json")
    assert summary["report"]["delta"] == 0.001
    assert summary["manifest"]["config"]["solver"]["delta"] == 0.001


def test_fit_diagnose_stability_and_basin(tmp_path):
    with create_mixture_data(write_truth=False) as (_, _, _, data_path, _):
        data = str(data_path)
        fit_dir, out = tmp_path / "fit", tmp_path / "diag"
        assert main(["fit", "--data", data, "--out", str(fit_dir)]) == EXIT_OK
        theta_star = str(fit_dir / "params.json")

        argv = ["diagnose", "--data", data, "--trajectory", str(fit_dir / "trajectory.csv")]
        assert main([*argv, "--out", str(out)]) == EXIT_OK
        diagnosis = read_report(out / "diagnosis.json")["report"]
        assert diagnosis["monotone"]
        assert diagnosis["max_dV"] <= 1e-12 * (1 + abs(diagnosis["log_scale"]))
        assert diagnosis["min_V"] >= 0.0

        argv = ["stability", "--data", data, "--theta-star", theta_star, "--out", str(out)]
        assert main([*argv, "--radius", "0.05", "--samples", "30"]) == EXIT_OK
        certificate = read_report(out / "certificate.json")["report"]
        assert certificate["classification"] in ("local-max", "mle-candidate")
        assert certificate["is_fixed_point"]
        assert certificate["constants"]["radius"] == 0.05

        argv = ["basin", "--data", data, "--theta-star", theta_star, "--out", str(out)]
        assert main([*argv, "--samples", "20"]) == EXIT_OK
        basin = read_report(out / "basin.json")["report"]
        assert basin["return_fraction"] == 1.0
        assert len(pd.read_csv(out / "basin.csv")) == 20


def test_pipeline_is_reproducible(tmp_path):
    for run_dir in ("a", "b"):
        out = tmp_path / run_dir
        data = str(out / "data.csv")
        theta_star = str(out / "params.json")
        seed = ["--seed", "1", "--out", str(out)]
        assert main(["synth", "--n", "200", *seed]) == EXIT_OK
        assert main(["fit", "--data", data, *seed]) == EXIT_OK
        argv = ["stability", "--data", data, "--theta-star", theta_star, *seed]
        assert main([*argv, "--radius", "0.05", "--samples", "20"]) == EXIT_OK
        argv = ["basin", "--data", data, "--theta-star", theta_star, *seed]
        assert main([*argv, "--samples", "20"]) == EXIT_OK
    a, b = tmp_path / "a", tmp_path / "b"
    for name in ("data.csv", "trajectory.csv", "params.json", "basin.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    for name in ("synth.json", "summary.json", "certificate.json", "basin.json"):
        assert without_wall_clock(a / name) == without_wall_clock(b / name)


def test_malformed_data_is_an_input_error(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("a,b\n1,2\n")
    assert main(["fit", "--data", str(bad), "--out", str(tmp_path)]) == EXIT_INPUT
    missing = tmp_path / "missing.csv"
    assert main(["fit", "--data", str(missing), "--out", str(tmp_path)]) == EXIT_INPUT


def test_basin_without_reference_is_an_input_error(tmp_path):
    with create_mixture_data(write_truth=False) as (_, _, _, data_path, _):
        assert main(["basin", "--data", str(data_path), "--out", str(tmp_path)]) == EXIT_INPUT


def test_unknown_map_factory_is_an_input_error(tmp_path):
    config = tmp_path / "bad_system.yaml"
    target = "emdynamics.harness.no_such_factory"
    config.write_text(f"basin:\n  system:\n    _target_: {target}\n")
    with create_mixture_data(write_truth=False) as (_, _, _, data_path, _):
        argv = ["basin", "--data", str(data_path), "--out", str(tmp_path)]
        argv += ["--n-inits", "2", "--config", str(config)]
        assert main(argv) == EXIT_INPUT


def test_random_initializations_for_basin(tmp_path):
    with create_mixture_data(write_truth=False) as (_, _, _, data_path, _):
        argv = ["basin", "--data", str(data_path), "--out", str(tmp_path), "--n-inits", "4"]
        assert main(argv) == EXIT_OK
    basin = read_report(tmp_path / "basin.json")["report"]
    assert len(basin["assignments"]) == 4
    assert basin["return_fraction"] is None


def test_overflowing_likelihood_is_a_numerical_error(tmp_path):
    data = tmp_path / "data.csv"
    data.write_text("x1\n0\n1e155\n")
    init = tmp_path / "init.json"
    init.write_text(
        json.dumps(
            {"family": "gaussian-diag", "K": 1, "d": 1, "weights": [1.0],
             "means": [[0.0]], "log_variances": [[0.0]]}
        )
    )
    argv = ["fit", "--data", str(data), "--init", str(init), "--out", str(tmp_path)]
    assert main(argv) == EXIT_NUMERICAL
