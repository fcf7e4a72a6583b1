import json
import logging
import os

import pytest

from common_functions import load_schema, validate_record
from etmhe import BASE_PATH, main

FAST = """
[model]
{model}

[simulation]
steps = 10
seed = 1
alpha = 5
m = 4

[params]
p1 = {p1}
p2 = [[4.539, 4.171], [4.171, 3.834]]
q = [[1000, 0, 0], [0, 10000, 0], [0, 0, 1000]]
r = [[1000]]
eta = 0.91

[output]
out_dir = {out}
messages = True
"""


def _config(tmp_path, model="name = batch_reactor", p1="[[4.539, 4.171], [4.171, 3.834]]", extra=""):
    path = tmp_path / "exp.ini"
    path.write_text(FAST.format(model=model, p1=p1, out=tmp_path / "out") + extra)
    return str(path)


def _data_rows(path):
    with open(path) as fh:
        lines = [line for line in fh if not line.startswith("#")]
    return lines[1:]


@pytest.fixture(autouse=True)
def single_worker(monkeypatch):
    monkeypatch.setenv("ETMHE_THREADS", "1")
    monkeypatch.setenv("LOGLEVEL", "WARNING")


def test_simulate_writes_artifacts(tmp_path, capsys):
    assert main(["simulate", "--config", _config(tmp_path), "--alpha", "5"]) == 0
    out = capsys.readouterr().out
    assert "simulation.alpha = 5" in out
    assert "events=" in out
    run_csv = tmp_path / "out" / "run.csv"
    assert len(_data_rows(run_csv)) == 11
    with open(run_csv) as fh:
        assert fh.readline().startswith("# ")
    assert len(_data_rows(tmp_path / "out" / "gamma.csv")) == 10


def test_simulate_is_byte_deterministic(tmp_path):
    config = _config(tmp_path)
    assert main(["simulate", "--config", config]) == 0
    first = (tmp_path / "out" / "run.csv").read_bytes()
    assert main(["simulate", "--config", config]) == 0
    assert (tmp_path / "out" / "run.csv").read_bytes() == first


def test_messages_match_schemas(tmp_path):
    assert main(["simulate", "--config", _config(tmp_path)]) == 0
    logger = logging.getLogger("test")
    schemas = {"measurement": load_schema(logger, BASE_PATH, "measurement_msg"),
               "feedback": load_schema(logger, BASE_PATH, "feedback_msg")}
    with open(tmp_path / "out" / "messages.jsonl") as fh:
        entries = [json.loads(line) for line in fh]
    assert entries[0]["kind"] == "measurement" and entries[0]["t"] == 1
    for entry in entries:
        kind = entry.pop("kind")
        validate_record(schemas[kind], entry)


def test_simulate_with_svg(tmp_path):
    assert main(["simulate", "--config", _config(tmp_path), "--svg", "--out", str(tmp_path / "figs")]) == 0
    assert os.path.exists(tmp_path / "figs" / "states.svg")
    assert os.path.exists(tmp_path / "figs" / "gamma.svg")


def test_missing_model_name(tmp_path, capsys):
    assert main(["simulate", "--config", _config(tmp_path, model="")]) == 2
    assert "model.name" in capsys.readouterr().err


def test_unknown_key_is_rejected(tmp_path, capsys):
    assert main(["simulate", "--config", _config(tmp_path, extra="\n[solver]\nstep_limit = 3\n")]) == 2
    assert "solver.step_limit" in capsys.readouterr().err


def test_missing_config_file(tmp_path):
    assert main(["simulate", "--config", str(tmp_path / "nope.ini")]) == 2


def test_check_bundled_config(capsys):
    assert main(["check", "--config", os.path.join(BASE_PATH, "config.ini")]) == 0
    out = capsys.readouterr().out
    assert "scheme=fixed M_min=34" in out
    assert "scheme=varying M_min=23" in out
    assert "violations=0" in out


def test_check_invalid_p1(tmp_path):
    assert main(["check", "--config", _config(tmp_path, p1="[[0, 0], [0, 0]]")]) == 2


def test_sweep_outputs(tmp_path):
    config = _config(tmp_path)
    assert main(["sweep", "--config", config, "--alphas", "1,5", "--seeds", "3"]) == 0
    summary = tmp_path / "out" / "sweep_summary.csv"
    assert len(_data_rows(summary)) == 2
    assert len(_data_rows(tmp_path / "out" / "sweep_runs.csv")) == 6
    header = [line for line in open(summary) if not line.startswith("#")][0]
    assert header.strip() == "alpha,mean_events,std_events,mean_rmse"
    first = summary.read_bytes()
    assert main(["sweep", "--config", config, "--alphas", "1,5", "--seeds", "3"]) == 0
    assert summary.read_bytes() == first


def test_compare_and_ablation(tmp_path, capsys):
    config = _config(tmp_path)
    assert main(["compare", "--config", config, "--seeds", "2"]) == 0
    assert main(["ablation", "--config", config, "--seeds", "2"]) == 0
    assert len(_data_rows(tmp_path / "out" / "compare.csv")) == 2
    assert len(_data_rows(tmp_path / "out" / "ablation.csv")) == 2
    assert "varying_wins=" in capsys.readouterr().out


@pytest.mark.slow
def test_bundled_simulation(tmp_path):
    assert main(["simulate", "--config", os.path.join(BASE_PATH, "config.ini"), "--out", str(tmp_path)]) == 0
    assert len(_data_rows(tmp_path / "run.csv")) == 61
