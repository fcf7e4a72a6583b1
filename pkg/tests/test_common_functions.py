import logging
import os

import numpy as np
import pytest

from common_functions import (ConfigError, config_echo, config_line, format_value, load_config, load_schema,
                              parse_matrix, parse_vector, resolve_threads, schema_columns, setup_logging,
                              validate_config_keys, validate_record, write_csv)

logger = logging.getLogger("test")
BASE = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def test_setup_logging_rejects_unknown_level(monkeypatch):
    monkeypatch.setenv("LOGLEVEL", "chatty")
    with pytest.raises(ValueError, match="Invalid log level"):
        setup_logging()


def test_load_config_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_config(logger, str(tmp_path / "missing.ini"))


def test_unknown_key_reports_line(tmp_path):
    path = tmp_path / "exp.ini"
    path.write_text("[model]\nname = batch_reactor\n\n[simulation]\nsteps = 10\nstep_size = 2\n")
    config = load_config(logger, str(path))
    with pytest.raises(ConfigError) as info:
        validate_config_keys(logger, config, {"model": ("name",), "simulation": ("steps",)}, str(path))
    assert info.value.field == "simulation.step_size"
    assert info.value.line == 6
    assert config_line(str(path), "simulation") == 4


def test_unknown_section(tmp_path):
    path = tmp_path / "exp.ini"
    path.write_text("[model]\nname = x\n[extras]\na = 1\n")
    with pytest.raises(ConfigError, match="unknown section"):
        validate_config_keys(logger, load_config(logger, str(path)), {"model": ("name",)}, str(path))


def test_parse_matrix_and_vector():
    assert parse_matrix("[[1, 2], [2, 5]]").shape == (2, 2)
    assert parse_matrix("1000").shape == (1, 1)
    assert list(parse_vector("[0.1, 4.5]")) == [0.1, 4.5]
    with pytest.raises(ConfigError, match="p1"):
        parse_matrix("[[1, 2", "p1")
    with pytest.raises(ConfigError):
        parse_vector("[[1], [2]]")


def test_schema_columns_expand_arrays():
    schema = load_schema(logger, BASE, "run")
    columns = schema_columns(schema, {"x": 2, "x_hat": 2})
    assert columns[:5] == ["t", "x_1", "x_2", "x_hat_1", "x_hat_2"]
    with pytest.raises(ValueError):
        schema_columns(schema)


def test_validate_record():
    schema = load_schema(logger, BASE, "feedback_msg")
    validate_record(schema, {"t": 3, "d_tilde_next": 0.2, "x_first": [1.0, 2.0], "x_now": [1.5, 2.5]})
    with pytest.raises(ValueError, match="Missing"):
        validate_record(schema, {"t": 3, "x_first": [1.0], "x_now": [1.0]})
    with pytest.raises(ValueError, match="not integer"):
        validate_record(schema, {"t": 3.5, "d_tilde_next": 0.2, "x_first": [1.0], "x_now": [1.0]})


def test_format_value():
    assert format_value(True) == "1"
    assert format_value(np.int64(7)) == "7"
    assert float(format_value(0.1)) == 0.1
    assert format_value(float("nan")) == "nan"


def test_write_csv_is_byte_stable(tmp_path):
    rows = [[1, 0.1, True], [2, 1 / 3, False]]
    a = write_csv(logger, str(tmp_path / "a.csv"), ["t", "v", "flag"], rows, ["alpha = 5"])
    b = write_csv(logger, str(tmp_path / "b.csv"), ["t", "v", "flag"], rows, ["alpha = 5"])
    text = open(a).read()
    assert text == open(b).read()
    assert text.splitlines()[:2] == ["# alpha = 5", "t,v,flag"]
    with pytest.raises(ValueError, match="values"):
        write_csv(logger, str(tmp_path / "c.csv"), ["t"], [[1, 2]])


def test_resolve_threads(monkeypatch):
    monkeypatch.setenv("ETMHE_THREADS", "3")
    assert resolve_threads(logger) == 3
    monkeypatch.setenv("ETMHE_THREADS", "0")
    with pytest.raises(ConfigError):
        resolve_threads(logger)


def test_config_echo_sorted():
    assert config_echo({"sim": {"b": 2, "a": 1}}) == ["sim.a = 1", "sim.b = 2"]
