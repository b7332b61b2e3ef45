import json
import math

import numpy as np
import pytest
import yaml
from hypothesis import given, settings
from hypothesis import strategies as st

from store3d.cli import main
from store3d.config import from_dict, load_config
from store3d.errors import ConfigError
from store3d.experiment import model_state
from store3d.io import dumps, read_csv, read_jsonl, write_csv, write_jsonl
from store3d.numeric import save_weights
from store3d.pipeline import build_model

SMALL_RUN = {
    "model": {"grid": [8, 8], "query_grid": [8, 16], "head_features": 16},
    "synthetic": {"n_scenes": 1, "duration": 3.0},
}


@pytest.fixture
def small_cfg(tmp_path):
    p = tmp_path / "small.yaml"
    p.write_text(yaml.safe_dump(SMALL_RUN))
    return str(p)


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


# -- config ------------------------------------------------------------------------


def test_defaults_load_and_yaml_overrides(tmp_path):
    assert load_config(None).model.top_query_fraction == 0.25
    p = tmp_path / "c.yaml"
    p.write_text("model:\n  grid: [8, 8]\nschedule:\n  tkr: 0.5\n")
    cfg = load_config(p)
    assert cfg.model.grid == (8, 8) and cfg.schedule.tkr == 0.5


@pytest.mark.parametrize(
    "data",
    [{"modle": {}}, {"model": {"gird": [8, 8]}}, {"synthetic": {"counts": {"dragons": 1}}}, {"schedule": {"tkr": 0.0}},
     {"mode": "fast"}, {"train": {"warmup": [5, 1]}}, {"schedule": {"image": {"total_layers": 3}}}],
)
def test_bad_configs_are_rejected(data):
    with pytest.raises(ConfigError):
        from_dict(data)


def test_unreadable_or_invalid_yaml(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.yaml")
    (tmp_path / "bad.yaml").write_text("model: [unclosed")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.yaml")


# -- serialisation ---------------------------------------------------------------------


@settings(max_examples=200, deadline=None)
@given(st.floats(allow_nan=False, allow_infinity=False))
def test_floats_roundtrip_exactly(x):
    assert json.loads(dumps(x)) == x
    assert json.loads(dumps({"v": [x, np.float64(x)]}))["v"] == [x, x]


def test_dumps_edge_cases():
    assert dumps([math.nan, math.inf, None, True, np.int64(3), 2.0]) == "[null, null, null, true, 3, 2.0]"
    with pytest.raises(TypeError):
        dumps(object())


def test_csv_and_jsonl_roundtrip(tmp_path):
    write_csv(tmp_path / "a.csv", ["x", "y"], [[0.1, math.nan], [1, math.inf]], {"tool": "t"})
    header, rows = read_csv(tmp_path / "a.csv")
    assert header == ["x", "y"] and rows == [["0.10000000000000001", "nan"], ["1", "inf"]]
    write_jsonl(tmp_path / "a.jsonl", [{"a": 1}, {"a": 2}], {"tool": "t"})
    assert list(read_jsonl(tmp_path / "a.jsonl")) == [{"a": 1}, {"a": 2}]


# -- cli -------------------------------------------------------------------------------


def test_gen_is_byte_identical_and_carries_meta(capsys, tmp_path, small_cfg):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run(capsys, "gen", "--config", small_cfg, "--seed", "4", "--out", str(a))[0] == 0
    assert run(capsys, "gen", "--config", small_cfg, "--seed", "4", "--out", str(b))[0] == 0
    assert (a / "dataset.json").read_bytes() == (b / "dataset.json").read_bytes()
    meta = json.loads((a / "dataset.json").read_text())["meta"]
    assert meta["tool"] == "store3d" and meta["command"] == "gen" and len(meta["config_hash"]) == 16


def test_label_then_oracle_eval(capsys, tmp_path, small_cfg):
    out = str(tmp_path)
    assert run(capsys, "gen", "--config", small_cfg, "--out", out)[0] == 0
    ds = str(tmp_path / "dataset.json")
    assert run(capsys, "calibrate", "--config", small_cfg, "--dataset", ds, "--out", out)[0] == 0
    assert json.loads((tmp_path / "calibration.json").read_text())["d_min"] >= 0
    assert run(capsys, "label", "--config", small_cfg, "--dataset", ds, "--out", out)[0] == 0
    code, stdout, _ = run(capsys, "eval", "--config", small_cfg, "--dataset", ds, "--labels", str(tmp_path / "labels.jsonl"), "--oracle", "--out", out)
    assert code == 0
    summary = json.loads(stdout)
    assert summary["mAP"] == 1.0 and summary["NDS_RM"] == 1.0


def test_simulate_with_saved_weights(capsys, tmp_path, small_cfg):
    from store3d.config import load_config as lc

    w = tmp_path / "w" / "weights.json"
    w.parent.mkdir()
    save_weights(w, model_state(build_model(lc(small_cfg).model)), {"tool": "t"})
    code, stdout, _ = run(capsys, "simulate", "--config", small_cfg, "--weights", str(w), "--mode", "sparse_eval", "--tkr", "0.5", "--out", str(tmp_path))
    assert code == 0
    traces = list(read_jsonl(tmp_path / "trace.jsonl"))
    assert len(traces) == json.loads(stdout)["frames"]
    assert min(s["active"] for s in traces[0]["stages"] if s["stream"] == "image") < traces[0]["n_tokens"]


def test_profile_reports_saving(capsys, tmp_path):
    code, stdout, _ = run(capsys, "profile", "--tkr", "0.5", "--out", str(tmp_path))
    assert code == 0
    assert 0.5 < json.loads(stdout)["ratio"] < 1.0
    prof = json.loads((tmp_path / "profile.json").read_text())
    assert prof["sensitivity"]["queries"]["backbone"] == 0.0


def test_gradcheck_command(capsys, tmp_path):
    code, stdout, _ = run(capsys, "gradcheck", "--out", str(tmp_path))
    assert code == 0 and "stop_gradient" in stdout
    _, rows = read_csv(tmp_path / "gradcheck.csv")
    assert all(r[2] == "True" for r in rows)


@pytest.mark.parametrize(
    "argv, code, kind",
    [
        (["profile", "--tkr", "2"], 2, "ConfigError"),
        (["eval", "--dataset", "/nonexistent/d.json", "--oracle"], 3, "DataError"),
        (["eval"], 2, "ConfigError"),
        (["simulate", "--weights", "/nonexistent/w.json"], 3, "DataError"),
    ],
)
def test_error_exit_codes_and_json_stderr(capsys, tmp_path, argv, code, kind):
    got, stdout, err = run(capsys, *argv, "--out", str(tmp_path))
    assert got == code and stdout == ""
    rec = json.loads(err.strip().splitlines()[-1])
    assert rec["error"] == kind and rec["exit_code"] == code
    assert not any(tmp_path.iterdir()), "partial outputs must be removed"
