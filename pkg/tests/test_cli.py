import csv
import io
import json
import subprocess
import sys

import pytest

from katolab.cli import COMMANDS, run
from katolab.config import ExperimentConfig

SIN64 = {"grid": {"dim": 1, "n_points": 64}, "coefficients": {"preset": "sin_1d"}}
IDENTITY = {"grid": {"dim": 1, "n_points": 128}, "ensemble": {"size": 12}}
CONSTANT2D = {
    "grid": {"dim": 2, "n_points": 32},
    "coefficients": {"preset": "constant", "params": {"A0": [[2.0, 0.5], [0.5, 1.0]]}},
    "tgrid": {"t_min_factor": 4.0, "t_max_factor": 0.25, "q_sub": 4},
}


@pytest.fixture
def write_config(tmp_path):
    def write(data, name="cfg.json"):
        path = tmp_path / name
        path.write_text(data if isinstance(data, str) else json.dumps(data))
        return str(path)

    return write


def _run(capsys, argv):
    code = run(argv)
    out, err = capsys.readouterr()
    return code, out, err


def test_unknown_subcommand(capsys):
    code, out, err = _run(capsys, ["frobnicate"])
    assert code == 2
    assert "unknown subcommand" in err
    assert len(err.strip().splitlines()) == 1


def test_missing_subcommand(capsys):
    code, _, err = _run(capsys, [])
    assert code == 2 and "missing subcommand" in err


def test_bad_flag_is_usage_error(capsys):
    code, _, err = _run(capsys, ["kato", "--bogus"])
    assert code == 2 and err.startswith("katolab: error")


@pytest.mark.parametrize(
    "raw,needle",
    [
        ("{not json", "malformed config"),
        ({"grid": {"n_points": 100}}, "power of two"),
        ({"colour": 1}, "unknown config key"),
        ({"coefficients": {"preset": "zebra"}}, "unknown coefficient preset"),
        ({"quadrature": {"n_nodes": 20}}, "multiple of 16"),
        ({"grid": "flat"}, "must be an object"),
    ],
)
def test_malformed_config(capsys, write_config, raw, needle):
    code, out, err = _run(capsys, ["kato", "--config", write_config(raw)])
    assert code == 2
    assert needle in err
    assert len(err.strip().splitlines()) == 1
    assert out == ""


def test_missing_config_file(capsys, tmp_path):
    code, _, err = _run(capsys, ["kato", "--config", str(tmp_path / "absent.json")])
    assert code == 2 and "cannot read config" in err


def test_empty_tgrid_is_config_error(capsys, write_config):
    code, _, err = _run(capsys, ["carleson", "--config", write_config(SIN64)])
    assert code == 2 and "tgrid range is empty" in err


def test_kato_identity_report(capsys, write_config):
    code, out, _ = _run(capsys, ["kato", "--config", write_config(IDENTITY)])
    assert code == 0
    report = json.loads(out)
    assert report["passed"] and report["schema_version"] == 1
    ratios = [row["ratio"] for row in report["rows"]]
    assert len(ratios) == 2 * 12
    assert min(ratios) == pytest.approx(1.0, abs=1e-8)
    assert max(ratios) == pytest.approx(1.0, abs=1e-8)
    assert "timings" not in report


def test_carleson_constant_2d(capsys, write_config):
    code, out, _ = _run(capsys, ["carleson", "--config", write_config(CONSTANT2D)])
    assert code == 0
    report = json.loads(out)
    assert report["summary"]["supremum"] <= 1e-12
    assert all(row["value"] <= 1e-12 for row in report["rows"])


def test_config_echo_and_hash(capsys, write_config):
    path = write_config(SIN64)
    _, out, _ = _run(capsys, ["weight", "--config", path])
    report = json.loads(out)
    echoed = ExperimentConfig.from_dict(report["config"])
    assert echoed.hash == report["config_hash"] == ExperimentConfig.from_file(path).hash
    assert report["config"]["coefficients"]["preset"] == "sin_1d"
    assert report["config"]["weight"]["tol"] == 1e-8  # defaults filled in


def test_config_hash_tracks_content():
    a = ExperimentConfig.from_dict(SIN64)
    b = ExperimentConfig.from_dict({**SIN64, "ensemble": {"seed": 1}})
    assert a.hash != b.hash
    assert a.hash == ExperimentConfig.from_dict(json.loads(json.dumps(SIN64))).hash


@pytest.mark.parametrize("command", ["weight", "kato", "gaffney", "gaussianfit", "tb"])
def test_csv_headers_match_help(capsys, write_config, command):
    code, out, _ = _run(capsys, [command, "--config", write_config(SIN64), "--format", "csv"])
    assert code == 0
    header = next(csv.reader(io.StringIO(out)))
    documented = COMMANDS[command].split("CSV columns:")[1].strip().rstrip(".")
    documented = [c.strip() for c in documented.replace("[", "").replace("]", "").split(",")]
    assert header == [c for c in documented if c in header]
    assert len(header) >= len(documented) - 1


def test_sqfun_csv(capsys, write_config):
    cfg = {**SIN64, "grid": {"dim": 1, "n_points": 128}, "ensemble": {"size": 3}}
    code, out, _ = _run(capsys, ["sqfun", "--config", write_config(cfg), "--format", "csv"])
    assert code == 0
    rows = list(csv.DictReader(io.StringIO(out)))
    assert list(rows[0]) == ["function_id", "quantity", "value"]
    assert {r["function_id"] for r in rows} == {"0", "1", "2"}


def test_output_is_deterministic(capsys, write_config, tmp_path, monkeypatch):
    path = write_config(SIN64)
    outputs = []
    for threads in ("1", "3"):
        monkeypatch.setenv("KATOLAB_THREADS", threads)
        for fmt in ("json", "csv"):
            target = tmp_path / f"out_{threads}.{fmt}"
            assert run(["tb", "--config", path, "--format", fmt, "--out", str(target)]) == 0
            outputs.append(target.read_bytes())
    capsys.readouterr()
    assert outputs[0] == outputs[2] and outputs[1] == outputs[3]


@pytest.mark.parametrize("value", ["zero", "0", "-2"])
def test_bad_thread_count(capsys, monkeypatch, value):
    monkeypatch.setenv("KATOLAB_THREADS", value)
    code, _, err = _run(capsys, ["weight"])
    assert code == 2 and "KATOLAB_THREADS" in err


def test_timings_flag(capsys, write_config):
    code, out, _ = _run(capsys, ["weight", "--config", write_config(SIN64), "--timings"])
    assert code == 0
    assert json.loads(out)["timings"]["total_seconds"] >= 0


def test_failed_check_exits_one(capsys, write_config):
    cfg = {**SIN64, "options": {"min_r2": 1.01}}
    code, out, err = _run(capsys, ["gaffney", "--config", write_config(cfg)])
    assert code == 1
    assert json.loads(out)["passed"] is False
    assert "check failed" in err


def test_selftest_quick(capsys):
    code, out, _ = _run(capsys, ["selftest", "--level", "quick", "--format", "csv"])
    assert code == 0
    rows = list(csv.DictReader(io.StringIO(out)))
    assert rows and all(r["status"] == "PASS" for r in rows)
    assert {"grid", "coefficients", "adjoint_weight", "nondiv_ops", "functional_calculus",
            "littlewood_paley", "estimates"} <= {r["module"] for r in rows}


def test_selftest_fault_injection(capsys):
    code, out, err = _run(capsys, ["selftest", "--inject-fault", "skip_parity_projection"])
    assert code == 1
    assert "degenerate weight" in err
    assert err.startswith("katolab: selftest failed in adjoint_weight")
    assert json.loads(out)["passed"] is False


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "katolab.cli", "frobnicate"],
                          capture_output=True, text=True)
    assert proc.returncode == 2
    assert "unknown subcommand" in proc.stderr
