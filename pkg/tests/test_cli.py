import json

import pytest

from bbmcmd import cli

GOLDEN_HEADERS = {
    "curves table": "t,L_star,L_bar,L_exact,K_at_0,dL_star,d2L_star,dL_exact,d2L_exact",
    "curves eval": "function,epsilon,horizon,arg,value",
    "density query": "r,s,x,y,width,rho,q_exact,hit_rate_upper,hit_rate_lower,j_bound",
    "density check": "check,lhs,rhs,error,tolerance,pass",
    "simulate survival": "x,epsilon,t,n,survival,std_error,ci_low,ci_high",
    "simulate cmd": "quantile,value,ci_low,ci_high",
    "experiment ode": "epsilon,t,k0_ode,l_star,rel_error,k0_delta_1,k0_delta_2",
    "experiment supercritical": "eps_abs,scaled_time,t,value,limit,rel_gap,identity_rel_error,small_t_rel_diff",
}

SMALL = {
    "curves table": ["--points", "3"],
    "curves eval": ["--at", "1"],
    "density query": [],
    "density check": [],
    "simulate survival": ["--n", "50", "--t", "2"],
    "simulate cmd": ["--n", "30", "--t", "2", "--n-boot", "10"],
    "experiment ode": [],
    "experiment supercritical": [],
}


@pytest.fixture(autouse=True)
def fixed_clock(monkeypatch):
    monkeypatch.setenv("SOURCE_DATE_EPOCH", "1700000000")


def run(tmp_path, *argv):
    return cli.main(list(argv) + ["--out", str(tmp_path)])


@pytest.mark.parametrize("command", sorted(GOLDEN_HEADERS))
def test_golden_headers(tmp_path, command):
    assert run(tmp_path, *command.split(), *SMALL[command]) == 0
    stem = command.replace(" ", "_")
    lines = (tmp_path / f"{stem}.csv").read_text().splitlines()
    assert lines[0] == GOLDEN_HEADERS[command]
    man = json.loads((tmp_path / f"{stem}.manifest.json").read_text())
    assert man["columns"] == GOLDEN_HEADERS[command].split(",")
    assert man["cells"] == len(lines) - 1
    assert man["started"] == "2023-11-14T22:13:20Z"


def test_float_format():
    assert cli.fmt(0.1) == "1.0000000000000001e-01"
    assert cli.fmt(3) == "3"
    assert cli.fmt(True) == "1"
    assert cli.fmt(float("nan")) == "nan"
    assert float(cli.fmt(2.0 / 3.0)) == 2.0 / 3.0


def test_rerun_is_byte_identical_across_workers(tmp_path):
    args = ["simulate", "survival", "--x", "3", "--epsilon", "0.3", "--t", "3", "--n", "400", "--seed", "9"]
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.main(args + ["--out", str(a)]) == 0
    assert cli.main(args + ["--out", str(b), "--workers", "3"]) == 0
    for name in ("simulate_survival.csv", "simulate_survival.manifest.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_replay_reproduces(tmp_path):
    assert run(tmp_path, "simulate", "cmd", "--n", "40", "--t", "2", "--n-boot", "20") == 0
    assert cli.main(["replay", str(tmp_path / "simulate_cmd.manifest.json"), "--out", str(tmp_path),
                     "--name", "again"]) == 0
    assert (tmp_path / "again.csv").read_bytes() == (tmp_path / "simulate_cmd.csv").read_bytes()


def test_config_file_and_flag_override(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"command": "experiment ode", "config": {"epsilon": 0.05, "t": 10}}))
    assert run(tmp_path, "experiment", "ode", "--config", str(cfg), "--t", "20") == 0
    man = json.loads((tmp_path / "experiment_ode.manifest.json").read_text())
    assert man["config"]["epsilon"] == 0.05 and man["config"]["t"] == 20.0


def test_unknown_key_rejected(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"command": "experiment ode", "config": {"epsilon": 0.1, "tt": 1}}))
    assert run(tmp_path, "experiment", "ode", "--config", str(cfg)) == 2
    assert "unknown key(s)" in capsys.readouterr().err
    assert not (tmp_path / "experiment_ode.csv").exists()


def test_config_for_other_command_rejected(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"command": "experiment ode", "config": {}}))
    assert run(tmp_path, "curves", "table", "--config", str(cfg)) == 2


@pytest.mark.parametrize("config,needle", [
    ({"command": "simulate survival", "config": {"epsilon": 2.0}}, "ModelParams.epsilon"),
    ({"command": "experiment sweep", "config": {"epsilon_grid": [0.3], "time_values": [100]}},
     "times must satisfy 0 <= t <= C1 eps^-2"),
    ({"command": "experiment fkpp", "config": {"dx": 0.05, "dt": 0.01}}, "stability bound"),
    ({"command": "simulate once", "config": {"barrier": "strip", "width": 1.0, "x0": 2.0}}, "strictly between"),
    ({"command": "simulate hits", "config": {"x0": 1.0}}, "--window r s is required"),
])
def test_validate_messages(tmp_path, capsys, config, needle):
    path = tmp_path / "v.json"
    path.write_text(json.dumps(config))
    assert cli.main(["validate", str(path)]) == 2
    assert needle in capsys.readouterr().out


def test_validate_accepts_manifest(tmp_path, capsys):
    assert run(tmp_path, "experiment", "ode") == 0
    assert cli.main(["validate", str(tmp_path / "experiment_ode.manifest.json")]) == 0
    assert "ok: experiment ode" in capsys.readouterr().out


def test_invalid_flag_exits_2(tmp_path):
    assert run(tmp_path, "curves", "table", "--epsilon", "0") == 2
    assert run(tmp_path, "density", "query", "--x", "3") == 2


def test_underpowered_exit_code(tmp_path):
    code = run(tmp_path, "simulate", "survival", "--x", "5", "--t", "8", "--n", "50", "--rho", "0.5",
               "--pop-cap", "20")
    assert code == 4
    man = json.loads((tmp_path / "simulate_survival.manifest.json").read_text())
    assert man["status"] == 4


def test_output_dir_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.OUTPUT_ENV, str(tmp_path / "env"))
    assert cli.main(["experiment", "ode"]) == 0
    assert (tmp_path / "env" / "experiment_ode.csv").exists()


def test_hits_side_file(tmp_path):
    assert run(tmp_path, "simulate", "once", "--epsilon", "0.3", "--t", "3", "--barrier", "origin+K",
               "--x0", "1", "--replicate", "2") == 0
    lines = (tmp_path / "simulate_once.hits.csv").read_text().splitlines()
    assert lines[0] == "time,tag"


@pytest.mark.parametrize("command", sorted(cli.COMMANDS))
def test_help_renders(command, capsys):
    with pytest.raises(SystemExit) as e:
        cli.main(command.split() + ["--help"])
    assert e.value.code == 0
    assert "--config" in capsys.readouterr().out


def test_replay_keeps_stem(tmp_path):
    assert run(tmp_path, "curves", "eval", "--at", "2", "--name", "mine") == 0
    again = tmp_path / "again"
    assert cli.main(["replay", str(tmp_path / "mine.manifest.json"), "--out", str(again)]) == 0
    assert (again / "mine.csv").read_bytes() == (tmp_path / "mine.csv").read_bytes()
