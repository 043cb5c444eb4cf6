import csv
import json
import shutil
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from laplab.cli import dispatch
from laplab.model import Network, net_n, save_network

NETS = Path(__file__).resolve().parent.parent / "nets"


def run(args, capsys=None):
    code = dispatch([str(a) for a in args])
    return code, (capsys.readouterr() if capsys else None)


def manifest(out):
    return json.loads((out / "manifest.json").read_text())


class TestAnalyze:
    def test_net_n(self, tmp_path, capsys):
        code, io = run(["analyze", "--canonical", "NET-N", "--out", tmp_path], capsys)
        assert code == 0
        doc = json.loads((tmp_path / "analysis.json").read_text())
        assert doc["rho"] == pytest.approx(0.85, abs=1e-12)
        np.testing.assert_allclose(doc["nu"], [0.5, 0.5], atol=1e-12)
        assert doc["lowest_pool"] == 2 and doc["assumption3"]["holds"]
        printed = json.loads(io.out)
        assert printed["rho"] == pytest.approx(0.85)
        m = manifest(tmp_path)
        assert m["command"] == "analyze" and m["outputs"] == ["analysis.json"]

    def test_file_matches_canonical(self, tmp_path):
        assert run(["analyze", "--net", NETS / "net_n.json", "--out", tmp_path / "a"])[0] == 0
        assert run(["analyze", "--canonical", "NET-N", "--out", tmp_path / "b"])[0] == 0
        assert (tmp_path / "a" / "analysis.json").read_bytes() == (tmp_path / "b" / "analysis.json").read_bytes()

    def test_cyclic_net(self, tmp_path, capsys):
        n = net_n()
        cyc = Network(2, 2, n.arrival_rates, n.pool_sizes, [(0, 0)] + list(n.activities), (1.0,) + n.service_rates)
        save_network(cyc, tmp_path / "cyc.json")
        code, io = run(["analyze", "--net", tmp_path / "cyc.json", "--out", tmp_path], capsys)
        assert code == 2
        assert "activity set not a tree" in io.err


class TestErrors:
    def test_unknown_subcommand(self, capsys):
        code, io = run(["frobnicate"], capsys)
        assert code == 2 and "laplab: error" in io.err

    def test_console_script_exit_code(self):
        proc = subprocess.run([sys.executable, "-m", "laplab.cli", "frobnicate"], capture_output=True, text=True)
        assert proc.returncode == 2

    def test_missing_file(self, tmp_path, capsys):
        code, io = run(["analyze", "--net", tmp_path / "nope.json", "--out", tmp_path], capsys)
        assert code == 1
        assert "file not found" in io.err

    def test_malformed_json(self, tmp_path, capsys):
        (tmp_path / "bad.json").write_text("{not json")
        code, io = run(["analyze", "--net", tmp_path / "bad.json", "--out", tmp_path], capsys)
        assert code == 1

    def test_unknown_config_key(self, tmp_path, capsys):
        (tmp_path / "c.json").write_text(json.dumps({"bogus": 1}))
        code, io = run(["analyze", "--canonical", "NET-1", "--config", tmp_path / "c.json", "--out", tmp_path],
                       capsys)
        assert code != 0

    def test_no_network(self, tmp_path, capsys):
        code, io = run(["analyze", "--out", tmp_path], capsys)
        assert code == 2


class TestConfiguration:
    def test_precedence(self, tmp_path, monkeypatch):
        monkeypatch.delenv("LAPLAB_SEED", raising=False)
        (tmp_path / "c.json").write_text(json.dumps({"r": 7, "horizon": 3.0, "seed": 5}))
        assert run(["simulate", "--canonical", "NET-1", "--config", tmp_path / "c.json", "--r", 9,
                    "--out", tmp_path / "o"])[0] == 0
        cfg = manifest(tmp_path / "o")["resolved_config"]
        assert cfg["r"] == 9 and cfg["horizon"] == 3.0 and cfg["seed"] == 5

    def test_environment_seed(self, tmp_path, monkeypatch):
        monkeypatch.setenv("LAPLAB_SEED", "42")
        assert run(["simulate", "--canonical", "NET-1", "--r", 5, "--horizon", 2, "--out", tmp_path / "e"])[0] == 0
        assert manifest(tmp_path / "e")["base_seed"] == 42
        assert run(["simulate", "--canonical", "NET-1", "--r", 5, "--horizon", 2, "--seed", 3,
                    "--out", tmp_path / "f"])[0] == 0
        assert manifest(tmp_path / "f")["base_seed"] == 3
        monkeypatch.delenv("LAPLAB_SEED")
        assert run(["simulate", "--canonical", "NET-1", "--r", 5, "--horizon", 2, "--out", tmp_path / "g"])[0] == 0
        assert manifest(tmp_path / "g")["base_seed"] == 0

    def test_bad_environment_seed(self, tmp_path, monkeypatch, capsys):
        monkeypatch.setenv("LAPLAB_SEED", "abc")
        code, _ = run(["simulate", "--canonical", "NET-1", "--out", tmp_path], capsys)
        assert code == 1


SWEEP = ["sweep", "--canonical", "NET-1", "--r", "10,20", "--T", 3, "--replications", 2, "--seed", 4]


class TestReproducibility:
    def test_sweep_twice_and_replay(self, tmp_path):
        assert run(SWEEP + ["--out", tmp_path / "a"])[0] == 0
        assert run(SWEEP + ["--out", tmp_path / "b"])[0] == 0
        assert run(["replay", tmp_path / "a" / "manifest.json", "--out", tmp_path / "c"])[0] == 0
        for name in ("sweep.csv", "sweep.json", "manifest.json"):
            ref = (tmp_path / "a" / name).read_bytes()
            assert (tmp_path / "b" / name).read_bytes() == ref
            assert (tmp_path / "c" / name).read_bytes() == ref
        with open(tmp_path / "a" / "sweep.csv") as fh:
            assert len(list(csv.reader(fh))) == 5

    def test_inputs_untouched(self, tmp_path):
        net_file = tmp_path / "n.json"
        shutil.copy(NETS / "net_n.json", net_file)
        (tmp_path / "c.json").write_text(json.dumps({"r": 20, "horizon": 2.0}))
        before = net_file.read_bytes(), (tmp_path / "c.json").read_bytes()
        assert run(["simulate", "--net", net_file, "--config", tmp_path / "c.json", "--out", tmp_path / "o"])[0] == 0
        assert (net_file.read_bytes(), (tmp_path / "c.json").read_bytes()) == before


class TestCommands:
    @pytest.mark.parametrize("args,files", [
        (["fluid", "--horizon", 2], ["fluid.csv"]),
        (["hydro", "--horizon", 2], ["hydro.csv", "hydro.json"]),
        (["lfm", "--horizon", 2], ["maps.json", "lfm.csv"]),
        (["simulate", "--r", 10, "--horizon", 2, "--event-log"], ["trace.csv", "summary.json", "events.csv"]),
        (["lyapunov", "--r", 10, "--window", 1, "--replications", 4], ["lyapunov.json"]),
        (["oracle", "--r", 2, "--queue-cap", 30], ["oracle.json"]),
    ])
    def test_outputs(self, tmp_path, args, files):
        assert run(args + ["--canonical", "NET-N", "--out", tmp_path])[0] == 0
        m = manifest(tmp_path)
        assert m["outputs"] == files
        for f in files:
            assert (tmp_path / f).stat().st_size > 0

    def test_fluid_drain(self, tmp_path):
        assert run(["fluid", "--canonical", "NET-1", "--horizon", 2, "--drain-radius", 1,
                    "--out", tmp_path])[0] == 0
        assert (tmp_path / "drain.json").exists()
