import json
import os
import socket
import stat
import subprocess
import sys
import time
from pathlib import Path

import pytest
from click.testing import CliRunner

from meshfed.cli import main

ROOT = Path(__file__).resolve().parents[1]
SCENARIOS = ROOT / "scenarios"


def invoke(args):
    return CliRunner().invoke(main, args, catch_exceptions=False)


def json_events(output: str) -> list:
    out = []
    for line in output.splitlines():
        try:
            record = json.loads(line)
        except json.JSONDecodeError:
            continue
        if isinstance(record, dict):
            out.append(record)
    return out


class TestScenarioRun:
    def test_bundled_smoke_scenario_produces_outputs(self, tmp_path):
        out = tmp_path / "run"
        result = invoke(
            ["scenario", "run", str(SCENARIOS / "complete4_iid.scn.json"), "--out", str(out)]
        )
        assert result.exit_code == 0
        summaries = [e for e in json_events(result.output) if e.get("event") == "scenario_complete"]
        assert len(summaries) == 1
        assert summaries[0]["final_consensus_distance"] is not None
        for fname in (
            "metrics.csv",
            "transport.csv",
            "frames.csv",
            "events.jsonl",
            "metrics.json",
            "summary.json",
            "loss.png",
            "consensus.png",
            "traffic.png",
        ):
            assert (out / fname).is_file(), fname

    def test_no_figures_flag(self, tmp_path):
        out = tmp_path / "run"
        result = invoke(
            [
                "scenario", "run", str(SCENARIOS / "complete4_iid.scn.json"),
                "--out", str(out), "--no-figures",
            ]
        )
        assert result.exit_code == 0
        assert (out / "metrics.csv").is_file()
        assert not (out / "loss.png").exists()

    def test_kill_unknown_node_exits_2_naming_event(self, tmp_path):
        bad = tmp_path / "bad.scn.json"
        data = json.loads((SCENARIOS / "complete4_iid.scn.json").read_text())
        data["churn"] = [{"at_tick": 3, "action": "kill", "node": "nope"}]
        bad.write_text(json.dumps(data))
        result = invoke(["scenario", "run", str(bad), "--out", str(tmp_path / "o")])
        assert result.exit_code == 2
        assert "churn[0]" in result.output

    def test_malformed_json_exits_2(self, tmp_path):
        bad = tmp_path / "bad.scn.json"
        bad.write_text("{not json")
        result = invoke(["scenario", "run", str(bad), "--out", str(tmp_path / "o")])
        assert result.exit_code == 2

    def test_out_path_collides_with_file_exits_4(self, tmp_path):
        blocker = tmp_path / "taken"
        blocker.write_text("occupied")
        result = invoke(
            ["scenario", "run", str(SCENARIOS / "complete4_iid.scn.json"),
             "--out", str(blocker)]
        )
        assert result.exit_code == 4

    @pytest.mark.skipif(os.geteuid() == 0, reason="root ignores file permissions")
    def test_readonly_out_dir_exits_4(self, tmp_path):
        out = tmp_path / "ro"
        out.mkdir()
        out.chmod(stat.S_IRUSR | stat.S_IXUSR)
        try:
            result = invoke(
                ["scenario", "run", str(SCENARIOS / "complete4_iid.scn.json"),
                 "--out", str(out / "sub")]
            )
            assert result.exit_code == 4
        finally:
            out.chmod(stat.S_IRWXU)


class TestTopologyShow:
    def test_grid_2x2_prints_4_nodes_8_edges(self, tmp_path):
        scn = tmp_path / "grid.scn.json"
        scn.write_text(
            json.dumps(
                {
                    "name": "g",
                    "seed": 1,
                    "rounds": 1,
                    "topology": {"kind": "grid", "rows": 2, "cols": 2},
                    "dataset": {"n": 16, "d": 2},
                }
            )
        )
        result = invoke(["topology", "show", str(scn)])
        assert result.exit_code == 0
        lines = result.output.strip().splitlines()
        assert sum(1 for l in lines if l.startswith("node ")) == 4
        assert sum(1 for l in lines if l.startswith("edge ")) == 8

    def test_dot_format_starts_with_digraph(self):
        result = invoke(
            ["topology", "show", str(SCENARIOS / "consensus_star16.scn.json"), "--format", "dot"]
        )
        assert result.exit_code == 0
        assert result.output.startswith("digraph")

    def test_malformed_file_exits_2(self, tmp_path):
        bad = tmp_path / "x.scn.json"
        bad.write_text("[]")
        result = invoke(["topology", "show", str(bad)])
        assert result.exit_code == 2


class TestNodeRunProcess:
    """Live-process checks over real sockets."""

    def _spawn(self, *args):
        return subprocess.Popen(
            [sys.executable, "-m", "meshfed.cli", "node", "run", *args],
            stdout=subprocess.PIPE,
            stderr=subprocess.PIPE,
            text=True,
        )

    def _read_event(self, proc, wanted, deadline=15.0):
        end = time.monotonic() + deadline
        while time.monotonic() < end:
            line = proc.stdout.readline()
            if not line:
                time.sleep(0.05)
                continue
            try:
                event = json.loads(line)
            except json.JSONDecodeError:
                continue
            if event.get("event") == wanted:
                return event
        raise AssertionError(f"never saw event {wanted!r}")

    def test_empty_namespace_exits_2_naming_field(self):
        proc = self._spawn("--namespace", "")
        proc.wait(timeout=15)
        assert proc.returncode == 2
        assert "namespace" in proc.stderr.read()

    def test_occupied_port_exits_3(self):
        blocker = socket.socket()
        blocker.bind(("127.0.0.1", 0))
        blocker.listen(1)
        port = blocker.getsockname()[1]
        try:
            proc = self._spawn("--namespace", "t", "--listen", f"127.0.0.1:{port}")
            proc.wait(timeout=15)
            assert proc.returncode == 3
        finally:
            blocker.close()

    def test_leech_adopts_model_from_running_peer(self):
        holder = self._spawn(
            "--namespace", "live-test",
            "--listen", "127.0.0.1:0",
            "--rounds", "3",
            "--linger", "20",
        )
        try:
            listening = self._read_event(holder, "listening")
            joiner = self._spawn(
                "--namespace", "live-test",
                "--listen", "127.0.0.1:0",
                "--bootstrap", listening["address"],
                "--mode", "leech",
                "--rounds", "2",
                "--linger", "1",
            )
            # joiner has no initial params: trainer init absent via config file
            joiner.kill()
            joiner.wait()
        finally:
            holder.terminate()
            holder.wait(timeout=10)

    def test_join_flow_with_absent_params_logs_adoption(self, tmp_path):
        holder = self._spawn(
            "--namespace", "live-join",
            "--listen", "127.0.0.1:0",
            "--rounds", "5",
            "--linger", "25",
        )
        joiner = None
        try:
            listening = self._read_event(holder, "listening")
            cfg = tmp_path / "joiner.json"
            cfg.write_text(
                json.dumps(
                    {
                        "namespace": "live-join",
                        "listen": "127.0.0.1:0",
                        "bootstrap": [listening["address"]],
                        "mode": "leech",
                        "rounds": 2,
                        "linger": 0.5,
                        "heartbeat_interval": 0.2,
                        "pool_timeout": 0.3,
                        "trainer": {"kind": "linear", "init": "absent"},
                    }
                )
            )
            joiner = self._spawn("--config", str(cfg))
            adopted = self._read_event(joiner, "model_adopted", deadline=20)
            assert adopted["source"]
            stderr_out = ""
            joiner.wait(timeout=25)
            stderr_out = joiner.stderr.read()
            assert "model adopted from" in stderr_out
            assert joiner.returncode == 0
        finally:
            if joiner is not None and joiner.poll() is None:
                joiner.kill()
                joiner.wait()
            holder.terminate()
            holder.wait(timeout=10)

    def test_unknown_config_key_exits_2(self, tmp_path):
        cfg = tmp_path / "bad.json"
        cfg.write_text(json.dumps({"namespace": "x", "listn": "127.0.0.1:0"}))
        proc = self._spawn("--config", str(cfg))
        proc.wait(timeout=15)
        assert proc.returncode == 2
        assert "listn" in proc.stderr.read()


class TestToolingCommands:
    def test_vectors_generate_matches_committed(self, tmp_path):
        result = invoke(["vectors", "generate", "--out", str(tmp_path)])
        assert result.exit_code == 0
        committed = (ROOT / "conformance" / "vectors" / "core.jsonl").read_text()
        assert (tmp_path / "core.jsonl").read_text() == committed

    def test_dataset_export(self, tmp_path):
        out = tmp_path / "ds.csv"
        result = invoke(
            ["dataset", "export", "--seed", "3", "--n", "10", "--d", "2", "--out", str(out)]
        )
        assert result.exit_code == 0
        lines = out.read_text().strip().splitlines()
        assert lines[0] == "x0,x1,y"
        assert len(lines) == 11
