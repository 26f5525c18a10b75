"""Live interoperability against the main runtime over real sockets.

Brings up two main-runtime nodes and one external peer in a shared
namespace, lets the community train, then measures consensus by pulling
every participant's final parameters through the MODEL_REQUEST handshake.
"""

import json
import os
import socket
import subprocess
import sys
import time

import numpy as np
import pytest

from pypeer import protocol
from pypeer.model import LinearModel

NAMESPACE = "interop"
W_SEED = 999
ROUNDS = 40
SAMPLES = 4096
LEARNING_RATE = 0.1


class ProcessHandle:
    def __init__(self, proc):
        self.proc = proc
        self.lines = []

    def read_event(self, wanted, deadline=30.0):
        end = time.monotonic() + deadline
        while time.monotonic() < end:
            line = self.proc.stdout.readline()
            if not line:
                if self.proc.poll() is not None:
                    break
                time.sleep(0.02)
                continue
            self.lines.append(line)
            try:
                event = json.loads(line)
            except json.JSONDecodeError:
                continue
            if event.get("event") == wanted:
                return event
        raise AssertionError(
            f"never saw {wanted!r}; collected: {''.join(self.lines[-20:])}"
        )

    def events(self):
        for line in self.lines:
            try:
                yield json.loads(line)
            except json.JSONDecodeError:
                continue

    def drain(self):
        rest = self.proc.stdout.read()
        if rest:
            self.lines.extend(rest.splitlines(keepends=True))

    def stop(self, sig=None):
        if self.proc.poll() is None:
            self.proc.send_signal(sig) if sig else self.proc.terminate()
        try:
            self.proc.wait(timeout=20)
        except subprocess.TimeoutExpired:
            self.proc.kill()
            self.proc.wait()
        self.drain()


def spawn_primary(tmp_path, name, data_seed, bootstrap):
    cfg = {
        "namespace": NAMESPACE,
        "listen": "127.0.0.1:0",
        "bootstrap": bootstrap,
        "mode": "peer",
        "heartbeat_interval": 0.25,
        "ttl_multiplier": 8,
        "pool_timeout": 0.3,
        "round_interval": 0.15,
        "rounds": ROUNDS,
        "linger": 60,
        "aggregation": "fedavg",
        "name": name,
        "trainer": {"kind": "linear", "learning_rate": LEARNING_RATE, "local_epochs": 1,
                    "batch_size": None},
        "dataset": {"seed": data_seed, "n": SAMPLES, "d": 4, "noise_std": 0.1,
                    "w_seed": W_SEED},
    }
    path = tmp_path / f"{name}.json"
    path.write_text(json.dumps(cfg))
    proc = subprocess.Popen(
        [sys.executable, "-m", "meshfed.cli", "node", "run", "--config", str(path)],
        stdout=subprocess.PIPE,
        stderr=subprocess.DEVNULL,
        text=True,
    )
    return ProcessHandle(proc)


def spawn_peer(tmp_path, bootstrap):
    cfg = {
        "namespace": NAMESPACE,
        "listen": "127.0.0.1:0",
        "bootstrap": bootstrap,
        "promote_threshold": 50,
        "learning_rate": LEARNING_RATE,
        "local_epochs": 1,
        "rounds": ROUNDS,
        "linger": 60,
        "heartbeat_interval": 0.25,
        "ttl_multiplier": 8,
        "pool_timeout": 0.3,
        "round_interval": 0.15,
        "handshake_timeout": 20,
        "data": {"seed": 777, "n": SAMPLES, "noise_std": 0.1, "w_seed": W_SEED},
    }
    path = tmp_path / "peer.json"
    path.write_text(json.dumps(cfg))
    proc = subprocess.Popen(
        [sys.executable, "-m", "pypeer.cli", "--config", str(path)],
        stdout=subprocess.PIPE,
        stderr=subprocess.DEVNULL,
        text=True,
    )
    return ProcessHandle(proc)


class Observer:
    """Minimal wire client: fetches a node's parameters via the join
    handshake."""

    def __init__(self):
        self.node_id = os.urandom(16).hex()
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self.sock.bind(("127.0.0.1", 0))
        self.sock.listen(8)
        self.sock.settimeout(0.1)
        self.address = "127.0.0.1:%d" % self.sock.getsockname()[1]

    def close(self):
        self.sock.close()

    def _send(self, address, msg):
        host, _, port = address.rpartition(":")
        with socket.create_connection((host, int(port)), timeout=3) as conn:
            conn.sendall(protocol.encode(msg))
            conn.shutdown(socket.SHUT_WR)
            conn.settimeout(3)
            try:
                while conn.recv(4096):
                    pass
            except OSError:
                pass

    def fetch_params(self, address, deadline=15.0):
        self._send(
            address,
            protocol.message(
                "ANNOUNCE", self.node_id, NAMESPACE,
                {"mode": "leech", "address": self.address},
            ),
        )
        time.sleep(0.3)
        self._send(address, protocol.message("MODEL_REQUEST", self.node_id, NAMESPACE))
        end = time.monotonic() + deadline
        while time.monotonic() < end:
            try:
                conn, _ = self.sock.accept()
            except socket.timeout:
                continue
            chunks = []
            conn.settimeout(3)
            try:
                while True:
                    piece = conn.recv(65536)
                    if not piece:
                        break
                    chunks.append(piece)
            except OSError:
                pass
            finally:
                conn.close()
            if not chunks:
                continue
            msg = protocol.decode(b"".join(chunks))
            if msg["kind"] == "WEIGHTS":
                model = LinearModel(
                    [{k: e[k] for k in ("name", "dtype", "shape")} for e in
                     msg["body"]["entries"]]
                )
                model.load_entries(msg["body"]["entries"])
                return model.flat()
        raise AssertionError(f"no WEIGHTS reply from {address}")


@pytest.fixture(scope="module")
def community(tmp_path_factory):
    tmp_path = tmp_path_factory.mktemp("interop")
    a = spawn_primary(tmp_path, "alpha", data_seed=201, bootstrap=[])
    handles = {"alpha": a}
    try:
        a_listen = a.read_event("listening")
        b = spawn_primary(tmp_path, "beta", data_seed=202, bootstrap=[a_listen["address"]])
        handles["beta"] = b
        b_listen = b.read_event("listening")
        peer = spawn_peer(tmp_path, bootstrap=[a_listen["address"], b_listen["address"]])
        handles["peer"] = peer
        peer_listen = peer.read_event("listening")
        yield {
            "handles": handles,
            "addresses": {
                "alpha": a_listen["address"],
                "beta": b_listen["address"],
                "peer": peer_listen["address"],
            },
        }
    finally:
        for handle in handles.values():
            handle.stop()


class TestLiveInterop:
    def test_mixed_community_trains_to_consensus(self, community):
        handles = community["handles"]
        peer = handles["peer"]
        adopted = peer.read_event("model_adopted", deadline=30)
        assert adopted["source"]
        transition = peer.read_event("mode_transition", deadline=30)
        assert transition["from_mode"] == "leech" and transition["to_mode"] == "peer"
        peer.read_event("run_complete", deadline=60)
        handles["alpha"].read_event("run_complete", deadline=60)
        handles["beta"].read_event("run_complete", deadline=60)

        observer = Observer()
        try:
            flats = [
                observer.fetch_params(community["addresses"][name])
                for name in ("alpha", "beta", "peer")
            ]
        finally:
            observer.close()
        mean = np.mean(flats, axis=0)
        consensus = max(float(np.linalg.norm(f - mean)) for f in flats)
        print(f"[interop] final consensus distance {consensus:.2e}", file=sys.__stderr__)
        assert consensus < 1e-2, f"consensus distance {consensus}"

        for handle in handles.values():
            handle.stop(sig=None)
        counters = {}
        for name, handle in handles.items():
            stopped = [e for e in handle.events() if e.get("event") == "stopped"]
            assert stopped, f"{name} never reported counters"
            counters[name] = stopped[-1]["counters"]
        for name, c in counters.items():
            assert c["malformed_frames"] == 0, f"{name} saw malformed frames: {c}"
        assert counters["peer"]["weights_sent"] > 0
        assert counters["peer"]["weights_received"] > 0

    def test_peer_round_logs_match_primary_format(self, community):
        peer = community["handles"]["peer"]
        rounds = [e for e in peer.events() if e.get("event") == "round_complete"]
        assert rounds
        expected_keys = {
            "event", "node", "round", "loss", "peers_sent", "peers_received",
            "sent_to", "aggregated_from", "digest",
        }
        assert expected_keys <= set(rounds[0])


class TestHandshakeTimeout:
    def test_nothing_listening_exits_5(self, tmp_path):
        cfg = tmp_path / "lonely.json"
        cfg.write_text(
            json.dumps(
                {
                    "namespace": "nowhere",
                    "bootstrap": ["127.0.0.1:1"],
                    "handshake_timeout": 2.0,
                    "heartbeat_interval": 0.2,
                }
            )
        )
        proc = subprocess.run(
            [sys.executable, "-m", "pypeer.cli", "--config", str(cfg)],
            capture_output=True,
            text=True,
            timeout=30,
        )
        assert proc.returncode == 5

    def test_bad_config_exits_2(self, tmp_path):
        cfg = tmp_path / "bad.json"
        cfg.write_text(json.dumps({"namespace": "x", "bootsrap": ["127.0.0.1:1"]}))
        proc = subprocess.run(
            [sys.executable, "-m", "pypeer.cli", "--config", str(cfg)],
            capture_output=True,
            text=True,
            timeout=30,
        )
        assert proc.returncode == 2
        assert "bootsrap" in proc.stderr
