"""The external peer: join a community in leech mode over TCP, download
the model, train locally, promote to peer, contribute weights back.

Single-threaded: one listening socket polled with a short timeout, all
sends blocking with their own timeouts. Log lines mirror the main
runtime's JSON event stream.
"""

from __future__ import annotations

import json
import os
import signal
import socket
import sys
import time
from dataclasses import dataclass, field

from . import protocol
from .model import LinearModel, ModelShapeError, make_data, sample_weighted_mean

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_HANDSHAKE = 5

RECEIVABLE = ("leech", "peer")
SENDERS = ("seed", "peer")


@dataclass
class ExternalPeerConfig:
    namespace: str
    bootstrap: list
    listen: str = "127.0.0.1:0"
    promote_threshold: int = 50
    learning_rate: float = 0.1
    local_epochs: int = 1
    rounds: int = 20
    linger: float = 10.0
    heartbeat_interval: float = 1.0
    ttl_multiplier: int = 3
    announce_every: int = 5
    pool_timeout: float = 0.5
    round_interval: float = 0.15
    handshake_timeout: float = 15.0
    request_interval: float = 1.0
    data: dict = field(default_factory=lambda: {"seed": 1, "n": 256, "noise_std": 0.1})
    name: str = "pypeer"

    @classmethod
    def from_mapping(cls, raw: dict):
        known = {f for f in cls.__dataclass_fields__}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        if not raw.get("namespace"):
            raise ValueError("field 'namespace' is required and must be non-empty")
        if not raw.get("bootstrap"):
            raise ValueError("field 'bootstrap' must list at least one address")
        return cls(**raw)


def _parse_hostport(text):
    host, _, port = text.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"bad address {text!r}")
    return host, int(port)


def _send_frame(address: str, frame: bytes, timeout=2.0) -> bool:
    try:
        with socket.create_connection(_parse_hostport(address), timeout=timeout) as conn:
            conn.sendall(frame)
            conn.shutdown(socket.SHUT_WR)
            conn.settimeout(timeout)
            try:
                while conn.recv(4096):
                    pass
            except OSError:
                pass
        return True
    except (OSError, ValueError):
        return False


class ExternalPeer:
    def __init__(self, config: ExternalPeerConfig, out=None):
        self.cfg = config
        self.out = out or sys.stdout
        self.node_id = os.urandom(16).hex()
        self.mode = "leech"
        self.model = None
        self.pending_layout = None
        self.X = None
        self.y = None
        self.peers = {}  # sender hex -> {"address", "mode", "last_seen"}
        self.round = 0
        self.inbound = {}  # origin -> (flat, sample_count)
        self.counters = {
            "frames_received": 0,
            "frames_sent": 0,
            "malformed_frames": 0,
            "namespace_mismatches": 0,
            "weights_received": 0,
            "weights_sent": 0,
            "weights_dropped_role": 0,
            "weights_dropped_spec": 0,
            "sends_failed": 0,
        }
        self._sock = None
        self.address = None
        self._beats = 0
        self._announce_dirty = True
        self._last_beat = None
        self._round_phase = "start"
        self._collect_deadline = 0.0
        self._last_round_start = None
        self.last_loss = None

    # -- logging -----------------------------------------------------------

    def emit(self, event: str, **fields):
        fields["event"] = event
        fields["node"] = self.cfg.name
        self.out.write(json.dumps(fields, sort_keys=True) + "\n")
        self.out.flush()

    # -- socket plumbing -----------------------------------------------------

    def open_socket(self):
        host, port = _parse_hostport(self.cfg.listen)
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._sock.bind((host, port))
        self._sock.listen(16)
        self._sock.settimeout(0.02)
        self.address = "%s:%d" % (host, self._sock.getsockname()[1])
        self.emit(
            "listening",
            node_id=self.node_id,
            address=self.address,
            namespace=self.cfg.namespace,
            mode=self.mode,
        )

    def _drain_socket(self):
        for _ in range(32):
            try:
                conn, _addr = self._sock.accept()
            except socket.timeout:
                return
            except OSError:
                return
            chunks = []
            try:
                conn.settimeout(2.0)
                while True:
                    piece = conn.recv(65536)
                    if not piece:
                        break
                    chunks.append(piece)
            except OSError:
                pass
            finally:
                try:
                    conn.close()
                except OSError:
                    pass
            if chunks:
                self._handle_frame(b"".join(chunks))

    def _post(self, address: str, msg: dict):
        ok = _send_frame(address, protocol.encode(msg))
        self.counters["frames_sent" if ok else "sends_failed"] += 1
        return ok

    # -- inbound -------------------------------------------------------------

    def _handle_frame(self, frame: bytes):
        self.counters["frames_received"] += 1
        try:
            msg = protocol.decode(frame)
        except protocol.ProtocolError:
            self.counters["malformed_frames"] += 1
            return
        if msg["sender"] == self.node_id:
            return
        if msg["namespace"] != self.cfg.namespace:
            self.counters["namespace_mismatches"] += 1
            return
        kind = msg["kind"]
        now = time.monotonic()
        if kind in ("ANNOUNCE", "HEARTBEAT"):
            record = self.peers.get(msg["sender"])
            if kind == "ANNOUNCE":
                if record is None:
                    self.peers[msg["sender"]] = {
                        "address": msg["body"]["address"],
                        "mode": msg["body"]["mode"],
                        "last_seen": now,
                    }
                    self._announce_dirty = True
                else:
                    record.update(address=msg["body"]["address"], mode=msg["body"]["mode"],
                                  last_seen=now)
            elif record is not None:
                record["last_seen"] = now
        elif kind == "GOODBYE":
            self.peers.pop(msg["sender"], None)
        elif kind == "MODEL_SPEC":
            if self.model is None:
                self.pending_layout = msg["body"]["layout"]
        elif kind == "MODEL_REQUEST":
            self._answer_model_request(msg["sender"])
        elif kind == "WEIGHTS":
            self._handle_weights(msg)

    def _answer_model_request(self, requester: str):
        if self.model is None or self.mode not in SENDERS:
            return
        record = self.peers.get(requester)
        if not record or not record["address"]:
            return
        spec = protocol.message(
            "MODEL_SPEC", self.node_id, self.cfg.namespace,
            {"layout": [{k: e[k] for k in ("name", "dtype", "shape")} for e in self.model.layout]},
        )
        body = {
            "round": self.round,
            "sample_count": self.sample_count(),
            "entries": self.model.dump_entries(),
        }
        self._post(record["address"], spec)
        self._post(record["address"],
                   protocol.message("WEIGHTS", self.node_id, self.cfg.namespace, body))

    def _handle_weights(self, msg: dict):
        body = msg["body"]
        if self.model is None:
            try:
                layout = self.pending_layout or [
                    {k: e[k] for k in ("name", "dtype", "shape")} for e in body["entries"]
                ]
                model = LinearModel(layout)
                model.load_entries(body["entries"])
            except ModelShapeError:
                self.counters["weights_dropped_spec"] += 1
                return
            self.model = model
            data = self.cfg.data
            self.X, self.y = make_data(
                seed=data.get("seed", 1),
                n=data.get("n", 256),
                d=model.d,
                noise_std=data.get("noise_std", 0.1),
                w_seed=data.get("w_seed"),
            )
            self.emit("model_adopted", source=msg["sender"], digest=model.digest())
            sys.stderr.write(f"model adopted from {msg['sender']}\n")
            return
        if self.mode not in RECEIVABLE:
            self.counters["weights_dropped_role"] += 1
            return
        expected = [{k: e[k] for k in ("name", "dtype", "shape")} for e in self.model.layout]
        offered = [{"name": e["name"], "dtype": e["dtype"], "shape": list(e["shape"])}
                   for e in body["entries"]]
        if offered != expected:
            self.counters["weights_dropped_spec"] += 1
            return
        probe = LinearModel(self.model.layout)
        probe.load_entries(body["entries"])
        self.counters["weights_received"] += 1
        self.inbound[msg["sender"]] = (probe.flat(), body["sample_count"])

    # -- periodic work ---------------------------------------------------------

    def sample_count(self) -> int:
        return 0 if self.X is None else int(self.X.shape[0])

    def _beat(self, now: float):
        if self._last_beat is not None and now - self._last_beat < self.cfg.heartbeat_interval:
            return
        self._last_beat = now
        announce = self._announce_dirty or (self._beats % self.cfg.announce_every == 0)
        self._beats += 1
        self._announce_dirty = False
        if announce:
            msg = protocol.message(
                "ANNOUNCE", self.node_id, self.cfg.namespace,
                {"mode": self.mode, "address": self.address},
            )
        else:
            msg = protocol.message("HEARTBEAT", self.node_id, self.cfg.namespace)
        targets = dict.fromkeys(self.cfg.bootstrap)
        for record in self.peers.values():
            if record["address"]:
                targets[record["address"]] = None
        targets.pop(self.address, None)
        for address in targets:
            self._post(address, msg)

    def _expire(self, now: float):
        ttl = self.cfg.heartbeat_interval * self.cfg.ttl_multiplier
        for sender in [s for s, r in self.peers.items() if now - r["last_seen"] > ttl]:
            del self.peers[sender]

    def _maybe_promote(self):
        if self.mode == "leech" and self.sample_count() >= self.cfg.promote_threshold:
            self.mode = "peer"
            self._announce_dirty = True
            self.emit("mode_transition", round=self.round, from_mode="leech", to_mode="peer")

    # -- rounds -----------------------------------------------------------------

    def _step_round(self, now: float):
        if self._round_phase == "start":
            if (
                self._last_round_start is not None
                and now - self._last_round_start < self.cfg.round_interval
            ):
                return
            self._last_round_start = now
            self._sent_to = set()
            if self.sample_count() > 0:
                self.last_loss = self.model.train_epochs(
                    self.X, self.y, self.cfg.learning_rate, self.cfg.local_epochs
                )
            if self.mode in SENDERS:
                body = {
                    "round": self.round,
                    "sample_count": self.sample_count(),
                    "entries": self.model.dump_entries(),
                }
                msg = protocol.message("WEIGHTS", self.node_id, self.cfg.namespace, body)
                for sender, record in sorted(self.peers.items()):
                    if record["mode"] in RECEIVABLE and record["address"]:
                        if self._post(record["address"], msg):
                            self.counters["weights_sent"] += 1
                            self._sent_to.add(sender)
            self._round_phase = "collect"
            self._collect_deadline = now + self.cfg.pool_timeout
            return
        if self.inbound or now >= self._collect_deadline:
            used = sorted(self.inbound)
            if self.mode in RECEIVABLE and used:
                pool = [(self.model.flat(), float(self.sample_count()))]
                pool += [(self.inbound[o][0], float(self.inbound[o][1])) for o in used]
                self.model.set_flat(sample_weighted_mean(pool))
            peers_received = len(self.inbound)
            self.inbound = {}
            self.emit(
                "round_complete",
                round=self.round,
                loss=self.last_loss,
                peers_sent=len(self._sent_to),
                peers_received=peers_received,
                sent_to=sorted(self._sent_to),
                aggregated_from=used,
                digest=self.model.digest(),
            )
            self.round += 1
            self._round_phase = "start"

    # -- join handshake ------------------------------------------------------------

    def _request_model(self, now: float, state: dict):
        if now < state.get("next_at", 0.0):
            return
        state["next_at"] = now + self.cfg.request_interval
        candidates = [r["address"] for s, r in sorted(self.peers.items())
                      if r["mode"] in SENDERS and r["address"]]
        if not candidates:
            return
        target = candidates[state.get("cursor", 0) % len(candidates)]
        state["cursor"] = state.get("cursor", 0) + 1
        self._post(target, protocol.message("MODEL_REQUEST", self.node_id, self.cfg.namespace))

    # -- main loop --------------------------------------------------------------------

    def run(self) -> int:
        self.open_socket()
        stop_flag = []
        for sig in (signal.SIGINT, signal.SIGTERM):
            try:
                signal.signal(sig, lambda *_: stop_flag.append(True))
            except ValueError:
                pass  # not the main thread (embedded use)
        handshake_deadline = time.monotonic() + self.cfg.handshake_timeout
        request_state = {}
        done_at = None
        exit_code = EXIT_OK
        try:
            while not stop_flag:
                now = time.monotonic()
                self._drain_socket()
                self._beat(now)
                self._expire(now)
                if self.model is None:
                    if now >= handshake_deadline:
                        self.emit("handshake_timeout", waited=self.cfg.handshake_timeout)
                        exit_code = EXIT_HANDSHAKE
                        break
                    self._request_model(now, request_state)
                    continue
                self._maybe_promote()
                if self.round < self.cfg.rounds:
                    self._step_round(now)
                elif done_at is None:
                    done_at = now
                    self.emit("run_complete", rounds=self.round)
                elif now - done_at >= self.cfg.linger:
                    break
        except KeyboardInterrupt:
            pass
        finally:
            goodbye = protocol.message("GOODBYE", self.node_id, self.cfg.namespace)
            for record in self.peers.values():
                if record["address"]:
                    self._post(record["address"], goodbye)
            self.emit("stopped", counters=dict(self.counters))
            try:
                self._sock.close()
            except OSError:
                pass
        return exit_code


def peer_join_and_train(config: ExternalPeerConfig) -> int:
    """Join, download the model, train, contribute; returns the exit code."""
    return ExternalPeer(config).run()
