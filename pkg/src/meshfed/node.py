"""Per-node runtime: local training rounds, role-gated weight exchange,
aggregation, mode transitions, and the leech join handshake.

A Node is one logical event loop. The surrounding harness (simulator or
socket host) delivers raw frames via deliver() and drives progress via
slice(now); those two are never called concurrently for the same node.
The trainer is invoked only from the node's own loop.

Rounds are locally clocked and asynchronous across nodes. Inbound weights
carry the sender's round tag; sets older than the staleness window are
dropped.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Optional

from .aggregation import AggregationStrategy, NoisePolicy, add_noise
from .core import Namespace, NodeId, ParameterSet, SharingMode, conforms, spec_of
from . import discovery, wire
from .wire import Message, MessageKind


class NodeError(Exception):
    pass


class NoPeersForModel(NodeError):
    """Model download failed against every known peer within the retry
    budget. The node stays in discovery and keeps retrying."""


@dataclass
class TrainResult:
    params: ParameterSet
    samples_used: int
    loss: Optional[float]


class TrainerContract:
    """What the federation layer needs from a model, and nothing more.

    Implementations own their data privately; raw samples never cross this
    boundary. train() must return parameters conforming to its input's
    layout.
    """

    def train(self, params: ParameterSet) -> TrainResult:
        raise NotImplementedError

    def initial_params(self) -> Optional[ParameterSet]:
        raise NotImplementedError

    def local_sample_count(self) -> int:
        raise NotImplementedError


@dataclass
class NodePolicy:
    default_mode: SharingMode = SharingMode.PEER
    promote_threshold: int = 0
    privacy_exclusion: bool = False
    noise: NoisePolicy = field(default_factory=NoisePolicy)
    pool_min_inbound: int = 1
    pool_timeout: float = 1.0
    staleness_window: int = 2
    heartbeat_interval: float = 1.0
    ttl_multiplier: int = 3
    announce_every: int = 5
    model_request_timeout: float = 3.0
    model_request_retries: int = 3
    max_rounds: Optional[int] = None
    # optional hook: fn(node) -> SharingMode or None, consulted before the
    # built-in leech promotion rule
    transition_fn: Optional[Callable] = None

    def __post_init__(self):
        if self.promote_threshold < 0:
            raise ValueError("promote_threshold must be non-negative")
        if self.pool_min_inbound < 1:
            raise ValueError("pool_min_inbound must be positive")


@dataclass
class RoundState:
    round: int = 0
    phase: str = "start"  # start | collect
    inbound: dict = field(default_factory=dict)  # origin -> ParameterSet
    sent_to: set = field(default_factory=set)
    received_from: set = field(default_factory=set)
    collect_deadline: float = 0.0


@dataclass
class RoundReport:
    round: int
    loss: Optional[float]
    peers_sent: int
    peers_received: int
    digest: str


def _always_peer(_other: NodeId) -> SharingMode:
    return SharingMode.PEER


class Node:
    """One decentralized learning participant."""

    def __init__(
        self,
        node_id: NodeId,
        namespace: Namespace,
        policy: NodePolicy,
        trainer: TrainerContract,
        strategy: AggregationStrategy,
        transport_send: Callable,  # (address, frame_bytes) -> bool
        listen_address: str,
        bootstrap: tuple = (),
        edge_mode: Optional[Callable] = None,  # (other NodeId) -> my stance
        name: Optional[str] = None,
    ):
        self.id = node_id
        self.name = name or node_id.short()
        self.namespace = namespace
        self.policy = policy
        self.trainer = trainer
        self.strategy = strategy
        self.mode = policy.default_mode
        self.listen_address = listen_address
        self.bootstrap = tuple(a for a in bootstrap if a and a != listen_address)
        self._send_raw = transport_send
        self._edge_mode = edge_mode or _always_peer

        self.table = discovery.PeerTable(
            namespace=namespace,
            heartbeat_interval=policy.heartbeat_interval,
            ttl_multiplier=policy.ttl_multiplier,
        )
        self.state = RoundState()
        self.params: Optional[ParameterSet] = None
        self.last_loss: Optional[float] = None
        self.rounds_completed = 0
        self.started = False
        # harnesses may hold rounds back (e.g. until discovery has settled)
        # and pace them (live nodes would otherwise spin rounds as fast as
        # the loop turns)
        self.rounds_start_at = 0.0
        self.min_round_interval = 0.0
        self._last_round_started = None

        self._inbox = deque()
        self._beat_count = 0
        self._next_beat_at: Optional[float] = None
        self._announce_dirty = True
        self._awaited_spec = None
        self._request_deadline: Optional[float] = None
        self._request_queue: list = []
        self._request_cycles = 0
        self._no_peers_reported = False

        self.events: list = []
        self.counters = {
            "frames_received": 0,
            "frames_sent": 0,
            "malformed_frames": 0,
            "namespace_mismatches": 0,
            "weights_dropped_role": 0,
            "weights_dropped_stale": 0,
            "weights_dropped_spec": 0,
            "weights_received": 0,
            "weights_sent": 0,
            "sends_failed": 0,
            "model_requests_answered": 0,
            "hello_received": 0,
        }

    # -- wiring ------------------------------------------------------------

    @property
    def eligible(self) -> bool:
        """Round-eligible: the node holds parameters."""
        return self.params is not None

    def deliver(self, frame: bytes):
        """Queue one raw frame; decoded and handled on the next slice."""
        self._inbox.append(frame)

    def _emit(self, event: str, **detail):
        detail["event"] = event
        detail["node"] = self.name
        self.events.append(detail)

    def drain_events(self) -> list:
        out, self.events = self.events, []
        return out

    def _send(self, address: str, msg: Message) -> bool:
        ok = False
        try:
            ok = bool(self._send_raw(address, wire.encode_message(msg)))
        except Exception:
            ok = False
        if ok:
            self.counters["frames_sent"] += 1
        else:
            self.counters["sends_failed"] += 1
        return ok

    # -- lifecycle ----------------------------------------------------------

    def start(self, now: float):
        """Join the namespace: adopt local params if the trainer has them,
        announce, and begin the model download when params are absent."""
        self.started = True
        initial = self.trainer.initial_params()
        if initial is not None:
            self.params = initial.with_metadata(
                round=0, sample_count=self.trainer.local_sample_count(), origin=self.id
            )
        self._announce_dirty = True
        self._next_beat_at = now
        self._heartbeat_tick(now)

    def stop(self, now: float):
        """Clean shutdown: say goodbye to everyone still alive."""
        msg = wire.goodbye(self.id, self.namespace)
        for rec in discovery.alive_peers(self.table):
            self._send(rec.address, msg)
        self._emit("stopped", counters=dict(self.counters))

    # -- inbound handling ----------------------------------------------------

    def handle_message(self, m: Message, now: float):
        """Dispatch one decoded message. Undecodable frames never get here."""
        if m.sender == self.id:
            return
        if m.namespace != self.namespace:
            self.counters["namespace_mismatches"] += 1
            return
        kind = m.kind
        if kind in (MessageKind.ANNOUNCE, MessageKind.HEARTBEAT):
            known = m.sender in self.table
            discovery.on_announce(self.table, m, now)
            if not known and m.sender in self.table:
                # introduce ourselves on the next beat so the newcomer learns
                # our address and mode without waiting an announce cycle
                self._announce_dirty = True
                self._emit("peer_admitted", peer=m.sender.hex)
        elif kind is MessageKind.HELLO:
            self.counters["hello_received"] += 1
        elif kind is MessageKind.GOODBYE:
            if self.table.remove(m.sender):
                self._emit("peer_left", peer=m.sender.hex)
        elif kind is MessageKind.MODEL_REQUEST:
            self._answer_model_request(m.sender)
        elif kind is MessageKind.MODEL_SPEC:
            if not self.eligible:
                self._awaited_spec = m.body
        elif kind is MessageKind.WEIGHTS:
            self._handle_weights(m, now)

    def _answer_model_request(self, requester: NodeId):
        if not self.eligible:
            return
        if not (self.mode.may_send and self._edge_mode(requester).may_send):
            return
        rec = self.table.records.get(requester)
        if rec is None or not rec.address:
            return
        outbound = self._stamped_params()
        self._send(rec.address, wire.model_spec(self.id, self.namespace, spec_of(outbound)))
        if self._send(rec.address, wire.weights(self.id, self.namespace, outbound)):
            self.counters["model_requests_answered"] += 1

    def _handle_weights(self, m: Message, now: float):
        body = m.body
        if not self.eligible:
            # join handshake: adopt the first conforming set we can receive
            if not self.mode.may_receive:
                self.counters["weights_dropped_role"] += 1
                return
            if self._awaited_spec is not None and not conforms(body, self._awaited_spec):
                self.counters["weights_dropped_spec"] += 1
                return
            self.params = body.with_metadata(
                round=self.state.round,
                sample_count=self.trainer.local_sample_count(),
                origin=self.id,
            )
            self._request_deadline = None
            self._request_queue = []
            self._emit("model_adopted", source=m.sender.hex, digest=self.params.digest())
            return
        if not (self.mode.may_receive and self._edge_mode(m.sender).may_receive):
            self.counters["weights_dropped_role"] += 1
            return
        if not conforms(body, spec_of(self.params)):
            self.counters["weights_dropped_spec"] += 1
            return
        if body.round < self.state.round - self.policy.staleness_window:
            self.counters["weights_dropped_stale"] += 1
            return
        self.counters["weights_received"] += 1
        self.state.inbound[body.origin] = body
        self.state.received_from.add(body.origin)

    # -- periodic work --------------------------------------------------------

    def _heartbeat_tick(self, now: float):
        if self._next_beat_at is None or now < self._next_beat_at:
            return
        self._next_beat_at = now + self.policy.heartbeat_interval
        announce = self._announce_dirty or (self._beat_count % self.policy.announce_every == 0)
        self._beat_count += 1
        self._announce_dirty = False
        if announce:
            msg = wire.announce(self.id, self.namespace, self.mode, self.listen_address)
        else:
            msg = wire.heartbeat(self.id, self.namespace)
        targets = dict.fromkeys(self.bootstrap)
        for rec in discovery.alive_peers(self.table):
            if rec.address and rec.address != self.listen_address:
                targets[rec.address] = None
        for address in targets:
            self._send(address, msg)

    def _sweep(self, now: float):
        _, expelled = discovery.sweep_expired(self.table, now)
        for nid in expelled:
            self._emit("peer_expelled", peer=nid.hex)

    def _request_model_step(self, now: float):
        if self.eligible:
            return
        if self._request_deadline is not None and now < self._request_deadline:
            return
        if not self._request_queue:
            self._request_cycles += 1
            if self._request_cycles > self.policy.model_request_retries and not self._no_peers_reported:
                self._no_peers_reported = True
                self._emit("no_peers_for_model", retries=self.policy.model_request_retries)
            candidates = [
                r for r in discovery.alive_peers(self.table) if r.advertised_mode.may_send
            ]
            if not candidates:
                self._request_deadline = now + self.policy.model_request_timeout
                return
            self._request_queue = candidates
        target = self._request_queue.pop(0)
        self._send(target.address, wire.model_request(self.id, self.namespace))
        self._request_deadline = now + self.policy.model_request_timeout

    # -- mode transitions -------------------------------------------------------

    def maybe_transition(self) -> SharingMode:
        """Apply the custom hook, else the built-in leech promotion rule."""
        new_mode = None
        if self.policy.transition_fn is not None:
            new_mode = self.policy.transition_fn(self)
        if new_mode is None:
            if (
                self.mode is SharingMode.LEECH
                and self.trainer.local_sample_count() >= self.policy.promote_threshold
            ):
                new_mode = SharingMode.PEER
        if new_mode is not None and new_mode is not self.mode:
            old, self.mode = self.mode, new_mode
            self._announce_dirty = True
            self._emit(
                "mode_transition", round=self.state.round, from_mode=old.value, to_mode=new_mode.value
            )
        return self.mode

    # -- round machine ------------------------------------------------------------

    def _stamped_params(self) -> ParameterSet:
        return self.params.with_metadata(
            round=self.state.round,
            sample_count=self.trainer.local_sample_count(),
            origin=self.id,
        )

    def _train_phase(self):
        # a node with no local data has nothing to fit, whatever its mode
        if self.trainer.local_sample_count() == 0:
            return
        result = self.trainer.train(self.params)
        if not conforms(result.params, spec_of(self.params)):
            raise NodeError(f"trainer changed the parameter layout on {self.name}")
        self.params = result.params.with_metadata(
            round=self.state.round,
            sample_count=self.trainer.local_sample_count(),
            origin=self.id,
        )
        self.last_loss = result.loss

    def _send_phase(self):
        if not self.mode.may_send:
            return
        outbound = None
        for rec in discovery.alive_peers(self.table):
            if not self._edge_mode(rec.id).may_send:
                continue
            if not rec.advertised_mode.may_receive:
                continue
            if not rec.address:
                continue
            if outbound is None:
                outbound = add_noise(self._stamped_params(), self.policy.noise)
            if self._send(rec.address, wire.weights(self.id, self.namespace, outbound)):
                self.counters["weights_sent"] += 1
                self.state.sent_to.add(rec.id)

    def _aggregate_phase(self) -> list:
        if not self.mode.may_receive:
            self.state.inbound.clear()
            return []
        pool = self.state.inbound
        if self.policy.privacy_exclusion:
            pool = {o: ps for o, ps in pool.items() if o not in self.state.sent_to}
        used = [pool[o] for o in sorted(pool)]
        if used:
            combined = self.strategy.combine(self._stamped_params(), used)
            self.params = combined.with_metadata(
                round=self.state.round,
                sample_count=self.trainer.local_sample_count(),
                origin=self.id,
            )
        self.state.inbound.clear()
        return [ps.origin for ps in used]

    def _round_step(self, now: float) -> Optional[RoundReport]:
        st = self.state
        if st.phase == "start":
            if now < self.rounds_start_at:
                return None
            if (
                self._last_round_started is not None
                and now - self._last_round_started < self.min_round_interval
            ):
                return None
            if (
                self.policy.max_rounds is not None
                and self.rounds_completed >= self.policy.max_rounds
            ):
                return None
            self._last_round_started = now
            st.sent_to = set()
            st.received_from = set()
            self._train_phase()
            self._send_phase()
            st.phase = "collect"
            st.collect_deadline = now + self.policy.pool_timeout
            if self.mode.may_receive and len(st.inbound) < self.policy.pool_min_inbound:
                return None
            # fall through when the pool is already satisfied (or roles make
            # collection moot) so a round can finish within one slice
        if st.phase == "collect":
            pool_ready = len(st.inbound) >= self.policy.pool_min_inbound
            timed_out = now >= st.collect_deadline
            if self.mode.may_receive and not (pool_ready or timed_out):
                return None
            peers_received = len(st.inbound)
            aggregated_from = self._aggregate_phase()
            report = RoundReport(
                round=st.round,
                loss=self.last_loss,
                peers_sent=len(st.sent_to),
                peers_received=peers_received,
                digest=self.params.digest(),
            )
            self._emit(
                "round_complete",
                round=st.round,
                loss=self.last_loss,
                peers_sent=len(st.sent_to),
                peers_received=peers_received,
                sent_to=[n.hex for n in sorted(st.sent_to)],
                aggregated_from=[n.hex for n in sorted(aggregated_from)],
                digest=report.digest,
            )
            self.rounds_completed += 1
            st.round += 1
            st.phase = "start"
            return report
        return None

    # -- scheduler slice ---------------------------------------------------------

    def slice(self, now: float) -> Optional[RoundReport]:
        """One cooperative scheduling slice: drain the inbox, run timers,
        then advance either the join protocol or the round machine."""
        if not self.started:
            self.start(now)
        eligible_at_entry = self.eligible
        while self._inbox:
            frame = self._inbox.popleft()
            self.counters["frames_received"] += 1
            try:
                msg = wire.decode_message(frame)
            except wire.WireError:
                self.counters["malformed_frames"] += 1
                continue
            self.handle_message(msg, now)
        self._heartbeat_tick(now)
        self._sweep(now)
        if not self.eligible:
            self._request_model_step(now)
            return None
        if not eligible_at_entry:
            # model adopted this slice; rounds begin on the next one
            return None
        self.maybe_transition()
        return self._round_step(now)
