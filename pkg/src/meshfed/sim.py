"""Deterministic in-memory network and scheduler for whole communities.

Virtual time advances in integer ticks. Every random choice (frame drops,
latency draws) comes from one generator seeded by the scenario, and nodes
are sliced in sorted-id order, so identical scenarios produce bit-identical
metrics logs. The node runtime is the same code that runs on stream
sockets; only the transport and clock differ.
"""

from __future__ import annotations

import hashlib
import heapq
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .aggregation import NoisePolicy, strategy_by_name
from .core import Namespace, NodeId, ParameterSet, SharingMode
from .node import Node, NodePolicy
from .refmodel import PartitionScheme, gen_dataset, make_trainer, partition
from .topology import Topology, build_complete, build_grid, build_neighborhood, build_star
from .wire import MessageKind


class ValidationError(ValueError):
    """Scenario rejected before the run; each problem names its field."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class NoAliveNodes(ValueError):
    pass


@dataclass(frozen=True)
class SimConfig:
    seed: int = 0
    latency: tuple = (1, 1)
    drop_prob: float = 0.0
    tick_budget: Optional[int] = None
    warmup_ticks: Optional[int] = None

    def resolved_warmup(self) -> int:
        if self.warmup_ticks is not None:
            return self.warmup_ticks
        return 2 * self.latency[1] + 1


@dataclass(frozen=True)
class ChurnEvent:
    at_tick: int
    action: str  # kill | revive | join
    node: str
    config: Optional[dict] = None


@dataclass
class NodeSetup:
    name: str
    node_id: NodeId
    config: dict  # validated node-config mapping
    shard_index: int
    joins_at: Optional[int] = None  # None: present from tick 0


@dataclass
class ScenarioSpec:
    name: str
    seed: int
    rounds: int
    namespace: str
    topology_cfg: dict
    dataset_cfg: dict
    partition_cfg: dict
    aggregation: str
    setups: dict  # name -> NodeSetup, in declaration order
    churn: list
    sim: SimConfig
    edge_overrides: list = field(default_factory=list)

    @property
    def node_names(self) -> list:
        return list(self.setups.keys())


# ---------------------------------------------------------------------------
# scenario loading

_TOP_KEYS = {
    "name", "seed", "rounds", "namespace", "topology", "dataset", "partition",
    "aggregation", "node_defaults", "nodes", "churn", "sim", "edge_overrides",
}
_NODE_KEYS = {
    "mode", "promote_threshold", "privacy_exclusion", "noise_sigma", "noise_seed",
    "pool_min_inbound", "pool_timeout", "staleness_window", "heartbeat_interval",
    "ttl_multiplier", "announce_every", "model_request_timeout", "model_request_retries",
    "trainer", "data_arrival", "initial_visible",
}
_TRAINER_KEYS = {
    "kind", "learning_rate", "local_epochs", "batch_size", "hidden",
    "init", "init_scale",
}
_DEFAULT_NODE_CONFIG = {
    "mode": "peer",
    "promote_threshold": 0,
    "privacy_exclusion": False,
    "noise_sigma": 0.0,
    "noise_seed": 0,
    "pool_min_inbound": "auto",
    "pool_timeout": 2,
    "staleness_window": 2,
    "heartbeat_interval": 1,
    "ttl_multiplier": 3,
    "announce_every": 5,
    "model_request_timeout": 3,
    "model_request_retries": 3,
    "trainer": {"kind": "linear"},
    "data_arrival": None,
    "initial_visible": None,
}


def _topology_names(cfg: dict, problems) -> list:
    kind = cfg.get("kind")
    if kind == "complete":
        n = cfg.get("nodes", 0)
        if not isinstance(n, int) or n < 2:
            problems.append("topology.nodes: complete graph needs an integer >= 2")
            return []
        return [f"n{i}" for i in range(n)]
    if kind == "star":
        leaves = cfg.get("leaves", 0)
        if not isinstance(leaves, int) or leaves < 1:
            problems.append("topology.leaves: star needs an integer >= 1")
            return []
        return [f"n{i}" for i in range(leaves + 1)]
    if kind == "grid":
        rows, cols = cfg.get("rows", 0), cfg.get("cols", 0)
        if not (isinstance(rows, int) and isinstance(cols, int) and rows >= 1 and cols >= 1):
            problems.append("topology.rows/cols: grid needs positive integers")
            return []
        return [f"n{i}" for i in range(rows * cols)]
    if kind == "neighborhood":
        hubs, leaves = cfg.get("hubs", 0), cfg.get("leaves", 0)
        epl = cfg.get("edges_per_leaf", 1)
        if not (isinstance(hubs, int) and hubs >= 1 and isinstance(leaves, int) and leaves >= 0):
            problems.append("topology.hubs/leaves: neighborhood needs integers")
            return []
        if not isinstance(epl, int) or epl < 1 or epl > hubs:
            problems.append("topology.edges_per_leaf: must be in 1..hubs")
            return []
        return [f"n{i}" for i in range(hubs + leaves)]
    problems.append(f"topology.kind: unknown kind {kind!r}")
    return []


def _merge_node_config(defaults: dict, override: dict, where: str, problems) -> dict:
    merged = dict(defaults)
    for key, value in override.items():
        if key not in _NODE_KEYS:
            problems.append(f"{where}.{key}: unknown node config key")
            continue
        if key == "trainer":
            trainer = dict(defaults.get("trainer", {}))
            for tk, tv in value.items():
                if tk not in _TRAINER_KEYS:
                    problems.append(f"{where}.trainer.{tk}: unknown trainer key")
                else:
                    trainer[tk] = tv
            merged["trainer"] = trainer
        else:
            merged[key] = value
    return merged


def load_scenario(data: dict) -> ScenarioSpec:
    """Validate a scenario mapping; raises ValidationError listing every
    problem with its field path."""
    problems = []
    for key in data:
        if key not in _TOP_KEYS:
            problems.append(f"{key}: unknown scenario key")

    name = data.get("name", "scenario")
    seed = data.get("seed", 0)
    rounds = data.get("rounds")
    if not isinstance(rounds, int) or rounds < 1:
        problems.append("rounds: required integer >= 1")
        rounds = 1
    namespace = data.get("namespace", "sim")
    try:
        Namespace(namespace)
    except ValueError as e:
        problems.append(f"namespace: {e}")

    topology_cfg = data.get("topology") or {}
    names = _topology_names(topology_cfg, problems)

    dataset_cfg = dict(data.get("dataset") or {})
    dataset_cfg.setdefault("seed", seed)
    dataset_cfg.setdefault("n", 256)
    dataset_cfg.setdefault("d", 4)
    dataset_cfg.setdefault("noise_std", 0.1)
    if dataset_cfg["n"] < 1 or dataset_cfg["d"] < 1:
        problems.append("dataset.n/d: must be >= 1")
    if dataset_cfg["noise_std"] < 0:
        problems.append("dataset.noise_std: must be >= 0")

    partition_cfg = dict(data.get("partition") or {"scheme": "iid"})

    aggregation = data.get("aggregation", "fedavg")
    try:
        strategy_by_name(aggregation)
    except Exception:
        problems.append(f"aggregation: unknown strategy {aggregation!r}")

    defaults = _merge_node_config(_DEFAULT_NODE_CONFIG, data.get("node_defaults") or {},
                                  "node_defaults", problems)
    overrides = data.get("nodes") or {}
    for node_name in overrides:
        if node_name not in names:
            problems.append(f"nodes.{node_name}: not a topology node")

    setups = {}
    for idx, node_name in enumerate(names):
        cfg = _merge_node_config(defaults, overrides.get(node_name, {}),
                                 f"nodes.{node_name}", problems)
        try:
            SharingMode.parse(cfg["mode"])
        except ValueError as e:
            problems.append(f"nodes.{node_name}.mode: {e}")
        setups[node_name] = NodeSetup(
            name=node_name,
            node_id=NodeId.derived(str(seed), node_name),
            config=cfg,
            shard_index=idx,
        )

    churn = []
    known = set(names)
    killed = set()
    raw_churn = data.get("churn") or []
    for i, ev in enumerate(sorted(raw_churn, key=lambda e: (e.get("at_tick", 0)))):
        at_tick = ev.get("at_tick")
        action = ev.get("action")
        target = ev.get("node")
        where = f"churn[{i}]"
        if not isinstance(at_tick, int) or at_tick < 0:
            problems.append(f"{where}.at_tick: required non-negative integer")
            continue
        if action == "kill":
            if target not in known or target in killed:
                problems.append(f"{where}: kill of unknown or already-dead node {target!r}")
                continue
            killed.add(target)
        elif action == "revive":
            if target not in killed:
                problems.append(f"{where}: revive of a node that is not dead: {target!r}")
                continue
            killed.discard(target)
        elif action == "join":
            if target in known:
                problems.append(f"{where}: join name {target!r} already exists")
                continue
            known.add(target)
            cfg = _merge_node_config(defaults, ev.get("config") or {}, f"{where}.config", problems)
            setups[target] = NodeSetup(
                name=target,
                node_id=NodeId.derived(str(seed), target),
                config=cfg,
                shard_index=len(setups),
                joins_at=at_tick,
            )
        else:
            problems.append(f"{where}.action: unknown action {action!r}")
            continue
        churn.append(ChurnEvent(at_tick=at_tick, action=action, node=target,
                                config=ev.get("config")))

    k = len(setups)
    scheme_kind = partition_cfg.get("scheme", "iid")
    try:
        scheme = PartitionScheme(
            kind=scheme_kind,
            ratios=tuple(partition_cfg["ratios"]) if "ratios" in partition_cfg else None,
            alpha=partition_cfg.get("alpha", 1.0),
        )
        if scheme.kind == "quantity_skew" and len(scheme.ratios) != k:
            problems.append(f"partition.ratios: {len(scheme.ratios)} ratios for {k} nodes")
        if scheme.kind in ("iid", "feature_skew") and k > dataset_cfg["n"]:
            problems.append("partition: more nodes than samples")
    except Exception as e:
        problems.append(f"partition: {e}")

    sim_cfg = dict(data.get("sim") or {})
    latency = tuple(sim_cfg.get("latency", (1, 1)))
    if len(latency) != 2 or latency[0] < 0 or latency[1] < latency[0]:
        problems.append("sim.latency: need [min, max] with 0 <= min <= max")
        latency = (1, 1)
    drop_prob = float(sim_cfg.get("drop_prob", 0.0))
    if not 0.0 <= drop_prob <= 1.0:
        problems.append("sim.drop_prob: must lie in [0, 1]")
    sim = SimConfig(
        seed=sim_cfg.get("seed", seed),
        latency=(int(latency[0]), int(latency[1])),
        drop_prob=drop_prob,
        tick_budget=sim_cfg.get("tick_budget"),
        warmup_ticks=sim_cfg.get("warmup_ticks"),
    )

    edge_overrides = list(data.get("edge_overrides") or [])
    for i, ov in enumerate(edge_overrides):
        for endpoint in ("from", "to"):
            if ov.get(endpoint) not in names:
                problems.append(f"edge_overrides[{i}].{endpoint}: unknown node")
        try:
            SharingMode.parse(ov.get("mode", ""))
        except ValueError:
            problems.append(f"edge_overrides[{i}].mode: unknown mode")

    if problems:
        raise ValidationError(problems)
    return ScenarioSpec(
        name=name,
        seed=seed,
        rounds=rounds,
        namespace=namespace,
        topology_cfg=topology_cfg,
        dataset_cfg=dataset_cfg,
        partition_cfg=partition_cfg,
        aggregation=aggregation,
        setups=setups,
        churn=churn,
        sim=sim,
        edge_overrides=edge_overrides,
    )


def load_scenario_file(path) -> ScenarioSpec:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise ValidationError([f"{path}: {e}"]) from e
    if not isinstance(data, dict):
        raise ValidationError([f"{path}: scenario must be a JSON object"])
    return load_scenario(data)


def build_topology(spec: ScenarioSpec) -> Topology:
    cfg = spec.topology_cfg
    initial = [s for s in spec.setups.values() if s.joins_at is None]
    ids = [s.node_id for s in initial]
    kind = cfg["kind"]
    if kind == "complete":
        topo = build_complete(ids)
    elif kind == "star":
        topo = build_star(ids[0], ids[1:])
    elif kind == "grid":
        topo = build_grid(cfg["rows"], cfg["cols"], ids)
    elif kind == "neighborhood":
        topo = build_neighborhood(
            ids[: cfg["hubs"]], cfg["edges_per_leaf"], ids[cfg["hubs"] :]
        )
    else:  # pragma: no cover - validation rejects earlier
        raise ValidationError([f"topology.kind: {kind!r}"])
    by_name = {s.name: s.node_id for s in initial}
    for ov in spec.edge_overrides:
        topo = topo.with_edge(
            by_name[ov["from"]], by_name[ov["to"]], SharingMode.parse(ov["mode"])
        )
    return topo


# ---------------------------------------------------------------------------
# metrics

NODE_COLUMNS = ("tick", "node", "round", "mode", "loss", "dist_to_mean", "peer_count", "digest")
TRANSPORT_COLUMNS = ("tick", "frames_sent", "frames_delivered", "frames_dropped", "frames_in_flight")
FRAME_COLUMNS = ("tick_sent", "deliver_tick", "sender", "recipient", "kind", "outcome")


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass
class MetricsLog:
    """Append-only run record; serializable to delimited and structured text."""

    scenario: str
    node_rows: list = field(default_factory=list)
    transport_rows: list = field(default_factory=list)
    events: list = field(default_factory=list)
    frames: list = field(default_factory=list)
    finals: dict = field(default_factory=dict)  # node name -> ParameterSet|None
    final_tick: int = 0

    def nodes_csv(self) -> str:
        out = io.StringIO()
        out.write(",".join(NODE_COLUMNS) + "\n")
        for row in self.node_rows:
            out.write(",".join(_fmt(v) for v in row) + "\n")
        return out.getvalue()

    def transport_csv(self) -> str:
        out = io.StringIO()
        out.write(",".join(TRANSPORT_COLUMNS) + "\n")
        for row in self.transport_rows:
            out.write(",".join(_fmt(v) for v in row) + "\n")
        return out.getvalue()

    def frames_csv(self) -> str:
        out = io.StringIO()
        out.write(",".join(FRAME_COLUMNS) + "\n")
        for row in self.frames:
            out.write(",".join(_fmt(v) for v in row) + "\n")
        return out.getvalue()

    def events_jsonl(self) -> str:
        return "".join(json.dumps(e, sort_keys=True) + "\n" for e in self.events)

    def digest(self) -> str:
        h = hashlib.sha256()
        for chunk in (self.nodes_csv(), self.transport_csv(), self.frames_csv(),
                      self.events_jsonl()):
            h.update(chunk.encode())
        return h.hexdigest()

    def ticks(self) -> list:
        seen = dict.fromkeys(row[0] for row in self.node_rows)
        return list(seen)

    def rows_at(self, tick: int) -> list:
        return [row for row in self.node_rows if row[0] == tick]

    def losses_at_end(self) -> dict:
        last = {}
        for row in self.node_rows:
            if row[4] is not None:
                last[row[1]] = row[4]
        return last

    def weights_frames(self, sender=None, recipient=None) -> list:
        out = []
        for row in self.frames:
            if row[4] != "WEIGHTS":
                continue
            if sender is not None and row[2] != sender:
                continue
            if recipient is not None and row[3] != recipient:
                continue
            out.append(row)
        return out

    def summary(self) -> dict:
        sent = delivered = dropped = in_flight = 0
        if self.transport_rows:
            _, sent, delivered, dropped, in_flight = self.transport_rows[-1]
        losses = [v for v in self.losses_at_end().values() if v is not None]
        try:
            final_consensus = consensus_distance(self, self.final_tick)
        except NoAliveNodes:
            final_consensus = None
        rounds = {}
        for row in self.node_rows:
            rounds[row[1]] = row[2]
        return {
            "scenario": self.scenario,
            "final_tick": self.final_tick,
            "final_consensus_distance": final_consensus,
            "final_mean_loss": float(np.mean(losses)) if losses else None,
            "frames_sent": sent,
            "frames_delivered": delivered,
            "frames_dropped": dropped,
            "frames_in_flight": in_flight,
            "rounds_completed": rounds,
            "log_digest": self.digest(),
        }


def consensus_distance(log: MetricsLog, tick: int) -> float:
    """Max distance of any alive node's parameters from the community mean
    at the given tick."""
    rows = log.rows_at(tick)
    if not rows:
        raise NoAliveNodes(f"no rows at tick {tick}")
    dists = [row[5] for row in rows if row[5] is not None]
    if not dists:
        raise NoAliveNodes(f"no parameter-holding nodes at tick {tick}")
    return max(dists)


# ---------------------------------------------------------------------------
# in-memory network

_KIND_NAMES = {int(k): k.name for k in MessageKind}


class SimNetwork:
    """Routes frames between bound addresses with seeded loss and latency."""

    def __init__(self, rng: np.random.Generator, latency: tuple, drop_prob: float):
        self.rng = rng
        self.latency = latency
        self.drop_prob = drop_prob
        self.bindings = {}  # address -> Node (alive only)
        self.names = {}  # address -> node name
        self.id_names = {}  # sender id hex -> node name
        self.heap = []
        self._seq = 0
        self.now = 0
        self.sent = 0
        self.delivered = 0
        self.dropped = 0
        self.frame_log = []

    def bind(self, address: str, node: Node, name: str):
        self.bindings[address] = node
        self.names[address] = name

    def unbind(self, address: str):
        self.bindings.pop(address, None)

    def send(self, to_address: str, frame: bytes) -> bool:
        self.sent += 1
        sender_hex = frame[6:22].hex()
        kind = _KIND_NAMES.get(frame[5], "?")
        sender = self._name_for_id(sender_hex)
        recipient = self.names.get(to_address, to_address)
        if self.drop_prob > 0 and self.rng.random() < self.drop_prob:
            self.dropped += 1
            self.frame_log.append((self.now, None, sender, recipient, kind, "dropped"))
            return True
        delay = int(self.rng.integers(self.latency[0], self.latency[1] + 1))
        deliver_at = self.now + max(delay, 1)
        self._seq += 1
        heapq.heappush(self.heap, (deliver_at, self._seq, to_address, frame))
        self.frame_log.append((self.now, deliver_at, sender, recipient, kind, "sent"))
        return True

    def _name_for_id(self, sender_hex: str) -> str:
        return self.id_names.get(sender_hex, sender_hex[:8])

    def deliver_due(self, tick: int):
        self.now = tick
        while self.heap and self.heap[0][0] <= tick:
            deliver_at, seq, to_address, frame = heapq.heappop(self.heap)
            target = self.bindings.get(to_address)
            sender = self._name_for_id(frame[6:22].hex())
            recipient = self.names.get(to_address, to_address)
            kind = _KIND_NAMES.get(frame[5], "?")
            if target is None:
                self.dropped += 1
                self.frame_log.append((deliver_at, deliver_at, sender, recipient, kind, "dropped_dead"))
            else:
                self.delivered += 1
                target.deliver(frame)
                self.frame_log.append((deliver_at, deliver_at, sender, recipient, kind, "delivered"))

    @property
    def in_flight(self) -> int:
        return len(self.heap)


# ---------------------------------------------------------------------------
# runner

def _address(name: str) -> str:
    return f"mem://{name}"


class _SimNode:
    """Bookkeeping around one Node instance inside the simulator."""

    def __init__(self, setup: NodeSetup, node: Node, trainer, schedule):
        self.setup = setup
        self.node = node
        self.trainer = trainer
        self.schedule = sorted(schedule, key=lambda item: item[0])  # (at_tick, count)
        self.visible = trainer.local_sample_count()
        self.alive = False
        self.ever_killed = False

    def apply_data_arrivals(self, tick: int):
        while self.schedule and self.schedule[0][0] <= tick:
            _, count = self.schedule.pop(0)
            self.visible += count
            if hasattr(self.trainer, "set_visible_samples"):
                self.trainer.set_visible_samples(self.visible)


def _build_policy(cfg: dict, spec: ScenarioSpec) -> NodePolicy:
    return NodePolicy(
        default_mode=SharingMode.parse(cfg["mode"]),
        promote_threshold=int(cfg["promote_threshold"]),
        privacy_exclusion=bool(cfg["privacy_exclusion"]),
        noise=NoisePolicy(sigma=float(cfg["noise_sigma"]), rng_seed=int(cfg["noise_seed"])),
        pool_min_inbound=1,  # resolved separately (may be "auto")
        pool_timeout=float(cfg["pool_timeout"]),
        staleness_window=int(cfg["staleness_window"]),
        heartbeat_interval=float(cfg["heartbeat_interval"]),
        ttl_multiplier=int(cfg["ttl_multiplier"]),
        announce_every=int(cfg["announce_every"]),
        model_request_timeout=float(cfg["model_request_timeout"]),
        model_request_retries=int(cfg["model_request_retries"]),
        max_rounds=spec.rounds,
    )


def _auto_pool_min(spec: ScenarioSpec, topo: Topology, me: NodeSetup) -> int:
    count = 0
    for other in spec.setups.values():
        if other.name == me.name or other.joins_at is not None:
            continue
        stance_toward_me = topo.mode(other.node_id, me.node_id)
        sender_mode = SharingMode.parse(other.config["mode"])
        if stance_toward_me.may_send and sender_mode.may_send:
            count += 1
    return max(count, 1)


def run_scenario(spec: ScenarioSpec) -> MetricsLog:
    """Execute the scenario tick loop to completion; failures mid-run are
    data, not exceptions."""
    rng = np.random.default_rng([43, spec.sim.seed])
    net = SimNetwork(rng, spec.sim.latency, spec.sim.drop_prob)
    namespace = Namespace(spec.namespace)
    warmup = spec.sim.resolved_warmup()

    dataset = gen_dataset(
        seed=spec.dataset_cfg["seed"],
        n=spec.dataset_cfg["n"],
        d=spec.dataset_cfg["d"],
        noise_std=spec.dataset_cfg["noise_std"],
        w_seed=spec.dataset_cfg.get("w_seed"),
    )
    scheme = PartitionScheme(
        kind=spec.partition_cfg.get("scheme", "iid"),
        ratios=tuple(spec.partition_cfg["ratios"]) if "ratios" in spec.partition_cfg else None,
        alpha=spec.partition_cfg.get("alpha", 1.0),
    )
    shards = partition(dataset, len(spec.setups), scheme, seed=spec.seed)

    topo_box = {"topo": build_topology(spec)}
    id_to_name = {s.node_id: s.name for s in spec.setups.values()}
    net.id_names = {s.node_id.hex: s.name for s in spec.setups.values()}
    strategy = strategy_by_name(spec.aggregation)

    sim_nodes: dict = {}

    def make_sim_node(setup: NodeSetup) -> _SimNode:
        cfg = setup.config
        shard = shards[setup.shard_index]
        trainer_cfg = dict(cfg["trainer"])
        kind = trainer_cfg.pop("kind", "linear")
        trainer_cfg.setdefault("init_seed", spec.seed * 1000 + setup.shard_index)
        if kind != "none":
            trainer_cfg.setdefault("shuffle_seed", spec.seed * 1000 + setup.shard_index)
        trainer = make_trainer(kind, shard, **trainer_cfg)
        schedule = [(ev["at_tick"], ev["count"]) for ev in (cfg.get("data_arrival") or [])]
        if schedule or cfg.get("initial_visible") is not None:
            initial = cfg.get("initial_visible") or 0
            if hasattr(trainer, "set_visible_samples"):
                trainer.set_visible_samples(initial)
        policy = _build_policy(cfg, spec)
        if cfg["pool_min_inbound"] == "auto":
            policy.pool_min_inbound = _auto_pool_min(spec, topo_box["topo"], setup)
        else:
            policy.pool_min_inbound = max(int(cfg["pool_min_inbound"]), 1)
        me = setup.node_id

        def edge_mode(other: NodeId, _me=me):
            return topo_box["topo"].mode(_me, other)

        bootstrap = tuple(
            _address(other.name)
            for other in spec.setups.values()
            if other.name != setup.name and other.joins_at is None
        )
        node = Node(
            node_id=setup.node_id,
            namespace=namespace,
            policy=policy,
            trainer=trainer,
            strategy=strategy,
            transport_send=net.send,
            listen_address=_address(setup.name),
            bootstrap=bootstrap,
            edge_mode=edge_mode,
            name=setup.name,
        )
        node.rounds_start_at = float(warmup)
        return _SimNode(setup, node, trainer, schedule)

    for setup in spec.setups.values():
        if setup.joins_at is None:
            sn = make_sim_node(setup)
            sn.alive = True
            net.bind(node=sn.node, address=sn.node.listen_address, name=setup.name)
            sim_nodes[setup.name] = sn

    churn_by_tick: dict = {}
    for ev in spec.churn:
        churn_by_tick.setdefault(ev.at_tick, []).append(ev)

    log = MetricsLog(scenario=spec.name)
    budget = spec.sim.tick_budget or (warmup + spec.rounds * 12 + 80)
    frames_flushed = 0

    for tick in range(budget):
        net.deliver_due(tick)

        for ev in churn_by_tick.get(tick, ()):
            if ev.action == "kill":
                sn = sim_nodes[ev.node]
                sn.alive = False
                sn.ever_killed = True
                sn.node._inbox.clear()
                net.unbind(sn.node.listen_address)
                log.events.append({"tick": tick, "node": ev.node, "event": "killed"})
            elif ev.action == "revive":
                sn = sim_nodes[ev.node]
                sn.alive = True
                sn.node._announce_dirty = True
                net.bind(node=sn.node, address=sn.node.listen_address, name=ev.node)
                log.events.append({"tick": tick, "node": ev.node, "event": "revived"})
            elif ev.action == "join":
                setup = spec.setups[ev.node]
                sn = make_sim_node(setup)
                sn.alive = True
                sim_nodes[ev.node] = sn
                net.bind(node=sn.node, address=sn.node.listen_address, name=ev.node)
                others = [
                    x.setup.node_id for x in sim_nodes.values() if x.setup.name != ev.node
                ]
                topo_box["topo"] = topo_box["topo"].with_node(
                    setup.node_id, attach_peer_to=others
                )
                sn.node.bootstrap = tuple(
                    _address(x.setup.name)
                    for x in sim_nodes.values()
                    if x.setup.name != ev.node
                )
                log.events.append({"tick": tick, "node": ev.node, "event": "joined"})

        order = sorted(
            (sn for sn in sim_nodes.values() if sn.alive), key=lambda sn: sn.setup.node_id.value
        )
        for sn in order:
            sn.apply_data_arrivals(tick)
            sn.node.slice(float(tick))

        # metrics for this tick
        flats = [
            (sn.setup.name, sn.node.params.flat())
            for sn in order
            if sn.node.params is not None
        ]
        dists = {}
        if flats and len({f.size for _, f in flats}) == 1:
            mean = np.mean([f for _, f in flats], axis=0)
            for node_name, f in flats:
                dists[node_name] = float(np.linalg.norm(f - mean))
        for sn in order:
            node = sn.node
            log.node_rows.append(
                (
                    tick,
                    sn.setup.name,
                    node.state.round,
                    node.mode.value,
                    node.last_loss,
                    dists.get(sn.setup.name),
                    len(node.table),
                    node.params.digest() if node.params is not None else None,
                )
            )
            for event in node.drain_events():
                event["tick"] = tick
                log.events.append(event)
        log.transport_rows.append((tick, net.sent, net.delivered, net.dropped, net.in_flight))
        log.frames.extend(net.frame_log[frames_flushed:])
        frames_flushed = len(net.frame_log)

        log.final_tick = tick
        alive = [sn for sn in sim_nodes.values() if sn.alive]
        if alive and all(sn.node.rounds_completed >= spec.rounds for sn in alive):
            break

    for name, sn in sim_nodes.items():
        if sn.alive:
            log.finals[name] = sn.node.params
    return log
